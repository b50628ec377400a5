"""Perturbation injectors, an ICP baseline, and the benchmark / ablation harness."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .errors import RegistrationError, TooFewPoints
from .features import EncoderWeights, encoder_forward, handcrafted_features
from .geometry import PointCloud, Pose, pca_normals, random_rotation, rotation_error_deg, translation_error
from .registration import RegistrationConfig, RegistrationResult, register
from .shapes import MeshShape, sample_mesh_surface
from .training import CurriculumSchedule, TrainConfig, evaluate, make_training_pair, random_translation, train

FAILED_ROTATION_DEG = 180.0
PERTURBATION_ORDER = "noise -> outliers -> crop, applied to Z only"
ROW_FIELDS = (
    "method", "shape", "init_angle", "sigma", "outlier_ratio", "crop_ratio", "trial",
    "rot_err_deg", "trans_err", "iters", "wall_time", "failed",
)


@dataclass(frozen=True)
class PerturbationSpec:
    gaussian_sigma: float = 0.0
    outlier_ratio: float = 0.0
    crop_ratio: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.gaussian_sigma < 0:
            raise ValueError("gaussian_sigma must be >= 0")
        if not 0.0 <= self.outlier_ratio <= 1.0:
            raise ValueError("outlier_ratio must lie in [0, 1]")
        if not 0.0 <= self.crop_ratio <= 0.2:
            raise ValueError("crop_ratio must lie in [0, 0.2]")

    @property
    def label(self) -> str:
        parts = []
        if self.gaussian_sigma:
            parts.append(f"sigma={self.gaussian_sigma:g}")
        if self.outlier_ratio:
            parts.append(f"outliers={self.outlier_ratio:g}")
        if self.crop_ratio:
            parts.append(f"crop={self.crop_ratio:g}")
        return ",".join(parts) or "clean"


# ---------------------------------------------------------------------------
# perturbations


def add_gaussian_normal_noise(cloud: PointCloud, sigma: float, rng: np.random.Generator, k: int = 16) -> PointCloud:
    """Displace every point along its PCA normal by N(0, sigma) (sigma is the standard deviation)."""
    if sigma == 0:
        return PointCloud(cloud.points.copy(), cloud.labels.copy())
    normals = pca_normals(cloud, k)
    eps = rng.normal(0.0, sigma, size=len(cloud))
    return PointCloud(cloud.points + normals * eps[:, None], cloud.labels.copy())


def add_uniform_outliers(
    cloud: PointCloud, ratio: float, rng: np.random.Generator, range_: float = 0.5, k: int = 16
) -> PointCloud:
    """Push floor(ratio*N) random points along their normals by U(-range_, range_)."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    n = int(np.floor(ratio * len(cloud)))
    points = cloud.points.copy()
    if n:
        normals = pca_normals(cloud, k)
        idx = rng.choice(len(cloud), n, replace=False)
        points[idx] += normals[idx] * rng.uniform(-range_, range_, size=n)[:, None]
    return PointCloud(points, cloud.labels.copy())


def crop_along_axis(cloud: PointCloud, ratio: float, rng: np.random.Generator, axis=None) -> PointCloud:
    """Drop the floor(ratio*N) points furthest along a random (or given) unit axis."""
    if not 0.0 <= ratio < 0.5:
        raise ValueError("crop ratio must lie in [0, 0.5)")
    if axis is None:
        axis = rng.normal(size=3)
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    n = int(np.floor(ratio * len(cloud)))
    if n == 0:
        return PointCloud(cloud.points.copy(), cloud.labels.copy())
    # stable sort: ties keep their original order, then the top n are removed
    order = np.argsort(cloud.points @ axis, kind="stable")
    return cloud.subset(np.sort(order[: len(cloud) - n]))


def perturb(cloud: PointCloud, spec: PerturbationSpec, rng: np.random.Generator) -> PointCloud:
    out = add_gaussian_normal_noise(cloud, spec.gaussian_sigma, rng)
    out = add_uniform_outliers(out, spec.outlier_ratio, rng)
    return crop_along_axis(out, spec.crop_ratio, rng)


# ---------------------------------------------------------------------------
# ICP


def _kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[Pose, bool]:
    """Least-squares rigid map src -> dst; flags a rank-deficient cross-covariance."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, S, Vt = np.linalg.svd(H)
    degenerate = S[2] <= 1e-12 * max(S[0], 1e-300)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return Pose(R, cd - R @ cs), degenerate


def icp_baseline(
    X: PointCloud, Z: PointCloud, init: Pose | None = None, max_iters: int = 50, tol: float = 1e-6
) -> RegistrationResult:
    """Point-to-point ICP estimating h with h*Z ~ X; ``failed`` marks a degenerate configuration."""
    if len(X) < 3 or len(Z) < 3:
        raise TooFewPoints("ICP needs at least 3 points per cloud")
    tree = cKDTree(X.points)
    pose = init or Pose.identity()
    trace: list[float] = []
    prev = np.inf
    converged = failed = False
    it = 0
    for it in range(1, max_iters + 1):
        moved = pose.apply(Z.points)
        dist, idx = tree.query(moved)
        residual = float(dist.mean())
        trace.append(residual)
        if abs(prev - residual) < tol:
            converged = True
            it -= 1
            break
        prev = residual
        step, degenerate = _kabsch(moved, X.points[idx])
        if degenerate:
            failed = True
            it -= 1
            break
        pose = step @ pose
    else:
        trace.append(float(tree.query(pose.apply(Z.points))[0].mean()))
    return RegistrationResult(pose, 0.0, trace, it, converged, failed)


# ---------------------------------------------------------------------------
# methods: callables (X, Z, init_angle_deg) -> RegistrationResult

Method = Callable[[PointCloud, PointCloud, float], RegistrationResult]


def default_ell(init_angle_deg: float) -> float:
    """0.3 up to 45 degrees and 0.5 beyond."""
    return 0.3 if init_angle_deg <= 45.0 else 0.5


def equivalign_method(
    kernel: str = "rbf_tanh",
    ell_init: float | None = None,
    weights: EncoderWeights | None = None,
    config: RegistrationConfig | None = None,
) -> Method:
    """RKHS registration on handcrafted features, or on encoder features when ``weights`` is given."""
    base = config or RegistrationConfig()

    def run(X: PointCloud, Z: PointCloud, init_angle: float) -> RegistrationResult:
        ell = ell_init if ell_init is not None else default_ell(init_angle)
        cfg = replace(base, ell_init=ell, kernel=kernel)
        if weights is None:
            fx, fz = handcrafted_features(X), handcrafted_features(Z)
        else:
            fx, fz = encoder_forward(X, weights), encoder_forward(Z, weights)
        return register(fx, fz, cfg)

    return run


def icp_method(max_iters: int = 50, tol: float = 1e-6) -> Method:
    def run(X, Z, init_angle):
        return icp_baseline(X, Z, None, max_iters, tol)

    return run


# ---------------------------------------------------------------------------
# report


@dataclass
class BenchReport:
    rows: list[dict] = field(default_factory=list)

    def cells(self) -> dict[tuple, list[dict]]:
        out: dict[tuple, list[dict]] = {}
        for r in self.rows:
            key = (r["method"], r["init_angle"], r["sigma"], r["outlier_ratio"], r["crop_ratio"])
            out.setdefault(key, []).append(r)
        return out

    def aggregates(self) -> dict[tuple, dict]:
        agg = {}
        for key, rows in self.cells().items():
            rot = np.array([r["rot_err_deg"] for r in rows])
            trans = np.array([r["trans_err"] for r in rows])
            agg[key] = dict(
                n=len(rows),
                rot_mean=float(rot.mean()),
                rot_std=float(rot.std()),
                rot_median=float(np.median(rot)),
                trans_mean=float(np.nanmean(trans)) if np.isfinite(trans).any() else float("nan"),
                trans_std=float(np.nanstd(trans)) if np.isfinite(trans).any() else float("nan"),
                failures=int(sum(r["failed"] for r in rows)),
            )
        return agg

    def errors(self, method: str, **cell) -> np.ndarray:
        rows = [r for r in self.rows if r["method"] == method and all(r[k] == v for k, v in cell.items())]
        return np.array([r["rot_err_deg"] for r in rows])

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write(f"# perturbation order: {PERTURBATION_ORDER}\n")
        writer = csv.DictWriter(buf, ROW_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path) -> BenchReport:
        with open(path, newline="") as fh:
            lines = [line for line in fh if not line.startswith("#")]
        rows = []
        for r in csv.DictReader(lines):
            rows.append(
                dict(
                    method=r["method"], shape=int(r["shape"]), init_angle=float(r["init_angle"]),
                    sigma=float(r["sigma"]), outlier_ratio=float(r["outlier_ratio"]),
                    crop_ratio=float(r["crop_ratio"]), trial=int(r["trial"]),
                    rot_err_deg=float(r["rot_err_deg"]), trans_err=float(r["trans_err"]),
                    iters=int(r["iters"]), wall_time=float(r["wall_time"]), failed=r["failed"] == "True",
                )
            )
        return cls(rows)

    def summary(self) -> str:
        """Text table: one line per method and cell, rotation error mean/std/median."""
        lines = [
            f"perturbation order: {PERTURBATION_ORDER}",
            f"{'method':<22}{'angle':>7}  {'perturbation':<28}{'rot mean':>10}{'rot std':>10}{'rot med':>10}{'trans':>9}{'n':>5}{'fail':>6}",
        ]
        for (method, angle, sigma, outl, crop), a in sorted(self.aggregates().items(), key=lambda kv: (kv[0][1:], kv[0][0])):
            label = PerturbationSpec(sigma, outl, crop).label
            lines.append(
                f"{method:<22}{angle:>7g}  {label:<28}{a['rot_mean']:>10.3f}{a['rot_std']:>10.3f}"
                f"{a['rot_median']:>10.3f}{a['trans_mean']:>9.4f}{a['n']:>5d}{a['failures']:>6d}"
            )
        return "\n".join(lines)


def _cell_seed(seed: int, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, *keys])


def make_trial(shape, n_points: int, init_angle: float, spec: PerturbationSpec, rng: np.random.Generator, translation: float = 0.1):
    """(X, perturbed Z, truth) with Z = truth^-1 X before perturbation.

    The truth rotates by exactly ``init_angle`` degrees about a uniform axis.
    """
    if isinstance(shape, MeshShape):
        X = sample_mesh_surface(shape, n_points, rng)
    elif n_points < len(shape):
        X = shape.subset(np.sort(rng.choice(len(shape), n_points, replace=False)))
    else:
        X = shape
    truth = Pose(random_rotation(rng, np.radians(init_angle)), random_translation(rng, translation))
    Z = perturb(X.transformed(truth.inverse()), spec, rng)
    return X, Z, truth


def run_benchmark(
    shapes: list,
    methods: dict[str, Method],
    init_angles=(45.0,),
    specs=(PerturbationSpec(),),
    trials: int = 10,
    out=None,
    n_points: int = 1024,
    seed: int = 0,
    translation: float = 0.1,
    progress: Callable[[dict], None] | None = None,
    cycle_shapes: bool = False,
) -> BenchReport:
    """Full factorial sweep; every method in a cell sees byte-identical inputs.

    With ``cycle_shapes`` the shapes are not a sweep axis: trial t of each
    cell uses shape t mod len(shapes), giving ``trials`` rows per method and
    cell. A method that raises is recorded with the 180 degree failure
    convention.
    """
    if not shapes:
        raise ValueError("benchmark needs at least one shape")
    if not methods:
        raise ValueError("benchmark needs at least one method")
    report = BenchReport()
    if cycle_shapes:
        jobs = [(t % len(shapes), t) for t in range(trials)]
    else:
        jobs = [(s, t) for s in range(len(shapes)) for t in range(trials)]
    for s, t in jobs:
        shape = shapes[s]
        for a, angle in enumerate(init_angles):
            for p, spec in enumerate(specs):
                rng = np.random.default_rng(_cell_seed(seed + spec.seed, s, a, p, t))
                X, Z, truth = make_trial(shape, n_points, angle, spec, rng, translation)
                for name, method in methods.items():
                    t0 = time.perf_counter()
                    try:
                        res = method(X, Z, angle)
                        failed = bool(res.failed)
                    except (RegistrationError, np.linalg.LinAlgError, FloatingPointError):
                        res, failed = None, True
                    wall = time.perf_counter() - t0
                    row = dict(
                        method=name, shape=s, init_angle=float(angle), sigma=float(spec.gaussian_sigma),
                        outlier_ratio=float(spec.outlier_ratio), crop_ratio=float(spec.crop_ratio), trial=t,
                        rot_err_deg=FAILED_ROTATION_DEG if res is None else rotation_error_deg(res.pose, truth),
                        trans_err=float("nan") if res is None else translation_error(res.pose, truth),
                        iters=0 if res is None else res.iterations, wall_time=wall, failed=failed,
                    )
                    report.rows.append(row)
                    if progress is not None:
                        progress(row)
    if out is not None:
        report.to_csv(out)
    return report


# ---------------------------------------------------------------------------
# presets

PAPER_SPEC = PerturbationSpec(0.01, 0.2, 0.0)


@dataclass
class BenchPreset:
    name: str
    methods: dict[str, Method]
    init_angles: tuple[float, ...]
    specs: tuple[PerturbationSpec, ...]
    description: str = ""


def _paper_specs() -> tuple[PerturbationSpec, ...]:
    return (
        PerturbationSpec(),
        PerturbationSpec(0.01, 0.0, 0.0),
        PerturbationSpec(0.0, 0.2, 0.0),
        PerturbationSpec(0.0, 0.0, 0.2),
        PAPER_SPEC,
    )


def ablation_presets(weights: EncoderWeights | None = None) -> dict[str, BenchPreset]:
    """Canned experiments: main table at 45/90 degrees, kernel choice, initial lengthscale."""
    main = {"equivalign": equivalign_method(weights=weights), "icp": icp_method()}
    return {
        "paper45": BenchPreset("paper45", main, (45.0,), _paper_specs(), "RKHS vs ICP at 45 degrees"),
        "paper90": BenchPreset("paper90", main, (90.0,), _paper_specs(), "RKHS vs ICP at 90 degrees"),
        "ablation-kernel": BenchPreset(
            "ablation-kernel",
            {
                "rbf_tanh": equivalign_method("rbf_tanh", weights=weights),
                "rbf": equivalign_method("rbf", weights=weights),
            },
            (45.0,),
            (PAPER_SPEC,),
            "RBF x tanh against RBF only, same inputs",
        ),
        "ablation-ell": BenchPreset(
            "ablation-ell",
            {f"ell={e:g}": equivalign_method(ell_init=e, weights=weights) for e in (0.1, 0.3, 0.5, 1.0)},
            (45.0, 90.0),
            (PAPER_SPEC,),
            "initial lengthscale sweep",
        ),
    }


def best_ell_per_angle(report: BenchReport) -> dict[float, float]:
    """Initial lengthscale with the lowest mean rotation error at each angle of an ablation-ell report."""
    best: dict[float, tuple[float, float]] = {}
    for (method, angle, *_), a in report.aggregates().items():
        ell = float(method.split("=", 1)[1])
        if angle not in best or a["rot_mean"] < best[angle][0]:
            best[angle] = (a["rot_mean"], ell)
    return {angle: ell for angle, (_, ell) in sorted(best.items())}


# ---------------------------------------------------------------------------
# curriculum ablation (a training experiment rather than a registration sweep)


@dataclass
class CurriculumAblation:
    rows: list[dict] = field(default_factory=list)  # mode, seed, val_rot_err_deg, val_trans_err

    def mean(self, mode: str) -> float:
        return float(np.mean([r["val_rot_err_deg"] for r in self.rows if r["mode"] == mode]))

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, ("mode", "seed", "val_rot_err_deg", "val_trans_err"), lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows)
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(buf.getvalue())
        return buf.getvalue()


def run_curriculum_ablation(
    dataset: list,
    seeds=(0, 1, 2, 3, 4),
    stages=(1.0, 10.0, 20.0, 30.0, 45.0),
    epochs_per_stage: int = 3,
    final_angle: float = 45.0,
    pairs_per_shape: int = 3,
    config: TrainConfig | None = None,
    progress: Callable[[dict], None] | None = None,
) -> CurriculumAblation:
    """Curriculum against direct training at ``final_angle`` with the same epoch budget.

    Both runs of a seed share the initial weights and the train/validation
    split, and are scored on the same held-out pairs at ``final_angle``.
    """
    config = config or TrainConfig()
    budget = epochs_per_stage * len(stages)
    out = CurriculumAblation()
    for seed in seeds:
        cfg = replace(config, seed=seed, max_epochs=budget)
        schedules = {
            "curriculum": CurriculumSchedule(stages, epochs_per_stage),
            "direct": CurriculumSchedule.direct(final_angle, budget),
        }
        pairs = None
        for mode, schedule in schedules.items():
            result = train(dataset, schedule, cfg)
            if pairs is None:
                rng = np.random.default_rng([seed, 2024])
                pairs = [
                    make_training_pair(dataset[i], final_angle, rng, cfg.n_points, cfg.translation)
                    for i in result.val_indices
                    for _ in range(pairs_per_shape)
                ]
            rot, trans = evaluate(result.weights, pairs, cfg.inner)
            row = dict(mode=mode, seed=seed, val_rot_err_deg=rot, val_trans_err=trans)
            out.rows.append(row)
            if progress is not None:
                progress(row)
    return out
