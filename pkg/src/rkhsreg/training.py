"""Unsupervised bi-level training of the equivariant encoder.

The inner loop registers each pair with the current weights; the outer loop
takes one gradient step on the RKHS distance at the inner solution, with the
pose and lengthscale held fixed. Ground-truth poses are produced alongside
each pair but only ever reach the validation metrics.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyDataset
from .features import EncoderWeights, FeatureCloud, apply_pose_features, encoder_backward, encoder_forward
from .geometry import PointCloud, Pose, random_rotation, rotation_error_deg, translation_error
from .registration import RegistrationConfig, register
from .rkhs import KernelParams, pair_sums
from .shapes import MeshShape, sample_mesh_surface

log = logging.getLogger(__name__)

LOG_COLUMNS = ("stage_deg", "epoch", "mean_loss", "val_rot_err_deg", "val_trans_err", "ell_mean")


@dataclass
class CurriculumSchedule:
    stages: tuple[float, ...] = (1.0, 10.0, 20.0, 30.0, 45.0)
    epochs_per_stage: int = 20
    promotion_ratio: float = 0.2  # promote once val error < ratio * stage angle

    def __post_init__(self):
        self.stages = tuple(float(s) for s in self.stages)
        if not self.stages:
            raise ValueError("curriculum needs at least one stage")
        if any(b <= a for a, b in zip(self.stages, self.stages[1:])):
            raise ValueError(f"stages must be strictly increasing: {self.stages}")
        if self.stages[-1] > 180.0 or self.stages[0] < 0.0:
            raise ValueError("stage angles must lie in [0, 180]")
        if self.epochs_per_stage < 1:
            raise ValueError("epochs_per_stage must be >= 1")

    def threshold(self, stage_deg: float) -> float:
        return self.promotion_ratio * stage_deg

    @classmethod
    def direct(cls, angle: float = 45.0, epochs: int = 100) -> CurriculumSchedule:
        return cls((angle,), epochs)


def _default_inner() -> RegistrationConfig:
    return RegistrationConfig(max_iters=100)


@dataclass
class TrainConfig:
    outer_lr: float = 0.05
    batch_size: int = 8
    inner: RegistrationConfig = field(default_factory=_default_inner)
    seed: int = 0
    max_epochs: int | None = None  # total budget; the last stage absorbs what is left
    n_points: int = 256
    val_fraction: float = 0.2
    translation: float = 0.1
    clip_norm: float = 1.0
    channels: tuple[int, ...] = (8, 16, 16)
    k: int = 16

    def __post_init__(self):
        if not self.outer_lr >= 0:
            raise ValueError("outer_lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainResult:
    weights: EncoderWeights
    log: list[dict] = field(default_factory=list)
    train_indices: np.ndarray | None = None
    val_indices: np.ndarray | None = None


def _subsample(source, n: int | None, rng: np.random.Generator) -> PointCloud:
    if isinstance(source, MeshShape):
        return sample_mesh_surface(source, n or 1024, rng)
    if n is None or n >= len(source):
        return PointCloud(source.points.copy(), source.labels.copy())
    return source.subset(np.sort(rng.choice(len(source), n, replace=False)))


def random_translation(rng: np.random.Generator, radius: float) -> np.ndarray:
    """Uniform sample from the ball of the given radius."""
    if radius <= 0:
        return np.zeros(3)
    d = rng.normal(size=3)
    return d / np.linalg.norm(d) * radius * rng.random() ** (1.0 / 3.0)


def make_training_pair(
    cloud,
    max_angle_deg: float,
    rng: np.random.Generator,
    n_points: int | None = None,
    translation: float = 0.1,
) -> tuple[PointCloud, PointCloud, Pose]:
    """Two independent subsamples of one shape, the second moved by truth^-1.

    ``cloud`` is a PointCloud or a MeshShape. The rotation angle is uniform in
    [0, max_angle_deg] about a uniform axis; the translation is uniform in a
    ball of radius ``translation`` (0 for rotation only).
    """
    X = _subsample(cloud, n_points, rng)
    Z = _subsample(cloud, n_points, rng)
    angle = np.radians(rng.uniform(0.0, max_angle_deg))
    truth = Pose(random_rotation(rng, angle), random_translation(rng, translation))
    return X, Z.transformed(truth.inverse()), truth


def feature_loss_gradients(fcX: FeatureCloud, fcZ: FeatureCloud, pose: Pose, params: KernelParams):
    """d(f_X, f_hZ) and its gradients w.r.t. the channels of X and of Z (unposed)."""
    hz = apply_pose_features(pose, fcZ)
    sx = pair_sums(fcX, fcX, params, want_feat=True)
    sz = pair_sums(fcZ, fcZ, params, want_feat=True)
    cross = pair_sums(fcX, hz, params, want_feat=True)
    value = sx.value + sz.value - 2.0 * cross.value
    gX = sx.g_a + sx.g_b - 2.0 * cross.g_a
    # channels of hZ are R g, so the pull-back to g is R^T (row form: @ R)
    gZ = sz.g_a + sz.g_b - 2.0 * cross.g_b @ pose.rotation
    return value, gX, gZ


def encoder_loss_and_gradient(
    weights: EncoderWeights, X: PointCloud, Z: PointCloud, pose: Pose, params: KernelParams
) -> tuple[float, list[np.ndarray]]:
    """Distance at a fixed (pose, lengthscale) and its gradient w.r.t. every weight array."""
    fcX, cacheX = encoder_forward(X, weights, return_cache=True)
    fcZ, cacheZ = encoder_forward(Z, weights, return_cache=True)
    value, gX, gZ = feature_loss_gradients(fcX, fcZ, pose, params)
    grads = [a + b for a, b in zip(encoder_backward(weights, cacheX, gX), encoder_backward(weights, cacheZ, gZ))]
    return value, grads


def encoder_gradient(weights: EncoderWeights, X: PointCloud, Z: PointCloud, pose: Pose, params: KernelParams):
    return encoder_loss_and_gradient(weights, X, Z, pose, params)[1]


def clip_gradients(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm > 0:
        return [g * (max_norm / norm) for g in grads]
    return grads


def _apply_step(weights: EncoderWeights, grads: list[np.ndarray], lr: float) -> EncoderWeights:
    new = weights.copy()
    for a, g in zip(new.arrays(), grads):
        a -= lr * g
    return new


def _inner(weights: EncoderWeights, X: PointCloud, Z: PointCloud, config: TrainConfig):
    fcX, fcZ = encoder_forward(X, weights), encoder_forward(Z, weights)
    return register(fcX, fcZ, config.inner)


def _validate(weights: EncoderWeights, pairs, config: TrainConfig) -> tuple[float, float]:
    """Mean rotation and translation error over the held-out pairs (the only use of truth)."""
    rot, trans = [], []
    for X, Z, truth in pairs:
        res = _inner(weights, X, Z, config)
        rot.append(rotation_error_deg(res.pose, truth))
        trans.append(translation_error(res.pose, truth))
    return float(np.mean(rot)), float(np.mean(trans))


def evaluate(weights: EncoderWeights, pairs, inner: RegistrationConfig | None = None) -> tuple[float, float]:
    """Mean rotation / translation error of the encoder+registration pipeline on (X, Z, truth) pairs."""
    return _validate(weights, pairs, TrainConfig(inner=inner or _default_inner()))


def validation_distance(weights: EncoderWeights, pairs, inner: RegistrationConfig | None = None) -> float:
    """Mean RKHS distance at the inner-loop solution over (X, Z, _) pairs; uses no truth."""
    inner = inner or _default_inner()
    values = []
    for X, Z, _ in pairs:
        fcX, fcZ = encoder_forward(X, weights), encoder_forward(Z, weights)
        res = register(fcX, fcZ, inner)
        values.append(res.objective_trace[-1])
    return float(np.mean(values))


def split_dataset(n: int, val_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Index split; a single-shape dataset validates on its training shape."""
    if n == 0:
        raise EmptyDataset("training needs at least one shape")
    order = rng.permutation(n)
    n_val = max(1, int(round(val_fraction * n))) if n > 1 else 0
    val, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    return train_idx, (val if n_val else train_idx)


def train(
    dataset: list,
    schedule: CurriculumSchedule | None = None,
    config: TrainConfig | None = None,
    init: EncoderWeights | None = None,
    log_path=None,
) -> TrainResult:
    """Curriculum training; returns the final weights and one log row per epoch."""
    schedule = schedule or CurriculumSchedule()
    config = config or TrainConfig()
    rng = np.random.default_rng(config.seed)
    dataset = list(dataset)
    train_idx, val_idx = split_dataset(len(dataset), config.val_fraction, rng)
    train_set = [dataset[i] for i in train_idx]
    val_set = [dataset[i] for i in val_idx]
    weights = init.copy() if init is not None else EncoderWeights.random(config.channels, config.k, seed=config.seed)
    budget = config.max_epochs if config.max_epochs is not None else schedule.epochs_per_stage * len(schedule.stages)
    rows: list[dict] = []
    writer = None
    if log_path is not None:
        fh = open(log_path, "a", newline="")
        writer = csv.DictWriter(fh, LOG_COLUMNS)
        if Path(log_path).stat().st_size == 0:
            writer.writeheader()
    epoch = 0
    try:
        for s, stage in enumerate(schedule.stages):
            last = s == len(schedule.stages) - 1
            val_rng = np.random.default_rng([config.seed, s, 1])
            val_pairs = [
                make_training_pair(shape, stage, val_rng, config.n_points, config.translation) for shape in val_set
            ]
            stage_epochs = 0
            while epoch < budget and (last or stage_epochs < schedule.epochs_per_stage):
                losses, ells = [], []
                order = rng.permutation(len(train_set))
                for start in range(0, len(order), config.batch_size):
                    batch_grads = None
                    batch = order[start : start + config.batch_size]
                    for i in batch:
                        X, Z, _ = make_training_pair(train_set[i], stage, rng, config.n_points, config.translation)
                        res = _inner(weights, X, Z, config)
                        params = config.inner.kernel_params(res.final_ell)
                        loss, grads = encoder_loss_and_gradient(weights, X, Z, res.pose, params)
                        losses.append(loss)
                        ells.append(res.final_ell)
                        batch_grads = grads if batch_grads is None else [a + b for a, b in zip(batch_grads, grads)]
                    grads = clip_gradients([g / len(batch) for g in batch_grads], config.clip_norm)
                    weights = _apply_step(weights, grads, config.outer_lr)
                epoch += 1
                stage_epochs += 1
                val_rot, val_trans = _validate(weights, val_pairs, config)
                row = dict(
                    stage_deg=stage,
                    epoch=epoch,
                    mean_loss=float(np.mean(losses)),
                    val_rot_err_deg=val_rot,
                    val_trans_err=val_trans,
                    ell_mean=float(np.mean(ells)),
                )
                rows.append(row)
                if writer is not None:
                    writer.writerow(row)
                    fh.flush()
                log.info("stage %g epoch %d loss %.4g val %.3f deg", stage, epoch, row["mean_loss"], val_rot)
                if not last and val_rot < schedule.threshold(stage):
                    break
            if epoch >= budget:
                break
    finally:
        if writer is not None:
            fh.close()
    return TrainResult(weights, rows, train_idx, val_idx)
