"""Point clouds as RKHS functions: kernel, inner products, distance.

The kernel on the direct-sum feature space is

    k(x + f, z + g) = exp(-|x - z|^2 / (2 l^2)) * tanh(1 + sum_c <f_c, g_c>)

or the RBF factor alone (``kernel="rbf"``). Pairs farther apart than
``prune_factor * l`` contribute nothing.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

# numba sizes its thread pool at import time, so a requested worker count
# above the core count must be passed on before the import
if os.environ.get("RKHS_REG_THREADS") and "NUMBA_NUM_THREADS" not in os.environ:
    os.environ["NUMBA_NUM_THREADS"] = str(max(1, int(os.environ["RKHS_REG_THREADS"])))
import numba  # noqa: E402

# try OpenMP before TBB; probing an old TBB only produces a warning
numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]
from numba import njit, prange
from scipy.spatial import cKDTree

from .errors import ChannelMismatch
from .features import FeatureCloud, apply_pose_features
from .geometry import Pose

KERNELS = ("rbf_tanh", "rbf")
BLOCK = 32


@dataclass
class KernelParams:
    lengthscale: float = 0.3
    prune_factor: float = 3.0
    kernel: str = "rbf_tanh"
    ell_min: float = 0.01
    ell_max: float = 2.0

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}; expected one of {KERNELS}")
        if not self.lengthscale > 0:
            raise ValueError("lengthscale must be positive")
        self.lengthscale = self.clamp(self.lengthscale)

    def clamp(self, ell: float) -> float:
        return float(min(max(ell, self.ell_min), self.ell_max))

    @property
    def radius(self) -> float:
        return self.prune_factor * self.lengthscale

    def with_lengthscale(self, ell: float) -> KernelParams:
        return KernelParams(ell, self.prune_factor, self.kernel, self.ell_min, self.ell_max)


def worker_count() -> int:
    env = os.environ.get("RKHS_REG_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def rbf(x, z, ell: float) -> float:
    d = np.asarray(x, dtype=float) - np.asarray(z, dtype=float)
    return float(np.exp(-np.dot(d, d) / (2.0 * ell * ell)))


def kernel_eval(xi, zj, params: KernelParams) -> float:
    """Kernel between two single points given as ``(coordinate, channels)``."""
    x, f = xi
    z, g = zj
    f = np.asarray(f, dtype=float).reshape(-1, 3)
    g = np.asarray(g, dtype=float).reshape(-1, 3)
    if f.shape != g.shape:
        raise ChannelMismatch(f"{f.shape[0]} vs {g.shape[0]} channels")
    value = rbf(x, z, params.lengthscale)
    if params.kernel == "rbf_tanh":
        value *= np.tanh(1.0 + np.sum(f * g))
    return float(value)


@dataclass
class PairSums:
    """Pruned kernel sum between two feature clouds and its derivatives.

    ``d_rho``/``d_omega`` are derivatives w.r.t. a left perturbation
    exp(xi) applied to the second cloud; ``g_a``/``g_b`` are derivatives
    w.r.t. each cloud's channels (as given, i.e. already posed).
    """

    value: float
    d_rho: np.ndarray = field(default_factory=lambda: np.zeros(3))
    d_omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    d_ell: float = 0.0
    g_a: np.ndarray | None = None
    g_b: np.ndarray | None = None
    pairs: int = 0


@njit(cache=True, inline="always")
def _tanh(u):
    # one exp instead of libm tanh; exact to rounding
    e = np.exp(-2.0 * abs(u))
    t = (1.0 - e) / (1.0 + e)
    return t if u >= 0.0 else -t


@njit(parallel=True, cache=True, fastmath={"reassoc", "contract"})
def _pair_kernel(xa, fa, la, yb, fb, lb, block_rows, row_ptr, block_cols, col_ptr, ell, r2, use_tanh, want_pose, want_feat, scal, g_a, g_b):
    """Fused pruned pair loop; one partial result per spatial block of rows.

    scal[blk] = value, d_ell, d_rho(3), d_omega_coord(3), d_omega_chan(3), pairs
    """
    inv2 = 0.5 / (ell * ell)
    n_f = fa.shape[1]
    chan_grad = use_tanh and (want_pose or want_feat)
    for blk in prange(row_ptr.shape[0] - 1):
        value = 0.0
        dl = 0.0
        r0 = r1 = r2_ = 0.0
        o0 = o1 = o2 = 0.0
        c0 = c1 = c2 = 0.0
        npairs = 0
        fi = np.empty(n_f)
        # G_i = sum_j w_ij (1 - T_ij^2) g_j; the channel part of the rotation
        # gradient is sum_i G_i x f_i, so no cross products inside the pair loop
        Gi = np.empty(n_f)
        for ii in range(row_ptr[blk], row_ptr[blk + 1]):
            i = block_rows[ii]
            x0 = xa[i, 0]
            x1 = xa[i, 1]
            x2 = xa[i, 2]
            li = la[i]
            for m in range(n_f):
                fi[m] = fa[i, m]
                Gi[m] = 0.0
            for jj in range(col_ptr[blk], col_ptr[blk + 1]):
                j = block_cols[jj]
                y0 = yb[j, 0]
                y1 = yb[j, 1]
                y2 = yb[j, 2]
                d0 = x0 - y0
                d1 = x1 - y1
                d2 = x2 - y2
                s = d0 * d0 + d1 * d1 + d2 * d2
                if s > r2:
                    continue
                w = li * lb[j] * np.exp(-s * inv2)
                T = 1.0
                if use_tanh:
                    dot = 0.0
                    for m in range(n_f):
                        dot += fi[m] * fb[j, m]
                    T = _tanh(1.0 + dot)
                a = w * T
                value += a
                npairs += 1
                if want_pose or want_feat:
                    dl += a * s
                if want_pose:
                    r0 += a * d0
                    r1 += a * d1
                    r2_ += a * d2
                    # y cross x
                    o0 += a * (y1 * x2 - y2 * x1)
                    o1 += a * (y2 * x0 - y0 * x2)
                    o2 += a * (y0 * x1 - y1 * x0)
                if chan_grad:
                    bw = w * (1.0 - T * T)
                    for m in range(n_f):
                        Gi[m] += bw * fb[j, m]
                    if want_feat:
                        for m in range(n_f):
                            g_b[blk, j, m] += bw * fi[m]
            if chan_grad:
                if want_pose:
                    for m in range(0, n_f, 3):
                        c0 += Gi[m + 1] * fi[m + 2] - Gi[m + 2] * fi[m + 1]
                        c1 += Gi[m + 2] * fi[m] - Gi[m] * fi[m + 2]
                        c2 += Gi[m] * fi[m + 1] - Gi[m + 1] * fi[m]
                if want_feat:
                    for m in range(n_f):
                        g_a[i, m] += Gi[m]
        scal[blk, 0] = value
        scal[blk, 1] = dl
        scal[blk, 2] = r0
        scal[blk, 3] = r1
        scal[blk, 4] = r2_
        scal[blk, 5] = o0
        scal[blk, 6] = o1
        scal[blk, 7] = o2
        scal[blk, 8] = c0
        scal[blk, 9] = c1
        scal[blk, 10] = c2
        scal[blk, 11] = npairs


def _blocks(a_points, b_points, radius, rows_per_block):
    """Spatial row blocks of ``a`` (kd-tree leaf order) with candidate columns of ``b``."""
    order = cKDTree(a_points).indices
    tree_b = cKDTree(b_points)
    row_ptr = [0]
    col_chunks = []
    col_ptr = [0]
    for s in range(0, len(order), rows_per_block):
        rows = order[s : s + rows_per_block]
        pts = a_points[rows]
        center = 0.5 * (pts.min(0) + pts.max(0))
        reach = np.sqrt(np.max(np.sum((pts - center) ** 2, axis=1))) + radius
        cols = np.sort(np.asarray(tree_b.query_ball_point(center, reach * (1 + 1e-9) + 1e-12), dtype=np.int64))
        row_ptr.append(s + len(rows))
        col_chunks.append(cols)
        col_ptr.append(col_ptr[-1] + len(cols))
    return (
        np.ascontiguousarray(order, dtype=np.int64),
        np.asarray(row_ptr, dtype=np.int64),
        np.concatenate(col_chunks) if col_chunks else np.zeros(0, np.int64),
        np.asarray(col_ptr, dtype=np.int64),
    )


def pair_sums(
    a: FeatureCloud,
    b: FeatureCloud,
    params: KernelParams,
    want_pose: bool = False,
    want_feat: bool = False,
    workers: int | None = None,
) -> PairSums:
    """Sum over pruned pairs of l_a l_b k(a_i, b_j), optionally with derivatives."""
    use_tanh = params.kernel == "rbf_tanh"
    if use_tanh and a.n_channels != b.n_channels:
        raise ChannelMismatch(f"{a.n_channels} vs {b.n_channels} channels")
    res = PairSums(0.0)
    if want_feat:
        res.g_a = np.zeros_like(a.channels)
        res.g_b = np.zeros_like(b.channels)
    if len(a) == 0 or len(b) == 0:
        return res
    ell = params.lengthscale
    radius = params.radius
    rows, row_ptr, cols, col_ptr = _blocks(a.points, b.points, radius, BLOCK)
    n_blocks = len(row_ptr) - 1
    C = a.n_channels if use_tanh else 0
    fa = np.ascontiguousarray(a.channels.reshape(len(a), -1)) if use_tanh else np.zeros((len(a), 0))
    fb = np.ascontiguousarray(b.channels.reshape(len(b), -1)) if use_tanh else np.zeros((len(b), 0))
    scal = np.zeros((n_blocks, 12))
    g_a = np.zeros((len(a), 3 * C))
    g_b = np.zeros((n_blocks if want_feat else 1, len(b) if want_feat else 1, 3 * C))
    _set_threads(workers)
    _pair_kernel(
        np.ascontiguousarray(a.points), fa, np.ascontiguousarray(a.labels),
        np.ascontiguousarray(b.points), fb, np.ascontiguousarray(b.labels),
        rows, row_ptr, cols, col_ptr, float(ell), float(radius * radius),
        use_tanh, want_pose, want_feat, scal, g_a, g_b,
    )
    tot = scal.sum(axis=0)
    res.value = float(tot[0])
    res.pairs = int(tot[11])
    res.d_ell = float(tot[1]) / ell**3
    if want_pose:
        inv = 1.0 / (ell * ell)
        res.d_rho = tot[2:5] * inv
        res.d_omega = tot[5:8] * inv + tot[8:11]
    if want_feat and use_tanh:
        res.g_a = g_a.reshape(a.channels.shape)
        res.g_b = g_b.sum(axis=0).reshape(b.channels.shape)
    return res


def _set_threads(workers):
    n = workers or worker_count()
    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def cross_inner_product(fcX: FeatureCloud, fcZ: FeatureCloud, pose: Pose, params: KernelParams) -> float:
    return pair_sums(fcX, apply_pose_features(pose, fcZ), params).value


def self_inner_product(fc: FeatureCloud, params: KernelParams) -> float:
    return pair_sums(fc, fc, params).value


def rkhs_distance(fcX: FeatureCloud, fcZ: FeatureCloud, pose: Pose, params: KernelParams) -> float:
    """Squared RKHS distance between f_X and f_hZ, clamped at 0."""
    d = self_inner_product(fcX, params) + self_inner_product(fcZ, params) - 2.0 * cross_inner_product(fcX, fcZ, pose, params)
    return max(d, 0.0)


class SelfTerm:
    """<f, f> as a function of the lengthscale for one fixed feature cloud.

    The self inner product is pose-invariant, so the pair distances and tanh
    factors are cached once; each evaluation is a single vectorised exp over
    the pairs inside the current pruning radius. The cache covers radii up to
    ``prune_factor * cover`` and is rebuilt when the lengthscale outgrows it.
    """

    def __init__(self, fc: FeatureCloud, params: KernelParams, cover: float | None = None):
        self.fc = fc
        self.prune_factor = params.prune_factor
        self.kernel = params.kernel
        self.ell_max = params.ell_max
        self._build(cover or min(1.5 * params.lengthscale, params.ell_max))

    def _build(self, cover: float) -> None:
        fc = self.fc
        r = self.prune_factor * cover
        pairs = cKDTree(fc.points).query_pairs(r * (1 + 1e-9), output_type="ndarray")
        i, j = pairs[:, 0], pairs[:, 1]
        d = fc.points[i] - fc.points[j]
        s = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
        a = 2.0 * fc.labels[i] * fc.labels[j]
        diag = fc.labels * fc.labels
        if self.kernel == "rbf_tanh":
            flat = fc.channels.reshape(len(fc), -1)
            a = a * np.tanh(1.0 + np.einsum("pm,pm->p", flat[i], flat[j]))
            diag = diag * np.tanh(1.0 + np.einsum("pm,pm->p", flat, flat))
        order = np.argsort(s, kind="stable")
        self._s = np.concatenate([np.zeros(len(fc)), s[order]])
        self._a = np.concatenate([diag, a[order]])
        self.cover = cover

    def __call__(self, ell: float) -> tuple[float, float]:
        """Value and derivative w.r.t. the lengthscale."""
        if ell > self.cover * (1 + 1e-12):
            self._build(max(ell, min(1.5 * ell, self.ell_max)))
        r2 = (self.prune_factor * ell) ** 2
        n = np.searchsorted(self._s, r2, side="right")
        s = self._s[:n]
        terms = self._a[:n] * np.exp(s * (-0.5 / (ell * ell)))
        return float(terms.sum()), float(np.dot(terms, s)) / ell**3
