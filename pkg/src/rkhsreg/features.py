"""Direct-sum equivariant point features: coordinates plus steerable 3-vector channels.

Channels rotate with R and ignore translation. They come either from local
PCA frames (``handcrafted_features``) or from a small vector-channel graph
convolution encoder (``encoder_forward``) whose reverse pass is written out
by hand in ``encoder_backward``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeMismatch
from .geometry import Pose, PointCloud, knn_indices, local_frame_channels

EPS = 1e-8
WEIGHTS_MAGIC = b"RKHSW"
WEIGHTS_VERSION = 1


@dataclass(eq=False)
class FeatureCloud:
    points: np.ndarray  # (N, 3)
    channels: np.ndarray  # (N, C, 3)
    labels: np.ndarray  # (N,)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.channels = np.asarray(self.channels, dtype=float)
        if self.channels.ndim != 3 or self.channels.shape[2] != 3:
            raise ShapeMismatch(f"channels must be (N, C, 3), got {self.channels.shape}")
        if self.channels.shape[0] != len(self.points):
            raise ShapeMismatch("channel rows do not match point count")
        self.labels = np.asarray(self.labels, dtype=float).reshape(-1)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def n_channels(self) -> int:
        return self.channels.shape[1]


def apply_pose_features(p: Pose, fc: FeatureCloud) -> FeatureCloud:
    return FeatureCloud(p.apply(fc.points), fc.channels @ p.rotation.T, fc.labels.copy())


HANDCRAFTED_SCALE = 0.2


def handcrafted_features(cloud: PointCloud, k: int = 16, C: int = 2, scale: float = HANDCRAFTED_SCALE) -> FeatureCloud:
    """Oriented PCA normal and tangent channels, zero-padded to ``C`` channels.

    Each channel has length ``scale``. Any scale below 1/sqrt(C) keeps the
    stacked feature norm under 1, so every kernel term is positive. The small
    default matters more than that bound: tanh(1 + s) is concave in s, and
    with long channels poses that make neighbouring channels orthogonal can
    beat the true pose (the distance goes negative on thin parts).
    """
    if C < 1:
        raise ValueError("C must be >= 1")
    normal, tangent, degenerate = local_frame_channels(cloud, k)
    channels = np.zeros((len(cloud), C, 3))
    channels[:, 0] = scale * normal
    if C > 1:
        channels[:, 1] = scale * tangent
    channels[degenerate] = 0.0
    return FeatureCloud(cloud.points.copy(), channels, cloud.labels.copy())


# ---------------------------------------------------------------------------
# encoder


@dataclass(eq=False)
class LayerWeights:
    W: np.ndarray  # (C_in, C_out) self weights
    Wk: np.ndarray  # (C_in, C_out) neighbour-difference weights
    D: np.ndarray  # (C_out, C_out) rectifier direction weights

    @property
    def shape(self):
        return self.W.shape

    def arrays(self):
        return (self.W, self.Wk, self.D)


@dataclass(eq=False)
class EncoderWeights:
    layers: list[LayerWeights]
    k: int = 16

    def __post_init__(self):
        c_in = 1
        for i, layer in enumerate(self.layers):
            ci, co = layer.W.shape
            if ci != c_in or layer.Wk.shape != (ci, co) or layer.D.shape != (co, co):
                raise ShapeMismatch(f"layer {i}: inconsistent shapes W{layer.W.shape} Wk{layer.Wk.shape} D{layer.D.shape}")
            c_in = co

    @property
    def out_channels(self) -> int:
        return self.layers[-1].W.shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer.arrays()]

    def copy(self) -> EncoderWeights:
        return EncoderWeights([LayerWeights(*(a.copy() for a in l.arrays())) for l in self.layers], self.k)

    @classmethod
    def random(cls, channels=(8, 16, 16), k: int = 16, seed: int = 0, scale: float = 1.0) -> EncoderWeights:
        rng = np.random.default_rng(seed)
        layers = []
        c_in = 1
        for c_out in channels:
            layers.append(
                LayerWeights(
                    rng.normal(0.0, scale / np.sqrt(c_in), (c_in, c_out)),
                    rng.normal(0.0, scale / np.sqrt(c_in * k), (c_in, c_out)),
                    rng.normal(0.0, 1.0 / np.sqrt(c_out), (c_out, c_out)),
                )
            )
            c_in = c_out
        return cls(layers, k)

    @classmethod
    def zeros(cls, channels=(8, 16, 16), k: int = 16) -> EncoderWeights:
        layers, c_in = [], 1
        for c_out in channels:
            layers.append(LayerWeights(np.zeros((c_in, c_out)), np.zeros((c_in, c_out)), np.zeros((c_out, c_out))))
            c_in = c_out
        return cls(layers, k)


def vn_nonlinearity(channels: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Vector rectifier: remove the component along q_c when <f_c, q_c> < 0."""
    return _rectify(channels, directions)[0]


def _rectify(p: np.ndarray, D: np.ndarray):
    q = np.einsum("ndx,dc->ncx", p, D)
    inner = np.sum(p * q, axis=2)
    qn = np.maximum(np.linalg.norm(q, axis=2), EPS)
    u = q / qn[..., None]
    pu = np.sum(p * u, axis=2)
    neg = inner < 0.0
    out = np.where(neg[..., None], p - pu[..., None] * u, p)
    return out, (q, qn, u, pu, neg)


def _rectify_backward(g, p, D, cache):
    q, qn, u, pu, neg = cache
    gu_dot = np.sum(g * u, axis=2)
    g_p = np.where(neg[..., None], g - gu_dot[..., None] * u, g)
    g_u = -(gu_dot[..., None] * p + pu[..., None] * g)
    g_u = np.where(neg[..., None], g_u, 0.0)
    # u = q / max(|q|, eps); below eps the map is linear
    active = np.linalg.norm(q, axis=2) > EPS
    radial = np.sum(g_u * u, axis=2)
    g_q = np.where(active[..., None], g_u - radial[..., None] * u, g_u) / qn[..., None]
    g_p = g_p + np.einsum("ncx,dc->ndx", g_q, D)
    g_D = np.einsum("ndx,ncx->dc", p, g_q)
    return g_p, g_D


def _neighbour_diff_sum(f: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    return f[neighbors].sum(axis=1) - neighbors.shape[1] * f


def graph_conv_layer(fc: FeatureCloud, neighbors: np.ndarray, layer: LayerWeights) -> FeatureCloud:
    if fc.n_channels != layer.W.shape[0]:
        raise ShapeMismatch(f"layer expects {layer.W.shape[0]} channels, got {fc.n_channels}")
    if neighbors.shape[0] != len(fc):
        raise ShapeMismatch("neighbour table does not match cloud")
    out, _ = _layer_forward(fc.channels, neighbors, layer)
    return FeatureCloud(fc.points, out, fc.labels)


def _layer_forward(f, neighbors, layer):
    A = _neighbour_diff_sum(f, neighbors)
    pre = np.einsum("nix,io->nox", f, layer.W) + np.einsum("nix,io->nox", A, layer.Wk)
    out, rcache = _rectify(pre, layer.D)
    return out, (f, A, pre, rcache)


def _layer_backward(g_out, neighbors, layer, cache):
    f, A, pre, rcache = cache
    g_pre, g_D = _rectify_backward(g_out, pre, layer.D, rcache)
    g_W = np.einsum("nix,nox->io", f, g_pre)
    g_Wk = np.einsum("nix,nox->io", A, g_pre)
    g_f = np.einsum("nox,io->nix", g_pre, layer.W)
    g_A = np.einsum("nox,io->nix", g_pre, layer.Wk)
    # adjoint of A = sum_k f[nbr] - k f
    g_f = g_f - neighbors.shape[1] * g_A
    np.add.at(g_f, neighbors.reshape(-1), np.repeat(g_A, neighbors.shape[1], axis=0))
    return g_f, (g_W, g_Wk, g_D)


# Stacked output norm bound. Keeping 1 + f.g near 1 keeps tanh close to
# linear, where the product kernel behaves like a positive-definite one.
OUTPUT_NORM = 0.5


def output_gain(channels: int) -> float:
    return OUTPUT_NORM / np.sqrt(channels)


def _squash(f):
    n = np.linalg.norm(f, axis=2, keepdims=True)
    return f / (1.0 + n), n


def _squash_backward(g, f, n):
    nn = np.maximum(n, EPS)
    radial = np.sum(f * g, axis=2, keepdims=True)
    return g / (1.0 + n) - f * radial / (nn * (1.0 + n) ** 2)


def seed_channels(cloud: PointCloud, k: int) -> np.ndarray:
    normal, _, degenerate = local_frame_channels(cloud, k)
    normal = normal.copy()
    normal[degenerate] = 0.0
    return normal[:, None, :]


def encoder_forward(cloud: PointCloud, weights: EncoderWeights, return_cache: bool = False):
    """Seed normals -> graph-conv layers -> f/(1+|f|) per channel, times ``output_gain``."""
    neighbors = knn_indices(cloud.points, weights.k)
    f = seed_channels(cloud, weights.k)
    caches = []
    for layer in weights.layers:
        f, cache = _layer_forward(f, neighbors, layer)
        caches.append(cache)
    out, norm = _squash(f)
    fc = FeatureCloud(cloud.points.copy(), output_gain(f.shape[1]) * out, cloud.labels.copy())
    if return_cache:
        return fc, (neighbors, caches, f, norm)
    return fc


def encoder_backward(weights: EncoderWeights, cache, g_channels: np.ndarray) -> list[np.ndarray]:
    """Reverse pass: gradient w.r.t. the output channels -> gradients of every weight array.

    Returned in the order of ``EncoderWeights.arrays()``.
    """
    neighbors, caches, f_last, norm = cache
    g = _squash_backward(output_gain(f_last.shape[1]) * g_channels, f_last, norm)
    grads = []
    for layer, c in zip(reversed(weights.layers), reversed(caches)):
        g, layer_grads = _layer_backward(g, neighbors, layer, c)
        grads.append(layer_grads)
    return [a for layer_grads in reversed(grads) for a in layer_grads]


# ---------------------------------------------------------------------------
# weight files: magic, version, k, layer count, then per layer (c_in, c_out)
# followed by W, Wk, D as little-endian float64 in row-major order


def save_weights(weights: EncoderWeights, path) -> None:
    buf = [WEIGHTS_MAGIC, struct.pack("<III", WEIGHTS_VERSION, weights.k, len(weights.layers))]
    for layer in weights.layers:
        buf.append(struct.pack("<II", *layer.W.shape))
        for a in layer.arrays():
            buf.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(buf))


def load_weights(path) -> EncoderWeights:
    data = Path(path).read_bytes()
    if not data.startswith(WEIGHTS_MAGIC):
        raise ValueError(f"{path}: not a weight file")
    pos = len(WEIGHTS_MAGIC)
    version, k, n_layers = struct.unpack_from("<III", data, pos)
    pos += 12
    if version != WEIGHTS_VERSION:
        raise ValueError(f"{path}: unsupported weight file version {version}")
    layers = []
    for _ in range(n_layers):
        ci, co = struct.unpack_from("<II", data, pos)
        pos += 8
        arrays = []
        for shape in ((ci, co), (ci, co), (co, co)):
            size = shape[0] * shape[1]
            arrays.append(np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(float))
            pos += 8 * size
        layers.append(LayerWeights(*arrays))
    return EncoderWeights(layers, k)
