"""SE(3) arithmetic, point-cloud container and local geometry.

Twists are 6-vectors ``(rho, omega)``: translational part first, rotation
vector (radians) second.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import AngleNearPi, EmptyCloud, TooFewPoints

SMALL_ANGLE = 1e-8
NEAR_PI_TRACE = 1e-6
DEGENERATE_EIG = 1e-12


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid motion x -> R x + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other: Pose) -> Pose:
        """``self * other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> Pose:
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def __repr__(self) -> str:
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


@dataclass(eq=False)
class PointCloud:
    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.labels is None:
            self.labels = np.ones(len(self.points))
        else:
            self.labels = np.asarray(self.labels, dtype=float).reshape(-1)
        if len(self.labels) != len(self.points):
            raise ValueError(f"{len(self.labels)} labels for {len(self.points)} points")

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, pose: Pose) -> PointCloud:
        return PointCloud(pose.apply(self.points), self.labels.copy())

    def subset(self, idx) -> PointCloud:
        return PointCloud(self.points[idx], self.labels[idx])


def _so3_coeffs(theta: float):
    """Rodrigues coefficients sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = np.sin(theta), np.cos(theta)
    return s / theta, (1.0 - c) / theta**2, (theta - s) / theta**3


def so3_exp(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    a, b, _ = _so3_coeffs(float(np.linalg.norm(omega)))
    K = skew(omega)
    return np.eye(3) + a * K + b * (K @ K)


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, robust at both 0 and pi."""
    cos = (np.trace(R) - 1.0) / 2.0
    sin = np.linalg.norm(vee(R - R.T)) / 2.0
    return float(np.arctan2(sin, np.clip(cos, -1.0, 1.0)))


def so3_log(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if np.trace(R) <= -1.0 + NEAR_PI_TRACE:
        raise AngleNearPi(f"rotation angle too close to pi (trace={np.trace(R):.9f})")
    theta = rotation_angle(R)
    w = vee(R - R.T) / 2.0
    if theta < SMALL_ANGLE:
        return w * (1.0 + theta * theta / 6.0)
    return w * (theta / np.sin(theta))


def se3_exp(xi: np.ndarray) -> Pose:
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, omega = xi[:3], xi[3:]
    a, b, c = _so3_coeffs(float(np.linalg.norm(omega)))
    K = skew(omega)
    KK = K @ K
    R = np.eye(3) + a * K + b * KK
    V = np.eye(3) + b * K + c * KK
    return Pose(R, V @ rho)


def se3_log(p: Pose) -> np.ndarray:
    omega = so3_log(p.rotation)
    theta = float(np.linalg.norm(omega))
    K = skew(omega)
    if theta < SMALL_ANGLE:
        d = 1.0 / 12.0
    else:
        a, b, _ = _so3_coeffs(theta)
        d = (1.0 - a / (2.0 * b)) / theta**2
    V_inv = np.eye(3) - 0.5 * K + d * (K @ K)
    return np.concatenate([V_inv @ p.translation, omega])


def random_rotation(rng: np.random.Generator, angle: float | None = None) -> np.ndarray:
    """Rotation about a uniformly random axis; angle uniform on [0, pi) unless given."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    if angle is None:
        angle = rng.uniform(0.0, np.pi)
    return so3_exp(axis * angle)


def rotation_error_deg(estimate: Pose, truth: Pose) -> float:
    return float(np.degrees(rotation_angle(estimate.rotation @ truth.rotation.T)))


def translation_error(estimate: Pose, truth: Pose) -> float:
    return float(np.linalg.norm(estimate.translation - truth.translation))


def _as_points(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float).reshape(-1, 3)


def farthest_point_sample(cloud: PointCloud, n: int) -> PointCloud:
    pts = cloud.points
    if len(pts) == 0:
        raise EmptyCloud("cannot sample from an empty cloud")
    if n >= len(pts):
        return cloud.subset(np.arange(len(pts)))
    chosen = np.empty(n, dtype=int)
    chosen[0] = 0
    dist = np.sum((pts - pts[0]) ** 2, axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return cloud.subset(chosen)


def knn_indices(cloud, k: int) -> np.ndarray:
    """(N, k) indices of each point's nearest neighbours, self excluded.

    Equal distances are ordered by index.
    """
    pts = _as_points(cloud)
    n = len(pts)
    if n <= k:
        raise TooFewPoints(f"need more than k={k} points, got {n}")
    tree = cKDTree(pts)
    rows = np.arange(n)
    out = np.empty((n, k), dtype=int)
    todo = rows
    q = min(n, k + 2)
    while len(todo):
        dist, idx = tree.query(pts[todo], k=q)
        dist = dist.reshape(len(todo), q)
        idx = idx.reshape(len(todo), q)
        # exact squared distances so ties compare equal regardless of tree path
        d2 = np.sum((pts[idx] - pts[todo, None, :]) ** 2, axis=2)
        d2[idx == todo[:, None]] = -1.0
        order = np.lexsort((idx, d2), axis=1)
        idx = np.take_along_axis(idx, order, axis=1)
        d2 = np.take_along_axis(d2, order, axis=1)
        # a tie between the k-th kept neighbour and the last queried one may hide
        # lower-index candidates beyond the query; widen for those rows
        ambiguous = (d2[:, k] == d2[:, q - 1]) & (q < n)
        done = ~ambiguous
        out[todo[done]] = idx[done, 1 : k + 1]
        todo = todo[ambiguous]
        q = min(n, 2 * q)
    return out


def _local_frames(pts: np.ndarray, k: int):
    """Per-point covariance eigen-decomposition over self + k neighbours."""
    nbrs = knn_indices(pts, k)
    hood = np.concatenate([pts[:, None, :], pts[nbrs]], axis=1)
    centered = hood - hood.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / hood.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    degenerate = evals[:, 1] < DEGENERATE_EIG
    return evals, evecs, degenerate


def _orient(vectors: np.ndarray, pts: np.ndarray) -> np.ndarray:
    outward = pts - pts.mean(axis=0)
    sign = np.where(np.sum(vectors * outward, axis=1) < 0.0, -1.0, 1.0)
    return vectors * sign[:, None]


def pca_normals(cloud, k: int = 16, return_mask: bool = False):
    """Unit normals from local PCA, flipped to face away from the centroid.

    Points whose neighbourhood covariance has rank < 2 get (0, 0, 1); pass
    ``return_mask=True`` to also receive the boolean degeneracy mask.
    """
    pts = _as_points(cloud)
    if k < 3:
        raise ValueError("k must be at least 3")
    _, evecs, degenerate = _local_frames(pts, k)
    normals = _orient(evecs[:, :, 0], pts)
    normals[degenerate] = (0.0, 0.0, 1.0)
    if return_mask:
        return normals, degenerate
    return normals


def local_frame_channels(cloud, k: int = 16):
    """Oriented normal and middle-eigenvector tangent per point, plus degeneracy mask."""
    pts = _as_points(cloud)
    _, evecs, degenerate = _local_frames(pts, k)
    normal = _orient(evecs[:, :, 0], pts)
    tangent = _orient(evecs[:, :, 1], pts)
    return normal, tangent, degenerate
