"""Joint pose/lengthscale gradient descent on the RKHS distance."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ChannelMismatch, EmptyCloud
from .features import FeatureCloud, apply_pose_features
from .geometry import Pose, se3_exp
from .rkhs import KernelParams, SelfTerm, pair_sums

log = logging.getLogger(__name__)


@dataclass
class RegistrationConfig:
    max_iters: int = 300
    pose_step: float = 0.05
    ell_init: float = 0.3
    prune_factor: float = 3.0
    convergence_eps: float = 1e-6
    ell_lr_ratio: float = 100.0
    kernel: str = "rbf_tanh"
    max_halvings: int = 8
    step_growth: float = 2.0
    max_step: float = 1e3
    ell_min: float = 0.01
    ell_max: float = 2.0
    step_rule: str = "bb"  # "bb" (Barzilai-Borwein) or "grow"
    max_rotation_step: float = 0.2  # radians per iteration
    max_translation_step: float = 0.1  # length units per iteration

    @property
    def lengthscale_step(self) -> float:
        return self.pose_step / self.ell_lr_ratio

    def kernel_params(self, ell: float | None = None) -> KernelParams:
        return KernelParams(
            self.ell_init if ell is None else ell, self.prune_factor, self.kernel, self.ell_min, self.ell_max
        )


@dataclass
class RegistrationResult:
    pose: Pose
    final_ell: float
    objective_trace: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    failed: bool = False


def objective_and_gradient(
    fcX: FeatureCloud,
    fcZ: FeatureCloud,
    pose: Pose,
    params: KernelParams,
    self_terms: tuple[SelfTerm, SelfTerm] | None = None,
):
    """RKHS distance, its gradient w.r.t. a left twist exp(xi)*pose at xi=0, and d/d ell.

    The value is returned unclamped so that it stays smooth around 0. The
    pruned pair support is frozen at ``pose``.
    """
    if self_terms is None:
        self_terms = (SelfTerm(fcX, params), SelfTerm(fcZ, params))
    sx, dsx = self_terms[0](params.lengthscale)
    sz, dsz = self_terms[1](params.lengthscale)
    cross = pair_sums(fcX, apply_pose_features(pose, fcZ), params, want_pose=True)
    value = sx + sz - 2.0 * cross.value
    grad = -2.0 * np.concatenate([cross.d_rho, cross.d_omega])
    d_ell = dsx + dsz - 2.0 * cross.d_ell
    return value, grad, d_ell


def _check(fcX: FeatureCloud, fcZ: FeatureCloud, kernel: str) -> None:
    if len(fcX) == 0 or len(fcZ) == 0:
        raise EmptyCloud("registration needs two non-empty clouds")
    if kernel == "rbf_tanh" and fcX.n_channels != fcZ.n_channels:
        raise ChannelMismatch(f"{fcX.n_channels} vs {fcZ.n_channels} channels")


def _shift(fc: FeatureCloud, offset: np.ndarray) -> FeatureCloud:
    return FeatureCloud(fc.points - offset, fc.channels, fc.labels)


def rotation_metric(points: np.ndarray, labels: np.ndarray | None = None) -> np.ndarray:
    """Inverse inertia tensor of a centred cloud (rotational step preconditioner)."""
    w = np.ones(len(points)) if labels is None else np.abs(labels)
    w = w / w.sum()
    second = np.einsum("n,ni,nj->ij", w, points, points)
    J = np.trace(second) * np.eye(3) - second
    return np.linalg.inv(J + 1e-9 * np.trace(J) * np.eye(3) + 1e-12 * np.eye(3))


def _trust(xi: np.ndarray, config: RegistrationConfig) -> float:
    """Factor <= 1 keeping each part of the twist within its per-iteration cap."""
    t, w = np.linalg.norm(xi[:3]), np.linalg.norm(xi[3:])
    return min(1.0, config.max_translation_step / max(t, 1e-300), config.max_rotation_step / max(w, 1e-300))


def register(
    fcX: FeatureCloud,
    fcZ: FeatureCloud,
    config: RegistrationConfig | None = None,
    init: Pose | None = None,
) -> RegistrationResult:
    """Find the pose h (and lengthscale) minimising d(f_X, f_hZ).

    Both clouds are expressed about the centroid of X while optimising, and
    the rotational part of each step is scaled by the inverse inertia tensor
    of X. This keeps rotation and translation equally conditioned for any
    shape scale. Steps are taken on the distance divided by N*M so one step
    size fits any cloud size.

    ``pose_step`` is the first step length. After each accepted step the
    length is re-estimated from the last step and gradient change
    (Barzilai-Borwein), or grown by ``step_growth`` with ``step_rule="grow"``.
    A trial step is capped at ``max_rotation_step`` / ``max_translation_step``
    and halved (up to ``max_halvings`` times) whenever it would raise the
    objective, so the accepted trace is non-increasing.
    """
    config = config or RegistrationConfig()
    _check(fcX, fcZ, config.kernel)
    params = config.kernel_params()
    center = np.average(fcX.points, axis=0, weights=np.abs(fcX.labels) + 1e-300)
    to_local = Pose(np.eye(3), -center)
    fcX, fcZ = _shift(fcX, center), _shift(fcZ, center)
    pose = to_local @ (init or Pose.identity()) @ to_local.inverse()
    metric = rotation_metric(fcX.points, fcX.labels)
    inertia = np.linalg.inv(metric)
    ell = params.lengthscale
    self_terms = (SelfTerm(fcX, params), SelfTerm(fcZ, params))
    scale = 1.0 / (len(fcX) * len(fcZ))

    def direction(g):
        return scale * np.concatenate([g[:3], metric @ g[3:]])

    value, grad, d_ell = objective_and_gradient(fcX, fcZ, pose, params, self_terms)
    trace = [value]
    converged = False
    it = 0
    step = config.pose_step
    while it < config.max_iters:
        if np.linalg.norm(step * direction(grad)) < config.convergence_eps:
            converged = True
            break
        accepted = False
        for halvings in range(config.max_halvings + 1):
            step *= _trust(step * direction(grad), config)
            xi = -step * direction(grad)
            cand_pose = se3_exp(xi) @ pose
            cand_ell = params.clamp(ell - step / config.ell_lr_ratio * scale * d_ell)
            cand_params = params.with_lengthscale(cand_ell)
            cand = objective_and_gradient(fcX, fcZ, cand_pose, cand_params, self_terms)
            if cand[0] <= value:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            log.debug("no descent step after %d halvings at iteration %d", config.max_halvings, it)
            break
        new_value, new_grad, new_d_ell = cand
        # ratio of step length to gradient change along the step, measured in
        # the preconditioned metric (the metric's inverse weighs rotations)
        dg = scale * (new_grad - grad)
        curvature = float(xi @ dg)
        if config.step_rule == "bb" and curvature > 0:
            length = float(xi[:3] @ xi[:3] + xi[3:] @ inertia @ xi[3:])
            step = min(length / curvature, config.max_step)
        elif halvings == 0:
            step = min(step * config.step_growth, config.max_step)
        pose, ell, params = cand_pose, cand_ell, cand_params
        value, grad, d_ell = new_value, new_grad, new_d_ell
        trace.append(value)
        it += 1
        if np.linalg.norm(xi) < config.convergence_eps:
            converged = True
            break
    pose = to_local.inverse() @ pose @ to_local
    return RegistrationResult(pose, ell, trace, it, converged)
