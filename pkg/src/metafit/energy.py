"""Weak-perspective projection and the keypoint fitting energy.

The energy is a confidence-weighted sum of squared reprojection residuals
plus quadratic pose and shape priors:

    E = sum_j w_j |project(camera, fk(theta, beta)_j) - u_j|^2
        + lambda_pose * |theta_nonroot|^2 + lambda_shape * |beta|^2

The pose prior excludes the three root-orientation components. Gradients
over the flat pose+camera vector come in three flavors: analytic (chain
rule through the kinematic Jacobian), per-coordinate central differences,
and classical simultaneous-perturbation estimates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .body_model import FitParams, fk_jacobian, forward_kinematics
from .errors import InvalidCameraError, InvalidInputError, NumericOverflowError


@dataclass(frozen=True)
class Observation:
    """Detected 2D keypoints with per-joint confidence weights.

    ``keypoints`` is (J, 2) in projected units, ``weights`` is (J,) with
    entries in [0, 1] and at least one strictly positive weight.
    """

    keypoints: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if kp.ndim != 2 or kp.shape[1] != 2:
            raise InvalidInputError("keypoints must be (J, 2)")
        if w.shape != (kp.shape[0],):
            raise InvalidInputError("weights must match keypoint count")
        if not (np.all(np.isfinite(kp)) and np.all(np.isfinite(w))):
            raise InvalidInputError("observation contains non-finite values")
        if np.any(w < 0) or np.any(w > 1):
            raise InvalidInputError("weights must lie in [0, 1]")
        if not np.any(w > 0):
            raise InvalidInputError("at least one weight must be positive")
        kp.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "weights", w)

    @property
    def joint_count(self):
        return self.keypoints.shape[0]


@dataclass(frozen=True)
class EnergyConfig:
    """Regularizer strengths for the fitting energy."""

    lambda_pose: float = 1e-3
    lambda_shape: float = 1e-2

    def __post_init__(self):
        for name in ("lambda_pose", "lambda_shape"):
            val = float(getattr(self, name))
            if not np.isfinite(val) or val < 0:
                raise InvalidInputError(f"{name} must be finite and >= 0")
            object.__setattr__(self, name, val)


def project(camera, points):
    """Weak-perspective projection ``(s*x + tx, s*y + ty)``.

    ``points`` may be a single 3-vector or an (..., 3) stack; depth is
    dropped after scaling.
    """
    camera = np.asarray(camera, dtype=float)
    if camera.shape != (3,):
        raise InvalidInputError("camera must be [s, tx, ty]")
    s = camera[0]
    if not s > 0:
        raise InvalidCameraError(f"camera scale must be positive, got {s}")
    points = np.asarray(points, dtype=float)
    return s * points[..., :2] + camera[1:]


def _check_obs(tree, obs):
    if obs.joint_count != tree.joint_count:
        raise InvalidInputError(
            f"observation has {obs.joint_count} keypoints, tree has {tree.joint_count} joints"
        )


def _data_term(joints, camera, keypoints, weights):
    residual = project(camera, joints) - keypoints
    return float(np.sum(weights * np.sum(residual * residual, axis=1)))


def reprojection_error(tree, params, obs):
    """The weighted squared reprojection term alone (no priors)."""
    _check_obs(tree, obs)
    joints = forward_kinematics(tree, params)
    value = _data_term(joints, params.camera, obs.keypoints, obs.weights)
    if not np.isfinite(value):
        raise NumericOverflowError("non-finite reprojection error")
    return value


def energy(tree, params, obs, cfg):
    """Total fitting energy: data term plus pose and shape priors."""
    _check_obs(tree, obs)
    joints = forward_kinematics(tree, params)
    value = _data_term(joints, params.camera, obs.keypoints, obs.weights)
    value += cfg.lambda_pose * float(params.theta[3:] @ params.theta[3:])
    value += cfg.lambda_shape * float(params.beta @ params.beta)
    if not np.isfinite(value):
        raise NumericOverflowError("non-finite energy value")
    return value


def energy_grad_analytic(tree, params, obs, cfg):
    """Exact gradient of the energy over the flat pose+camera vector.

    Shape coefficients are held constant; the returned vector has
    ``3J`` pose entries followed by ``[s, tx, ty]``.
    """
    grad_full = _energy_grad_full(tree, params, obs, cfg)
    n = params.theta.size
    return np.concatenate([grad_full[:n], grad_full[n + 10 :]])


def _energy_grad_full(tree, params, obs, cfg):
    """Gradient over (pose, shape, camera) as one (3J + 13,) vector."""
    _check_obs(tree, obs)
    joints, d_theta, d_beta = fk_jacobian(tree, params)
    s = params.camera[0]
    if not s > 0:
        raise InvalidCameraError(f"camera scale must be positive, got {s}")
    residual = s * joints[:, :2] + params.camera[1:] - obs.keypoints
    wres = obs.weights[:, None] * residual  # (J, 2)

    # d data / d theta: 2 s * sum_j w_j r_j . dp_j[:2]/dtheta
    g_theta = 2.0 * s * np.einsum("ja,jad->d", wres, d_theta[:, :2, :])
    g_theta += 2.0 * cfg.lambda_pose * params.theta
    g_theta[:3] -= 2.0 * cfg.lambda_pose * params.theta[:3]  # root excluded

    g_beta = 2.0 * s * np.einsum("ja,jam->m", wres, d_beta[:, :2, :])
    g_beta += 2.0 * cfg.lambda_shape * params.beta

    g_s = 2.0 * float(np.sum(wres * joints[:, :2]))
    g_t = 2.0 * wres.sum(axis=0)

    grad = np.concatenate([g_theta, g_beta, [g_s], g_t])
    if not np.all(np.isfinite(grad)):
        raise NumericOverflowError("non-finite energy gradient")
    return grad


def central_difference_gradient(f, x, delta, indices=None):
    """Per-coordinate central differences ``(f(x+d e_i) - f(x-d e_i))/2d``.

    ``indices`` restricts evaluation to a subset of coordinates; the
    remaining entries of the returned vector are zero.
    """
    if not delta > 0:
        raise InvalidInputError(f"delta must be positive, got {delta}")
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    idx = range(x.size) if indices is None else indices
    for i in idx:
        step = np.zeros_like(x)
        step[i] = delta
        grad[i] = (f(x + step) - f(x - step)) / (2.0 * delta)
    return grad


def spsa_gradient(f, x, delta, rng, indices=None):
    """One-sample simultaneous-perturbation estimate of the gradient.

    Draws a single Rademacher direction, evaluates the objective twice,
    and divides the symmetric difference by each perturbation component.
    With ``indices`` given, only those coordinates are perturbed and
    estimated.
    """
    if not delta > 0:
        raise InvalidInputError(f"delta must be positive, got {delta}")
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    if indices is None:
        idx = np.arange(x.size)
    else:
        idx = np.asarray(list(indices), dtype=int)
        if idx.size == 0:
            return grad
    direction = rng.choice([-1.0, 1.0], size=idx.size)
    step = np.zeros_like(x)
    step[idx] = delta * direction
    diff = f(x + step) - f(x - step)
    grad[idx] = diff / (2.0 * delta * direction)
    return grad


def energy_grad_stochastic(tree, params, obs, cfg, delta, mode, rng=None, indices=None):
    """Gradient estimate of the energy over the flat pose+camera vector.

    ``mode="coordinate"`` evaluates an exact central difference for every
    requested coordinate (two energy evaluations each). ``mode="simultaneous"``
    uses a single Rademacher perturbation for all requested coordinates at
    once and needs ``rng``.
    """
    if not delta > 0:
        raise InvalidInputError(f"delta must be positive, got {delta}")
    _check_obs(tree, obs)

    def f(vec):
        return energy(tree, params.replace_flat(vec), obs, cfg)

    x = params.flat()
    if mode == "coordinate":
        return central_difference_gradient(f, x, delta, indices=indices)
    if mode == "simultaneous":
        if rng is None:
            raise InvalidInputError("simultaneous mode needs an rng")
        return spsa_gradient(f, x, delta, rng, indices=indices)
    raise InvalidInputError(f"unknown gradient mode {mode!r}")
