"""Uncertainty-aware test-time refinement.

Each pose and camera parameter carries its own Gaussian update
distribution. Per iteration the optimizer computes gradients for the
active parameters, permanently caches those whose gradient magnitude falls
below a significance threshold, evolves every surviving distribution
(success-rate step sizing for the mean, confidence-scaled variance, both
with momentum), samples the parameter increments, and applies them.
Cached parameters receive exactly zero update for the rest of the run.
The final per-parameter standard deviations are returned as the
uncertainty estimate.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .body_model import FitParams
from .energy import energy, energy_grad_analytic, energy_grad_stochastic
from .errors import ConfigError, DivergedError, InvalidInputError

STOP_ACTIVE_SET_EMPTY = "active-set-empty"
STOP_SMALL_UPDATE = "small-update"
STOP_MAX_ITERS = "max-iters"

CAMERA_SCALE_FLOOR = 1e-6

GRADIENT_MODES = ("analytic", "coordinate", "simultaneous")


@dataclass(frozen=True)
class UpdateDistribution:
    """Gaussian over one parameter's next increment."""

    mu: float
    sigma: float


@dataclass(frozen=True)
class OptimizerConfig:
    """Knobs of the refinement loop.

    ``alpha_base`` scales the success-rate step size, ``gamma`` is the
    caching significance threshold, ``epsilon_conv`` the small-update stop,
    and ``kappa``/``epsilon_var``/``sigma_min``/``sigma_max`` shape the
    confidence-to-variance map. ``beta_mu`` and ``beta_sigma`` are the
    momentum coefficients of the distribution evolution.

    The defaults keep ``kappa <= sigma_min * gamma``. Parameters one step
    away from being cached then never receive an exploration boost, which
    keeps the mean-variance trace non-increasing and stops sampling noise
    from re-inflating an almost-converged fit.

    ``fixed_sigma`` pins every variance to a constant (ablation of the
    adaptive variance strategy). ``enable_caching=False`` keeps the active
    set full; ``enable_adaptive_updates=False`` falls back to deterministic
    steps ``-alpha_base * g``. ``shape_step_size > 0`` additionally applies
    plain gradient steps to the shape coefficients, which are otherwise
    frozen during refinement.
    """

    alpha_base: float = 1e-5
    gamma: float = 1e-4
    epsilon_conv: float = 1e-3
    kappa: float = 3e-8
    epsilon_var: float = 1e-8
    sigma_min: float = 3e-4
    sigma_max: float = 0.15
    beta_mu: float = 0.2
    beta_sigma: float = 0.0
    max_iters: int = 15
    success_window: int = 5
    gradient_mode: str = "analytic"
    spsa_delta: float = 1e-4
    fixed_sigma: float | None = None
    enable_caching: bool = True
    enable_adaptive_updates: bool = True
    shape_step_size: float = 0.0

    def __post_init__(self):
        positives = (
            "alpha_base",
            "gamma",
            "epsilon_conv",
            "kappa",
            "epsilon_var",
            "sigma_min",
            "sigma_max",
            "spsa_delta",
        )
        for name in positives:
            val = float(getattr(self, name))
            if not (np.isfinite(val) and val > 0):
                raise ConfigError(f"{name} must be a finite positive number, got {val}")
        if not self.sigma_min < self.sigma_max:
            raise ConfigError("sigma_min must be < sigma_max")
        # 1.0 is admitted as the degenerate "frozen" boundary of the
        # momentum range.
        for name in ("beta_mu", "beta_sigma"):
            val = float(getattr(self, name))
            if not (0.0 <= val <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.max_iters < 0 or self.success_window < 1:
            raise ConfigError("max_iters must be >= 0 and success_window >= 1")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ConfigError(f"gradient_mode must be one of {GRADIENT_MODES}")
        if self.fixed_sigma is not None and not float(self.fixed_sigma) > 0:
            raise ConfigError("fixed_sigma must be positive when set")
        if self.shape_step_size < 0:
            raise ConfigError("shape_step_size must be >= 0")


@dataclass
class OptimizerState:
    """Mutable per-task optimizer state."""

    active: set
    dists: list
    success_history: list
    iteration: int = 0
    last_update_norm: float = 0.0

    def success_rate(self, k):
        """Mean of the filled success buffer; neutral 0.5 when empty."""
        buf = self.success_history[k]
        if not buf:
            return 0.5
        return sum(buf) / len(buf)


@dataclass
class TraceRecord:
    """One completed refinement iteration."""

    t: int
    energy: float
    mean_sigma: float
    active_count: int
    update_norm: float


@dataclass
class RefinementResult:
    """Outcome of one refinement run."""

    params: FitParams
    uncertainty: np.ndarray
    trace: list
    iterations_used: int
    stop_reason: str
    param_trajectory: list = field(default=None, repr=False)


def init_state(cfg, flat_size=75):
    """Fresh state: full active set, zero means, maximal variances."""
    sigma0 = cfg.sigma_max if cfg.fixed_sigma is None else cfg.fixed_sigma
    return OptimizerState(
        active=set(range(flat_size)),
        dists=[UpdateDistribution(mu=0.0, sigma=sigma0) for _ in range(flat_size)],
        success_history=[deque(maxlen=cfg.success_window) for _ in range(flat_size)],
    )


def caching_decision(state, k, g_k, gamma):
    """Decide whether parameter ``k`` still gets updates.

    Returns ``"update"`` when ``k`` is active and ``|g_k|`` strictly
    exceeds the significance threshold; otherwise removes ``k`` from the
    active set (permanently) and returns ``"cache"``.
    """
    if k in state.active and abs(g_k) > gamma:
        return "update"
    state.active.discard(k)
    return "cache"


def adaptive_step_size(success_rate, alpha_base):
    """Exponential step-size schedule around the neutral 0.5 success rate."""
    return alpha_base * math.exp((success_rate - 0.5) / 0.1)


def target_variance(g_k, cfg):
    """Variance inversely proportional to gradient confidence, clamped."""
    raw = cfg.kappa / (abs(g_k) + cfg.epsilon_var)
    return min(max(raw, cfg.sigma_min), cfg.sigma_max)


def evolve_distribution(dist, g_k, step_size, cfg):
    """One momentum step of the mean and standard deviation."""
    mu = cfg.beta_mu * dist.mu + (1.0 - cfg.beta_mu) * (-step_size * g_k)
    sigma = cfg.beta_sigma * dist.sigma + (1.0 - cfg.beta_sigma) * target_variance(g_k, cfg)
    return UpdateDistribution(mu=mu, sigma=sigma)


def sample_update(dist, rng):
    """Draw one increment from the distribution."""
    return float(rng.normal(dist.mu, dist.sigma))


def _gradient_vector(tree, params, obs, ecfg, ocfg, rng, active):
    if ocfg.gradient_mode == "analytic":
        return energy_grad_analytic(tree, params, obs, ecfg)
    indices = sorted(active)
    return energy_grad_stochastic(
        tree,
        params,
        obs,
        ecfg,
        delta=ocfg.spsa_delta,
        mode=ocfg.gradient_mode,
        rng=rng,
        indices=indices,
    )


def refine(tree, init, obs, ecfg, ocfg, rng, early_stop=True, keep_params=False):
    """Run the adaptive refinement loop from an initial parameter guess.

    Per iteration, every active parameter gets a gradient (mode per
    config), a caching decision, a distribution update, and a sampled
    increment; cached parameters stay bit-identical for the rest of the
    run. Stops when the active set empties, the update norm falls below
    ``epsilon_conv`` (unless ``early_stop=False``, used when simulating
    refinement inside training), or ``max_iters`` is reached.

    Returns a :class:`RefinementResult`; with ``keep_params=True`` the
    result also carries the full parameter trajectory (length
    ``iterations_used + 1``).

    Raises
    ------
    InvalidInputError
        If the initial parameters are non-finite.
    DivergedError
        If parameters become non-finite mid-run (trace attached).
    """
    if not isinstance(init, FitParams):
        raise InvalidInputError("init must be a FitParams")
    if not init.is_finite():
        raise InvalidInputError("initial parameters contain non-finite values")

    flat_size = init.flat_size
    state = init_state(ocfg, flat_size)
    params = init
    prev_energy = energy(tree, params, obs, ecfg)
    trace = []
    trajectory = [params] if keep_params else None
    stop_reason = STOP_MAX_ITERS

    for _ in range(ocfg.max_iters):
        vec = params.flat()
        delta = np.zeros(flat_size)
        if state.active:
            grads = _gradient_vector(tree, params, obs, ecfg, ocfg, rng, state.active)
            for k in sorted(state.active):
                g_k = float(grads[k])
                if ocfg.enable_caching:
                    if caching_decision(state, k, g_k, ocfg.gamma) == "cache":
                        continue
                if ocfg.enable_adaptive_updates:
                    step = adaptive_step_size(state.success_rate(k), ocfg.alpha_base)
                    dist = evolve_distribution(state.dists[k], g_k, step, ocfg)
                    if ocfg.fixed_sigma is not None:
                        dist = replace(dist, sigma=ocfg.fixed_sigma)
                    state.dists[k] = dist
                    delta[k] = sample_update(dist, rng)
                else:
                    delta[k] = -ocfg.alpha_base * g_k

        with np.errstate(over="ignore", invalid="ignore"):
            new_vec = vec + delta
            # The energy is only defined for a positive camera scale; an
            # aggressive update (possible from poor mid-training inits) is
            # projected back to a tiny positive value.
            if new_vec[-3] < CAMERA_SCALE_FLOOR:
                new_vec[-3] = CAMERA_SCALE_FLOOR
            new_params = params.replace_flat(new_vec)
            if ocfg.shape_step_size > 0.0:
                from .energy import _energy_grad_full

                full = _energy_grad_full(tree, params, obs, ecfg)
                n = params.theta.size
                beta = params.beta - ocfg.shape_step_size * full[n : n + 10]
                new_params = FitParams(theta=new_params.theta, beta=beta, camera=new_params.camera)
        params = new_params

        if not params.is_finite():
            raise DivergedError("parameters became non-finite during refinement", trace=trace)

        new_energy = energy(tree, params, obs, ecfg)
        success = new_energy < prev_energy
        for k in state.active:
            state.success_history[k].append(success)
        prev_energy = new_energy

        update_norm = float(np.linalg.norm(delta))
        state.iteration += 1
        state.last_update_norm = update_norm
        trace.append(
            TraceRecord(
                t=state.iteration,
                energy=new_energy,
                mean_sigma=float(np.mean([d.sigma for d in state.dists])),
                active_count=len(state.active),
                update_norm=update_norm,
            )
        )
        if keep_params:
            trajectory.append(params)

        if early_stop:
            if not state.active:
                stop_reason = STOP_ACTIVE_SET_EMPTY
                break
            if update_norm < ocfg.epsilon_conv:
                stop_reason = STOP_SMALL_UPDATE
                break

    return RefinementResult(
        params=params,
        uncertainty=np.array([d.sigma for d in state.dists]),
        trace=trace,
        iterations_used=len(trace),
        stop_reason=stop_reason,
        param_trajectory=trajectory,
    )
