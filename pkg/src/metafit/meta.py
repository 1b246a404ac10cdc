"""Meta-training of the keypoint-to-parameters initializer.

The initializer is a small MLP mapping a flattened observation (2J
keypoint coordinates followed by J confidences) to the 85 fit parameters
(3J pose, 10 shape, 3 camera; softplus keeps the scale positive). Training
simulates the test-time refinement loop for a few steps on every task and
supervises both the final 3D joint error and decayed intermediate
reprojection losses. The outer update is first order: the loss gradient is
taken with respect to the initial prediction only, treating the sampled
inner-loop increments as constants, and backpropagated through the MLP.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .body_model import NUM_SHAPE_COEFFS, FitParams, fk_jacobian, forward_kinematics
from .energy import EnergyConfig, reprojection_error, _energy_grad_full
from .errors import ConfigError, InvalidInputError, TrainingDivergenceError
from .optimizer import refine

HIDDEN = 128
ARCHITECTURE_TAG = "keypoint-mlp-128x128-tanh"


@dataclass(frozen=True)
class Regressor:
    """Fixed-architecture MLP initializer (two tanh hidden layers of 128)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    joint_count: int

    def __post_init__(self):
        J = self.joint_count
        n_in, n_out = 3 * J, 3 * J + NUM_SHAPE_COEFFS + 3
        shapes = {
            "w1": (HIDDEN, n_in),
            "b1": (HIDDEN,),
            "w2": (HIDDEN, HIDDEN),
            "b2": (HIDDEN,),
            "w3": (n_out, HIDDEN),
            "b3": (n_out,),
        }
        for name, want in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != want:
                raise InvalidInputError(f"{name} must have shape {want}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"{name} contains non-finite values")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def output_size(self):
        return 3 * self.joint_count + NUM_SHAPE_COEFFS + 3


@dataclass(frozen=True)
class MetaConfig:
    """Meta-training hyperparameters."""

    inner_steps: int = 3
    outer_lr: float = 1e-4
    intermediate_weight: float = 0.1
    intermediate_decay: float = 0.5
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    grad_clip: float = 100.0

    def __post_init__(self):
        if self.inner_steps < 0:
            raise ConfigError("inner_steps must be >= 0")
        if not self.outer_lr >= 0:
            raise ConfigError("outer_lr must be >= 0")
        if not 0.0 < self.intermediate_decay <= 1.0:
            raise ConfigError("intermediate_decay must lie in (0, 1]")
        if self.intermediate_weight < 0:
            raise ConfigError("intermediate_weight must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive")


@dataclass(frozen=True)
class LossReport:
    """Per-task training loss decomposition."""

    final_loss: float
    intermediate_losses: tuple
    total: float


@dataclass
class TrainingCurve:
    """Per-epoch training statistics plus the exact batch plan used."""

    epochs: list
    batch_plan: list

    def rows(self):
        return list(self.epochs)


def init_regressor(tree, rng):
    """Seeded Gaussian initialization; the raw scale output starts near 1."""
    J = tree.joint_count
    n_in, n_out = 3 * J, 3 * J + NUM_SHAPE_COEFFS + 3
    w1 = rng.normal(0.0, 1.0 / np.sqrt(n_in), (HIDDEN, n_in))
    w2 = rng.normal(0.0, 1.0 / np.sqrt(HIDDEN), (HIDDEN, HIDDEN))
    w3 = rng.normal(0.0, 0.01 / np.sqrt(HIDDEN), (n_out, HIDDEN))
    b3 = np.zeros(n_out)
    b3[3 * J + NUM_SHAPE_COEFFS] = _softplus_inverse(1.0)  # raw scale -> s ~= 1
    return Regressor(w1=w1, b1=np.zeros(HIDDEN), w2=w2, b2=np.zeros(HIDDEN), w3=w3, b3=b3,
                     joint_count=J)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_inverse(y):
    return float(np.log(np.expm1(y)))


def observation_features(obs):
    """Flattened regressor input: 2J keypoint coordinates then J weights."""
    return np.concatenate([obs.keypoints.ravel(), obs.weights])


def _forward(reg, x):
    h1 = np.tanh(reg.w1 @ x + reg.b1)
    h2 = np.tanh(reg.w2 @ h1 + reg.b2)
    out = reg.w3 @ h2 + reg.b3
    return out, (x, h1, h2)


def _output_to_params(reg, out):
    n = 3 * reg.joint_count
    theta = out[:n]
    beta = out[n : n + NUM_SHAPE_COEFFS]
    raw_s = out[n + NUM_SHAPE_COEFFS]
    cam = np.array([_softplus(raw_s), out[n + NUM_SHAPE_COEFFS + 1], out[n + NUM_SHAPE_COEFFS + 2]])
    return FitParams(theta=theta, beta=beta, camera=cam)


def regress(reg, obs):
    """Deterministic forward pass producing an initial parameter estimate."""
    x = observation_features(obs)
    if x.size != 3 * reg.joint_count:
        raise InvalidInputError(
            f"observation has {x.size} features, regressor expects {3 * reg.joint_count}"
        )
    out, _ = _forward(reg, x)
    return _output_to_params(reg, out)


def _backward(reg, cache, g_out):
    """Gradient of ``g_out . output`` with respect to every weight."""
    x, h1, h2 = cache
    d_w3 = np.outer(g_out, h2)
    d_b3 = g_out
    dh2 = (reg.w3.T @ g_out) * (1.0 - h2 * h2)
    d_w2 = np.outer(dh2, h1)
    d_b2 = dh2
    dh1 = (reg.w2.T @ dh2) * (1.0 - h1 * h1)
    d_w1 = np.outer(dh1, x)
    d_b1 = dh1
    return {"w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": d_b2, "w3": d_w3, "b3": d_b3}


def final_loss(tree, params, task):
    """Mean squared 3D joint-position error against the task's ground truth."""
    pred = forward_kinematics(tree, params)
    gt = forward_kinematics(tree, task.gt)
    diff = pred - gt
    return float(np.mean(np.sum(diff * diff, axis=1)))


def _final_loss_grad(tree, params, task):
    """Gradient of final_loss over the 85-vector (pose, shape, camera)."""
    pred, d_theta, d_beta = fk_jacobian(tree, params)
    gt = forward_kinematics(tree, task.gt)
    diff = 2.0 * (pred - gt) / tree.joint_count
    g_theta = np.einsum("ja,jad->d", diff, d_theta)
    g_beta = np.einsum("ja,jam->m", diff, d_beta)
    return np.concatenate([g_theta, g_beta, np.zeros(3)])


def _proj_loss_grad(tree, params, obs):
    """Gradient of the reprojection data term over the 85-vector."""
    cfg = EnergyConfig(lambda_pose=0.0, lambda_shape=0.0)
    return _energy_grad_full(tree, params, obs, cfg)


def decay_weights(mcfg):
    """Intermediate supervision weights, one per inner step."""
    return [mcfg.intermediate_weight * mcfg.intermediate_decay**t for t in range(mcfg.inner_steps)]


def inner_loop(tree, reg, task, ocfg, mcfg, rng):
    """Simulated refinement from the regressed initialization.

    Runs exactly ``inner_steps`` iterations of the adaptive optimizer (no
    early stopping) and reports the decayed intermediate reprojection
    losses along the trajectory plus the final 3D loss.

    Returns ``(trajectory, report)`` with ``len(trajectory) ==
    inner_steps + 1``.
    """
    params0 = regress(reg, task.obs)
    ecfg = EnergyConfig()
    T = mcfg.inner_steps
    if T == 0:
        trajectory = [params0]
    else:
        result = refine(
            tree,
            params0,
            task.obs,
            ecfg,
            replace(ocfg, max_iters=T),
            rng,
            early_stop=False,
            keep_params=True,
        )
        trajectory = result.param_trajectory
    l_final = final_loss(tree, trajectory[-1], task)
    intermediates = tuple(
        reprojection_error(tree, trajectory[t], task.obs) for t in range(T)
    )
    total = l_final + sum(w * li for w, li in zip(decay_weights(mcfg), intermediates))
    return trajectory, LossReport(final_loss=l_final, intermediate_losses=intermediates, total=total)


def _task_outer_gradient(tree, reg, task, ocfg, mcfg, rng):
    """First-order meta-gradient of one task with respect to the weights.

    The training loss gradient is evaluated along the inner trajectory but
    flows back only through the initial prediction (inner increments are
    treated as constants), then through the MLP.
    """
    x = observation_features(task.obs)
    out, cache = _forward(reg, x)
    trajectory, report = inner_loop(tree, reg, task, ocfg, mcfg, rng)

    g_params = _final_loss_grad(tree, trajectory[-1], task)
    for w, t in zip(decay_weights(mcfg), range(mcfg.inner_steps)):
        g_params = g_params + w * _proj_loss_grad(tree, trajectory[t], task.obs)

    # Chain through the softplus on the raw scale output.
    n = 3 * reg.joint_count
    g_out = g_params.copy()
    raw_s = out[n + NUM_SHAPE_COEFFS]
    g_out[n + NUM_SHAPE_COEFFS] *= 1.0 / (1.0 + np.exp(-raw_s))
    grads = _backward(reg, cache, g_out)
    return grads, report


def outer_step(tree, reg, batch, ocfg, mcfg, rng):
    """One first-order meta-update over a batch of tasks.

    Tasks are processed in ascending id order with independent spawned rng
    streams so the result does not depend on scheduling. Returns the
    updated regressor and the per-task loss reports (in processing order).

    Raises
    ------
    TrainingDivergenceError
        If the averaged gradient is non-finite.
    """
    if not batch:
        raise InvalidInputError("batch must be nonempty")
    ordered = sorted(batch, key=lambda t: t.id)
    streams = rng.spawn(len(ordered))
    total = {k: 0.0 for k in ("w1", "b1", "w2", "b2", "w3", "b3")}
    reports = []
    for task, stream in zip(ordered, streams):
        grads, report = _task_outer_gradient(tree, reg, task, ocfg, mcfg, stream)
        for key in total:
            total[key] = total[key] + grads[key]
        reports.append(report)
    for key in total:
        if not np.all(np.isfinite(total[key])):
            raise TrainingDivergenceError(f"non-finite outer gradient in {key}")
    inv_n = 1.0 / len(ordered)
    norm = float(np.sqrt(sum(np.sum((inv_n * g) ** 2) for g in total.values())))
    clip = min(1.0, mcfg.grad_clip / norm) if norm > 0 else 1.0
    scale = mcfg.outer_lr * inv_n * clip
    updates = {key: getattr(reg, key) - scale * total[key] for key in total}
    return replace(reg, **updates), reports


def epoch_plan(n_tasks, batch_size, epochs, rng):
    """Shuffled batch index lists for every epoch, derived only from ``rng``."""
    plan = []
    for _ in range(epochs):
        order = rng.permutation(n_tasks)
        plan.append([order[i : i + batch_size].tolist() for i in range(0, n_tasks, batch_size)])
    return plan


def evaluate_regressor(tree, reg, tasks, ocfg, rng):
    """Mean post-refinement 3D joint error of the regressor on ``tasks``."""
    errors = []
    streams = rng.spawn(len(tasks))
    for task, stream in zip(sorted(tasks, key=lambda t: t.id), streams):
        init = regress(reg, task.obs)
        result = refine(tree, init, task.obs, EnergyConfig(), ocfg, stream)
        pred = forward_kinematics(tree, result.params)
        gt = forward_kinematics(tree, task.gt)
        errors.append(float(np.mean(np.linalg.norm(pred - gt, axis=1))))
    return float(np.mean(errors))


def meta_train(tree, reg, dataset, ocfg, mcfg, rng, heldout=None):
    """Epochs of first-order meta-updates with seeded shuffling.

    The shuffle stream and the inner-loop streams are spawned separately
    from ``rng`` up front, so batch composition never depends on how much
    randomness the inner loops consume. Per epoch the curve records the
    mean training loss and the mean post-refinement joint error on
    ``heldout`` (or on the epoch's own tasks when no holdout is given).
    """
    if not dataset:
        raise InvalidInputError("dataset must be nonempty")
    shuffle_rng, inner_rng, eval_rng = rng.spawn(3)
    plan = epoch_plan(len(dataset), mcfg.batch_size, mcfg.epochs, shuffle_rng)
    curve = TrainingCurve(epochs=[], batch_plan=plan)
    for epoch_idx, batches in enumerate(plan):
        finals = []
        for batch_ids in batches:
            batch = [dataset[i] for i in batch_ids]
            reg, reports = outer_step(tree, reg, batch, ocfg, mcfg, inner_rng)
            finals.extend(r.final_loss for r in reports)
        eval_tasks = heldout if heldout else dataset
        err = evaluate_regressor(tree, reg, eval_tasks, ocfg, eval_rng)
        curve.epochs.append((epoch_idx, float(np.mean(finals)), err))
    return reg, curve


def save_regressor(path, reg, seed=0, epoch=0):
    """Checkpoint as JSON: architecture tag, weights, seed, epoch."""
    doc = {
        "architecture": ARCHITECTURE_TAG,
        "weights": {
            key: getattr(reg, key).tolist()
            for key in ("w1", "b1", "w2", "b2", "w3", "b3")
        },
        "seed": int(seed),
        "epoch": int(epoch),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_regressor(path, joint_count=24):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("architecture") != ARCHITECTURE_TAG:
        raise ConfigError(f"unknown architecture tag {doc.get('architecture')!r}")
    try:
        weights = {key: np.asarray(doc["weights"][key]) for key in ("w1", "b1", "w2", "b2", "w3", "b3")}
    except KeyError as exc:
        raise ConfigError(f"checkpoint missing weight {exc}") from exc
    try:
        return Regressor(joint_count=joint_count, **weights)
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from exc
