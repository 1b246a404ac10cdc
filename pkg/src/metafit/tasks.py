"""Seeded generation of synthetic fitting tasks.

A task is a ground-truth parameter set plus the noisy 2D observation it
produced. Domain profiles control the observation statistics (keypoint
noise, occlusion rate, pose spread, camera scale range), which is how
domain shift is realized here: train on one profile, evaluate on another.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .body_model import NUM_SHAPE_COEFFS, FitParams, bone_lengths, forward_kinematics
from .energy import Observation, project
from .errors import DegenerateShapeError, InvalidInputError


@dataclass(frozen=True)
class DomainProfile:
    """Observation statistics of one task domain."""

    name: str
    keypoint_noise_std: float
    occlusion_prob: float
    pose_spread: float
    camera_scale_range: tuple

    def __post_init__(self):
        if self.keypoint_noise_std < 0:
            raise InvalidInputError("keypoint_noise_std must be >= 0")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise InvalidInputError("occlusion_prob must lie in [0, 1]")
        if not self.pose_spread > 0:
            raise InvalidInputError("pose_spread must be positive")
        lo, hi = self.camera_scale_range
        if not (0 < lo <= hi):
            raise InvalidInputError("camera_scale_range must satisfy 0 < low <= high")
        object.__setattr__(self, "camera_scale_range", (float(lo), float(hi)))


@dataclass(frozen=True)
class TaskRecord:
    """Ground truth, observation, and provenance of one fitting task."""

    id: int
    gt: FitParams
    obs: Observation
    domain: str


# Built-in profiles. "clean" and "hard" are the canonical domain-shift pair;
# "noiseless" drives the convergence and caching experiments; "moderate" is
# the ablation suite (low pose spread so 3D error is dominated by what the
# observations determine, plus enough noise and occlusion that refinement
# has real work left after the initializer).
CLEAN_PROFILE = DomainProfile(
    name="clean",
    keypoint_noise_std=0.005,
    occlusion_prob=0.0,
    pose_spread=0.15,
    camera_scale_range=(0.9, 1.1),
)
HARD_PROFILE = DomainProfile(
    name="hard",
    keypoint_noise_std=0.03,
    occlusion_prob=0.3,
    pose_spread=0.15,
    camera_scale_range=(0.9, 1.1),
)
NOISELESS_PROFILE = DomainProfile(
    name="noiseless",
    keypoint_noise_std=0.0,
    occlusion_prob=0.0,
    pose_spread=0.15,
    camera_scale_range=(0.9, 1.1),
)
MODERATE_PROFILE = DomainProfile(
    name="moderate",
    keypoint_noise_std=0.015,
    occlusion_prob=0.10,
    pose_spread=0.05,
    camera_scale_range=(0.9, 1.1),
)

BUILTIN_PROFILES = {
    p.name: p for p in (CLEAN_PROFILE, HARD_PROFILE, NOISELESS_PROFILE, MODERATE_PROFILE)
}


def _truncated_normal(rng, size, bound=3.0):
    """Componentwise standard normal conditioned on |x| <= bound."""
    out = rng.normal(0.0, 1.0, size)
    bad = np.abs(out) > bound
    while np.any(bad):
        out[bad] = rng.normal(0.0, 1.0, int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def sample_task(tree, profile, rng, task_id=0):
    """Draw one task: ground-truth parameters plus their noisy observation.

    Pose components are N(0, pose_spread^2), shape is a truncated standard
    normal on [-3, 3], the camera scale is uniform over the profile range
    and translations N(0, 0.1^2). Keypoints are the projected ground-truth
    joints plus isotropic Gaussian noise; with probability
    ``occlusion_prob`` a keypoint's weight drops to Uniform(0, 0.2).
    """
    J = tree.joint_count
    beta = None
    for _ in range(100):
        candidate = _truncated_normal(rng, NUM_SHAPE_COEFFS)
        try:
            bone_lengths(tree, candidate)
        except DegenerateShapeError:
            continue
        beta = candidate
        break
    if beta is None:
        raise DegenerateShapeError("could not sample a valid shape in 100 attempts")

    theta = rng.normal(0.0, profile.pose_spread, 3 * J)
    lo, hi = profile.camera_scale_range
    camera = np.array([rng.uniform(lo, hi), rng.normal(0.0, 0.1), rng.normal(0.0, 0.1)])
    gt = FitParams(theta=theta, beta=beta, camera=camera)

    keypoints = project(camera, forward_kinematics(tree, gt))
    keypoints = keypoints + rng.normal(0.0, profile.keypoint_noise_std, (J, 2))

    while True:
        weights = np.ones(J)
        occluded = rng.random(J) < profile.occlusion_prob
        weights[occluded] = rng.uniform(0.0, 0.2, int(occluded.sum()))
        if np.any(weights > 0):
            break

    obs = Observation(keypoints=keypoints, weights=weights)
    return TaskRecord(id=task_id, gt=gt, obs=obs, domain=profile.name)


def generate_dataset(tree, profile, count, rng):
    """``count`` independent tasks with sequential ids 0..count-1."""
    if count < 1:
        raise InvalidInputError("count must be >= 1")
    return [sample_task(tree, profile, rng, task_id=i) for i in range(count)]


def domain_pair(tree, source, target, counts, rng):
    """(train set from source, test set from target)."""
    n_train, n_test = counts
    train = generate_dataset(tree, source, n_train, rng)
    test = generate_dataset(tree, target, n_test, rng)
    return train, test


def reobserve(tree, task, profile, rng):
    """New observation of the same ground truth under another profile.

    Used by the domain-shift protocol so that source and target
    evaluations share identical poses and the degradation measurement is
    paired.
    """
    J = tree.joint_count
    keypoints = project(task.gt.camera, forward_kinematics(tree, task.gt))
    keypoints = keypoints + rng.normal(0.0, profile.keypoint_noise_std, (J, 2))
    while True:
        weights = np.ones(J)
        occluded = rng.random(J) < profile.occlusion_prob
        weights[occluded] = rng.uniform(0.0, 0.2, int(occluded.sum()))
        if np.any(weights > 0):
            break
    obs = Observation(keypoints=keypoints, weights=weights)
    return TaskRecord(id=task.id, gt=task.gt, obs=obs, domain=profile.name)


def task_to_json_dict(task):
    return {
        "id": task.id,
        "domain": task.domain,
        "gt": {
            "theta": task.gt.theta.tolist(),
            "beta": task.gt.beta.tolist(),
            "camera": task.gt.camera.tolist(),
        },
        "obs": {
            "keypoints": task.obs.keypoints.tolist(),
            "weights": task.obs.weights.tolist(),
        },
    }


def task_from_json_dict(doc):
    try:
        gt = FitParams(
            theta=np.asarray(doc["gt"]["theta"]),
            beta=np.asarray(doc["gt"]["beta"]),
            camera=np.asarray(doc["gt"]["camera"]),
        )
        obs = Observation(
            keypoints=np.asarray(doc["obs"]["keypoints"]),
            weights=np.asarray(doc["obs"]["weights"]),
        )
        return TaskRecord(id=int(doc["id"]), gt=gt, obs=obs, domain=doc["domain"])
    except KeyError as exc:
        raise InvalidInputError(f"task document missing field {exc}") from exc


def write_tasks(path, tasks):
    """Line-delimited JSON, one task per line."""
    with open(path, "w") as fh:
        for task in tasks:
            fh.write(json.dumps(task_to_json_dict(task)))
            fh.write("\n")


def read_tasks(path):
    tasks = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                tasks.append(task_from_json_dict(json.loads(line)))
    return tasks
