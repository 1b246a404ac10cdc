"""Train the keypoint-to-parameters initializer with simulated test-time
refinement in the loop, then watch refinement polish its predictions.

Run:  python demos/04_meta_training.py   (about a minute)
"""

import numpy as np

from metafit import (
    EnergyConfig,
    MetaConfig,
    OptimizerConfig,
    default_tree,
    forward_kinematics,
    init_regressor,
    meta_train,
    mpjpe,
    refine,
    regress,
)
from metafit.tasks import MODERATE_PROFILE, generate_dataset

tree = default_tree()
ocfg = OptimizerConfig()

train = generate_dataset(tree, MODERATE_PROFILE, 200, np.random.default_rng(1))
held = generate_dataset(tree, MODERATE_PROFILE, 40, np.random.default_rng(2))

reg = init_regressor(tree, np.random.default_rng(3))
mcfg = MetaConfig(inner_steps=3, outer_lr=3e-3, epochs=8, batch_size=32)
print(f"meta-training: {mcfg.epochs} epochs of {len(train)} tasks, "
      f"{mcfg.inner_steps} simulated refinement steps per task")
reg, curve = meta_train(tree, reg, train, ocfg, mcfg, np.random.default_rng(4),
                        heldout=held)
print(f"{'epoch':>5} {'train loss':>11} {'heldout mpjpe':>14}")
for epoch, loss, err in curve.rows():
    print(f"{epoch:>5} {loss:>11.4f} {err:>14.4f}")

# The initializer alone vs the initializer plus refinement.
raw, refined = [], []
streams = np.random.default_rng(5).spawn(len(held))
for task, stream in zip(held, streams):
    init = regress(reg, task.obs)
    gt_joints = forward_kinematics(tree, task.gt)
    raw.append(mpjpe(forward_kinematics(tree, init), gt_joints))
    result = refine(tree, init, task.obs, EnergyConfig(), ocfg, stream)
    refined.append(mpjpe(forward_kinematics(tree, result.params), gt_joints))
print(f"\nheld-out median mpjpe: raw initializer {np.median(raw):.4f} -> "
      f"with refinement {np.median(refined):.4f}")
