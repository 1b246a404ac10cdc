"""One refinement run in detail: energy descent, the shrinking active set,
and the per-parameter uncertainty left at the end.

Run:  python demos/03_adaptive_refinement.py
"""

import numpy as np

from metafit import (
    EnergyConfig,
    FitParams,
    OptimizerConfig,
    default_tree,
    energy,
    forward_kinematics,
    mpjpe,
    refine,
    sample_task,
)
from metafit.tasks import NOISELESS_PROFILE

tree = default_tree()
rng = np.random.default_rng(4)
task = sample_task(tree, NOISELESS_PROFILE, rng, task_id=0)
init = FitParams(theta=task.gt.theta + rng.normal(0.0, 0.05, 72),
                 beta=task.gt.beta, camera=task.gt.camera)

ecfg = EnergyConfig(lambda_pose=0.0, lambda_shape=0.0)
ocfg = OptimizerConfig()
e0 = energy(tree, init, task.obs, ecfg)
result = refine(tree, init, task.obs, ecfg, ocfg, np.random.default_rng(5))

print(f"initial energy {e0:.4f}")
print(f"{'iter':>4} {'energy':>10} {'mean sigma':>11} {'active':>7} {'step norm':>10}")
for t in result.trace:
    print(f"{t.t:>4} {t.energy:>10.4f} {t.mean_sigma:>11.4f} {t.active_count:>7} "
          f"{t.update_norm:>10.4f}")
print(f"stopped: {result.stop_reason} after {result.iterations_used} iterations")
print(f"energy reduced to {result.trace[-1].energy / e0:.1%} of its initial value")

gt_joints = forward_kinematics(tree, task.gt)
print(f"mpjpe: init {mpjpe(forward_kinematics(tree, init), gt_joints):.4f} -> "
      f"final {mpjpe(forward_kinematics(tree, result.params), gt_joints):.4f}")

# Which parameters stay uncertain? The ones whose keypoints barely move:
# the distal stub joints that selective caching froze right away.
u = result.uncertainty
order = np.argsort(u)[::-1]
print("\nhighest-uncertainty parameters:")
for k in order[:6]:
    joint = tree.names[k // 3] if k < 72 else "camera"
    comp = "xyz"[k % 3] if k < 72 else ["s", "tx", "ty"][k - 72]
    print(f"  sigma={u[k]:.4f}  {joint}.{comp}")
print("lowest:")
for k in order[-3:]:
    joint = tree.names[k // 3] if k < 72 else "camera"
    comp = "xyz"[k % 3] if k < 72 else ["s", "tx", "ty"][k - 72]
    print(f"  sigma={u[k]:.4f}  {joint}.{comp}")
