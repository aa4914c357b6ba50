"""Recover a camera from 2D-3D correspondences, then score pose uncertainty.

Run with ``python3 demos/pnp_recovery.py``.
"""
import numpy as np

from posefree.camera import Intrinsics, look_at, rotation_error
from posefree.pnp import Correspondences, PnPOptions, mc_pose_loss, solve

rng = np.random.default_rng(0)
intr = Intrinsics.default(64)

# a camera on a sphere of radius 2.8 looking at the origin
pose = look_at(np.array([1.5, -0.8, 2.2]))
points = rng.uniform(-0.7, 0.7, (64, 3))
X = points @ pose.R.T + pose.t
pixels = np.stack([intr.fx * X[:, 0] / X[:, 2] + intr.cx, intr.fy * X[:, 1] / X[:, 2] + intr.cy], 1)

res = solve(Correspondences(points, pixels, np.ones(64)), intr)
print("noiseless solve: rotation error %.2e deg, translation error %.2e, %d LM iterations"
      % (rotation_error(res.pose.R, pose.R), np.linalg.norm(res.pose.t - pose.t), res.iterations))

# with pixel noise the solution moves and the pose posterior gets wider
noisy = pixels + rng.normal(0, 1.0, pixels.shape)
res = solve(Correspondences(points, noisy, np.ones(64)), intr)
print("1 px noise:      rotation error %.3f deg" % rotation_error(res.pose.R, pose.R))

# Monte-Carlo pose loss: reprojection cost at the truth plus the log partition
# function estimated by adaptive importance sampling.  Smaller weights mean a
# flatter posterior, hence a larger integral.
for scale in (0.2, 0.05, 0.01):
    loss, samples, diag = mc_pose_loss(points, np.full(64, scale), noisy, intr, pose, PnPOptions(seed=1))
    print("weights %.2f: loss %8.3f  log-integral %8.3f  effective samples %.0f"
          % (scale, float(loss.data), diag.log_integral, diag.ess))
