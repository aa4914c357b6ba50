"""Build a synthetic scene, render four views and save them next to an untrained model's guess.

Writes PNGs to ``demo_out/`` (or the directory given as the first argument).
"""
import os
import sys

import numpy as np

from posefree import autodiff as ad
from posefree.model import ModelConfig, ReconstructionModel
from posefree.render import TriplaneField, render_image
from posefree.synth import make_scene, save_png
from posefree.train import canonical_poses

out = sys.argv[1] if len(sys.argv) > 1 else "demo_out"
os.makedirs(out, exist_ok=True)

scene = make_scene(seed=0, index=0, views=4, min_angle_deg=45.0, size=64)
print("primitives:", [p.kind for p in scene.spec.primitives])
for i, img in enumerate(scene.images):
    save_png(os.path.join(out, f"view_{i}.png"), img)

# all poses expressed in the reference camera's orientation
poses = canonical_poses(scene.viewset.poses)
for i, p in enumerate(poses):
    print(f"view {i}: camera center {np.round(p.center, 3)}")

model = ReconstructionModel(ModelConfig())
with ad.no_grad():
    pred = model.forward(scene.images, scene.viewset.intrinsics)
field = TriplaneField(pred.triplane, model.decoder)
guess = render_image(field, poses[0], scene.viewset.intrinsics[0], K=32)
save_png(os.path.join(out, "untrained_view_0.png"), guess)
print("triplane planes", pred.triplane.shape, "points per view", pred.points.shape[1:])
print("wrote", len(scene.images) + 1, "images to", out)
