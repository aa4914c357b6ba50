"""Regenerate ``frozen.json`` from independent computational routes.

    python3 tests/oracles/generate.py

Routes: torch autograd for MLP gradients; explicit 3x4 homogeneous matrices
for projection; scipy rotations for angles; literal loops for compositing,
PSNR and losses; scikit-image for SSIM; dense 1-D quadrature for the pose
log-integral.  None of them import the package under test.
"""
from __future__ import annotations

import json
import os
import sys

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from oracles.instances import (image_pair, mlp_instance, pnp_1dof_instance, projection_instance,  # noqa: E402
                               quaternion_pair, render_instance)

OUT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "frozen.json")


def mlp_grads(seed):
    import torch
    inst = mlp_instance(seed)
    t = {k: torch.tensor(v, dtype=torch.float64, requires_grad=True) for k, v in inst.items()}
    h = torch.nn.functional.gelu(t["x"] @ t["W1"] + t["b1"])
    h = torch.nn.functional.gelu(h @ t["W2"] + t["b2"])
    y = h @ t["W3"] + t["b3"]
    loss = (y * y).sum()
    loss.backward()
    return {"loss": loss.item(), **{k: t[k].grad.numpy().tolist() for k in ("x", "W1", "W2", "W3", "b1")}}


def projection(seed):
    s = projection_instance(seed)
    K = np.array([[s["fx"], 0, s["cx"]], [0, s["fy"], s["cy"]], [0, 0, 1.0]])
    P = K @ np.hstack([s["R"], s["t"][:, None]])
    h = P @ np.append(s["p"], 1.0)
    return (h[:2] / h[2]).tolist()


def quaternion_angle(seed):
    from scipy.spatial.transform import Rotation
    qa, qb = quaternion_pair(seed)
    # scipy uses scalar-last quaternions
    ra = Rotation.from_quat(np.roll(qa, -1))
    rb = Rotation.from_quat(np.roll(qb, -1))
    return {"angle_deg": float(np.degrees((ra.inv() * rb).magnitude())),
            "Ra": ra.as_matrix().tolist(), "Rb": rb.as_matrix().tolist()}


def composite_loop(seed):
    s = render_instance(seed)
    T = 1.0
    C = np.zeros(3)
    x = np.zeros(3)
    for k in range(len(s["sigma"])):
        a = 1.0 - np.exp(-s["sigma"][k] * s["delta"])
        C += T * a * s["rgb"][k]
        x += T * a * s["points"][k]
        T *= np.exp(-s["sigma"][k] * s["delta"])
    return {"color": (C + T).tolist(), "xbar": x.tolist(), "tbar": T}


def psnr_loop(a, b):
    tot, n = 0.0, 0
    for v in np.nditer([a, b]):
        tot += (float(v[0]) - float(v[1])) ** 2
        n += 1
    return 10 * np.log10(1.0 / (tot / n))


def ssim_skimage(a, b):
    from skimage.metrics import structural_similarity
    return float(structural_similarity(a, b, channel_axis=2, data_range=1.0, gaussian_weights=True,
                                       sigma=1.5, use_sample_covariance=False, win_size=11))


def quadrature_log_integral(seed, nodes=10_000):
    from scipy.spatial.transform import Rotation
    from scipy.special import logsumexp
    s = pnp_1dof_instance(seed)
    w0 = Rotation.from_matrix(s["R"]).as_rotvec()
    lim = np.sqrt(max(np.pi ** 2 - w0[0] ** 2 - w0[2] ** 2, 0.0))
    grid = np.linspace(-lim, lim, nodes + 1)
    mids = 0.5 * (grid[1:] + grid[:-1])
    h = grid[1] - grid[0]
    W = np.repeat(w0[None], nodes, 0)
    W[:, 1] = mids
    Rs = Rotation.from_rotvec(W).as_matrix()
    X = np.einsum("nij,mj->nmi", Rs, s["points"]) + s["t"]
    Z = np.maximum(X[..., 2], 0.05)
    u = s["f"] * X[..., 0] / Z + s["c"]
    v = s["f"] * X[..., 1] / Z + s["c"]
    cost = 0.5 * np.sum(s["weights"] * ((u - s["pixels"][:, 0]) ** 2 + (v - s["pixels"][:, 1]) ** 2), axis=1)
    return float(logsumexp(-cost) + np.log(h))


def main():
    frozen = {
        "mlp_grads": {str(s): mlp_grads(s) for s in range(3)},
        "projection": {str(s): projection(s) for s in range(20)},
        "quaternion_angle": {str(s): quaternion_angle(s) for s in range(20)},
        "composite": {str(s): composite_loop(s) for s in range(10)},
        "psnr": {str(s): psnr_loop(*image_pair(s)) for s in range(10)},
        "ssim": {str(s): ssim_skimage(*image_pair(s)) for s in range(10)},
        "log_integral_1dof": {str(s): quadrature_log_integral(s) for s in range(20)},
    }
    with open(OUT, "w") as fh:
        json.dump(frozen, fh, indent=1)
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
