"""Deterministic problem instances shared by the frozen-oracle generator and the tests.

Only numpy is used here so that instance construction does not depend on the
code under test.
"""
from __future__ import annotations

import numpy as np


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def mlp_instance(seed: int) -> dict:
    rng = np.random.default_rng([seed, 101])
    return {
        "x": rng.normal(size=(5, 4)),
        "W1": rng.normal(size=(4, 8)) * 0.5, "b1": rng.normal(size=8) * 0.1,
        "W2": rng.normal(size=(8, 8)) * 0.4, "b2": rng.normal(size=8) * 0.1,
        "W3": rng.normal(size=(8, 1)) * 0.4, "b3": rng.normal(size=1) * 0.1,
    }


def projection_instance(seed: int) -> dict:
    rng = np.random.default_rng([seed, 102])
    R = random_rotation(rng)
    t = np.array([rng.normal() * 0.3, rng.normal() * 0.3, rng.uniform(3.0, 5.0)])
    f = rng.uniform(50, 200, 2)
    c = rng.uniform(20, 100, 2)
    p = rng.uniform(-1, 1, 3)
    return {"R": R, "t": t, "fx": f[0], "fy": f[1], "cx": c[0], "cy": c[1], "p": p}


def quaternion_pair(seed: int):
    rng = np.random.default_rng([seed, 103])
    qa = rng.normal(size=4)
    qb = rng.normal(size=4)
    return qa / np.linalg.norm(qa), qb / np.linalg.norm(qb)


def render_instance(seed: int, K: int = 16) -> dict:
    rng = np.random.default_rng([seed, 104])
    return {"sigma": rng.exponential(2.0, K), "rgb": rng.uniform(0, 1, (K, 3)),
            "points": rng.uniform(-1, 1, (K, 3)), "delta": float(rng.uniform(0.02, 0.2))}


def image_pair(seed: int, size=(32, 40)) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, 105])
    a = rng.uniform(0, 1, size + (3,))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    return a, b


def pnp_1dof_instance(seed: int) -> dict:
    """Look-at camera, 16 object points, noisy pixels; the family rotates about the camera y axis."""
    rng = np.random.default_rng([seed, 106])
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    center = d * rng.uniform(2.4, 3.0)
    fwd = -center / np.linalg.norm(center)
    right = np.cross(fwd, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    t = -R @ center
    pts = rng.uniform(-0.6, 0.6, (16, 3))
    f, c = 76.8, 32.0
    X = pts @ R.T + t
    pix = np.stack([f * X[:, 0] / X[:, 2] + c, f * X[:, 1] / X[:, 2] + c], 1)
    pix += rng.normal(0, 0.7, pix.shape)
    w = rng.uniform(0.02, 0.08, 16)
    return {"R": R, "t": t, "points": pts, "pixels": pix, "weights": w, "f": f, "c": c, "size": 64}
