"""Triplane radiance field: three feature planes plus a shared decoder MLP.

The XY plane is indexed by (x, y), XZ by (x, z) and YZ by (y, z); the first
coordinate of each pair runs along the plane width.  The field lives in the
fixed box [-1, 1]^3.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import MLP, Module, param

PLANE_NAMES = ("plane_xy", "plane_xz", "plane_yz")
_PLANE_AXES = ((0, 1), (0, 2), (1, 2))


@dataclass
class Triplane:
    """Three (H, W, C) planes; values may be Tensors (differentiable) or arrays."""

    xy: Tensor
    xz: Tensor
    yz: Tensor

    def __post_init__(self):
        self.xy, self.xz, self.yz = (ad._as_tensor(p) for p in (self.xy, self.xz, self.yz))
        shapes = {p.shape for p in self.planes}
        if len(shapes) != 1 or len(self.xy.shape) != 3:
            raise ValueError(f"triplane planes must share one (H, W, C) shape, got {[p.shape for p in self.planes]}")

    @property
    def planes(self) -> tuple[Tensor, Tensor, Tensor]:
        return (self.xy, self.xz, self.yz)

    @property
    def shape(self):
        return self.xy.shape

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in zip(PLANE_NAMES, self.planes)}

    @classmethod
    def from_arrays(cls, d) -> "Triplane":
        return cls(*(Tensor(np.asarray(d[n])) for n in PLANE_NAMES))

    @classmethod
    def constant(cls, H, W, C, value) -> "Triplane":
        return cls(*(Tensor(np.full((H, W, C), float(value))) for _ in range(3)))


def sample_features(tri: Triplane, x) -> Tensor:
    """Concatenated bilinear samples of the three planes at (P, 3) points."""
    x = ad._as_tensor(x, tri.xy)
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, 3)
    feats = []
    for plane, (a, b) in zip(tri.planes, _PLANE_AXES):
        feats.append(ad.grid_sample(plane, ad.concat([x[:, a:a + 1], x[:, b:b + 1]], axis=1)))
    out = ad.concat(feats, axis=1)
    return out.reshape(-1) if squeeze else out


class NerfDecoder(Module):
    """Maps triplane features to density and color.

    ``density_gain`` multiplies the raw density output before softplus.  It
    is a fixed reparameterization of the last layer so opaque densities
    (hundreds per scene unit) are reachable at ordinary learning rates.
    """

    def __init__(self, feat_dim, width=64, layers=5, rng=None, dtype=np.float64, density_gain=1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.mlp = MLP(feat_dim, width, 4, layers, rng, dtype, act="relu")
        self.density_gain = float(density_gain)
        self.feat_dim = feat_dim

    def raw(self, feat) -> Tensor:
        return self.mlp(feat)

    def __call__(self, feat):
        return decode(self, feat)


def decode(dec: NerfDecoder, feat):
    """Return ``(sigma, rgb)`` with sigma = softplus(logit), rgb = sigmoid(logits)."""
    feat = ad._as_tensor(feat)
    if feat.shape[-1] != dec.feat_dim:
        raise ValueError(f"decode: expected {dec.feat_dim} features, got {feat.shape[-1]}")
    squeeze = feat.ndim == 1
    if squeeze:
        feat = feat.reshape(1, -1)
    raw = dec.raw(feat)
    logit = raw[:, 0]
    if dec.density_gain != 1.0:
        logit = logit * dec.density_gain
    sigma = ad.softplus(logit)
    rgb = ad.sigmoid(raw[:, 1:4])
    if squeeze:
        return sigma.reshape(()), rgb.reshape(3)
    return sigma, rgb


class TriplaneUpsampler(Module):
    """Per-plane upsampling by 1 (reshape only) or 2 (2x2 stride-2 transposed conv).

    The weight has shape (C_in, 2, 2, C_out): every input cell writes one
    2x2 output block, so the transposed convolution is a matmul plus a
    reshuffle.
    """

    def __init__(self, channels_in, channels_out, factor, rng=None, dtype=np.float64):
        if factor not in (1, 2):
            raise ValueError(f"unsupported triplane upsample factor {factor}; use 1 or 2")
        self.factor = factor
        self.c_out = channels_out
        if factor == 2:
            rng = rng if rng is not None else np.random.default_rng(0)
            self.weight = param(rng.normal(0, np.sqrt(1.0 / channels_in), (channels_in, 2, 2, channels_out)), dtype)
            self.bias = param(np.zeros(channels_out), dtype)
        elif channels_in != channels_out:
            raise ValueError("factor 1 keeps the channel count")

    def __call__(self, grid) -> Tensor:
        """(3, h, w, C_in) -> (3, h*f, w*f, C_out)."""
        return upsample(grid, self.factor, getattr(self, "weight", None), getattr(self, "bias", None))


def upsample(grid, factor, weight=None, bias=None) -> Tensor:
    grid = ad._as_tensor(grid)
    if factor == 1:
        return grid
    if factor != 2:
        raise ValueError(f"unsupported triplane upsample factor {factor}; use 1 or 2")
    P, h, w, c_in = grid.shape
    c_out = weight.shape[-1]
    y = ad.matmul(grid.reshape(P * h * w, c_in), ad._as_tensor(weight).reshape(c_in, 4 * c_out))
    y = y.reshape(P, h, w, 2, 2, c_out).transpose(0, 1, 3, 2, 4, 5).reshape(P, 2 * h, 2 * w, c_out)
    if bias is not None:
        y = y + bias
    return y


def triplane_from_grid(grid: Tensor) -> Triplane:
    return Triplane(grid[0], grid[1], grid[2])
