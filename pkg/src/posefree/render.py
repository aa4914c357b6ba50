"""Differentiable volume rendering of rays through the [-1, 1]^3 box.

Rays are sampled at the midpoints of K equal segments between the box entry
and exit.  Residual transmittance is composited onto a white background.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import Intrinsics, Pose, Ray, pixel_centers, pixel_directions
from .triplane import NerfDecoder, Triplane, decode, sample_features

BOX_MIN, BOX_MAX = -1.0, 1.0


@dataclass
class RaySamples:
    points: np.ndarray   # (..., K, 3)
    deltas: np.ndarray   # (...,) step size, 0 for rays that miss
    valid: np.ndarray    # (...,) bool
    t_near: np.ndarray
    t_far: np.ndarray

    @property
    def K(self) -> int:
        return self.points.shape[-2]


@dataclass
class RenderOutput:
    color: Tensor     # (R, 3), background composited
    xbar: Tensor      # (R, 3), unnormalized expected point
    tbar: Tensor      # (R,), final transmittance
    weights: Tensor   # (R, K)
    valid: np.ndarray  # (R,)


def intersect_box(origins, dirs):
    """Slab test; returns (t_near, t_far, hit) with t_near clipped at 0."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (BOX_MIN - origins) * inv
        t1 = (BOX_MAX - origins) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    # axis-parallel rays outside the slab never hit
    par = dirs == 0
    outside = par & ((origins < BOX_MIN) | (origins > BOX_MAX))
    t_near = np.maximum(lo.max(axis=-1), 0.0)
    t_far = hi.min(axis=-1)
    hit = (t_far > t_near) & ~outside.any(axis=-1)
    return t_near, t_far, hit


def march_rays(origins, dirs, K: int) -> RaySamples:
    if K < 2:
        raise ValueError("ray marching needs K >= 2 samples")
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    t_near, t_far, hit = intersect_box(origins, dirs)
    t_near = np.where(hit, t_near, 0.0)
    t_far = np.where(hit, t_far, 0.0)
    delta = (t_far - t_near) / K
    ts = t_near[..., None] + (np.arange(K) + 0.5) * delta[..., None]
    pts = origins[..., None, :] + ts[..., None] * dirs[..., None, :]
    # midpoints lie inside by construction; clip away round-off only
    pts = np.clip(pts, BOX_MIN, BOX_MAX)
    return RaySamples(pts, delta, hit, t_near, t_far)


def march(ray: Ray, K: int) -> RaySamples:
    s = march_rays(ray.origin[None], ray.direction[None], K)
    return RaySamples(s.points[0], s.deltas[0], bool(s.valid[0]), s.t_near[0], s.t_far[0])


def composite(sigma, rgb, points, deltas, valid) -> RenderOutput:
    """Front-to-back compositing of (R, K) densities and (R, K, 3) colors."""
    sigma = ad._as_tensor(sigma)
    rgb = ad._as_tensor(rgb, sigma)
    d = np.where(valid, deltas, 0.0).astype(sigma.dtype)[:, None]
    sd = sigma * d
    cs = ad.cumsum(sd, axis=1)
    t_before = ad.exp(-(cs - sd))                 # tau_{k-1}
    w = t_before * (1.0 - ad.exp(-sd))
    tbar = ad.exp(-cs[:, -1])
    color = ad.sum(w.reshape(*w.shape, 1) * rgb, axis=1) + tbar.reshape(-1, 1)
    xbar = ad.sum(w.reshape(*w.shape, 1) * Tensor(points.astype(sigma.dtype)), axis=1)
    return RenderOutput(color, xbar, tbar, w, np.asarray(valid))


class TriplaneField:
    """Callable field (P, 3) -> (sigma (P,), rgb (P, 3)) backed by a triplane."""

    def __init__(self, tri: Triplane, dec: NerfDecoder):
        self.tri, self.dec = tri, dec

    def __call__(self, x):
        return decode(self.dec, sample_features(self.tri, x))


def render_samples(field, samples: RaySamples, dtype=np.float64) -> RenderOutput:
    R, K = samples.points.shape[:2]
    pts = Tensor(samples.points.reshape(R * K, 3).astype(dtype))
    sigma, rgb = field(pts)
    return composite(sigma.reshape(R, K), rgb.reshape(R, K, 3),
                     samples.points, samples.deltas, samples.valid)


def render_rays(field, origins, dirs, K: int, dtype=np.float64, chunk=None) -> RenderOutput:
    """Render (R,) rays; ``chunk`` splits work for gradient-free evaluation."""
    samples = march_rays(origins, dirs, K)
    R = samples.points.shape[0]
    if chunk is None or R <= chunk:
        return render_samples(field, samples, dtype)
    parts = [render_samples(field, RaySamples(samples.points[i:i + chunk], samples.deltas[i:i + chunk],
                                              samples.valid[i:i + chunk], samples.t_near[i:i + chunk],
                                              samples.t_far[i:i + chunk]), dtype)
             for i in range(0, R, chunk)]
    return RenderOutput(ad.concat([p.color for p in parts]), ad.concat([p.xbar for p in parts]),
                        ad.concat([p.tbar for p in parts]), ad.concat([p.weights for p in parts]),
                        np.concatenate([p.valid for p in parts]))


def render_pixel(tri: Triplane, dec: NerfDecoder, samples: RaySamples):
    """Single-ray render: returns (color (3,), xbar (3,), tbar, weights (K,))."""
    s = RaySamples(np.asarray(samples.points)[None], np.atleast_1d(samples.deltas),
                   np.atleast_1d(samples.valid), np.atleast_1d(samples.t_near), np.atleast_1d(samples.t_far))
    out = render_samples(TriplaneField(tri, dec), s, tri.xy.dtype)
    return out.color[0], out.xbar[0], out.tbar[0], out.weights[0]


def camera_rays(pose: Pose, intr: Intrinsics, uv):
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    dirs = pixel_directions(pose, intr, uv)
    origins = np.broadcast_to(pose.center, dirs.shape)
    return origins, dirs


@dataclass
class CropRender:
    image: Tensor  # (h, w, 3)
    xbar: Tensor   # (h, w, 3)
    tbar: Tensor   # (h, w)
    valid: np.ndarray


def render_crop(tri, dec, pose: Pose, intr: Intrinsics, crop, K=64, field=None, dtype=None, chunk=None) -> CropRender:
    """Render the pixel centers of ``crop = (top, left, h, w)``.

    Pass ``field`` to render an arbitrary (P, 3) -> (sigma, rgb) callable
    instead of a triplane.
    """
    top, left, h, w = (int(v) for v in crop)
    if top < 0 or left < 0 or h <= 0 or w <= 0 or top + h > intr.height or left + w > intr.width:
        raise ValueError(f"crop {crop} is outside the {intr.height}x{intr.width} image")
    if field is None:
        field = TriplaneField(tri, dec)
        dtype = dtype or tri.xy.dtype
    dtype = dtype or np.float64
    o, d = camera_rays(pose, intr, pixel_centers(h, w, top, left))
    out = render_rays(field, o, d, K, dtype=dtype, chunk=chunk)
    return CropRender(out.color.reshape(h, w, 3), out.xbar.reshape(h, w, 3),
                      out.tbar.reshape(h, w), out.valid.reshape(h, w))


def render_image(field, pose: Pose, intr: Intrinsics, K=64, dtype=np.float64, chunk=4096) -> np.ndarray:
    """Gradient-free full-image render as an (H, W, 3) array."""
    with ad.no_grad():
        out = render_crop(None, None, pose, intr, (0, 0, intr.height, intr.width), K,
                          field=field, dtype=dtype, chunk=chunk)
    return out.image.data
