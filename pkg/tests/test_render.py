import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles.instances import render_instance
from posefree import autodiff as ad
from posefree.autodiff import Tensor
from posefree.camera import Intrinsics, Ray, look_at, pixel_centers
from posefree.render import (camera_rays, composite, march, march_rays, render_crop, render_image, render_pixel,
                             TriplaneField, render_rays, render_samples)
from posefree.synth import AnalyticField, Primitive, SceneSpec
from posefree.triplane import NerfDecoder, Triplane

FROZEN = json.load(open(os.path.join(os.path.dirname(__file__), "oracles", "frozen.json")))


def random_dirs(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def const_field(sigma, rgb=(0.2, 0.4, 0.6)):
    def f(x):
        n = x.shape[0]
        return Tensor(np.full(n, float(sigma))), Tensor(np.tile(np.asarray(rgb, float), (n, 1)))
    return f


def test_slab_example():
    s = march(Ray(np.array([0.0, 0.0, -3.0]), np.array([0.0, 0.0, 1.0]), (0.0, 0.0)), 8)
    assert s.valid and s.t_near == pytest.approx(2.0) and s.t_far == pytest.approx(4.0)
    assert s.deltas == pytest.approx(2.0 / 8)
    np.testing.assert_allclose(s.points[:, 2], -1 + (np.arange(8) + 0.5) * 0.25)


def test_missing_ray_is_invalid():
    s = march(Ray(np.array([0.0, 3.0, -3.0]), np.array([0.0, 0.0, 1.0]), (0.0, 0.0)), 8)
    assert not s.valid


def test_k_below_two_rejected():
    with pytest.raises(ValueError):
        march_rays(np.zeros((1, 3)), np.ones((1, 3)), 1)


def test_random_rays_stay_inside_box():
    rng = np.random.default_rng(0)
    o = rng.uniform(-3, 3, (1000, 3))
    s = march_rays(o, random_dirs(rng, 1000), 16)
    assert s.valid.any()
    pts = s.points[s.valid]
    assert np.all(pts >= -1.0) and np.all(pts <= 1.0)
    assert np.all(s.deltas[s.valid] > 0)


def test_empty_space_is_white():
    s = march_rays(np.array([[0.0, 0.0, -3.0]]), np.array([[0.0, 0.0, 1.0]]), 16)
    out = render_samples(const_field(0.0), s)
    np.testing.assert_allclose(out.color.data, 1.0)
    assert out.tbar.data[0] == 1.0
    assert np.all(out.weights.data == 0.0)


def test_opaque_front_sample_takes_over():
    s = march_rays(np.array([[0.0, 0.0, -3.0]]), np.array([[0.0, 0.0, 1.0]]), 8)
    sigma = np.zeros((1, 8))
    sigma[0, 0] = 1e4
    rgb = np.random.default_rng(1).uniform(size=(1, 8, 3))
    out = composite(sigma, rgb, s.points, s.deltas, s.valid)
    np.testing.assert_allclose(out.color.data[0], rgb[0, 0], atol=1e-9)
    np.testing.assert_allclose(out.xbar.data[0], s.points[0, 0], atol=1e-9)
    assert out.tbar.data[0] < 1e-100


def test_homogeneous_medium_transmittance():
    K, delta, sigma = 16, 0.1, 1.7
    pts = np.zeros((1, K, 3))
    out = composite(np.full((1, K), sigma), np.full((1, K, 3), 0.3), pts, np.array([delta]), np.array([True]))
    assert out.tbar.data[0] == pytest.approx(np.exp(-sigma * K * delta), rel=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_composite_matches_frozen_loop(seed):
    s = render_instance(seed)
    ref = FROZEN["composite"][str(seed)]
    out = composite(s["sigma"][None], s["rgb"][None], s["points"][None], np.array([s["delta"]]), np.array([True]))
    np.testing.assert_allclose(out.color.data[0], ref["color"], atol=1e-9)
    np.testing.assert_allclose(out.xbar.data[0], ref["xbar"], atol=1e-9)
    assert out.tbar.data[0] == pytest.approx(ref["tbar"], abs=1e-9)


def test_invalid_ray_renders_white():
    out = composite(np.full((1, 4), 5.0), np.zeros((1, 4, 3)), np.zeros((1, 4, 3)), np.array([0.3]),
                    np.array([False]))
    np.testing.assert_allclose(out.color.data, 1.0)
    assert out.tbar.data[0] == 1.0 and not out.valid[0]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000), st.floats(0.0, 60.0))
def test_weights_conserve_and_transmittance_decreases(seed, scale):
    rng = np.random.default_rng(seed)
    K = 24
    sigma = rng.exponential(1.0, (3, K)) * scale
    deltas = rng.uniform(0.01, 0.2, 3)
    out = composite(sigma, rng.uniform(size=(3, K, 3)), rng.uniform(-1, 1, (3, K, 3)), deltas, np.ones(3, bool))
    w = out.weights.data
    np.testing.assert_allclose(w.sum(axis=1) + out.tbar.data, 1.0, atol=1e-6)
    tau = 1.0 - np.cumsum(w, axis=1)
    assert np.all(np.diff(tau, axis=1) <= 1e-12)
    assert np.all(w >= 0)


def test_vanishing_density_limit():
    s = march_rays(np.array([[0.2, 0.1, -3.0]]), np.array([[0.0, 0.0, 1.0]]), 32)
    out = render_samples(const_field(1e-9), s)
    np.testing.assert_allclose(out.color.data, 1.0, atol=1e-8)
    assert np.abs(out.xbar.data).max() < 1e-8


def test_composite_gradients():
    rng = np.random.default_rng(2)
    K = 6
    pts, d, v = rng.uniform(-1, 1, (2, K, 3)), np.array([0.2, 0.3]), np.ones(2, bool)
    logit_s, logit_c = rng.normal(size=(2, K)), rng.normal(size=(2, K, 3))
    w = Tensor(rng.normal(size=(2, 3)))
    assert ad.grad_check(lambda t: ad.sum(composite(ad.softplus(t), ad.sigmoid(Tensor(logit_c)), pts, d, v).color * w),
                         logit_s) < 1e-4
    assert ad.grad_check(lambda t: ad.sum(composite(ad.softplus(Tensor(logit_s)), ad.sigmoid(t), pts, d, v).color * w),
                         logit_c) < 1e-4
    assert ad.grad_check(lambda t: ad.sum(composite(ad.softplus(t), Tensor(logit_c), pts, d, v).xbar * w),
                         logit_s) < 1e-4


def small_field(seed):
    rng = np.random.default_rng(seed)
    tri = Triplane(*(Tensor(rng.normal(size=(4, 4, 2))) for _ in range(3)))
    return tri, NerfDecoder(6, width=8, layers=2, rng=rng)


def test_zero_density_crop_is_white():
    pose, k = look_at([0.0, 0.0, -3.0]), Intrinsics.default(16)
    out = render_crop(None, None, pose, k, (2, 3, 4, 5), K=8, field=const_field(0.0))
    assert out.image.shape == (4, 5, 3)
    np.testing.assert_array_equal(out.image.data, 1.0)


def test_full_crop_matches_per_pixel_render():
    tri, dec = small_field(3)
    pose, k = look_at([0.4, -0.5, -2.8]), Intrinsics.default(8)
    crop = render_crop(tri, dec, pose, k, (0, 0, 8, 8), K=8)
    uv = pixel_centers(8, 8)
    for (i, j) in [(0, 0), (3, 5), (7, 7), (4, 1)]:
        o, d = camera_rays(pose, k, uv[i, j])
        c, x, t, _ = render_pixel(tri, dec, march(Ray(o[0], d[0], tuple(uv[i, j])), 8))
        np.testing.assert_allclose(crop.image.data[i, j], c.data, atol=1e-12)
        np.testing.assert_allclose(crop.xbar.data[i, j], x.data, atol=1e-12)
        assert crop.tbar.data[i, j] == pytest.approx(float(t.data), abs=1e-12)


def test_crop_out_of_bounds_rejected():
    with pytest.raises(ValueError, match="outside"):
        render_crop(None, None, look_at([0.0, 0.0, -3.0]), Intrinsics.default(16), (10, 0, 8, 8), field=const_field(0))


def test_chunked_render_is_identical():
    tri, dec = small_field(4)
    rng = np.random.default_rng(5)
    o = np.tile([[0.0, 0.0, -3.0]], (50, 1))
    d = random_dirs(rng, 50) * 0.2 + np.array([0, 0, 1.0])
    a = render_rays(TriplaneField(tri, dec), o, d, 8)
    b = render_rays(TriplaneField(tri, dec), o, d, 8, chunk=7)
    np.testing.assert_array_equal(a.color.data, b.color.data)


def test_opaque_sphere_silhouette():
    r = 0.6
    field = AnalyticField(SceneSpec([Primitive("sphere", (0.0, 0.0, 0.0), (r,), (1.0, 0.0, 0.0), 400.0)]),
                          sharpness=1000.0)
    pose, k = look_at([0.5, -1.0, -2.6]), Intrinsics.default(64)
    img = render_image(field, pose, k, K=64)
    o, d = camera_rays(pose, k, pixel_centers(64, 64).reshape(-1, 2))
    # distance from the sphere center to each ray line
    along = -(o * d).sum(axis=1)
    dist = np.linalg.norm(o + along[:, None] * d, axis=1)
    truth = (dist < r).reshape(64, 64)
    pred = img[..., 1] < 0.5
    assert truth.sum() > 200
    assert (pred == truth).mean() >= 0.99
