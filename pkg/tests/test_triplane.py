import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posefree import autodiff as ad
from posefree.autodiff import Tensor
from posefree.model import ReconstructionModel, preset
from posefree.triplane import (NerfDecoder, Triplane, TriplaneUpsampler, decode, sample_features, upsample)
from posefree.render import march_rays, render_samples, TriplaneField


def random_triplane(seed, H=5, W=6, C=2):
    rng = np.random.default_rng(seed)
    return Triplane(*(Tensor(rng.normal(size=(H, W, C))) for _ in range(3)))


def node_coord(i, n):
    return -1.0 + 2.0 * i / (n - 1)


def test_constant_planes_give_constant_features():
    tri = Triplane.constant(4, 4, 3, 0.25)
    x = np.random.default_rng(0).uniform(-1, 1, (20, 3))
    np.testing.assert_allclose(sample_features(tri, x).data, 0.25, atol=1e-15)


def test_grid_node_returns_node_features():
    # square planes so every coordinate lands on a node of each plane it feeds
    tri = random_triplane(1, H=5, W=5)
    i, j, k = 1, 3, 4
    x = np.array([node_coord(i, 5), node_coord(j, 5), node_coord(k, 5)])
    f = sample_features(tri, x).data
    np.testing.assert_allclose(f[0:2], tri.xy.data[j, i], atol=1e-12)
    np.testing.assert_allclose(f[2:4], tri.xz.data[k, i], atol=1e-12)
    np.testing.assert_allclose(f[4:6], tri.yz.data[k, j], atol=1e-12)


def test_linear_planes_are_reproduced_exactly():
    H, W = 7, 9
    u = np.linspace(-1, 1, W)[None, :, None]
    v = np.linspace(-1, 1, H)[:, None, None]
    plane = np.concatenate(np.broadcast_arrays(2.0 * u - 0.5 * v + 0.1, 3.0 * v + 0 * u), axis=2)
    tri = Triplane(plane, plane * 2.0, plane * -1.0)
    x = np.random.default_rng(2).uniform(-1, 1, (100, 3))
    f = sample_features(tri, x).data
    for s, (a, b) in zip((1.0, 2.0, -1.0), ((0, 1), (0, 2), (1, 2))):
        expect = s * np.stack([2.0 * x[:, a] - 0.5 * x[:, b] + 0.1, 3.0 * x[:, b]], axis=1)
        idx = {(0, 1): 0, (0, 2): 2, (1, 2): 4}[(a, b)]
        np.testing.assert_allclose(f[:, idx:idx + 2], expect, atol=1e-9)


def test_points_outside_box_clamp_to_edge():
    tri = random_triplane(3)
    inside = sample_features(tri, np.array([1.0, -1.0, 0.3])).data
    outside = sample_features(tri, np.array([1.7, -4.0, 0.3])).data
    np.testing.assert_allclose(inside, outside, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.floats(-0.9, 0.9), st.floats(-0.9, 0.9))
def test_features_continuous_across_cell_boundaries(seed, i, y, z):
    tri = random_triplane(seed)
    xb = node_coord(i, tri.shape[1])
    a = sample_features(tri, np.array([xb - 1e-9, y, z])).data
    b = sample_features(tri, np.array([xb + 1e-9, y, z])).data
    assert np.max(np.abs(a - b)) < 1e-6


def test_feature_gradients_wrt_planes_and_points():
    tri = random_triplane(4)
    x = np.random.default_rng(5).uniform(-0.95, 0.95, (6, 3))
    w = Tensor(np.random.default_rng(6).normal(size=(6, 6)))
    g = ad.grad_check(lambda t: ad.sum(sample_features(Triplane(t, tri.xz, tri.yz), x) * w), tri.xy.data)
    assert g < 1e-6
    assert ad.grad_check(lambda t: ad.sum(sample_features(tri, t) * w), x) < 1e-6


def zero_decoder(feat_dim=6):
    dec = NerfDecoder(feat_dim)
    for p in dec.parameters():
        p.data[...] = 0.0
    return dec


def test_zero_decoder_outputs():
    sigma, rgb = decode(zero_decoder(), np.ones(6))
    assert float(sigma.data) == pytest.approx(np.log(2.0), abs=1e-12)
    np.testing.assert_allclose(rgb.data, 0.5, atol=1e-15)


def test_very_negative_density_logit_vanishes():
    dec = zero_decoder()
    dec.mlp.layers[-1].bias.data[0] = -800.0
    sigma, _ = decode(dec, np.ones(6))
    assert 0.0 <= float(sigma.data) < 1e-300


def test_decode_rejects_wrong_feature_length():
    with pytest.raises(ValueError, match="features"):
        decode(NerfDecoder(6), np.ones(5))


def test_decoder_weight_gradients():
    dec = NerfDecoder(6, width=8, layers=3, rng=np.random.default_rng(7))
    feat = Tensor(np.random.default_rng(8).normal(size=(4, 6)))
    for name, p in dec.named_parameters():
        assert ad.grad_check(lambda t: _decode_with(dec, name, t, feat), p.data.copy()) < 1e-5, name


def _decode_with(dec, name, t, feat):
    owner, attr = dec, name.split(".")
    for a in attr[:-1]:
        owner = owner[int(a)] if a.isdigit() else getattr(owner, a)
    old = getattr(owner, attr[-1])
    setattr(owner, attr[-1], t)
    try:
        sigma, rgb = decode(dec, feat)
        return ad.sum(sigma * 0.3) + ad.sum(rgb * rgb)
    finally:
        setattr(owner, attr[-1], old)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 30.0))
def test_decode_ranges(seed, scale):
    rng = np.random.default_rng(seed)
    dec = NerfDecoder(6, width=8, layers=2, rng=rng)
    sigma, rgb = decode(dec, rng.normal(size=(10, 6)) * scale)
    assert np.all(sigma.data >= 0)
    assert np.all((rgb.data >= 0) & (rgb.data <= 1))
    assert np.all(np.isfinite(rgb.data))


def test_upsample_factor_one_is_identity():
    g = np.random.default_rng(9).normal(size=(3, 4, 4, 2))
    np.testing.assert_array_equal(upsample(g, 1).data, g)


def test_upsample_one_hot_spreads_into_block():
    g = np.zeros((3, 3, 3, 1))
    g[1, 2, 0, 0] = 1.0
    out = upsample(g, 2, weight=np.full((1, 2, 2, 1), 0.25)).data
    expect = np.zeros((3, 6, 6, 1))
    expect[1, 4:6, 0:2, 0] = 0.25
    np.testing.assert_array_equal(out, expect)


def test_upsample_rejects_other_factors():
    with pytest.raises(ValueError, match="factor"):
        upsample(np.zeros((3, 2, 2, 1)), 3)
    with pytest.raises(ValueError, match="factor"):
        TriplaneUpsampler(4, 4, 4)


def test_full_size_upsampled_shape():
    up = TriplaneUpsampler(32, 32, 2)
    assert up(np.zeros((3, 32, 32, 32))).shape == (3, 64, 64, 32)
    assert preset("L").triplane_resolution == 64


def test_rendered_color_gradient_wrt_planes():
    tri = random_triplane(10, H=4, W=4, C=2)
    dec = NerfDecoder(6, width=8, layers=2, rng=np.random.default_rng(11))
    rng = np.random.default_rng(12)
    o = np.array([[0.1, -0.2, -3.0], [0.0, 0.3, -3.0]])
    d = np.array([[0.05, 0.02, 1.0], [-0.1, 0.0, 1.0]])
    s = march_rays(o, d / np.linalg.norm(d, axis=1, keepdims=True), 8)
    w = Tensor(rng.normal(size=(2, 3)))

    def f(t):
        out = render_samples(TriplaneField(Triplane(tri.xy, t, tri.yz), dec), s)
        return ad.sum(out.color * w)
    assert ad.grad_check(f, tri.xz.data) < 1e-4
