import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posefree import autodiff as ad
from posefree.camera import Intrinsics
from posefree.model import (MODES, ModelConfig, ReconstructionModel, normalize_quaternion, patch_centers,
                            poses_from_raw, preset)
from posefree.synth import in_memory_dataset
from posefree.train import LossWeights, make_batch, total_loss

K64 = Intrinsics.default(64)


def images(n, seed=0, size=64):
    return np.random.default_rng(seed).uniform(size=(n, size, size, 3))


@pytest.fixture(scope="module")
def model():
    return ReconstructionModel(ModelConfig())


@pytest.fixture(scope="module")
def scene():
    return in_memory_dataset(1, 5, 45.0, 64, seed=3, K=32)[0]


def test_config_validation():
    with pytest.raises(ValueError, match="divisible by patch"):
        ModelConfig(image_size=60)
    with pytest.raises(ValueError, match="head count"):
        ModelConfig(dim=30, heads=4)
    with pytest.raises(ValueError, match="ablation"):
        ModelConfig(mode="magic")
    with pytest.raises(KeyError):
        ModelConfig.from_dict({"bogus": 1})
    assert ModelConfig.from_dict(ModelConfig().to_dict()) == ModelConfig()


def test_token_counts():
    assert ModelConfig().num_patches == 16
    assert ModelConfig(image_size=256).num_patches == 256
    assert preset("S").image_size == 256 and preset("S").num_patches == 256


def test_patch_centers_row_major():
    c = patch_centers(ModelConfig())
    np.testing.assert_array_equal(c[0], [8.0, 8.0])
    np.testing.assert_array_equal(c[1], [24.0, 8.0])
    np.testing.assert_array_equal(c[4], [8.0, 24.0])


def test_embed_view_tokens_and_conditioning(model):
    img = images(1)[0]
    t_ref, m_ref = model.embed_view(img, K64, True)
    t_src, m_src = model.embed_view(img, K64, False)
    assert t_ref.shape == (16, 64)
    np.testing.assert_array_equal(t_ref.data, t_src.data)
    assert not np.allclose(m_ref.data, m_src.data)


def test_embed_rejects_wrong_size(model):
    with pytest.raises(ValueError, match="shape"):
        model.embed_views(np.zeros((1, 32, 32, 3)))


def test_forward_shapes(model):
    with ad.no_grad():
        out = model.forward(images(4), [K64] * 4)
    assert model.cfg.num_triplane_tokens + 4 * 16 == 256
    assert out.triplane.shape == (16, 16, 8)
    assert out.points.shape == (4, 16, 3)
    assert out.alpha.shape == (4, 16) and out.confidence.shape == (4, 16)
    assert np.all((out.alpha.data > 0) & (out.alpha.data < 1))
    assert np.all(out.confidence.data > 0)


def test_single_view_forward(model):
    with ad.no_grad():
        out = model.forward(images(1), [K64])
    assert out.points.shape == (1, 16, 3)


@pytest.mark.parametrize("n", [0, 5])
def test_view_count_out_of_range(model, n):
    with pytest.raises(ValueError, match="number of views"):
        model.forward(np.zeros((n, 64, 64, 3)), [K64] * n)


def test_large_image_token_count():
    m = ReconstructionModel(ModelConfig(image_size=256, dim=16, heads=2, layers=1, triplane_tokens=2,
                                        point_width=16, intr_mlp_width=16))
    with ad.no_grad():
        out = m.forward(images(1, size=256), [Intrinsics.default(256)])
    assert out.points.shape == (1, 256, 3)


def test_forward_is_deterministic(model):
    with ad.no_grad():
        a = model.forward(images(3, 1), [K64] * 3)
        b = model.forward(images(3, 1), [K64] * 3)
    np.testing.assert_array_equal(a.triplane.xy.data, b.triplane.xy.data)
    np.testing.assert_array_equal(a.points.data, b.points.data)


def test_swapping_source_views_is_equivariant(model):
    x = images(4, 2)
    with ad.no_grad():
        a = model.forward(x, [K64] * 4)
        b = model.forward(x[[0, 2, 1, 3]], [K64] * 4)
    for pa, pb in zip(a.triplane.planes, b.triplane.planes):
        np.testing.assert_allclose(pa.data, pb.data, atol=1e-9, rtol=0)
    np.testing.assert_allclose(a.points.data[[0, 2, 1, 3]], b.points.data, atol=1e-9, rtol=0)
    np.testing.assert_allclose(a.confidence.data[[0, 2, 1, 3]], b.confidence.data, atol=1e-9, rtol=0)


def test_reference_view_is_not_interchangeable(model):
    x = images(2, 3)
    with ad.no_grad():
        a = model.forward(x, [K64] * 2)
        b = model.forward(x[::-1], [K64] * 2)
    assert not np.allclose(a.triplane.xy.data, b.triplane.xy.data)


@pytest.mark.parametrize("mode", MODES)
def test_every_parameter_gets_gradient(mode, scene):
    m = ReconstructionModel(ModelConfig(mode=mode))
    batch = make_batch(scene, (0, 1, 2, 3, 4), 8, np.random.default_rng(0), n_inputs=4)
    with ad.Tape():
        params = dict(m.named_parameters())
        loss = total_loss(m, batch, LossWeights(), K=16)
        grads = ad.backward(loss.total, wrt=list(params.values()))
    dead = [n for n, p in params.items() if not np.any(grads[p] != 0)]
    assert dead == []
    if mode in ("mlp-pose-cls", "mlp-pose-patch", "no-pose"):
        assert not hasattr(m, "point_head")


@pytest.mark.parametrize("mode", ["mlp-pose-cls", "mlp-pose-patch"])
def test_pose_regression_head(mode):
    m = ReconstructionModel(ModelConfig(mode=mode))
    with ad.no_grad():
        out = m.forward(images(3, 4), [K64] * 3)
        out2 = m.forward(images(3, 4), [K64] * 3)
    poses = m.regress_pose_head(out)
    assert len(poses) == 3 and all(p.is_valid() for p in poses)
    np.testing.assert_array_equal(out.pose_raw.data, out2.pose_raw.data)


def test_pose_head_unavailable_in_pnp_mode(model):
    with ad.no_grad():
        out = model.forward(images(2), [K64] * 2)
    with pytest.raises(RuntimeError, match="not available"):
        model.regress_pose_head(out)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_quaternion_normalization(seed, scale):
    raw = np.random.default_rng(seed).normal(size=(5, 4)) * scale
    q = normalize_quaternion(raw).data
    np.testing.assert_allclose(np.linalg.norm(q, axis=1), 1.0, atol=1e-9)
    full = np.concatenate([raw, np.zeros((5, 3))], axis=1)
    assert all(p.is_valid() for p in poses_from_raw(full))


def test_state_dict_roundtrip(model):
    clone = ReconstructionModel(ModelConfig(seed=9))
    clone.load_state_dict(model.state_dict())
    with ad.no_grad():
        a = model.forward(images(2, 5), [K64] * 2)
        b = clone.forward(images(2, 5), [K64] * 2)
    np.testing.assert_array_equal(a.points.data, b.points.data)
