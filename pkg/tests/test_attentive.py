import numpy as np
import pytest

from stic import tensor as T
from stic.attentive import (
    AttentiveConfig,
    AttentiveSTIC,
    attentive_descriptor,
    feature_sample,
    filterbank,
    placement_from,
    read_patches,
    reconstruction_loss,
    train_attentive,
)
from stic.gradcheck import check_grad
from stic.io import gen_gaussians_2d, gen_shapes, load_model, save_checkpoint
from stic.models import mlp
from stic.optim import Adam
from stic.samplers import ChainFailure, SamplerConfig
from stic.tensor import Tensor
from stic.trainer import TrainConfig


def _small(seed=0, side=4):
    desc = attentive_descriptor((1, side, side), 3, feature_width=5, glimpses=2, read_size=2, read_width=4, hidden=(6,))
    return AttentiveSTIC(desc, seed)


def test_filterbank_rows_are_normalized():
    fb = filterbank(Tensor(np.array([3.0, 1.2])), Tensor(np.array([1.5, 0.7])), Tensor(np.array([0.8, 2.0])), 4, 8).data
    assert fb.shape == (2, 4, 8)
    np.testing.assert_allclose(fb.sum(-1), 1.0, atol=1e-15)


def test_narrow_filters_pick_single_pixels():
    fb = filterbank(Tensor(np.array([2.0])), Tensor(np.array([1.0])), Tensor(np.array([1e-3])), 3, 5).data[0]
    np.testing.assert_allclose(fb, np.eye(5)[[1, 2, 3]], atol=1e-12)


def test_zero_raw_placement_is_a_centred_full_view():
    p = placement_from(Tensor(np.zeros((1, 5))), 6, 8, 4)
    assert p.gx.data[0] == 3.5 and p.gy.data[0] == 2.5
    assert abs(p.delta.data[0] - 7 / 3) < 1e-15
    assert p.sigma2.data[0] == 1.0 and p.gamma.data[0] == 1.0


def test_full_resolution_read_reproduces_image():
    x = np.random.default_rng(0).uniform(-1, 1, (2, 1, 5, 5))
    raw = np.zeros((2, 5))
    raw[:, 2] = np.log(1e-3)  # narrow filters
    patch = read_patches(Tensor(x), placement_from(Tensor(raw), 5, 5, 5), 5).data
    np.testing.assert_allclose(patch, x.reshape(2, 25), atol=1e-12)


def test_encoder_gradient_end_to_end():
    m = _small()
    x = np.random.default_rng(1).uniform(-1, 1, (2, 1, 4, 4))
    w = np.random.default_rng(2).standard_normal((2, 5))
    assert check_grad(lambda a: T.sum(T.mul(m.encode(a), Tensor(w))), [x]) < 1e-4

    def through_params(attn_w):
        m.encoder.params["attn.w"] = attn_w
        return T.sum(T.mul(m.encode(x), Tensor(w)))

    w0 = m.encoder.params["attn.w"].data.copy()
    assert check_grad(through_params, [w0]) < 1e-4


def test_feature_and_decoder_shapes():
    m = _small(side=8)
    x = np.zeros((3, 1, 8, 8))
    f = m.encode(x)
    assert f.shape == (3, 5) and m.forward_logits(x).shape == (3, 4)
    out = m.decode(f).data
    assert out.shape == (3, 1, 8, 8) and np.abs(out).max() < 1.0
    assert m.encode(x[0]).shape == (5,)
    with pytest.raises(T.ShapeError):
        m.decode(np.zeros((1, 7)))
    with pytest.raises(ValueError):
        attentive_descriptor((8, 8), 3)


def test_odd_image_side_skips_upsampling():
    m = AttentiveSTIC(attentive_descriptor((1, 5, 5), 2, feature_width=4, glimpses=1), 0)
    assert m.decoder.n_up == 0 and m.decode(np.zeros((2, 4))).shape == (2, 1, 5, 5)


def test_checkpoint_round_trip(tmp_path):
    m = _small(seed=3)
    save_checkpoint(tmp_path / "a.stic", m, tau=1)
    r, ck = load_model(tmp_path / "a.stic")
    assert isinstance(r, AttentiveSTIC) and ck.tau == 1
    for k, v in m.state_dict().items():
        np.testing.assert_array_equal(r.state_dict()[k], v)
    x = np.random.default_rng(0).uniform(-1, 1, (2, 1, 4, 4))
    np.testing.assert_array_equal(r.forward_logits(x).data, m.forward_logits(x).data)


def test_feature_sample_zero_steps_is_identity():
    f0 = np.random.default_rng(0).uniform(-1, 1, (4, 5))
    out = feature_sample(mlp(5, 3, seed=0), 1, 0.5, 0.1, 0, np.random.default_rng(0), f0)
    np.testing.assert_array_equal(out, f0)


def _trained_feature_classifier():
    data = gen_gaussians_2d(3, 50, 0.15, seed=1, radius=0.6)
    clf = mlp(2, 3, hidden=(32,), seed=0)
    opt = Adam(clf.parameters(), lr=1e-2)
    for _ in range(300):
        opt.zero_grad()
        T.cross_entropy_soft(clf.forward_logits(data.images), np.eye(4)[data.labels]).backward()
        opt.step()
    return clf


def test_noiseless_feature_ascent_raises_target_probability():
    clf = _trained_feature_classifier()
    f0 = np.random.default_rng(2).uniform(-1, 1, (20, 2))
    before = clf.predict_proba(f0)[:, 2]
    f = feature_sample(clf, 2, 0.01, 0.0, 50, np.random.default_rng(0), f0)
    after = clf.predict_proba(f)[:, 2]
    assert np.all(after > before)
    assert np.abs(f).max() <= 1.0


def test_feature_sample_errors():
    with pytest.raises(T.ShapeError):
        feature_sample(mlp(5, 3), 0, 0.1, 0.0, 1, np.random.default_rng(0), np.zeros((2, 4)))
    bad = mlp(2, 3, seed=0)
    bad.params["fc0.w"].data[:] = np.nan
    with pytest.raises(ChainFailure):
        feature_sample(bad, 0, 0.1, 0.0, 1, np.random.default_rng(0), np.zeros((2, 2)))


def test_sample_images_decodes_features():
    m = _small(side=8)
    imgs = m.sample_images(0, 3, SamplerConfig(eps1=0.1, eps3=0.0, steps=2), np.random.default_rng(0))
    assert imgs.shape == (3, 1, 8, 8)


def test_reconstruction_loss_is_mean_squared_error_sum():
    m = _small()
    x = np.random.default_rng(0).uniform(-1, 1, (2, 1, 4, 4))
    rec = m.decode(m.encode(x)).data
    assert abs(reconstruction_loss(m, x).item() - ((rec - x) ** 2).sum() / 2) < 1e-12


def test_train_attentive_short_run(tmp_path):
    data = gen_shapes(6, 8, seed=0)
    cfg = TrainConfig(
        passes=2, iterations_per_pass=4, batch_size=4, fake_batch_size=4, lr=1e-3, refresh_stride=2,
        sampler=SamplerConfig(eps1=0.1, steps=2),
    )
    attn = AttentiveConfig(warmup_iters=3, feature_width=8, glimpses=2)
    res = train_attentive(cfg, data, np.random.default_rng(0), attn, checkpoint_dir=tmp_path)
    assert [r["pass"] for r in res.metrics] == [1, 2]
    assert len(res.state["warmup_losses"]) == 3
    assert res.state["fake_features"].shape == (cfg.n_buffer, 8)
    assert (tmp_path / "pass2.stic").exists()
    with pytest.raises(ValueError):
        train_attentive(cfg, gen_gaussians_2d(3, 5, 0.1, 0), np.random.default_rng(0), attn)


def test_attentive_has_no_score_head():
    with pytest.raises(TypeError):
        _small().score(np.zeros((1, 1, 4, 4)))
