import numpy as np
import pytest

from stic import tensor as T
from stic.gradcheck import check_grad
from stic.models import cnn, mlp
from stic.samplers import (
    Chain,
    ChainFailure,
    GramTarget,
    SamplerConfig,
    class_gram_target,
    gram_matrix,
    gram_target_from_images,
    grmala_step,
    interpolate,
    mala_approx_step,
    mix_gram_targets,
    neighborhood_starts,
    refine_interpolation,
    style_loss,
    synthesize,
    write_trajectory_csv,
)

# --- Gram statistics ------------------------------------------------------


@pytest.mark.parametrize(
    "F,G",
    [
        ([[1, 0], [0, 1]], [[1, 0], [0, 1]]),
        ([[1, 1], [1, 1]], [[2, 2], [2, 2]]),
        ([[1, 2], [3, 4]], [[5, 11], [11, 25]]),
    ],
)
def test_gram_matrix_hand_cases(F, G):
    np.testing.assert_array_equal(gram_matrix(np.array(F, float)).data, G)


def test_gram_matrix_batched_is_symmetric_psd():
    F = np.random.default_rng(0).standard_normal((3, 4, 9))
    G = gram_matrix(F).data
    np.testing.assert_allclose(G, G.transpose(0, 2, 1))
    assert np.linalg.eigvalsh(G).min() > -1e-10


def _cnn():
    return cnn((1, 8, 8), 3, channels=(4, 6), seed=0)


def test_style_loss_zero_at_own_gram():
    m = _cnn()
    x = np.random.default_rng(0).uniform(-1, 1, (2, 1, 8, 8))
    target = gram_target_from_images(m, x)
    assert style_loss(x, m, target).item() == 0.0


def test_style_loss_scaling():
    m = _cnn()
    x = np.random.default_rng(0).uniform(-1, 1, (1, 1, 8, 8))
    (f,) = m.feature_maps(x, [1])
    G = f.data[0] @ f.data[0].T
    A = np.zeros_like(G)
    n, mm = f.shape[1], f.shape[2]
    expected = ((G - A) ** 2).sum() / (4 * n**2 * mm**2)
    got = style_loss(x, m, GramTarget([1], [A])).item()
    assert abs(got - expected) < 1e-12 * max(1.0, expected)


def test_style_loss_gradient_finite_differences():
    m = _cnn()
    rng = np.random.default_rng(1)
    target = gram_target_from_images(m, rng.uniform(-1, 1, (1, 1, 8, 8)))
    x = rng.uniform(-1, 1, (1, 1, 8, 8))
    assert check_grad(lambda a: style_loss(a, m, target), [x]) < 1e-4


def test_style_loss_layer_mismatch():
    m = _cnn()
    target = gram_target_from_images(m, np.zeros((1, 1, 8, 8)), [1])
    with pytest.raises(ValueError):
        style_loss(np.zeros((1, 1, 8, 8)), m, target, [0])


def test_mix_gram_targets_endpoints():
    a = GramTarget([0], [np.eye(2)])
    b = GramTarget([0], [2 * np.eye(2)])
    np.testing.assert_array_equal(mix_gram_targets(a, b, 1.0).grams[0], np.eye(2))
    np.testing.assert_array_equal(mix_gram_targets(a, b, 0.0).grams[0], 2 * np.eye(2))
    per_chain = mix_gram_targets(a, b, np.array([0.0, 1.0])).grams[0]
    assert per_chain.shape == (2, 2, 2)


def test_class_gram_target_uses_matching_class():
    m = _cnn()
    imgs = np.random.default_rng(0).uniform(-1, 1, (6, 1, 8, 8))
    labels = np.array([0, 1, 2, 0, 1, 2])
    t = class_gram_target(m, imgs, labels, [2, 0], np.random.default_rng(0))
    assert [labels[i] for i in t.source["indices"]] == [2, 0]
    with pytest.raises(ValueError):
        class_gram_target(m, imgs, labels, [5], np.random.default_rng(0))


# --- GRMALA ---------------------------------------------------------------


def test_zero_steps_sizes_fixed_point_exact():
    m = _cnn()
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, (3, 1, 8, 8))
    target = gram_target_from_images(m, rng.uniform(-1, 1, (1, 1, 8, 8)))
    cfg = SamplerConfig(eps1=0.0, eps2=0.0, eps3=0.0)
    chain = Chain(x0, 1, rng)
    for _ in range(5):
        chain = grmala_step(chain, m, target, cfg)
    np.testing.assert_array_equal(chain.x, x0)


@pytest.mark.parametrize("seed", range(3))
def test_gradient_only_steps_ascend(seed):
    m = mlp(2, 3, seed=seed)
    rng = np.random.default_rng(seed)
    chain = Chain(rng.standard_normal((8, 2)), seed % 3, rng)
    cfg = SamplerConfig(eps1=1e-3, eps2=0.0, eps3=0.0, clip_to=None)
    prev = m.log_cond(chain.x, seed % 3).data
    for _ in range(10):
        chain = grmala_step(chain, m, None, cfg)
        cur = m.log_cond(chain.x, seed % 3).data
        assert np.all(cur > prev)
        prev = cur


def test_chains_reproducible_bitwise():
    m = _cnn()
    target = gram_target_from_images(m, np.zeros((1, 1, 8, 8)))
    cfg = SamplerConfig(steps=5)
    a = synthesize(m, 0, target, cfg, np.random.default_rng(3), n=4)
    b = synthesize(m, 0, target, cfg, np.random.default_rng(3), n=4)
    np.testing.assert_array_equal(a.samples, b.samples)


def test_clip_holds_after_every_step():
    m = mlp(2, 3, seed=0)
    cfg = SamplerConfig(eps1=5.0, eps3=1.0, clip_to=(-0.5, 0.5))
    chain = Chain(np.zeros((4, 2)), 0, np.random.default_rng(0))
    for _ in range(5):
        chain = grmala_step(chain, m, None, cfg)
        assert chain.x.min() >= -0.5 and chain.x.max() <= 0.5


def test_nonfinite_gradient_freezes_and_flags_row():
    m = mlp(2, 3, seed=0)
    m.params["fc0.w"].data[:] = np.nan
    cfg = SamplerConfig(steps=1)
    chain = grmala_step(Chain(np.zeros((2, 2)), 0, np.random.default_rng(0)), m, None, cfg)
    assert chain.failed.all()
    np.testing.assert_array_equal(chain.x, np.zeros((2, 2)))
    with pytest.raises(ChainFailure):
        synthesize(m, 0, None, cfg, np.random.default_rng(0), n=2)


def test_trajectory_records_and_csv(tmp_path):
    m = _cnn()
    target = gram_target_from_images(m, np.zeros((1, 1, 8, 8)))
    res = synthesize(m, 0, target, SamplerConfig(steps=3), np.random.default_rng(0), n=2)
    assert [r["step"] for r in res.trajectory] == [0, 1, 2, 3]
    write_trajectory_csv(tmp_path / "t.csv", res.trajectory)
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "step,log_cond,style_loss"


def test_mala_approx_follows_log_marginal():
    chain = Chain(np.array([[0.0, 0.0]]), None, np.random.default_rng(0))
    # log density -|x - 1|^2 / 2 has gradient (1 - x)
    step = mala_approx_step(chain, lambda x: T.neg(T.scalar_mul(T.sum(T.square(T.add_scalar(x, -1.0)), 1), 0.5)), 0.5, 0.0)
    np.testing.assert_allclose(step.x, [[0.5, 0.5]])
    m = mlp(2, 3, seed=0)
    out = mala_approx_step(Chain(np.zeros((1, 2)), None, np.random.default_rng(0)), m, 0.1, 0.0)
    assert np.all(np.isfinite(out.x))


def test_blank_and_given_inits():
    m = mlp(2, 3, seed=0)
    r = synthesize(m, 0, None, SamplerConfig(steps=0, init="blank"), np.random.default_rng(0), n=2)
    np.testing.assert_array_equal(r.samples, np.ones((2, 2)))
    x0 = np.array([[0.1, 0.2]])
    r = synthesize(m, 0, None, SamplerConfig(steps=0, init="given"), np.random.default_rng(0), n=1, x0=x0)
    np.testing.assert_array_equal(r.samples, x0)


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(eps1=-1.0)
    with pytest.raises(ValueError):
        SamplerConfig(init="uniform")
    with pytest.raises(ValueError):
        SamplerConfig(clip_to=(1.0, -1.0))


def test_default_step_sizes_in_stated_ranges():
    c = SamplerConfig()
    assert 0.9 <= c.eps1 <= 1.0 and 0.9 <= c.eps2 <= 1.0 and 0.01 <= c.eps3 <= 0.02


# --- interpolation and neighborhoods --------------------------------------


def test_interpolation_endpoints_exact():
    a, b = np.array([0.1, 0.7]), np.array([-0.3, 0.9])
    path = interpolate(a, b, 5)
    np.testing.assert_array_equal(path[0], a)
    np.testing.assert_array_equal(path[-1], b)
    np.testing.assert_allclose(path[2], 0.5 * (a + b))
    with pytest.raises(ValueError):
        interpolate(a, b, 1)


def test_refine_interpolation_zero_steps_is_identity():
    m = mlp(2, 3, seed=0)
    path = interpolate(np.zeros(2), np.ones(2), 4)
    np.testing.assert_array_equal(refine_interpolation(path, m, 0, 1, SamplerConfig(), np.random.default_rng(0)), np.stack(path))
    out = refine_interpolation(path, m, 0, 1, SamplerConfig(eps3=0.0), np.random.default_rng(0), steps=2)
    assert out.shape == (4, 2)


def test_neighborhood_starts():
    x = np.array([1.0, 2.0])
    assert all(np.array_equal(s, x) for s in neighborhood_starts(x, 0.0, 3, np.random.default_rng(0)))
    assert len(neighborhood_starts(x, 0.1, 5, np.random.default_rng(0))) == 5
    with pytest.raises(ValueError):
        neighborhood_starts(x, -0.1, 2, np.random.default_rng(0))
