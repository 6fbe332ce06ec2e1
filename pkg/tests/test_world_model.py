import math

import numpy as np
import pytest

from prwm import numerics as nx
from prwm.rollouts import Rollout
from prwm.world_model import (MdnOutput, ModelConfig, MTrainConfig, evaluate_m, init_m_params, m_forward,
                              m_total_loss, mdn_loss, sample_next, sequence_loss_and_grads, split_output,
                              train_m_epoch)


def random_out(rng, g, l, scale=1.0):
    return MdnOutput(rng.normal(size=(g, l)) * scale, rng.normal(size=(g, l)) * scale,
                     rng.normal(size=(g, l)) * 0.5, np.array(rng.normal()), np.array(rng.normal()))


def brute_force_nll(out: MdnOutput, z):
    """Direct summation of the mixture density, one dimension at a time."""
    g, l = out.mu.shape
    total = 0.0
    for i in range(l):
        w = [math.exp(out.pi[k, i]) for k in range(g)]
        w = [x / sum(w) for x in w]
        dens = 0.0
        for k in range(g):
            s = math.exp(out.log_sigma[k, i])
            dens += w[k] * math.exp(-0.5 * ((z[i] - out.mu[k, i]) / s) ** 2) / (s * math.sqrt(2 * math.pi))
        total -= math.log(dens)
    return total / l


def test_output_width():
    cfg = ModelConfig(latent_dim=4, mixtures=3, hidden=8)
    assert cfg.output_width == 3 * 3 * 4 + 2
    params = init_m_params(cfg, 0)
    out, state = m_forward(np.zeros(4), 2, nx.LstmState.zeros(8), params, cfg)
    assert out.pi.shape == out.mu.shape == out.log_sigma.shape == (3, 4)
    assert state.h.shape == (8,)


@pytest.mark.parametrize("bad", [dict(latent_dim=0), dict(mixtures=0), dict(hidden=0)])
def test_invalid_model_config(bad):
    with pytest.raises(ValueError):
        ModelConfig(**bad)


def test_zero_params_give_uniform_mixture_and_zero_means():
    cfg = ModelConfig(latent_dim=3, mixtures=4, hidden=5)
    params = init_m_params(cfg, 1)
    for k in params.names():
        params.params[k][...] = 0.0
    out, _ = m_forward(np.ones(3), 1, nx.LstmState.zeros(5), params, cfg)
    np.testing.assert_allclose(out.weights(), 0.25, rtol=1e-15)
    assert np.all(out.mu == 0.0)


def test_forward_is_deterministic_and_checks_shapes():
    cfg = ModelConfig(latent_dim=3, mixtures=2, hidden=5)
    params = init_m_params(cfg, 3)
    z = np.array([0.1, -0.2, 0.3])
    a, sa = m_forward(z, 4, nx.LstmState.zeros(5), params, cfg)
    b, sb = m_forward(z, 4, nx.LstmState.zeros(5), params, cfg)
    assert np.array_equal(a.mu, b.mu) and np.array_equal(sa.h, sb.h)
    with pytest.raises(nx.ShapeError):
        m_forward(np.zeros(4), 0, nx.LstmState.zeros(5), params, cfg)
    with pytest.raises(nx.ShapeError):
        split_output(np.zeros(cfg.output_width + 1), cfg)


def test_mixture_weights_sum_to_one():
    rng = np.random.default_rng(0)
    out = random_out(rng, 5, 8, scale=30.0)
    np.testing.assert_allclose(out.weights().sum(axis=0), 1.0, atol=1e-12)


# -- mdn loss ----------------------------------------------------------------


def test_single_gaussian_at_its_mean():
    out = MdnOutput(np.zeros((1, 3)), np.array([[0.5, -1.0, 2.0]]), np.zeros((1, 3)), np.array(0.0), np.array(0.0))
    assert mdn_loss(out, [0.5, -1.0, 2.0]) == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-15)


def test_mdn_loss_matches_direct_summation_oracle():
    rng = np.random.default_rng(7)
    for _ in range(100):
        g, l = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        out = random_out(rng, g, l)
        z = rng.normal(size=l)
        assert abs(mdn_loss(out, z) - brute_force_nll(out, z)) < 1e-9


def test_duplicating_a_component_with_half_weight_is_invisible():
    rng = np.random.default_rng(2)
    out = random_out(rng, 3, 4)
    z = rng.normal(size=4)
    # copy component 0; lowering both logits by ln 2 splits its mass evenly
    pi = np.vstack([out.pi, out.pi[:1]])
    pi[0] -= math.log(2)
    pi[-1] -= math.log(2)
    dup = MdnOutput(pi, np.vstack([out.mu, out.mu[:1]]), np.vstack([out.log_sigma, out.log_sigma[:1]]),
                    out.reward_pred, out.done_logit)
    assert mdn_loss(dup, z) == pytest.approx(mdn_loss(out, z), abs=1e-12)


def test_loss_finite_fifty_sigma_away():
    out = MdnOutput(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)), np.array(0.0), np.array(0.0))
    loss = mdn_loss(out, [50.0, -50.0])
    assert np.isfinite(loss)
    assert loss == pytest.approx(0.5 * math.log(2 * math.pi) + 0.5 * 50.0 ** 2, rel=1e-12)


def test_total_loss_components():
    rng = np.random.default_rng(4)
    out = random_out(rng, 2, 3)
    out.reward_pred = np.array(1.0)
    out.done_logit = np.array(0.0)
    total, gmm, mse, bce = m_total_loss(out, rng.normal(size=3), 1.0, 1.0)
    assert mse == 0.0
    assert bce == pytest.approx(math.log(2), abs=1e-15)
    assert total == pytest.approx((gmm + mse + bce) / 3, abs=1e-15)


# -- gradients ---------------------------------------------------------------


def test_sequence_gradients_match_finite_differences():
    cfg = ModelConfig(latent_dim=2, mixtures=2, hidden=3)
    params = init_m_params(cfg, 5)
    rng = np.random.default_rng(5)
    for k in params.names():
        params.params[k][...] = rng.normal(scale=0.5, size=params[k].shape)
    t, b = 4, 2
    z = rng.normal(size=(t + 1, b, 2))
    a = rng.integers(0, 6, size=(t, b))
    r = rng.choice([-1.0, 0.0, 1.0], size=(t, b))
    d = (rng.random((t, b)) < 0.3).astype(float)

    def f(ps):
        terms, grads = sequence_loss_and_grads(ps, cfg, z, a, r, d)
        return terms[0], grads

    report = nx.grad_check(f, params, eps=1e-5)
    assert report.max_rel_error < 1e-4, report


def test_masked_steps_do_not_contribute():
    cfg = ModelConfig(latent_dim=2, mixtures=2, hidden=3)
    params = init_m_params(cfg, 6)
    rng = np.random.default_rng(6)
    z = rng.normal(size=(4, 1, 2))
    a = rng.integers(0, 6, size=(3, 1))
    r, d = np.zeros((3, 1)), np.zeros((3, 1))
    mask = np.array([[1.0], [1.0], [0.0]])
    full, _ = sequence_loss_and_grads(params, cfg, z[:3], a[:2], r[:2], d[:2], need_grads=False)
    masked, _ = sequence_loss_and_grads(params, cfg, z, a, r, d, mask, need_grads=False)
    assert masked[0] == pytest.approx(full[0], abs=1e-14)


# -- sampling ----------------------------------------------------------------


def test_degenerate_gaussian_returns_mean():
    mu = np.array([[0.3, -1.2]])
    out = MdnOutput(np.zeros((1, 2)), mu, np.full((1, 2), math.log(1e-12)), np.array(0.4), np.array(-10.0))
    z, r, done = sample_next(out, np.random.default_rng(0))
    np.testing.assert_allclose(z, mu[0], atol=1e-10)
    assert r == 0.0 and not done


def test_reward_is_sign_clipped_and_done_threshold():
    out = MdnOutput(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)), np.array(3.7), np.array(0.1))
    _, r, done = sample_next(out, np.random.default_rng(0))
    assert r == 1.0 and done


def test_component_frequencies_match_softmax():
    n = 100_000
    logits = np.array([0.2, -1.0, 1.1])
    pi = np.broadcast_to(logits[:, None], (n, 3, 1))
    mu = np.broadcast_to(np.array([0.0, 100.0, 200.0])[:, None], (n, 3, 1))
    out = MdnOutput(pi, mu, np.full((n, 3, 1), -20.0), np.zeros(n), np.zeros(n))
    z, _, _ = sample_next(out, np.random.default_rng(1))
    comp = np.rint(z[:, 0] / 100.0).astype(int)
    freq = np.bincount(comp, minlength=3) / n
    np.testing.assert_allclose(freq, nx.softmax(logits), atol=0.01)


def test_temperature_scales_spread_and_must_be_positive():
    n = 50_000
    out = MdnOutput(np.zeros((n, 1, 1)), np.zeros((n, 1, 1)), np.zeros((n, 1, 1)), np.zeros(n), np.zeros(n))
    z, _, _ = sample_next(out, np.random.default_rng(2), temperature=2.0)
    assert z.std() == pytest.approx(2.0, rel=0.02)
    for t in (0.0, -1.0):
        with pytest.raises(ValueError):
            sample_next(out, np.random.default_rng(0), temperature=t)


# -- training / evaluation ---------------------------------------------------


def linear_rollouts(seed, n=6, length=50, latent=2):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        z = np.zeros((length, latent))
        z[0] = rng.normal(size=latent)
        a = rng.integers(0, 6, size=length)
        for t in range(1, length):
            z[t] = 0.8 * z[t - 1] + 0.1 * (a[t - 1] - 2.5) + 0.05 * rng.normal(size=latent)
        out.append(Rollout(z, a, np.zeros(length), np.zeros(length)))
    return out


def small_setup(seed=0):
    cfg = ModelConfig(latent_dim=2, mixtures=2, hidden=8)
    params = init_m_params(cfg, seed)
    return cfg, params, nx.Adam(params, lr=3e-3)


def test_no_sim_means_all_batches_real():
    cfg, params, opt = small_setup()
    stats = train_m_epoch(linear_rollouts(0), None, params, opt, cfg, MTrainConfig(seq_len=8, batch=4),
                          np.random.default_rng(0))
    assert (stats.real_batches, stats.sim_batches) == (100, 0)


def test_interleaving_is_half_and_half():
    cfg, params, opt = small_setup()
    stats = train_m_epoch(linear_rollouts(0), linear_rollouts(1), params, opt, cfg,
                          MTrainConfig(seq_len=8, batch=4), np.random.default_rng(0))
    assert (stats.real_batches, stats.sim_batches) == (50, 50)


def test_overfits_a_repeated_transition():
    cfg, params, opt = small_setup(1)
    length = 40
    z = np.tile([0.5, -0.25], (length, 1))
    ro = Rollout(z, np.full(length, 2), np.zeros(length), np.zeros(length))
    window = np.broadcast_to(z[:9, None, :], (9, 1, 2))
    gmm0 = sequence_loss_and_grads(params, cfg, window, np.full((8, 1), 2), np.zeros((8, 1)), np.zeros((8, 1)),
                                   need_grads=False)[0][1]
    train_m_epoch([ro], None, params, opt, cfg, MTrainConfig(seq_len=8, batch=4), np.random.default_rng(1))
    gmm1 = sequence_loss_and_grads(params, cfg, window, np.full((8, 1), 2), np.zeros((8, 1)), np.zeros((8, 1)),
                                   need_grads=False)[0][1]
    assert gmm1 < gmm0


def test_short_rollouts_shrink_the_window():
    cfg, params, opt = small_setup()
    short = [ro for ro in linear_rollouts(0, length=5)]
    stats = train_m_epoch(short, None, params, opt, cfg, MTrainConfig(batches_per_epoch=3, seq_len=32, batch=2),
                          np.random.default_rng(0))
    assert np.isfinite(stats.loss)


def test_no_real_rollouts_is_an_error():
    cfg, params, opt = small_setup()
    with pytest.raises(ValueError):
        train_m_epoch([], None, params, opt, cfg, MTrainConfig(), np.random.default_rng(0))


def test_evaluation_is_pure_and_improves_after_training():
    cfg, params, opt = small_setup(2)
    data = linear_rollouts(3)
    before = evaluate_m(data, params, cfg, 8)
    snapshot = params.copy()
    assert evaluate_m(data, params, cfg, 8) == before
    assert params.equal(snapshot)
    train_m_epoch(data, None, params, opt, cfg, MTrainConfig(seq_len=8, batch=4), np.random.default_rng(2))
    assert evaluate_m(data, params, cfg, 8) <= before * 1.01


def test_evaluation_finite_for_random_params_and_rejects_empty():
    cfg = ModelConfig(latent_dim=2, mixtures=3, hidden=4)
    rng = np.random.default_rng(9)
    params = init_m_params(cfg, 9)
    for k in params.names():
        params.params[k][...] = rng.normal(size=params[k].shape)
    assert np.isfinite(evaluate_m(linear_rollouts(4), params, cfg, 8))
    with pytest.raises(ValueError):
        evaluate_m([], params, cfg)


def test_evaluation_is_per_output_unit():
    cfg, params, _ = small_setup(3)
    data = linear_rollouts(5, n=1, length=9)
    ro = data[0]
    (total, *_), _ = sequence_loss_and_grads(params, cfg, ro.z[:, None], ro.a[:8, None], ro.r[1:, None],
                                             ro.d[1:, None], need_grads=False)
    assert evaluate_m(data, params, cfg, 8) == pytest.approx(total / cfg.output_width, rel=1e-12)
