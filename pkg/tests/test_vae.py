import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prwm import numerics as nx
from prwm.continual import family_vae_frames, family_vae_seed
from prwm.envs import DEFAULT_TASKS, env_reset
from prwm.vae import VAE, LatentDistribution, VaeConfig, sample_latent, train_vae, vae_loss

TINY = VaeConfig(frame_shape=(10, 10, 1), latent_dim=2, conv_stack=(3, 4), beta=0.3)


def frames_from_tasks(n_per_task=40, seed=0):
    out = []
    rng = np.random.default_rng(seed)
    for task in DEFAULT_TASKS:
        env, obs = env_reset(task, seed)
        for _ in range(n_per_task):
            out.append(obs.frame)
            obs = env.step(int(rng.integers(6)))
            if obs.done:
                obs = env.reset(int(rng.integers(1 << 30)))
    return np.array(out)


def test_encode_shapes_and_positive_sigma():
    vae = VAE(VaeConfig(), seed=0)
    dist = vae.encode(np.random.default_rng(0).random((5, 32, 32, 1)))
    assert dist.mu.shape == dist.sigma.shape == (5, 8)
    assert np.all(dist.sigma > 0)
    single = vae.encode(np.zeros((32, 32, 1)))
    assert single.mu.shape == (8,)


def test_encode_is_deterministic_and_checks_shape():
    vae = VAE(VaeConfig(), seed=1)
    f = np.random.default_rng(1).random((2, 32, 32, 1))
    a, b = vae.encode(f), vae.encode(f.copy())
    assert np.array_equal(a.mu, b.mu) and np.array_equal(a.sigma, b.sigma)
    with pytest.raises(nx.ShapeError):
        vae.encode(np.zeros((2, 16, 16, 1)))


def test_frame_too_small_for_stack():
    with pytest.raises(nx.ShapeError):
        VAE(VaeConfig(frame_shape=(6, 6, 1), conv_stack=(4, 4, 4)))


def test_sigma_limit_gives_mean():
    mu = np.array([0.2, -3.0, 1.5])
    z = sample_latent(LatentDistribution(mu, np.full(3, 1e-12)), np.random.default_rng(0))
    np.testing.assert_allclose(z, mu, atol=1e-10)


def test_sample_mean_converges():
    mu, sigma = np.array([0.5, -1.0]), np.array([0.3, 2.0])
    n = 100_000
    dist = LatentDistribution(np.broadcast_to(mu, (n, 2)), np.broadcast_to(sigma, (n, 2)))
    z = sample_latent(dist, np.random.default_rng(3))
    assert np.all(np.abs(z.mean(axis=0) - mu) < 0.01 * sigma.max())


def test_reparameterization_gradient_wrt_mu_is_identity():
    sigma = np.array([0.7, 1.3])
    eps = 1e-6
    jac = np.empty((2, 2))
    for i in range(2):
        hi, lo = np.zeros(2), np.zeros(2)
        hi[i], lo[i] = eps, -eps
        jac[:, i] = (sample_latent(LatentDistribution(hi, sigma), np.random.default_rng(5))
                     - sample_latent(LatentDistribution(lo, sigma), np.random.default_rng(5))) / (2 * eps)
    np.testing.assert_allclose(jac, np.eye(2), atol=1e-8)


def test_decode_range_and_shape():
    vae = VAE(VaeConfig(), seed=2)
    z = np.random.default_rng(2).normal(scale=np.sqrt(10.0), size=(64, 8))
    out = vae.decode(z)
    assert out.shape == (64, 32, 32, 1)
    assert np.all((out > 0) & (out < 1))
    assert vae.decode(z[0]).shape == (32, 32, 1)


def test_vae_loss_examples():
    f = np.random.default_rng(0).random((2, 4, 4, 1))
    prior = LatentDistribution(np.zeros((2, 3)), np.ones((2, 3)))
    total, recon, kl = vae_loss(f, f, prior)
    assert recon == 0.0 and kl == 0.0 and total == 0.0
    shifted = LatentDistribution(np.array([1.0, 0.0, 0.0]), np.ones(3))
    assert vae_loss(f[0], f[0], shifted)[2] == pytest.approx(0.5, abs=1e-15)
    _, recon, _ = vae_loss(np.zeros((4, 4, 1)), np.full((4, 4, 1), 0.5), shifted)
    assert recon == pytest.approx(0.25)
    with pytest.raises(nx.ShapeError):
        vae_loss(f, f[:1], prior)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(1e-3, 10)), min_size=1, max_size=6))
def test_kl_nonnegative_and_zero_only_at_prior(pairs):
    mu = np.array([p[0] for p in pairs])
    sigma = np.array([p[1] for p in pairs])
    f = np.zeros((2, 2, 1))
    kl = vae_loss(f, f, LatentDistribution(mu, sigma))[2]
    assert kl >= 0.0
    if kl == 0.0:
        assert np.allclose(mu, 0.0) and np.allclose(sigma, 1.0)


def test_loss_gradients_match_finite_differences():
    vae = VAE(TINY, seed=4)
    frames = np.random.default_rng(4).random((3, 10, 10, 1))

    def f(ps):
        vae.params = ps
        (total, _, _), grads = vae.loss_and_grads(frames, np.random.default_rng(11))
        return total, grads

    report = nx.grad_check(f, vae.params, eps=1e-6)
    assert report.max_rel_error < 1e-4, report


def test_training_bookkeeping_determinism_and_improvement():
    frames = frames_from_tasks()
    train, test = frames[::2], frames[1::2]
    cfg = VaeConfig(latent_dim=4, conv_stack=(4, 8), beta=0.25 / 1024, epoch_samples=640, max_epochs=6,
                    patience=3, lr=1e-2)
    a = train_vae(train, test, cfg, seed=5)
    b = train_vae(train, test, cfg, seed=5)
    assert a.vae.params.equal(b.vae.params)
    assert all(y <= x for x, y in zip(a.best_history, a.best_history[1:]))
    untrained = VAE(cfg, seed=5)

    def recon_mse(vae):
        return float(np.mean((vae.decode(vae.encode_mean(test)) - test) ** 2))

    assert recon_mse(a.vae) < 0.5 * recon_mse(untrained)


def test_empty_training_set_is_an_error():
    with pytest.raises(ValueError):
        train_vae(np.zeros((0, 10, 10, 1)), np.zeros((0, 10, 10, 1)), TINY)


def test_trained_family_decoder_beats_random_init_tenfold(desk_family, desk_cfg):
    """decode(encode-mean) of training frames against the same network at initialisation."""
    train, _ = family_vae_frames(desk_cfg)
    frames = train[np.random.default_rng(0).choice(len(train), 3000, replace=False)].astype(np.float64)
    vae = desk_family.vae
    trained = float(np.mean((vae.decode(vae.encode_mean(frames)) - frames) ** 2))
    fresh = VAE(vae.config, seed=family_vae_seed(desk_cfg))
    baseline = float(np.mean((fresh.decode(fresh.encode_mean(frames)) - frames) ** 2))
    print(f"family V reconstruction: trained {trained:.5f} untrained {baseline:.5f} ratio {baseline / trained:.1f}")
    assert trained * 10 <= baseline
