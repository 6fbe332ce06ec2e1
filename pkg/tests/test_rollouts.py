import struct

import numpy as np
import pytest

from prwm import numerics as nx
from prwm.controller import ControllerConfig, c_forward, init_c_params
from prwm.envs import Env
from prwm.rollouts import (Rollout, RolloutConfig, RolloutFormatError, RolloutSet, collect_policy_rollouts,
                           collect_random_rollouts, generate_sim_rollouts, load_rollouts, rollout_filename,
                           save_rollouts, split_index)
from prwm.world_model import ModelConfig, init_m_params

MCFG = ModelConfig(latent_dim=2, mixtures=2, hidden=4)


def project(frames, rng):
    flat = frames.reshape(len(frames), -1)
    return np.stack([flat.mean(axis=1), flat[:, ::7].mean(axis=1)], axis=1)


def small_nets(seed=0):
    m = init_m_params(MCFG, seed)
    c = init_c_params(MCFG.latent_dim + MCFG.hidden, ControllerConfig(hidden=8), seed)
    return m, c


def test_config_invariants():
    with pytest.raises(ValueError):
        RolloutConfig(n=0)
    with pytest.raises(ValueError):
        RolloutConfig(tmin=50, tmax=40)


def test_split_sizes():
    assert split_index(100) == 90
    assert split_index(1000) == 900
    assert split_index(2) == 1
    rset = RolloutSet([Rollout(np.zeros((2, 1)), np.zeros(2), np.zeros(2), np.zeros(2)) for _ in range(100)])
    train, test = rset.split()
    assert (len(train), len(test)) == (90, 10)


# -- real rollouts -----------------------------------------------------------


@pytest.mark.parametrize("task", ["paddle", "gather", "dodge"])
def test_random_rollout_lengths_and_determinism(task):
    cfg = RolloutConfig(n=6, tmax=120, tmin=100)
    a = collect_random_rollouts(Env(task), 0, project, cfg, seed=3)
    b = collect_random_rollouts(Env(task), 0, project, cfg, seed=3)
    assert a.equals(b)
    assert len(a) == 6
    for ro in a:
        assert 100 <= len(ro) <= 120
        assert ro.z.shape == (len(ro), 2) and ro.source_task == 0
        assert np.count_nonzero(ro.d) <= 1
        assert ro.d[:-1].sum() == 0
        assert set(np.unique(ro.r)) <= {-1.0, 0.0, 1.0}


def test_different_seeds_differ():
    cfg = RolloutConfig(n=3, tmax=60, tmin=10)
    a = collect_random_rollouts(Env("gather"), 1, project, cfg, seed=1)
    b = collect_random_rollouts(Env("gather"), 1, project, cfg, seed=2)
    assert not a.equals(b)


def test_impossible_minimum_length_fails():
    cfg = RolloutConfig(n=1, tmax=10, tmin=5, max_attempts=3)
    with pytest.raises(RuntimeError):
        collect_random_rollouts(Env("bandit"), 0, project, cfg, seed=0)


def start_probe_controller():
    """C* that picks action 0 almost surely when h = 0 and action 5 once h moves."""
    h_dim = MCFG.hidden
    cfg = ControllerConfig(hidden=2 * h_dim)
    c = init_c_params(MCFG.latent_dim + h_dim, cfg, 0)
    for k in c.names():
        c.params[k][...] = 0.0
    w = c.params["fc.w"]
    for i in range(h_dim):
        w[MCFG.latent_dim + i, i] = 1e4
        w[MCFG.latent_dim + i, h_dim + i] = -1e4
    c.params["actor.w"][:, 5] = 1.0
    c.params["actor.b"][0] = 50.0
    return c


def test_policy_rollouts_start_each_episode_from_zero_state():
    m, _ = small_nets(1)
    c = start_probe_controller()
    cfg = RolloutConfig(n=5, tmax=40, tmin=5)
    rset = collect_policy_rollouts("paddle", 2, {}, project, m, MCFG, c, cfg, seed=4)
    for ro in rset:
        assert ro.a[0] == 0
        assert 5 <= len(ro) <= 40
        assert ro.source_task == 2
        # h has moved away from zero by the second step, so the policy flips
        assert np.all(ro.a[1:] == 5)


def test_policy_rollouts_sample_from_the_policy():
    m, c = small_nets(2)
    for k in c.names():
        c.params[k][...] = 0.0
    c.params["actor.b"][:] = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0]
    cfg = RolloutConfig(n=8, tmax=100, tmin=20)
    rset = collect_policy_rollouts("gather", 0, {}, project, m, MCFG, c, cfg, seed=5)
    acts = np.concatenate([ro.a for ro in rset])
    frac = np.mean(acts == 0)
    expected = np.e / (np.e + 5)
    assert frac > 1 / 6
    assert abs(frac - expected) < 0.05
    assert len(set(acts.tolist())) == 6     # stochastic, not argmax


def test_policy_rollouts_are_deterministic_and_capped():
    m, c = small_nets(3)
    cfg = RolloutConfig(n=4, tmax=30, tmin=1)
    a = collect_policy_rollouts("dodge", 1, {}, project, m, MCFG, c, cfg, seed=6)
    b = collect_policy_rollouts("dodge", 1, {}, project, m, MCFG, c, cfg, seed=6)
    assert a.equals(b)
    for ro in a:
        assert len(ro) <= 30
        assert ro.d[:-1].sum() == 0
        assert ro.d[-1] == 1.0 or len(ro) == 30


# -- simulated rollouts ------------------------------------------------------


def test_sim_rollouts_contract():
    m, c = small_nets(4)
    rset = generate_sim_rollouts(m, MCFG, c, n=20, tmax=25, seed=7)
    assert rset.kind == "simulated" and len(rset) == 20
    for ro in rset:
        assert len(ro) <= 25
        assert np.all(ro.h[0] == 0.0)
        assert ro.pi.shape == (len(ro), 6) and ro.h.shape == (len(ro), MCFG.hidden)
        assert np.all(np.isfinite(ro.z))
        assert ro.d[:-1].sum() == 0
        assert ro.source_task == -1
        np.testing.assert_allclose(ro.pi[0], c_forward(ro.z[0], np.zeros(MCFG.hidden), c)[0], rtol=1e-12, atol=1e-14)
    again = generate_sim_rollouts(m, MCFG, c, n=20, tmax=25, seed=7)
    assert rset.equals(again)


def test_always_done_model_gives_single_transition():
    m, c = small_nets(5)
    m.params["head.w"][:, -1] = 0.0
    m.params["head.b"][-1] = 20.0
    rset = generate_sim_rollouts(m, MCFG, c, n=10, tmax=50, seed=8)
    for ro in rset:
        # the seed point plus one predicted step: exactly one transition
        assert len(ro) - 1 == 1
        assert ro.d.tolist() == [0.0, 1.0]


def test_exploding_model_is_reported():
    m, c = small_nets(6)
    gl = MCFG.mixtures * MCFG.latent_dim
    m.params["head.b"][2 * gl:3 * gl] = 800.0      # sigma overflows to inf
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(FloatingPointError):
            generate_sim_rollouts(m, MCFG, c, n=2, tmax=5, seed=9)


# -- persistence -------------------------------------------------------------


def test_round_trip_both_kinds(tmp_path):
    m, c = small_nets(7)
    sim = generate_sim_rollouts(m, MCFG, c, n=5, tmax=20, seed=1)
    real = collect_random_rollouts(Env("paddle"), 0, project, RolloutConfig(n=3, tmax=50, tmin=10), seed=1)
    for rset in (sim, real):
        path = tmp_path / rollout_filename("exp", 3, rset.kind)
        save_rollouts(rset, path)
        back = load_rollouts(path)
        assert back.equals(rset)
        for ro, orig in zip(back, rset):
            assert ro.z.tobytes() == orig.z.tobytes()
    assert all(ro.pi is not None for ro in load_rollouts(tmp_path / "exp_it003_simulated.prrl"))
    assert all(ro.pi is None for ro in load_rollouts(tmp_path / "exp_it003_real.prrl"))


def saved(tmp_path):
    m, c = small_nets(8)
    path = tmp_path / "s.prrl"
    save_rollouts(generate_sim_rollouts(m, MCFG, c, n=3, tmax=10, seed=2), path)
    return path


def test_bad_magic(tmp_path):
    path = saved(tmp_path)
    data = bytearray(path.read_bytes())
    data[:4] = b"NOPE"
    path.write_bytes(bytes(data))
    with pytest.raises(RolloutFormatError, match="magic"):
        load_rollouts(path)


def test_version_mismatch(tmp_path):
    path = saved(tmp_path)
    data = bytearray(path.read_bytes())
    data[4:6] = struct.pack("<H", 99)
    path.write_bytes(bytes(data))
    with pytest.raises(RolloutFormatError, match="version"):
        load_rollouts(path)


def test_truncation_and_corruption(tmp_path):
    path = saved(tmp_path)
    data = path.read_bytes()
    path.write_bytes(data[:-20])
    with pytest.raises(RolloutFormatError):
        load_rollouts(path)
    path.write_bytes(data[:10])
    with pytest.raises(RolloutFormatError):
        load_rollouts(path)
    flipped = bytearray(data)
    flipped[40] ^= 0xFF
    path.write_bytes(bytes(flipped))
    with pytest.raises(RolloutFormatError, match="checksum"):
        load_rollouts(path)


def test_filename_encodes_experiment_iteration_and_kind():
    assert rollout_filename("rep00_rehearsal", 4, "simulated") == "rep00_rehearsal_it004_simulated.prrl"


def test_lstm_state_copy_is_independent():
    st = nx.LstmState.zeros(3)
    cp = st.copy()
    cp.h[0] = 1.0
    assert st.h[0] == 0.0
