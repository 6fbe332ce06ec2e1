"""The C network: actor-critic over [z, h], trained by A2C and by policy distillation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .envs import NUM_ACTIONS, Env


@dataclass
class ControllerConfig:
    hidden: int = 512
    lr: float = 1e-3
    tau: float = 0.01
    gamma: float = 0.99
    horizon: int = 5
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    n_steps_per_exposure: int = 20000
    distill_window: int = 2000
    distill_batch: int = 64

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")


ACTOR_NAMES = ("fc.w", "fc.b", "actor.w", "actor.b")


def init_c_params(n_in: int, cfg: ControllerConfig, seed: int) -> nx.ParamSet:
    rng = np.random.default_rng(seed)
    ps = nx.ParamSet(rng_seed=seed)
    ps.add("fc.w", nx.uniform_init(rng, (n_in, cfg.hidden), n_in))
    ps.add("fc.b", nx.uniform_init(rng, (cfg.hidden,), n_in))
    ps.add("actor.w", nx.uniform_init(rng, (cfg.hidden, NUM_ACTIONS), cfg.hidden))
    ps.add("actor.b", nx.uniform_init(rng, (NUM_ACTIONS,), cfg.hidden))
    ps.add("critic.w", nx.uniform_init(rng, (cfg.hidden, 1), cfg.hidden))
    ps.add("critic.b", nx.uniform_init(rng, (1,), cfg.hidden))
    return ps


def _trunk(z, h, params):
    x = np.concatenate([np.asarray(z, dtype=np.float64), np.asarray(h, dtype=np.float64)], axis=-1)
    if x.shape[-1] != params["fc.w"].shape[0]:
        raise nx.ShapeError(f"controller input width {x.shape[-1]} != {params['fc.w'].shape[0]}")
    pre = x @ params["fc.w"] + params["fc.b"]
    return x, np.maximum(pre, 0.0)


def c_forward(z, h, params: nx.ParamSet):
    """(logits over the 6 actions, state value) for one or a batch of inputs."""
    _, hid = _trunk(z, h, params)
    logits = hid @ params["actor.w"] + params["actor.b"]
    value = (hid @ params["critic.w"] + params["critic.b"])[..., 0]
    return logits, value


def sample_action(logits: np.ndarray, rng: np.random.Generator) -> int:
    p = nx.softmax(logits)
    return int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), NUM_ACTIONS - 1))


def _trunk_backward(x, hid, dhid, params, grads):
    dpre = dhid * (hid > 0)
    grads["fc.w"] = x.T @ dpre
    grads["fc.b"] = dpre.sum(axis=0)


def nstep_returns(rewards, dones, bootstrap: float, gamma: float) -> np.ndarray:
    """R_t = r_t + gamma * R_{t+1}, cut at terminal steps; R_n = bootstrap."""
    out = np.empty(len(rewards))
    running = float(bootstrap)
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * running * (1.0 - dones[t])
        out[t] = running
    return out


@dataclass
class A2CStats:
    policy_loss: float
    value_loss: float
    entropy: float


def a2c_loss_and_grads(z, h, actions, returns, params: nx.ParamSet, cfg: ControllerConfig):
    x, hid = _trunk(z, h, params)
    logits = hid @ params["actor.w"] + params["actor.b"]
    value = (hid @ params["critic.w"] + params["critic.b"])[:, 0]
    logp = nx.log_softmax(logits)
    p = np.exp(logp)
    n = len(actions)
    adv = returns - value
    idx = np.arange(n)
    policy_loss = float(-(adv * logp[idx, actions]).sum())
    value_loss = float(cfg.value_coef * ((returns - value) ** 2).sum())
    ent = -(p * logp).sum(axis=1)
    onehot = np.zeros_like(p)
    onehot[idx, actions] = 1.0
    dlogits = -adv[:, None] * (onehot - p) + cfg.entropy_coef * p * (logp + ent[:, None])
    dvalue = 2.0 * cfg.value_coef * (value - returns)
    grads = {
        "actor.w": hid.T @ dlogits,
        "actor.b": dlogits.sum(axis=0),
        "critic.w": hid.T @ dvalue[:, None],
        "critic.b": np.array([dvalue.sum()]),
    }
    dhid = dlogits @ params["actor.w"].T + dvalue[:, None] @ params["critic.w"].T
    _trunk_backward(x, hid, dhid, params, grads)
    return A2CStats(policy_loss, value_loss, float(ent.sum())), grads


def a2c_update(z, h, actions, rewards, dones, bootstrap: float, params: nx.ParamSet,
               opt: nx.Adam, cfg: ControllerConfig) -> A2CStats:
    """One synchronous A2C step on an n-step trajectory."""
    if len(actions) == 0:
        raise ValueError("empty trajectory")
    returns = nstep_returns(rewards, dones, bootstrap, cfg.gamma)
    stats, grads = a2c_loss_and_grads(np.asarray(z), np.asarray(h), np.asarray(actions, dtype=np.int64),
                                      returns, params, cfg)
    opt.step(grads)
    return stats


def distill_loss_and_grads(z, h, teacher_logits, params: nx.ParamSet, tau: float):
    """Soft cross-entropy between temperature-scaled teacher and student policies.

    The logit gradient is (softmax(pi/tau) - softmax(pi_teacher/tau)) / tau, so it
    is exactly zero wherever student and teacher logits coincide.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    x, hid = _trunk(z, h, params)
    logits = hid @ params["actor.w"] + params["actor.b"]
    target = nx.softmax(teacher_logits / tau)
    student_logp = nx.log_softmax(logits / tau)
    loss = float(-(target * student_logp).sum())
    dlogits = (nx.softmax(logits / tau) - target) / tau
    grads = {"actor.w": hid.T @ dlogits, "actor.b": dlogits.sum(axis=0)}
    _trunk_backward(x, hid, dlogits @ params["actor.w"].T, params, grads)
    return loss, grads


def distill_update(z, h, teacher_logits, params: nx.ParamSet, opt: nx.Adam, tau: float) -> float:
    loss, grads = distill_loss_and_grads(z, h, teacher_logits, params, tau)
    opt.step(grads)
    return loss


def make_distill_optimizer(params: nx.ParamSet, lr: float) -> nx.Adam:
    """Adam over the trunk and actor head only; the critic is left to A2C."""
    return nx.Adam(params, lr=lr, names=ACTOR_NAMES)


# ---------------------------------------------------------------------------
# one exposure of controller training
# ---------------------------------------------------------------------------


@dataclass
class RewardLog:
    episode_returns: list[float] = field(default_factory=list)
    episode_end_frames: list[int] = field(default_factory=list)
    real_frames: int = 0
    distilled_frames: int = 0
    updates: int = 0


def _sim_pool(sim_rollouts: Sequence):
    z = np.concatenate([ro.z for ro in sim_rollouts])
    h = np.concatenate([ro.h for ro in sim_rollouts])
    pi = np.concatenate([ro.pi for ro in sim_rollouts])
    return z, h, pi


def train_c_exposure(env: Env, encode, m_params: nx.ParamSet, m_hidden: int, c_params: nx.ParamSet,
                     opt: nx.Adam, distill_opt: nx.Adam | None, sim_rollouts: Sequence | None,
                     cfg: ControllerConfig, rng: np.random.Generator, episode_seed_base: int = 0) -> RewardLog:
    """A2C on the live task for ``n_steps_per_exposure`` frames.

    ``encode`` maps a frame to its latent; the M network's LSTM supplies h (no
    gradient flows back into M).  With simulated rollouts, every
    ``distill_window`` real frames is followed by as many distilled frames.
    """
    log = RewardLog()
    pool = _sim_pool(sim_rollouts) if sim_rollouts else None
    next_distill = cfg.distill_window
    episode = 0
    obs = env.reset(episode_seed_base)
    z = encode(obs.frame)
    state = nx.LstmState.zeros(m_hidden)
    ep_return = 0.0
    while log.real_frames < cfg.n_steps_per_exposure:
        zs, hs, acts, rews, dones = [], [], [], [], []
        for _ in range(cfg.horizon):
            logits, _ = c_forward(z, state.h, c_params)
            a = sample_action(logits, rng)
            zs.append(z)
            hs.append(state.h)
            acts.append(a)
            _, state, _ = nx.lstm_step(z, state, m_params, "lstm")
            obs = env.step(a)
            log.real_frames += 1
            ep_return += obs.reward
            rews.append(obs.reward)
            dones.append(float(obs.done))
            if obs.done:
                log.episode_returns.append(ep_return)
                log.episode_end_frames.append(log.real_frames)
                ep_return = 0.0
                episode += 1
                obs = env.reset(episode_seed_base + episode)
                state = nx.LstmState.zeros(m_hidden)
                z = encode(obs.frame)
                break
            z = encode(obs.frame)
            if log.real_frames >= cfg.n_steps_per_exposure:
                break
        bootstrap = 0.0 if dones[-1] else float(c_forward(z, state.h, c_params)[1])
        a2c_update(np.array(zs), np.array(hs), acts, np.array(rews), np.array(dones), bootstrap,
                   c_params, opt, cfg)
        log.updates += 1
        if pool is not None and log.real_frames >= next_distill:
            log.distilled_frames += _distill_window(pool, c_params, distill_opt, cfg, rng)
            next_distill += cfg.distill_window
    return log


def _distill_window(pool, params, opt, cfg: ControllerConfig, rng: np.random.Generator) -> int:
    z, h, pi = pool
    done = 0
    while done < cfg.distill_window:
        n = min(cfg.distill_batch, cfg.distill_window - done)
        idx = rng.integers(0, len(z), size=n)
        distill_update(z[idx], h[idx], pi[idx], params, opt, cfg.tau)
        done += n
    return done
