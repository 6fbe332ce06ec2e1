"""Real and simulated rollouts, plus the PRRL binary format they persist in."""

from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import numerics as nx
from .controller import c_forward
from .envs import NUM_ACTIONS, Env, random_policy_action
from .world_model import ModelConfig, m_forward, sample_next

log = logging.getLogger(__name__)

ROLLOUT_MAGIC = b"PRRL"
ROLLOUT_VERSION = 1
KIND_CODES = {"real": 0, "simulated": 1}
UNKNOWN_TASK = -1


class RolloutFormatError(ValueError):
    pass


@dataclass
class RolloutConfig:
    n: int = 100
    tmax: int = 300
    tmin: int = 100
    max_attempts: int = 200

    def __post_init__(self):
        if self.n < 1 or self.tmin > self.tmax:
            raise ValueError(f"invalid rollout config {self}")


@dataclass
class Rollout:
    """Time-aligned arrays.  Step t holds the latent z_t, the action taken there,
    and the reward / done flag that arrived together with z_t.
    """

    z: np.ndarray
    a: np.ndarray
    r: np.ndarray
    d: np.ndarray
    kind: str = "real"
    source_task: int = UNKNOWN_TASK
    pi: np.ndarray | None = None
    h: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.a)

    def equals(self, other: "Rollout") -> bool:
        def same(x, y):
            if x is None or y is None:
                return x is None and y is None
            return np.array_equal(x, y)
        return (self.kind == other.kind and self.source_task == other.source_task
                and all(same(getattr(self, k), getattr(other, k)) for k in ("z", "a", "r", "d", "pi", "h")))


@dataclass
class RolloutSet:
    rollouts: list[Rollout] = field(default_factory=list)
    kind: str = "real"
    latent_dim: int = 0

    def __len__(self) -> int:
        return len(self.rollouts)

    def __iter__(self) -> Iterator[Rollout]:
        return iter(self.rollouts)

    def __getitem__(self, i):
        return self.rollouts[i]

    def split(self, train_frac: float = 0.9) -> tuple[list[Rollout], list[Rollout]]:
        """First 90% train, last 10% test (at least one rollout in test when possible)."""
        n_train = split_index(len(self.rollouts), train_frac)
        return self.rollouts[:n_train], self.rollouts[n_train:]

    def equals(self, other: "RolloutSet") -> bool:
        return (self.kind == other.kind and self.latent_dim == other.latent_dim
                and len(self) == len(other) and all(a.equals(b) for a, b in zip(self, other)))


def split_index(n: int, train_frac: float = 0.9) -> int:
    n_train = int(round(train_frac * n))
    if n > 1:
        n_train = min(max(n_train, 1), n - 1)
    return n_train


def episode_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# real rollouts
# ---------------------------------------------------------------------------


def random_episode(env: Env, seed: int, tmax: int):
    """Sticky-random-policy episode: (frames, actions, rewards, dones), truncated at tmax."""
    rng = np.random.default_rng(seed)
    obs = env.reset(seed)
    frames, actions, rewards, dones = [obs.frame], [], [0.0], [0.0]
    last = int(rng.integers(NUM_ACTIONS))
    while True:
        last = random_policy_action(rng, last)
        actions.append(last)
        if obs.done or len(frames) >= tmax:
            break
        obs = env.step(last)
        frames.append(obs.frame)
        rewards.append(obs.reward)
        dones.append(float(obs.done))
    return np.array(frames), np.array(actions, dtype=np.int64), np.array(rewards), np.array(dones)


def random_episodes(env: Env, task_id: int, cfg: RolloutConfig, seed: int):
    """Yield N random episodes of length in [tmin, tmax], resampling short ones."""
    for i in range(cfg.n):
        for attempt in range(cfg.max_attempts):
            ep = random_episode(env, episode_seed(seed, task_id, i, attempt), cfg.tmax)
            if len(ep[1]) >= cfg.tmin:
                yield ep
                break
        else:
            raise RuntimeError(f"task {env.task_name}: no episode reached {cfg.tmin} steps "
                               f"in {cfg.max_attempts} attempts")


LatentFn = Callable[[np.ndarray, np.random.Generator], np.ndarray]


def collect_random_rollouts(env: Env, task_id: int, latent_fn: LatentFn, cfg: RolloutConfig, seed: int) -> RolloutSet:
    """N random-policy rollouts encoded through the frozen V.

    ``latent_fn(frames, rng)`` maps a (T, H, W, C) stack to (T, L) latents.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, task_id, 7]))
    out = []
    for frames, a, r, d in random_episodes(env, task_id, cfg, seed):
        out.append(Rollout(latent_fn(frames, rng), a, r, d, "real", task_id))
    return RolloutSet(out, "real", out[0].z.shape[1])


def _sample_actions(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(nx.softmax(logits, axis=-1), axis=-1)
    u = rng.random(len(logits))
    return np.minimum((u[:, None] > cum).sum(axis=1), NUM_ACTIONS - 1)


def collect_policy_rollouts(task: str, task_id: int, env_kwargs: dict, latent_fn: LatentFn,
                            m_params: nx.ParamSet, mcfg: ModelConfig, c_params: nx.ParamSet,
                            cfg: RolloutConfig, seed: int) -> RolloutSet:
    """N rollouts acting with C* on [z_t, h_t], h advanced by M* from zero at each episode start.

    All N episodes run in lockstep so V, M* and C* see batched inputs.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, task_id, 11]))
    envs = [Env(task, **env_kwargs) for _ in range(cfg.n)]
    attempts = [0] * cfg.n
    finished: list[Rollout | None] = [None] * cfg.n
    buf: list[dict] = [{} for _ in range(cfg.n)]

    def start(k: int) -> np.ndarray:
        obs = envs[k].reset(episode_seed(seed, task_id, k, attempts[k]))
        buf[k] = {"frames": [obs.frame], "a": [], "r": [0.0], "d": [0.0]}
        return obs.frame

    frames = np.array([start(k) for k in range(cfg.n)])
    active = list(range(cfg.n))
    states = nx.LstmState.zeros(mcfg.hidden, cfg.n)
    while active:
        idx = np.array(active)
        z = latent_fn(frames[idx], rng)
        logits, _ = c_forward(z, states.h[idx], c_params)
        acts = _sample_actions(logits, rng)
        _, new_state, _ = nx.lstm_step(z, nx.LstmState(states.h[idx], states.c[idx]), m_params, "lstm")
        states.h[idx] = new_state.h
        states.c[idx] = new_state.c
        still = []
        for j, k in enumerate(active):
            b = buf[k]
            b["a"].append(int(acts[j]))
            b.setdefault("z", []).append(z[j])
            ended = b["d"][-1] > 0 or len(b["frames"]) >= cfg.tmax
            if not ended:
                obs = envs[k].step(int(acts[j]))
                b["frames"].append(obs.frame)
                b["r"].append(obs.reward)
                b["d"].append(float(obs.done))
                frames[k] = obs.frame
                still.append(k)
                continue
            if len(b["a"]) < cfg.tmin and attempts[k] + 1 < cfg.max_attempts:
                attempts[k] += 1
                frames[k] = start(k)
                states.h[k] = 0.0
                states.c[k] = 0.0
                still.append(k)
                continue
            if len(b["a"]) < cfg.tmin:
                log.warning("task %s slot %d: accepting %d-step rollout after %d attempts",
                            task, k, len(b["a"]), cfg.max_attempts)
            finished[k] = Rollout(np.array(b["z"]), np.array(b["a"], dtype=np.int64),
                                  np.array(b["r"]), np.array(b["d"]), "real", task_id)
        active = still
    return RolloutSet(finished, "real", mcfg.latent_dim)


# ---------------------------------------------------------------------------
# simulated rollouts
# ---------------------------------------------------------------------------


def generate_sim_rollouts(m_params: nx.ParamSet, mcfg: ModelConfig, c_params: nx.ParamSet,
                          n: int, tmax: int, seed: int, temperature: float = 1.0) -> RolloutSet:
    """Dream N rollouts with frozen M*, C*.

    Each starts from z ~ N(0, I), a zeroed LSTM state and a uniform action;
    thereafter M* samples the next (z, r, done) and C* picks the next action.
    The teacher logits pi and the C-input hidden state h are kept per step.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
    L, H = mcfg.latent_dim, mcfg.hidden
    done_list: list[Rollout | None] = [None] * n
    pending = list(range(n))
    failures = 0
    while pending:
        m = len(pending)
        zs = np.empty((tmax, m, L))
        acts = np.zeros((tmax, m), dtype=np.int64)
        rs = np.zeros((tmax, m))
        ds = np.zeros((tmax, m))
        pis = np.empty((tmax, m, NUM_ACTIONS))
        hs = np.empty((tmax, m, H))
        lengths = np.full(m, tmax)
        alive = np.ones(m, dtype=bool)
        bad = np.zeros(m, dtype=bool)
        state = nx.LstmState.zeros(H, m)
        z = rng.standard_normal((m, L))
        a = rng.integers(0, NUM_ACTIONS, size=m)
        zs[0], hs[0], acts[0] = z, state.h, a
        pis[0], _ = c_forward(z, state.h, c_params)
        for t in range(1, tmax):
            with np.errstate(over="ignore", invalid="ignore"):
                out, state = m_forward(z, a, state, m_params, mcfg)
                finite = np.isfinite(out.pi).all(axis=(1, 2))
                out.pi[~finite] = 0.0
                z, r, d = sample_next(out, rng, temperature)
                logits, _ = c_forward(z, state.h, c_params)
            finite &= np.isfinite(z).all(axis=1) & np.isfinite(logits).all(axis=1) & np.isfinite(state.h).all(axis=1)
            # rows that blew up are dropped below; keep them numerically inert meanwhile
            a = _sample_actions(np.where(finite[:, None], logits, 0.0), rng)
            zs[t], rs[t], ds[t], pis[t], hs[t], acts[t] = z, r, d, logits, state.h, a
            z = np.where(finite[:, None], z, 0.0)
            state.h[~finite] = 0.0
            state.c[~finite] = 0.0
            newly_bad = alive & ~finite
            bad |= newly_bad
            ending = alive & (d | newly_bad)
            lengths[ending] = t + 1
            alive &= ~ending
            if not alive.any():
                break
        retry = []
        for j, k in enumerate(pending):
            if bad[j]:
                retry.append(k)
                continue
            ln = lengths[j]
            done_list[k] = Rollout(zs[:ln, j].copy(), acts[:ln, j].copy(), rs[:ln, j].copy(), ds[:ln, j].copy(),
                                   "simulated", UNKNOWN_TASK, pis[:ln, j].copy(), hs[:ln, j].copy())
        if retry:
            failures += len(retry)
            log.warning("simulated rollouts: %d non-finite, resampling", len(retry))
            if failures > 10 * n:
                raise FloatingPointError("world model keeps producing non-finite rollouts")
        pending = retry
    return RolloutSet(done_list, "simulated", L)


# ---------------------------------------------------------------------------
# PRRL persistence
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sHHBBBHI")   # magic, version, L, n_actions, kind, flags, H, n_rollouts
_RECORD = struct.Struct("<hI")          # source_task, length


def save_rollouts(rset: RolloutSet, path: str | Path) -> None:
    """Layout: header, per-rollout records, then a CRC32 of everything before it.

    Record: i16 source task, u32 length, z (f64), a (u8), r (i8), d (u8),
    then teacher logits pi (f64) and hidden states h (f64) when flagged.
    """
    ros = rset.rollouts
    has_pi = bool(ros) and all(ro.pi is not None for ro in ros)
    has_h = bool(ros) and all(ro.h is not None for ro in ros)
    hid = ros[0].h.shape[1] if has_h else 0
    flags = (1 if has_pi else 0) | (2 if has_h else 0)
    parts = [_HEADER.pack(ROLLOUT_MAGIC, ROLLOUT_VERSION, rset.latent_dim, NUM_ACTIONS,
                          KIND_CODES[rset.kind], flags, hid, len(ros))]
    for ro in ros:
        parts.append(_RECORD.pack(ro.source_task, len(ro)))
        parts.append(np.ascontiguousarray(ro.z, dtype="<f8").tobytes())
        parts.append(np.asarray(ro.a, dtype=np.uint8).tobytes())
        parts.append(np.asarray(ro.r, dtype=np.int8).tobytes())
        parts.append(np.asarray(ro.d, dtype=np.uint8).tobytes())
        if has_pi:
            parts.append(np.ascontiguousarray(ro.pi, dtype="<f8").tobytes())
        if has_h:
            parts.append(np.ascontiguousarray(ro.h, dtype="<f8").tobytes())
    body = b"".join(parts)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    tmp.replace(path)


def load_rollouts(path: str | Path) -> RolloutSet:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 4:
        raise RolloutFormatError(f"{path}: truncated file")
    magic, version, L, n_act, kind_code, flags, hid, n = _HEADER.unpack_from(data, 0)
    if magic != ROLLOUT_MAGIC:
        raise RolloutFormatError(f"{path}: bad magic {magic!r}")
    if version != ROLLOUT_VERSION:
        raise RolloutFormatError(f"{path}: unsupported version {version}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise RolloutFormatError(f"{path}: checksum mismatch")
    kind = {v: k for k, v in KIND_CODES.items()}[kind_code]
    pos = _HEADER.size
    out = []

    def take(count: int, dtype: str) -> np.ndarray:
        nonlocal pos
        size = np.dtype(dtype).itemsize * count
        if pos + size > len(body):
            raise RolloutFormatError(f"{path}: truncated rollout data")
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=pos)
        pos += size
        return arr

    for _ in range(n):
        if pos + _RECORD.size > len(body):
            raise RolloutFormatError(f"{path}: truncated record header")
        task, T = _RECORD.unpack_from(body, pos)
        pos += _RECORD.size
        z = take(T * L, "<f8").reshape(T, L).astype(np.float64)
        a = take(T, "u1").astype(np.int64)
        r = take(T, "i1").astype(np.float64)
        d = take(T, "u1").astype(np.float64)
        pi = take(T * n_act, "<f8").reshape(T, n_act).astype(np.float64) if flags & 1 else None
        h = take(T * hid, "<f8").reshape(T, hid).astype(np.float64) if flags & 2 else None
        out.append(Rollout(z, a, r, d, kind, task, pi, h))
    if pos != len(body):
        raise RolloutFormatError(f"{path}: {len(body) - pos} trailing bytes")
    return RolloutSet(out, kind, L)


def rollout_filename(experiment: str, iteration: int, kind: str) -> str:
    return f"{experiment}_it{iteration:03d}_{kind}.prrl"
