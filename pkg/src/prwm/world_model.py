"""The M network: an LSTM over latents feeding a mixture-density head.

Raw head layout along the last axis (width 3*G*L + 2):
``[Pi (G*L) | mu (G*L) | log_sigma (G*L) | reward | done_logit]`` where each
G*L block is stored component-major, i.e. reshapes to (G, L).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .envs import NUM_ACTIONS


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 8
    mixtures: int = 5
    hidden: int = 64
    n_actions: int = NUM_ACTIONS

    def __post_init__(self):
        if self.latent_dim < 1 or self.mixtures < 1 or self.hidden < 1:
            raise ValueError(f"invalid model config {self}")

    @property
    def output_width(self) -> int:
        return 3 * self.mixtures * self.latent_dim + 2


@dataclass
class MTrainConfig:
    lr: float = 1e-3
    batches_per_epoch: int = 100
    batch: int = 16
    seq_len: int = 32


@dataclass
class MdnOutput:
    pi: np.ndarray          # (..., G, L) logits
    mu: np.ndarray          # (..., G, L)
    log_sigma: np.ndarray   # (..., G, L)
    reward_pred: np.ndarray  # (...)
    done_logit: np.ndarray   # (...)

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    def weights(self) -> np.ndarray:
        return nx.softmax(self.pi, axis=-2)


def init_m_params(cfg: ModelConfig, seed: int) -> nx.ParamSet:
    rng = np.random.default_rng(seed)
    ps = nx.ParamSet(nx.lstm_params(rng, cfg.latent_dim, cfg.hidden, "lstm"), rng_seed=seed)
    fan = cfg.hidden + cfg.n_actions
    ps.add("head.w", nx.uniform_init(rng, (fan, cfg.output_width), fan))
    ps.add("head.b", nx.uniform_init(rng, (cfg.output_width,), fan))
    return ps


def one_hot(a, n: int = NUM_ACTIONS) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64)
    out = np.zeros(a.shape + (n,))
    np.put_along_axis(out, a[..., None], 1.0, axis=-1)
    return out


def split_output(raw: np.ndarray, cfg: ModelConfig) -> MdnOutput:
    if raw.shape[-1] != cfg.output_width:
        raise nx.ShapeError(f"raw output width {raw.shape[-1]} != {cfg.output_width}")
    G, L = cfg.mixtures, cfg.latent_dim
    gl = G * L
    lead = raw.shape[:-1]
    return MdnOutput(
        raw[..., :gl].reshape(lead + (G, L)),
        raw[..., gl:2 * gl].reshape(lead + (G, L)),
        raw[..., 2 * gl:3 * gl].reshape(lead + (G, L)),
        raw[..., 3 * gl],
        raw[..., 3 * gl + 1],
    )


def m_forward(z, a, state: nx.LstmState, params: nx.ParamSet, cfg: ModelConfig):
    """One step: LSTM consumes z; its output joined with one-hot a feeds the head."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != cfg.latent_dim:
        raise nx.ShapeError(f"latent width {z.shape[-1]} != {cfg.latent_dim}")
    h, new_state, _ = nx.lstm_step(z, state, params, "lstm")
    feats = np.concatenate([h, one_hot(a, cfg.n_actions)], axis=-1)
    raw = feats @ params["head.w"] + params["head.b"]
    return split_output(raw, cfg), new_state


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _mdn_terms(out: MdnOutput, z_next: np.ndarray):
    """Per-dimension log-likelihood plus the pieces its gradient needs."""
    z = np.asarray(z_next, dtype=np.float64)[..., None, :]
    logp = nx.log_softmax(out.pi, axis=-2)
    sigma = np.exp(out.log_sigma)
    u = (z - out.mu) / sigma
    s = logp + (-out.log_sigma - 0.5 * nx.LOG_2PI - 0.5 * u * u)
    m = s.max(axis=-2, keepdims=True)
    lse = m + np.log(np.exp(s - m).sum(axis=-2, keepdims=True))
    resp = np.exp(s - lse)
    return lse.squeeze(-2), resp, np.exp(logp), u, sigma


def mdn_loss(out: MdnOutput, z_next) -> float | np.ndarray:
    """Negative log-likelihood averaged over latent dimensions (per leading index)."""
    ll, *_ = _mdn_terms(out, z_next)
    return -ll.mean(axis=-1)


def m_total_loss(out: MdnOutput, z_next, r, d):
    """(total, gmm, reward_mse, done_bce) with total the mean of the three."""
    gmm = mdn_loss(out, z_next)
    mse = (out.reward_pred - np.asarray(r, dtype=np.float64)) ** 2
    bce = nx.softplus(out.done_logit) - np.asarray(d, dtype=np.float64) * out.done_logit
    return (gmm + mse + bce) / 3.0, gmm, mse, bce


def sequence_loss_and_grads(params: nx.ParamSet, cfg: ModelConfig, z: np.ndarray, a: np.ndarray,
                            r: np.ndarray, d: np.ndarray, mask: np.ndarray | None = None,
                            need_grads: bool = True):
    """Mean M loss over a batch of windows, BPTT through the whole window.

    z is (T+1, B, L): inputs z[:-1], targets z[1:].  a, r, d, mask are (T, B);
    r and d are the reward/done that arrive together with z[1:].
    """
    t_len, bsz = a.shape
    hs, _, lcache = nx.lstm_sequence_forward(z[:-1], nx.LstmState.zeros(cfg.hidden, bsz), params, "lstm")
    feats = np.concatenate([hs, one_hot(a, cfg.n_actions)], axis=-1)
    raw = feats @ params["head.w"] + params["head.b"]
    out = split_output(raw, cfg)
    ll, resp, p, u, sigma = _mdn_terms(out, z[1:])
    gmm = -ll.mean(axis=-1)
    err = out.reward_pred - r
    mse = err * err
    bce = nx.softplus(out.done_logit) - d * out.done_logit
    total = (gmm + mse + bce) / 3.0
    if mask is None:
        mask = np.ones((t_len, bsz))
    n_valid = mask.sum()
    if n_valid == 0:
        raise ValueError("no valid steps in batch")
    terms = tuple(float((x * mask).sum() / n_valid) for x in (total, gmm, mse, bce))
    if not need_grads:
        return terms, None

    wstep = (mask / (3.0 * n_valid))[..., None, None]
    L = cfg.latent_dim
    dpi = wstep * (p - resp) / L
    dmu = wstep * (-resp * u / sigma) / L
    dls = wstep * resp * (1.0 - u * u) / L
    w2 = mask / (3.0 * n_valid)
    draw = np.concatenate([
        dpi.reshape(t_len, bsz, -1), dmu.reshape(t_len, bsz, -1), dls.reshape(t_len, bsz, -1),
        (w2 * 2.0 * err)[..., None], (w2 * (nx.sigmoid(out.done_logit) - d))[..., None],
    ], axis=-1)
    d2 = draw.reshape(t_len * bsz, -1)
    grads = {
        "head.w": feats.reshape(t_len * bsz, -1).T @ d2,
        "head.b": d2.sum(axis=0),
    }
    dh = (draw @ params["head.w"][:cfg.hidden].T)
    _, lgrads = nx.lstm_sequence_backward(dh, lcache, params, "lstm")
    grads.update(lgrads)
    return terms, grads


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def sample_next(out: MdnOutput, rng: np.random.Generator, temperature: float = 1.0):
    """Draw (z_next, reward, done) from one (possibly batched) head output.

    Per latent dimension a component is drawn from softmax(Pi[:, i]); the value
    is then Gaussian with that component's mean and temperature-scaled sigma.
    Reward is rounded onto {-1, 0, 1}; done fires when sigmoid(logit) > 0.5.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    w = out.weights()                               # (..., G, L)
    cum = np.cumsum(w, axis=-2)
    u = rng.random(w.shape[:-2] + (1,) + w.shape[-1:])
    comp = np.minimum((u > cum).sum(axis=-2, keepdims=True), w.shape[-2] - 1)
    mu = np.take_along_axis(out.mu, comp, axis=-2)[..., 0, :]
    sigma = np.take_along_axis(out.sigma, comp, axis=-2)[..., 0, :]
    z = mu + temperature * sigma * rng.standard_normal(mu.shape)
    reward = np.clip(np.rint(out.reward_pred), -1.0, 1.0)
    done = out.done_logit > 0.0
    return z, reward, done


# ---------------------------------------------------------------------------
# training / evaluation over rollout sets
# ---------------------------------------------------------------------------


def _sample_batch(rollouts: Sequence, n: int, seq_len: int, rng: np.random.Generator):
    lengths = np.array([len(ro) for ro in rollouts])
    eligible = np.flatnonzero(lengths >= seq_len + 1)
    if eligible.size == 0:
        # every rollout is short: shrink the window to the longest one available
        seq_len = int(lengths.max()) - 1
        if seq_len < 1:
            raise ValueError("no rollout has a single transition")
        eligible = np.flatnonzero(lengths >= seq_len + 1)
    picks = eligible[rng.integers(0, eligible.size, size=n)]
    z = np.empty((seq_len + 1, n, rollouts[0].z.shape[1]))
    a = np.empty((seq_len, n), dtype=np.int64)
    r = np.empty((seq_len, n))
    d = np.empty((seq_len, n))
    for j, k in enumerate(picks):
        ro = rollouts[k]
        s = int(rng.integers(0, len(ro) - seq_len))
        z[:, j] = ro.z[s:s + seq_len + 1]
        a[:, j] = ro.a[s:s + seq_len]
        r[:, j] = ro.r[s + 1:s + seq_len + 1]
        d[:, j] = ro.d[s + 1:s + seq_len + 1]
    return z, a, r, d


@dataclass
class EpochStats:
    loss: float
    real_batches: int
    sim_batches: int


def train_m_epoch(real_rollouts: Sequence, sim_rollouts: Sequence | None, params: nx.ParamSet,
                  opt: nx.Adam, cfg: ModelConfig, tcfg: MTrainConfig, rng: np.random.Generator) -> EpochStats:
    """One epoch of minibatch updates; with simulated rollouts, batches alternate real/sim."""
    if not real_rollouts:
        raise ValueError("no real rollouts to train on")
    use_sim = bool(sim_rollouts)
    losses = []
    n_real = n_sim = 0
    for b in range(tcfg.batches_per_epoch):
        from_sim = use_sim and b % 2 == 1
        source = sim_rollouts if from_sim else real_rollouts
        z, a, r, d = _sample_batch(source, tcfg.batch, tcfg.seq_len, rng)
        terms, grads = sequence_loss_and_grads(params, cfg, z, a, r, d)
        opt.step(grads)
        losses.append(terms[0])
        if from_sim:
            n_sim += 1
        else:
            n_real += 1
    return EpochStats(float(np.mean(losses)), n_real, n_sim)


def _eval_windows(rollouts: Sequence, seq_len: int):
    chunks = []
    for ro in rollouts:
        n_trans = len(ro) - 1
        for s in range(0, n_trans, seq_len):
            chunks.append((ro, s, min(seq_len, n_trans - s)))
    return chunks


def evaluate_m(test_rollouts: Sequence, params: nx.ParamSet, cfg: ModelConfig, seq_len: int = 32) -> float:
    """Average loss per output unit over consecutive held-out windows (state zeroed per window)."""
    chunks = _eval_windows(test_rollouts, seq_len)
    if not chunks:
        raise ValueError("empty test set")
    n = len(chunks)
    L = cfg.latent_dim
    z = np.zeros((seq_len + 1, n, L))
    a = np.zeros((seq_len, n), dtype=np.int64)
    r = np.zeros((seq_len, n))
    d = np.zeros((seq_len, n))
    mask = np.zeros((seq_len, n))
    for j, (ro, s, ln) in enumerate(chunks):
        z[:ln + 1, j] = ro.z[s:s + ln + 1]
        a[:ln, j] = ro.a[s:s + ln]
        r[:ln, j] = ro.r[s + 1:s + ln + 1]
        d[:ln, j] = ro.d[s + 1:s + ln + 1]
        mask[:ln, j] = 1.0
    (total, *_), _ = sequence_loss_and_grads(params, cfg, z, a, r, d, mask, need_grads=False)
    return total / cfg.output_width
