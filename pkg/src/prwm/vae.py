"""Convolutional VAE (the V network): frames <-> L-dimensional latents."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx

log = logging.getLogger(__name__)

KERNEL = 4
STRIDE = 2


@dataclass
class LatentDistribution:
    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class VaeConfig:
    frame_shape: tuple[int, int, int] = (32, 32, 1)
    latent_dim: int = 8
    conv_stack: tuple[int, ...] = (16, 32)
    lr: float = 1e-3
    batch: int = 32
    patience: int = 5
    min_delta: float = 1e-4
    beta: float = 1.0
    epoch_samples: int = 10000
    max_epochs: int = 40


class VAE:
    def __init__(self, config: VaeConfig, seed: int = 0, params: nx.ParamSet | None = None):
        self.config = config
        h, w, c = config.frame_shape
        self.spatial = [(h, w)]
        for _ in config.conv_stack:
            ph, pw = self.spatial[-1]
            if ph < KERNEL or pw < KERNEL:
                raise nx.ShapeError(f"frame {config.frame_shape} too small for {len(config.conv_stack)} conv layers")
            self.spatial.append((nx.conv_output_size(ph, KERNEL, STRIDE), nx.conv_output_size(pw, KERNEL, STRIDE)))
        fh, fw = self.spatial[-1]
        self.flat_dim = config.conv_stack[-1] * fh * fw
        self.params = params if params is not None else self._init(seed)

    def _init(self, seed: int) -> nx.ParamSet:
        cfg = self.config
        rng = np.random.default_rng(seed)
        ps = nx.ParamSet(rng_seed=seed)
        chans = [cfg.frame_shape[2], *cfg.conv_stack]
        for k in range(len(cfg.conv_stack)):
            fan = chans[k] * KERNEL * KERNEL
            ps.add(f"enc{k}.w", nx.uniform_init(rng, (chans[k + 1], chans[k], KERNEL, KERNEL), fan))
            ps.add(f"enc{k}.b", nx.uniform_init(rng, (chans[k + 1],), fan))
        L = cfg.latent_dim
        ps.add("enc_head.w", nx.uniform_init(rng, (self.flat_dim, 2 * L), self.flat_dim))
        ps.add("enc_head.b", nx.uniform_init(rng, (2 * L,), self.flat_dim))
        ps.add("dec_head.w", nx.uniform_init(rng, (L, self.flat_dim), L))
        ps.add("dec_head.b", nx.uniform_init(rng, (self.flat_dim,), L))
        # decoder layer k maps chans[k+1] -> chans[k], applied from the deepest down
        for k in reversed(range(len(cfg.conv_stack))):
            fan = chans[k + 1] * KERNEL * KERNEL
            ps.add(f"dec{k}.w", nx.uniform_init(rng, (chans[k + 1], chans[k], KERNEL, KERNEL), fan))
            ps.add(f"dec{k}.b", nx.uniform_init(rng, (chans[k],), fan))
        return ps

    # -- shapes ------------------------------------------------------------

    def _to_nchw(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim == 3:
            frames = frames[None]
        if frames.shape[1:] != tuple(self.config.frame_shape):
            raise nx.ShapeError(f"frame shape {frames.shape[1:]} != configured {self.config.frame_shape}")
        return frames.transpose(0, 3, 1, 2)

    # -- forward -----------------------------------------------------------

    def _encode(self, x: np.ndarray):
        caches = []
        for k in range(len(self.config.conv_stack)):
            x, cc = nx.conv2d_forward(x, self.params[f"enc{k}.w"], self.params[f"enc{k}.b"], STRIDE)
            x, mask = nx.relu_forward(x)
            caches.append((cc, mask))
        flat = x.reshape(x.shape[0], -1)
        out, hc = nx.linear_forward(flat, self.params["enc_head.w"], self.params["enc_head.b"])
        L = self.config.latent_dim
        return out[:, :L], out[:, L:], (caches, x.shape, hc)

    def _decode(self, z: np.ndarray):
        n = len(self.config.conv_stack)
        x, hc = nx.linear_forward(z, self.params["dec_head.w"], self.params["dec_head.b"])
        x, hmask = nx.relu_forward(x)
        fh, fw = self.spatial[-1]
        x = x.reshape(z.shape[0], self.config.conv_stack[-1], fh, fw)
        caches = []
        for k in reversed(range(n)):
            x, cc = nx.conv_transpose2d_forward(x, self.params[f"dec{k}.w"], self.params[f"dec{k}.b"],
                                                STRIDE, self.spatial[k])
            if k > 0:
                x, mask = nx.relu_forward(x)
            else:
                mask = None
            caches.append((cc, mask))
        out = nx.sigmoid(x)
        return out, (hc, hmask, caches, out)

    def encode(self, frames: np.ndarray) -> LatentDistribution:
        """Frames (B, H, W, C) or a single (H, W, C) frame -> per-frame (mu, sigma)."""
        single = np.asarray(frames).ndim == 3
        mu, log_sigma, _ = self._encode(self._to_nchw(frames))
        dist = LatentDistribution(mu, np.exp(log_sigma))
        if single:
            return LatentDistribution(dist.mu[0], dist.sigma[0])
        return dist

    def encode_mean(self, frames: np.ndarray, chunk: int = 512) -> np.ndarray:
        frames = np.asarray(frames)
        parts = [self.encode(frames[i:i + chunk]).mu for i in range(0, len(frames), chunk)]
        return np.concatenate(parts) if parts else np.zeros((0, self.config.latent_dim))

    def encode_sample(self, frames: np.ndarray, rng: np.random.Generator, chunk: int = 512) -> np.ndarray:
        """One reparameterized posterior draw per frame."""
        frames = np.asarray(frames)
        parts = []
        for i in range(0, len(frames), chunk):
            parts.append(sample_latent(self.encode(frames[i:i + chunk]), rng))
        return np.concatenate(parts) if parts else np.zeros((0, self.config.latent_dim))

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        out, _ = self._decode(np.atleast_2d(z))
        out = out.transpose(0, 2, 3, 1)
        return out[0] if single else out

    # -- training ----------------------------------------------------------

    def loss_and_grads(self, frames: np.ndarray, rng: np.random.Generator):
        """Batch-mean (total, recon, kl) with total = recon + beta * kl, plus gradients."""
        x = self._to_nchw(frames)
        bsz = x.shape[0]
        mu, ls, ecache = self._encode(x)
        sigma = np.exp(ls)
        eps = rng.standard_normal(mu.shape)
        z = mu + sigma * eps
        recon, dcache = self._decode(z)
        npix = recon[0].size
        diff = recon - x
        recon_term = float(np.mean(np.sum(diff * diff, axis=(1, 2, 3)) / npix))
        kl_per = 0.5 * np.sum(mu * mu + sigma * sigma - 1.0 - 2.0 * ls, axis=1)
        kl_term = float(np.mean(kl_per))
        beta = self.config.beta
        total = recon_term + beta * kl_term

        grads: dict[str, np.ndarray] = {}
        d = 2.0 * diff / (npix * bsz)
        hc, hmask, caches, out = dcache
        d = d * out * (1.0 - out)
        n = len(self.config.conv_stack)
        for k in range(n):
            cc, mask = caches[n - 1 - k]
            if mask is not None:
                d = nx.relu_backward(d, mask)
            d, grads[f"dec{k}.w"], grads[f"dec{k}.b"] = nx.conv_transpose2d_backward(d, cc)
        d = nx.relu_backward(d.reshape(bsz, -1), hmask)
        dz, grads["dec_head.w"], grads["dec_head.b"] = nx.linear_backward(d, hc)
        dmu = dz + beta * mu / bsz
        dls = dz * sigma * eps + beta * (sigma * sigma - 1.0) / bsz
        ccaches, conv_shape, head_cache = ecache
        d, grads["enc_head.w"], grads["enc_head.b"] = nx.linear_backward(np.concatenate([dmu, dls], axis=1), head_cache)
        d = d.reshape(conv_shape)
        for k in reversed(range(n)):
            cc, mask = ccaches[k]
            d = nx.relu_backward(d, mask)
            d, grads[f"enc{k}.w"], grads[f"enc{k}.b"] = nx.conv2d_backward(d, cc)
        return (total, recon_term, kl_term), grads

    def evaluate(self, frames: np.ndarray, chunk: int = 512) -> float:
        """Deterministic test loss: decode the posterior mean, add beta * KL."""
        totals = []
        for i in range(0, len(frames), chunk):
            batch = frames[i:i + chunk]
            dist = self.encode(batch)
            recon = self.decode(dist.mu)
            t, _, _ = vae_loss(batch, recon, dist, self.config.beta)
            totals.append(t * len(batch))
        return float(np.sum(totals) / len(frames))


def sample_latent(dist: LatentDistribution, rng: np.random.Generator) -> np.ndarray:
    return dist.mu + dist.sigma * rng.standard_normal(np.shape(dist.mu))


def vae_loss(frame: np.ndarray, recon: np.ndarray, dist: LatentDistribution, beta: float = 1.0):
    """(total, recon_term, kl_term), averaged over a leading batch axis when present."""
    frame = np.asarray(frame, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    if frame.shape != recon.shape:
        raise nx.ShapeError(f"frame {frame.shape} vs recon {recon.shape}")
    mu, sigma = np.atleast_2d(dist.mu), np.atleast_2d(dist.sigma)
    diff = (recon - frame).reshape(mu.shape[0], -1)
    recon_term = float(np.mean(diff * diff))
    kl_term = float(np.mean(0.5 * np.sum(mu * mu + sigma * sigma - 1.0 - 2.0 * np.log(sigma), axis=1)))
    return recon_term + beta * kl_term, recon_term, kl_term


@dataclass
class VaeTrainResult:
    vae: VAE
    history: list[float] = field(default_factory=list)
    best_history: list[float] = field(default_factory=list)
    epochs: int = 0


def train_vae(train_frames: np.ndarray, test_frames: np.ndarray, config: VaeConfig, seed: int = 0) -> VaeTrainResult:
    """Minibatch Adam with early stopping on test loss; returns the best parameters."""
    if len(train_frames) == 0:
        raise ValueError("empty VAE training set")
    if len(test_frames) == 0:
        test_frames = train_frames
    vae = VAE(config, seed=seed)
    opt = nx.Adam(vae.params, lr=config.lr)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    result = VaeTrainResult(vae)
    best = vae.evaluate(test_frames)
    best_params = vae.params.copy()
    result.history.append(best)
    result.best_history.append(best)
    stale = 0
    n_batches = max(1, config.epoch_samples // config.batch)
    for epoch in range(config.max_epochs):
        for _ in range(n_batches):
            idx = rng.integers(0, len(train_frames), size=config.batch)
            _, grads = vae.loss_and_grads(train_frames[idx], rng)
            opt.step(grads)
        test_loss = vae.evaluate(test_frames)
        result.history.append(test_loss)
        result.epochs = epoch + 1
        if test_loss < best - config.min_delta:
            best = test_loss
            best_params = vae.params.copy()
            stale = 0
        else:
            stale += 1
        result.best_history.append(best)
        log.info("vae epoch %d test loss %.6f (best %.6f)", epoch + 1, test_loss, best)
        if stale >= config.patience:
            break
    vae.params = best_params
    return result
