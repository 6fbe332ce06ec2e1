"""Small float64 neural-net substrate: layers with hand-written backward passes.

Every layer is a pair of functions ``*_forward`` / ``*_backward``.  The forward
returns the output plus a cache tuple; the backward consumes the cache and the
upstream gradient and returns input and parameter gradients.  Nothing here
tracks a graph, so composing layers is the caller's job.
"""

from __future__ import annotations

import hashlib
import math
import struct
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

LOG_2PI = math.log(2.0 * math.pi)

CHECKPOINT_MAGIC = b"PRWM"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class ParamSet:
    """Named float64 tensors with matching gradient buffers."""

    def __init__(self, tensors: dict[str, np.ndarray] | None = None, rng_seed: int = 0):
        self.rng_seed = rng_seed
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        for name, value in (tensors or {}).items():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> None:
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            self.grads[name] += g

    def copy(self) -> "ParamSet":
        out = ParamSet(rng_seed=self.rng_seed)
        for name, value in self.params.items():
            out.add(name, value.copy())
        return out

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    def equal(self, other: "ParamSet") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self.params[n], other.params[n]) for n in self.params)


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: ParamSet, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, names: Iterable[str] | None = None):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.names = list(names) if names is not None else params.names()
        self.t = 0
        self.m = {n: np.zeros_like(params[n]) for n in self.names}
        self.v = {n: np.zeros_like(params[n]) for n in self.names}

    def step(self, grads: dict[str, np.ndarray] | None = None) -> None:
        grads = self.params.grads if grads is None else grads
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for n in self.names:
            g = grads[n]
            m = self.m[n]
            v = self.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            self.params.params[n] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_tensors(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([float(self.t)])}
        for n in self.names:
            out[f"{prefix}.m.{n}"] = self.m[n]
            out[f"{prefix}.v.{n}"] = self.v[n]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], prefix: str) -> None:
        self.t = int(tensors[f"{prefix}.t"][0])
        for n in self.names:
            self.m[n] = tensors[f"{prefix}.m.{n}"].copy()
            self.v[n] = tensors[f"{prefix}.v.{n}"].copy()


# ---------------------------------------------------------------------------
# scalar math
# ---------------------------------------------------------------------------


def gaussian_log_pdf(x, mu, sigma):
    """ln N(x | mu, sigma), elementwise."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    u = (np.asarray(x, dtype=np.float64) - mu) / sigma
    return -np.log(sigma) - 0.5 * LOG_2PI - 0.5 * u * u


def gaussian_log_pdf_grad(x, mu, sigma):
    """Partial derivatives of gaussian_log_pdf w.r.t. (x, mu, sigma)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    u = (np.asarray(x, dtype=np.float64) - mu) / sigma
    dx = -u / sigma
    return dx, -dx, (u * u - 1.0) / sigma


def softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input must be finite")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    shifted = v - v.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def logsumexp(v, axis: int = -1) -> np.ndarray:
    m = v.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(v - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    return x @ w + b, (x, w)


def linear_backward(dy: np.ndarray, cache):
    x, w = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ w.T, x2.T @ dy2, dy2.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dy, mask):
    return dy * mask


# ---------------------------------------------------------------------------
# convolution (NCHW, valid padding)
# ---------------------------------------------------------------------------


def conv_output_size(n: int, k: int, stride: int) -> int:
    return (n - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(B, C, H, W) -> (B, Ho, Wo, C, k, k) strided view copy."""
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def _col2im(cols: np.ndarray, out_shape: tuple[int, int, int, int], k: int, stride: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add (B, Ho, Wo, C, k, k) back to (B, C, H, W)."""
    b, ho, wo = cols.shape[:3]
    out = np.zeros(out_shape)
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # B, C, k, k, Ho, Wo
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1):
    """x (B, C, H, W), w (F, C, k, k), b (F,) -> (B, F, Ho, Wo)."""
    bsz, c, h, wd = x.shape
    f, cw, k, k2 = w.shape
    if c != cw or k != k2:
        raise ShapeError(f"conv2d: input channels {c} vs kernel {w.shape}")
    if k > h or k > wd:
        raise ShapeError(f"conv2d: kernel {k} larger than input {h}x{wd}")
    ho, wo = conv_output_size(h, k, stride), conv_output_size(wd, k, stride)
    cols = _im2col(x, k, stride).reshape(bsz * ho * wo, c * k * k)
    out = cols @ w.reshape(f, -1).T + b
    return out.reshape(bsz, ho, wo, f).transpose(0, 3, 1, 2), (x.shape, cols, w, stride)


def conv2d_backward(dy: np.ndarray, cache):
    x_shape, cols, w, stride = cache
    bsz, f, ho, wo = dy.shape
    k = w.shape[2]
    dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (dy2.T @ cols).reshape(w.shape)
    db = dy2.sum(axis=0)
    dcols = (dy2 @ w.reshape(f, -1)).reshape(bsz, ho, wo, w.shape[1], k, k)
    return _col2im(dcols, x_shape, k, stride), dw, db


def conv_transpose2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int,
                             out_hw: tuple[int, int] | None = None):
    """Adjoint of a valid conv.  x (B, Cin, H, W), w (Cin, Cout, k, k).

    ``out_hw`` picks among the output sizes that a stride-s valid conv maps back
    to (H, W); extra trailing rows/cols only receive the bias.
    """
    bsz, cin, h, wd = x.shape
    cw, cout, k, _ = w.shape
    if cin != cw:
        raise ShapeError(f"conv_transpose2d: input channels {cin} vs kernel {w.shape}")
    if out_hw is None:
        out_hw = ((h - 1) * stride + k, (wd - 1) * stride + k)
    oh, ow = out_hw
    if conv_output_size(oh, k, stride) != h or conv_output_size(ow, k, stride) != wd:
        raise ShapeError(f"conv_transpose2d: output {out_hw} does not map back to {(h, wd)}")
    x2 = x.transpose(0, 2, 3, 1).reshape(-1, cin)
    cols = (x2 @ w.reshape(cin, -1)).reshape(bsz, h, wd, cout, k, k)
    out = _col2im(cols, (bsz, cout, oh, ow), k, stride) + b[None, :, None, None]
    return out, (x2, x.shape, w, stride)


def conv_transpose2d_backward(dy: np.ndarray, cache):
    x2, x_shape, w, stride = cache
    bsz, cin, h, wd = x_shape
    k = w.shape[2]
    dcols = _im2col(dy, k, stride)[:, :h, :wd].reshape(bsz * h * wd, -1)
    dx = (dcols @ w.reshape(cin, -1).T).reshape(bsz, h, wd, cin).transpose(0, 3, 1, 2)
    dw = (x2.T @ dcols).reshape(w.shape)
    return dx, dw, dy.sum(axis=(0, 2, 3))


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------


class LstmState:
    __slots__ = ("h", "c")

    def __init__(self, h: np.ndarray, c: np.ndarray):
        self.h = h
        self.c = c

    @classmethod
    def zeros(cls, hidden: int, batch: int | None = None) -> "LstmState":
        shape = (hidden,) if batch is None else (batch, hidden)
        return cls(np.zeros(shape), np.zeros(shape))

    def copy(self) -> "LstmState":
        return LstmState(self.h.copy(), self.c.copy())


def lstm_params(rng: np.random.Generator, n_in: int, hidden: int, prefix: str = "lstm") -> dict[str, np.ndarray]:
    fan = n_in + hidden
    return {
        f"{prefix}.wx": uniform_init(rng, (n_in, 4 * hidden), fan),
        f"{prefix}.wh": uniform_init(rng, (hidden, 4 * hidden), fan),
        f"{prefix}.b": uniform_init(rng, (4 * hidden,), fan),
    }


def _lstm_gates(pre: np.ndarray, c: np.ndarray):
    hd = c.shape[-1]
    i = expit(pre[..., :hd])
    f = expit(pre[..., hd:2 * hd])
    o = expit(pre[..., 2 * hd:3 * hd])
    g = np.tanh(pre[..., 3 * hd:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    return i, f, o, g, c_new, tc


def lstm_step(x: np.ndarray, state: LstmState, params: ParamSet, prefix: str = "lstm"):
    """One cell update.  Gate order in the packed weights: input, forget, output, candidate."""
    wx, wh, b = params[f"{prefix}.wx"], params[f"{prefix}.wh"], params[f"{prefix}.b"]
    if x.shape[-1] != wx.shape[0] or state.h.shape[-1] != wh.shape[0]:
        raise ShapeError(f"lstm: input {x.shape} / state {state.h.shape} vs weights {wx.shape}")
    pre = x @ wx + state.h @ wh + b
    i, f, o, g, c_new, tc = _lstm_gates(pre, state.c)
    h_new = o * tc
    cache = (x, state, i, f, o, g, c_new, tc)
    return h_new, LstmState(h_new, c_new), cache


def lstm_step_backward(dh: np.ndarray, dc: np.ndarray, cache, params: ParamSet, prefix: str = "lstm"):
    """Returns (dx, dh_prev, dc_prev, grads)."""
    x, state, i, f, o, g, c_new, tc = cache
    wx, wh = params[f"{prefix}.wx"], params[f"{prefix}.wh"]
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    df = dc * state.c
    dg = dc * i
    dpre = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=-1)
    x2 = x.reshape(-1, x.shape[-1])
    h2 = state.h.reshape(-1, state.h.shape[-1])
    d2 = dpre.reshape(-1, dpre.shape[-1])
    grads = {f"{prefix}.wx": x2.T @ d2, f"{prefix}.wh": h2.T @ d2, f"{prefix}.b": d2.sum(axis=0)}
    return dpre @ wx.T, dpre @ wh.T, dc * f, grads


def lstm_sequence_forward(xs: np.ndarray, state: LstmState, params: ParamSet, prefix: str = "lstm"):
    """Run over xs (T, B, D).  Returns hs (T, B, H), final state, cache for BPTT."""
    wx, wh, b = params[f"{prefix}.wx"], params[f"{prefix}.wh"], params[f"{prefix}.b"]
    t_len, bsz, _ = xs.shape
    hd = wh.shape[0]
    xproj = (xs.reshape(t_len * bsz, -1) @ wx + b).reshape(t_len, bsz, 4 * hd)
    h, c = state.h, state.c
    hs = np.empty((t_len, bsz, hd))
    cs = np.empty((t_len + 1, bsz, hd))
    gates = np.empty((t_len, bsz, 4 * hd))
    tcs = np.empty((t_len, bsz, hd))
    h_prev = np.empty((t_len, bsz, hd))
    cs[0] = c
    for t in range(t_len):
        h_prev[t] = h
        pre = xproj[t] + h @ wh
        i, f, o, g, c, tc = _lstm_gates(pre, c)
        gates[t, :, :hd] = i
        gates[t, :, hd:2 * hd] = f
        gates[t, :, 2 * hd:3 * hd] = o
        gates[t, :, 3 * hd:] = g
        tcs[t] = tc
        cs[t + 1] = c
        h = o * tc
        hs[t] = h
    return hs, LstmState(h, c), (xs, h_prev, cs, gates, tcs)


def lstm_sequence_backward(dhs: np.ndarray, cache, params: ParamSet, prefix: str = "lstm"):
    """BPTT through a whole window.  Returns (dxs, grads); the initial state gets no gradient."""
    xs, h_prev, cs, gates, tcs = cache
    wx, wh = params[f"{prefix}.wx"], params[f"{prefix}.wh"]
    t_len, bsz, hd = dhs.shape
    dpre_all = np.empty((t_len, bsz, 4 * hd))
    dh_next = np.zeros((bsz, hd))
    dc_next = np.zeros((bsz, hd))
    for t in range(t_len - 1, -1, -1):
        gt = gates[t]
        i, f, o, g = gt[:, :hd], gt[:, hd:2 * hd], gt[:, 2 * hd:3 * hd], gt[:, 3 * hd:]
        tc = tcs[t]
        dh = dhs[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dp = dpre_all[t]
        dp[:, :hd] = dc * g * i * (1 - i)
        dp[:, hd:2 * hd] = dc * cs[t] * f * (1 - f)
        dp[:, 2 * hd:3 * hd] = dh * tc * o * (1 - o)
        dp[:, 3 * hd:] = dc * i * (1 - g * g)
        dh_next = dp @ wh.T
        dc_next = dc * f
    d2 = dpre_all.reshape(t_len * bsz, 4 * hd)
    grads = {
        f"{prefix}.wx": xs.reshape(t_len * bsz, -1).T @ d2,
        f"{prefix}.wh": h_prev.reshape(t_len * bsz, hd).T @ d2,
        f"{prefix}.b": d2.sum(axis=0),
    }
    dxs = (d2 @ wx.T).reshape(xs.shape)
    return dxs, grads


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


class GradCheckReport:
    def __init__(self, max_rel_error: float, worst: str, n_checked: int):
        self.max_rel_error = max_rel_error
        self.worst = worst
        self.n_checked = n_checked

    def __repr__(self) -> str:
        return f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, worst={self.worst!r}, n={self.n_checked})"


def grad_check(f: Callable[[ParamSet], tuple[float, dict[str, np.ndarray]]], point: ParamSet,
               eps: float = 1e-5, floor: float = 1e-6, names: Iterable[str] | None = None) -> GradCheckReport:
    """Compare analytic gradients from ``f`` against central differences.

    ``f(params)`` must return ``(loss, grads_by_name)``.  Relative error per
    coordinate is |a - n| / max(|a|, |n|, floor).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    _, analytic = f(point)
    worst, worst_name, count = 0.0, "", 0
    for name in (names if names is not None else point.names()):
        p = point.params[name]
        a = analytic.get(name, np.zeros_like(p))
        flat = p.reshape(-1)
        af = np.asarray(a).reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            fp = f(point)[0]
            flat[idx] = orig - eps
            fm = f(point)[0]
            flat[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite loss while perturbing {name}[{idx}]")
            num = (fp - fm) / (2.0 * eps)
            rel = abs(af[idx] - num) / max(abs(af[idx]), abs(num), floor)
            count += 1
            if rel > worst:
                worst, worst_name = rel, f"{name}[{idx}]"
    return GradCheckReport(worst, worst_name, count)


# ---------------------------------------------------------------------------
# checkpoint IO
# ---------------------------------------------------------------------------


def save_tensors(tensors: dict[str, np.ndarray], path: str | Path) -> None:
    """Write the PRWM checkpoint: magic, u16 version, then one record per tensor."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 6
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            if pos + 8 * n > len(data):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            out[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record") from exc
    return out


def save_params(params: ParamSet, path: str | Path, extra: dict[str, np.ndarray] | None = None) -> None:
    tensors = dict(params.params)
    if extra:
        tensors.update(extra)
    save_tensors(tensors, path)


def load_params(path: str | Path, names: Iterable[str] | None = None) -> ParamSet:
    tensors = load_tensors(path)
    keep = list(names) if names is not None else list(tensors)
    return ParamSet({n: tensors[n] for n in keep})
