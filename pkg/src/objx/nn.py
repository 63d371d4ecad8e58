"""Minimal neural-net primitives with explicit, hand-derived backward passes.

Everything operates on float64 numpy arrays and plain ``dict[str, ndarray]``
parameter stores. Layers return a cache from their forward pass; the matching
backward consumes it and returns gradients for parameters and inputs. No
autograd graph: composition is spelled out by the callers, which keeps every
gradient checkable against finite differences.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

Params = dict  # str -> np.ndarray, float64


# ---------------------------------------------------------------------------
# initialisation


def init_linear(rng: np.random.Generator, params: Params, name: str,
                n_out: int, n_in: int, bias: float = 0.0) -> None:
    """Fan-in-scaled uniform weights, constant bias."""
    bound = 1.0 / np.sqrt(n_in)
    params[f"{name}.w"] = rng.uniform(-bound, bound, size=(n_out, n_in))
    params[f"{name}.b"] = np.full(n_out, bias, dtype=np.float64)


def init_conv3(rng: np.random.Generator, params: Params, name: str,
               c_out: int, c_in: int) -> None:
    fan_in = c_in * 27
    bound = 1.0 / np.sqrt(fan_in)
    params[f"{name}.w"] = rng.uniform(-bound, bound, size=(c_out, c_in, 3, 3, 3))
    params[f"{name}.b"] = np.zeros(c_out, dtype=np.float64)


# ---------------------------------------------------------------------------
# dense layers


def linear_forward(params: Params, name: str, x: np.ndarray):
    """x: (n, c_in) -> (n, c_out)."""
    w = params[f"{name}.w"]
    b = params[f"{name}.b"]
    if x.shape[1] != w.shape[1]:
        raise ConfigError(f"{name}: input dim {x.shape[1]} != weight dim {w.shape[1]}")
    return x @ w.T + b, (name, x)


def linear_backward(params: Params, cache, dy: np.ndarray, grads: Params):
    name, x = cache
    w = params[f"{name}.w"]
    _accum(grads, f"{name}.w", dy.T @ x)
    _accum(grads, f"{name}.b", dy.sum(axis=0))
    return dy @ w


def tanh_forward(x: np.ndarray):
    y = np.tanh(x)
    return y, y


def tanh_backward(cache, dy: np.ndarray):
    return dy * (1.0 - cache * cache)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _accum(grads: Params, key: str, value: np.ndarray) -> None:
    if key in grads:
        grads[key] += value
    else:
        grads[key] = value


# ---------------------------------------------------------------------------
# two-hidden-layer MLP (the workhorse for per-voxel maps)


def init_mlp(rng: np.random.Generator, params: Params, name: str,
             n_in: int, n_hidden: int, n_out: int,
             out_bias: np.ndarray | None = None) -> None:
    init_linear(rng, params, f"{name}.fc1", n_hidden, n_in)
    init_linear(rng, params, f"{name}.fc2", n_hidden, n_hidden)
    init_linear(rng, params, f"{name}.fc3", n_out, n_hidden)
    if out_bias is not None:
        params[f"{name}.fc3.b"] = np.asarray(out_bias, dtype=np.float64).copy()


def mlp_forward(params: Params, name: str, x: np.ndarray):
    h1, c1 = linear_forward(params, f"{name}.fc1", x)
    a1, t1 = tanh_forward(h1)
    h2, c2 = linear_forward(params, f"{name}.fc2", a1)
    a2, t2 = tanh_forward(h2)
    y, c3 = linear_forward(params, f"{name}.fc3", a2)
    return y, (c1, t1, c2, t2, c3)


def mlp_backward(params: Params, cache, dy: np.ndarray, grads: Params):
    c1, t1, c2, t2, c3 = cache
    da2 = linear_backward(params, c3, dy, grads)
    dh2 = tanh_backward(t2, da2)
    da1 = linear_backward(params, c2, dh2, grads)
    dh1 = tanh_backward(t1, da1)
    return linear_backward(params, c1, dh1, grads)


# ---------------------------------------------------------------------------
# 3D convolutions, kernel 3, padding 1
#
# Layout: feature maps are (C, D, D, D). The strided conv halves resolution;
# the transposed conv doubles it (output_padding 1), so encoder/decoder sizes
# mirror exactly. Both are expressed as 27 small GEMMs, one per kernel tap,
# which keeps them fast without any compiled extension.


def _taps_first(w: np.ndarray) -> np.ndarray:
    """(a, b, 3, 3, 3) -> contiguous (3, 3, 3, a, b): BLAS needs dense operands."""
    return np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1))


def conv3_forward(params: Params, name: str, x: np.ndarray, stride: int = 2):
    w = params[f"{name}.w"]
    b = params[f"{name}.b"]
    c_out, c_in = w.shape[:2]
    if x.shape[0] != c_in:
        raise ConfigError(f"{name}: input channels {x.shape[0]} != {c_in}")
    d = x.shape[1]
    d_out = d // stride if stride > 1 else d
    xp = np.zeros((c_in, d + 2, d + 2, d + 2), dtype=np.float64)
    xp[:, 1:-1, 1:-1, 1:-1] = x
    wt = _taps_first(w)
    y = np.zeros((c_out, d_out, d_out, d_out), dtype=np.float64)
    yf = y.reshape(c_out, -1)
    for i in range(3):
        for j in range(3):
            for k in range(3):
                sl = xp[:, i:i + d:stride, j:j + d:stride, k:k + d:stride]
                yf += wt[i, j, k] @ sl.reshape(c_in, -1)
    y += b[:, None, None, None]
    return y, (name, xp, x.shape, stride)


def conv3_backward(params: Params, cache, dy: np.ndarray, grads: Params,
                   need_dx: bool = True):
    name, xp, x_shape, stride = cache
    w = params[f"{name}.w"]
    c_out, c_in = w.shape[:2]
    d = x_shape[1]
    wt = _taps_first(w)
    dyf = np.ascontiguousarray(dy.reshape(c_out, -1))
    dxp = np.zeros_like(xp) if need_dx else None
    dw = np.zeros_like(w)
    for i in range(3):
        for j in range(3):
            for k in range(3):
                sl = xp[:, i:i + d:stride, j:j + d:stride, k:k + d:stride]
                dw[:, :, i, j, k] = dyf @ sl.reshape(c_in, -1).T
                if need_dx:
                    dsl = (wt[i, j, k].T @ dyf).reshape((c_in,) + dy.shape[1:])
                    dxp[:, i:i + d:stride, j:j + d:stride, k:k + d:stride] += dsl
    _accum(grads, f"{name}.w", dw)
    _accum(grads, f"{name}.b", dy.sum(axis=(1, 2, 3)))
    return dxp[:, 1:-1, 1:-1, 1:-1] if need_dx else None


def init_tconv3(rng: np.random.Generator, params: Params, name: str,
                c_out: int, c_in: int) -> None:
    # stored as (c_in, c_out, 3, 3, 3): the transpose of a stride-2 conv
    fan_in = c_in * 27 / 8.0  # each output sees ~27/8 taps of the stuffed input
    bound = 1.0 / np.sqrt(fan_in)
    params[f"{name}.w"] = rng.uniform(-bound, bound, size=(c_in, c_out, 3, 3, 3))
    params[f"{name}.b"] = np.zeros(c_out, dtype=np.float64)


# Output index o of the transposed conv receives input i through tap t when
# o = 2i + t - 1. Split outputs by parity, o = 2m + p: even outputs read only
# tap 1 at i = m; odd outputs read tap 2 at i = m and tap 0 at i = m + 1.
_TCONV_TAPS = {0: ((1, 0),), 1: ((2, 0), (0, 1))}


def tconv3_forward(params: Params, name: str, x: np.ndarray):
    """Transposed conv, kernel 3, stride 2, pad 1, output_pad 1: D -> 2D.

    Organised by output-parity octants so every accumulation is contiguous.
    """
    w = params[f"{name}.w"]
    b = params[f"{name}.b"]
    c_in, c_out = w.shape[:2]
    if x.shape[0] != c_in:
        raise ConfigError(f"{name}: input channels {x.shape[0]} != {c_in}")
    d = x.shape[1]
    xp = np.zeros((c_in, d + 1, d + 1, d + 1), dtype=np.float64)
    xp[:, :d, :d, :d] = x
    wt = _taps_first(w)
    out = np.empty((c_out, d, 2, d, 2, d, 2), dtype=np.float64)
    for px in (0, 1):
        for py in (0, 1):
            for pz in (0, 1):
                acc = np.zeros((c_out, d * d * d), dtype=np.float64)
                for ti, ki in _TCONV_TAPS[px]:
                    for tj, kj in _TCONV_TAPS[py]:
                        for tk, kk in _TCONV_TAPS[pz]:
                            sl = xp[:, ki:ki + d, kj:kj + d, kk:kk + d]
                            acc += wt[ti, tj, tk].T @ sl.reshape(c_in, -1)
                out[:, :, px, :, py, :, pz] = acc.reshape(c_out, d, d, d)
    y = out.reshape(c_out, 2 * d, 2 * d, 2 * d) + b[:, None, None, None]
    return y, (name, x, xp)


def tconv3_backward(params: Params, cache, dy: np.ndarray, grads: Params):
    name, x, xp = cache
    w = params[f"{name}.w"]
    c_in, c_out = w.shape[:2]
    d = x.shape[1]
    wt = _taps_first(w)
    dyv = dy.reshape(c_out, d, 2, d, 2, d, 2)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for px in (0, 1):
        for py in (0, 1):
            for pz in (0, 1):
                sl = np.ascontiguousarray(
                    dyv[:, :, px, :, py, :, pz]).reshape(c_out, -1)
                for ti, ki in _TCONV_TAPS[px]:
                    for tj, kj in _TCONV_TAPS[py]:
                        for tk, kk in _TCONV_TAPS[pz]:
                            xs = xp[:, ki:ki + d, kj:kj + d, kk:kk + d]
                            dw[:, :, ti, tj, tk] += xs.reshape(c_in, -1) @ sl.T
                            dxp[:, ki:ki + d, kj:kj + d, kk:kk + d] += \
                                (wt[ti, tj, tk] @ sl).reshape(c_in, d, d, d)
    _accum(grads, f"{name}.w", dw)
    _accum(grads, f"{name}.b", dy.sum(axis=(1, 2, 3)))
    return dxp[:, :d, :d, :d]


# ---------------------------------------------------------------------------
# optimisation


def global_norm(grads: Params) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


def clip_gradients(grads: Params, max_norm: float) -> float:
    """In-place global-norm clipping; returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


class AdamW:
    """Adaptive moments with decoupled weight decay.

    The decay shrinks parameters by ``lr * weight_decay`` independently of the
    moment update, so a zero-gradient step still regularises.
    """

    def __init__(self, params: Params, lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-2):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Params) -> None:
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for key, p in self.params.items():
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            g = grads.get(key)
            if g is None:
                continue
            m = self.m[key]
            v = self.v[key]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
