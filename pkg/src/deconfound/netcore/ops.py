"""Differentiable primitives.

Every op takes and returns :class:`Tensor` objects, computes its forward value
eagerly with numpy and, when a tape is active, records a closure that maps the
upstream gradient to one gradient per input.

Sequence ops accept either a single sequence ``(T, D)`` or a zero-padded
batch ``(B, T, D)`` together with per-row ``lengths``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import Tensor, as_tensor, record

LOG_EPS = 1e-12


class ConfigError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class SequenceTooShortError(ShapeError):
    pass


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value + b.value)
    return record(
        (a, b),
        out,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value * b.value)
    return record(
        (a, b),
        out,
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    out = Tensor(np.where(mask, x.value, 0.0))
    return record((x,), out, lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = kernels.sigmoid(x.value)
    out = Tensor(s)
    return record((x,), out, lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.value)
    out = Tensor(t)
    return record((x,), out, lambda g: (g * (1.0 - t * t),))


def softmax(x: Tensor) -> Tensor:
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return record((x,), out, backward)


# ---------------------------------------------------------------- reductions / shape


def sum(x: Tensor) -> Tensor:  # noqa: A001
    out = Tensor(np.array(x.value.sum()))
    return record((x,), out, lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.value.size
    out = Tensor(np.array(x.value.mean()))
    return record((x,), out, lambda g: (np.full(x.shape, float(g) / n),))


def concat(xs, axis=-1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = Tensor(np.concatenate([x.value for x in xs], axis=axis))
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(tuple(xs), out, backward)


def last_step(x: Tensor) -> Tensor:
    """``x[..., -1, :]`` for a sequence tensor."""
    out = Tensor(x.value[..., -1, :])

    def backward(g):
        gx = np.zeros_like(x.value)
        gx[..., -1, :] = g
        return (gx,)

    return record((x,), out, backward)


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """Contract the last axis of ``x`` with the first axis of a 2-D ``w``."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: {x.shape} @ {w.shape}")
    out = Tensor(x.value @ w.value)

    def backward(g):
        gx = g @ w.value.T
        gw = x.value.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
        return gx, gw

    return record((x, w), out, backward)


# ---------------------------------------------------------------- gradient reversal


@dataclass(frozen=True)
class GrlConfig:
    lam: float

    def __post_init__(self):
        if not self.lam >= 0:
            raise ConfigError(f"gradient reversal lambda must be >= 0, got {self.lam}")


def grad_reverse(x: Tensor, cfg: GrlConfig) -> Tensor:
    """Identity forward; scales the incoming gradient by ``-lambda`` backward."""
    if not isinstance(cfg, GrlConfig):
        cfg = GrlConfig(float(cfg))
    neg = -cfg.lam
    out = Tensor(x.value.copy())
    return record((x,), out, lambda g: (neg * g,))


# ---------------------------------------------------------------- layers


def dense(x: Tensor, w: Tensor, b: Tensor, activation: str = "none") -> Tensor:
    if w.ndim != 2 or b.shape != (w.shape[1],):
        raise ShapeError(f"dense: W {w.shape}, b {b.shape}")
    y = add(matmul(x, w), b)
    if activation == "relu":
        return relu(y)
    if activation == "softmax":
        return softmax(y)
    if activation != "none":
        raise ConfigError(f"unknown activation {activation!r}")
    return y


def _batched(x: Tensor):
    if x.ndim == 2:
        return x.value[None], True
    if x.ndim == 3:
        return x.value, False
    raise ShapeError(f"expected (T, D) or (B, T, D), got {x.shape}")


def conv1d(x: Tensor, kernels_: Tensor, bias: Tensor) -> Tensor:
    """Valid, stride-1 cross-correlation along time.

    ``kernels_`` has shape ``(K, Din, Dout)``; output length is ``T - K + 1``.
    """
    xv, single = _batched(x)
    k, din, dout = kernels_.shape
    b, t, d = xv.shape
    if d != din or bias.shape != (dout,):
        raise ShapeError(f"conv1d: input {x.shape}, kernels {kernels_.shape}, bias {bias.shape}")
    if t < k:
        raise SequenceTooShortError(f"sequence length {t} shorter than kernel width {k}")
    t_out = t - k + 1
    cols = np.lib.stride_tricks.sliding_window_view(xv, k, axis=1)  # (B, T', D, K)
    cols = np.ascontiguousarray(cols.transpose(0, 1, 3, 2)).reshape(b, t_out, k * din)
    w2 = kernels_.value.reshape(k * din, dout)
    y = cols @ w2 + bias.value
    out = Tensor(y[0] if single else y)

    def backward(g):
        g3 = g[None] if single else g
        g2 = g3.reshape(-1, dout)
        gw = (cols.reshape(-1, k * din).T @ g2).reshape(k, din, dout)
        gb = g2.sum(axis=0)
        gcols = (g3 @ w2.T).reshape(b, t_out, k, din)
        gx = np.zeros((b, t, din))
        for j in range(k):
            gx[:, j : j + t_out] += gcols[:, :, j]
        return (gx[0] if single else gx), gw, gb

    return record((x, kernels_, bias), out, backward)


def maxpool1d(x: Tensor, width: int, lengths=None) -> Tensor:
    """Non-overlapping max over time windows of ``width``.

    The last window may be partial. Positions at or beyond a row's length are
    ignored; a window with no valid position yields 0. Gradient goes to the
    first maximal element of each window.
    """
    if width < 1:
        raise ConfigError(f"pool width must be >= 1, got {width}")
    xv, single = _batched(x)
    b, t, d = xv.shape
    if t == 0 or d == 0:
        raise ShapeError("maxpool1d on empty input")
    t_out = -(-t // width)
    padded = np.full((b, t_out * width, d), -np.inf)
    padded[:, :t] = xv
    if lengths is not None:
        valid = np.arange(t_out * width)[None, :] < np.asarray(lengths)[:, None]
        padded[~valid] = -np.inf
    win = padded.reshape(b, t_out, width, d)
    idx = win.argmax(axis=2)
    y = np.take_along_axis(win, idx[:, :, None, :], axis=2)[:, :, 0, :]
    empty = np.isneginf(y)
    y[empty] = 0.0
    out = Tensor(y[0] if single else y)

    def backward(g):
        g3 = (g[None] if single else g) * ~empty
        gw = np.zeros((b, t_out, width, d))
        np.put_along_axis(gw, idx[:, :, None, :], g3[:, :, None, :], axis=2)
        gx = gw.reshape(b, t_out * width, d)[:, :t]
        return (gx[0] if single else gx,)

    return record((x,), out, backward)


def pooled_lengths(lengths, width):
    return [-(-int(n) // width) for n in lengths]


@dataclass
class GruParams:
    """Input weights ``W (D, 3H)``, recurrent weights ``U (H, 3H)`` and bias ``b (3H)``.

    Gate blocks are ordered update, reset, candidate.
    """

    W: Tensor
    U: Tensor
    b: Tensor

    @property
    def hidden(self):
        return self.U.shape[0]


def _check_gru(d, p: GruParams):
    h = p.hidden
    if p.W.shape != (d, 3 * h) or p.U.shape != (h, 3 * h) or p.b.shape != (3 * h,):
        raise ShapeError(
            f"GRU params W {p.W.shape}, U {p.U.shape}, b {p.b.shape} inconsistent with input dim {d}"
        )


def gru_sequence(x: Tensor, p: GruParams, lengths=None, h0: Tensor | None = None) -> Tensor:
    """Run a GRU over time and return every hidden state.

    Uses ``h' = (1 - z) * h + z * tanh(x Wh + (r * h) Uh + bh)`` with sigmoid
    update and reset gates. Rows stop updating once past their length, so the
    final time step holds each row's last valid state.
    """
    xv, single = _batched(x)
    b, t, d = xv.shape
    _check_gru(d, p)
    hdim = p.hidden
    if lengths is None:
        mask = np.ones((b, t))
    else:
        mask = (np.arange(t)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)
    if h0 is None:
        h0v = np.zeros((b, hdim))
    else:
        h0v = h0.value[None] if h0.ndim == 1 else h0.value
        if h0v.shape != (b, hdim):
            raise ShapeError(f"h0 shape {h0.shape} does not match batch {b} x hidden {hdim}")
    xw = np.ascontiguousarray(xv @ p.W.value + p.b.value)
    hs, cache = kernels.gru_forward(xw, p.U.value, h0v, mask)
    out = Tensor(hs[0] if single else hs)

    def backward(g):
        g3 = np.ascontiguousarray(g[None] if single else g)
        dxw, du, dh0 = kernels.gru_backward(g3, p.U.value, h0v, mask, hs, cache)
        dx = dxw @ p.W.value.T
        dwt = xv.reshape(-1, d).T @ dxw.reshape(-1, 3 * hdim)
        db = dxw.reshape(-1, 3 * hdim).sum(axis=0)
        grads = [dx[0] if single else dx, dwt, du, db]
        if h0 is not None:
            grads.append(dh0[0] if h0.ndim == 1 else dh0)
        return tuple(grads)

    inputs = (x, p.W, p.U, p.b) + ((h0,) if h0 is not None else ())
    return record(inputs, out, backward)


def gru_cell_step(h: Tensor, x: Tensor, p: GruParams) -> Tensor:
    """One recurrence step for a single ``h (H,)`` and ``x (D,)``."""
    if h.ndim != 1 or x.ndim != 1:
        raise ShapeError(f"gru_cell_step expects vectors, got h {h.shape}, x {x.shape}")
    if h.shape[0] != p.hidden:
        raise ShapeError(f"hidden size {h.shape[0]} != {p.hidden}")
    seq = reshape(x, (1, 1, x.shape[0]))
    h2 = reshape(h, (1, h.shape[0]))
    return reshape(gru_sequence(seq, p, h0=h2), (h.shape[0],))


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.value.reshape(shape))
    return record((x,), out, lambda g: (g.reshape(x.shape),))


# ---------------------------------------------------------------- loss


def weighted_cross_entropy(probs: Tensor, targets, class_weights) -> Tensor:
    """Mean over the batch of ``-w[y] * log(max(p[y], 1e-12))``."""
    pv = probs.value[None] if probs.ndim == 1 else probs.value
    y = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    w = np.asarray(class_weights.value if isinstance(class_weights, Tensor) else class_weights, dtype=np.float64)
    n, c = pv.shape
    if len(y) != n or w.shape != (c,):
        raise ShapeError(f"cross entropy: probs {probs.shape}, targets {len(y)}, weights {w.shape}")
    rows = np.arange(n)
    py = pv[rows, y]
    clamped = np.maximum(py, LOG_EPS)
    wy = w[y]
    out = Tensor(np.array(np.mean(-wy * np.log(clamped))))

    def backward(g):
        gp = np.zeros_like(pv)
        gp[rows, y] = np.where(py > LOG_EPS, -wy / clamped, 0.0) * (float(g) / n)
        return (gp[0] if probs.ndim == 1 else gp,)

    return record((probs,), out, backward)
