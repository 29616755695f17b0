"""Differentiable primitives.

Every function takes and returns DiffArray. When a Tape is active and any
input requires a gradient, the primitive records a closure that maps the
output gradient(s) to input gradients.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..errors import NumericalError, ShapeError
from .tensor import DiffArray, as_diff, record

NORM_EPS = 1e-12


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: DiffArray, b: DiffArray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# --- elementwise -----------------------------------------------------------

def add(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    _check_broadcast(a, b, "add")
    out = DiffArray(a.value + b.value)
    record([out], [a, b], lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    _check_broadcast(a, b, "sub")
    out = DiffArray(a.value - b.value)
    record([out], [a, b], lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    out = DiffArray(av * bv)
    record([out], [a, b], lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))
    return out


def scale(a, c: float) -> DiffArray:
    a = as_diff(a)
    c = float(c)
    out = DiffArray(a.value * c)
    record([out], [a], lambda g: (g * c,))
    return out


def sigmoid(a) -> DiffArray:
    a = as_diff(a)
    y = _sigmoid(a.value)
    out = DiffArray(y)
    record([out], [a], lambda g: (g * y * (1.0 - y),))
    return out


def tanh(a) -> DiffArray:
    a = as_diff(a)
    y = np.tanh(a.value)
    out = DiffArray(y)
    record([out], [a], lambda g: (g * (1.0 - y * y),))
    return out


def exp(a) -> DiffArray:
    a = as_diff(a)
    y = np.exp(a.value)
    out = DiffArray(y)
    record([out], [a], lambda g: (g * y,))
    return out


def log(a) -> DiffArray:
    a = as_diff(a)
    x = a.value
    out = DiffArray(np.log(x))
    record([out], [a], lambda g: (g / x,))
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form saturates cleanly at both ends, no overflow branch needed
    return 0.5 + 0.5 * np.tanh(0.5 * x)


# --- reductions and shape ops ---------------------------------------------

def sum(a, axis=None) -> DiffArray:  # noqa: A001 - mirrors numpy naming
    a = as_diff(a)
    out = DiffArray(np.sum(a.value, axis=axis))
    shape = a.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    record([out], [a], bw)
    return out


def reshape(a, shape) -> DiffArray:
    a = as_diff(a)
    out = DiffArray(a.value.reshape(shape))
    record([out], [a], lambda g: (g.reshape(a.shape),))
    return out


def swapaxes(a, ax1: int, ax2: int) -> DiffArray:
    a = as_diff(a)
    out = DiffArray(np.swapaxes(a.value, ax1, ax2))
    record([out], [a], lambda g: (np.swapaxes(g, ax1, ax2),))
    return out


def index(a, key) -> DiffArray:
    """Basic or integer-array indexing; the backward scatters with add.at."""
    a = as_diff(a)
    out = DiffArray(a.value[key])
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    record([out], [a], bw)
    return out


def concat(arrays: Sequence, axis: int = -1) -> DiffArray:
    arrays = [as_diff(x) for x in arrays]
    try:
        val = np.concatenate([x.value for x in arrays], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes " + ", ".join(str(x.shape) for x in arrays)) from None
    out = DiffArray(val)
    sizes = [x.shape[axis] for x in arrays]
    cuts = np.cumsum(sizes)[:-1]
    record([out], arrays, lambda g: tuple(np.split(g, cuts, axis=axis)))
    return out


def stack(arrays: Sequence, axis: int = 0) -> DiffArray:
    arrays = [as_diff(x) for x in arrays]
    try:
        val = np.stack([x.value for x in arrays], axis=axis)
    except ValueError:
        raise ShapeError("stack: incompatible shapes " + ", ".join(str(x.shape) for x in arrays)) from None
    out = DiffArray(val)
    n = len(arrays)
    record([out], arrays, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))
    return out


# --- linear algebra -------------------------------------------------------

def matmul(a, b) -> DiffArray:
    """Product of a [..., m, k] with b [k, n] or a matching batch [..., k, n]."""
    a, b = as_diff(a), as_diff(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
            b.ndim > 2 and b.shape[:-2] != a.shape[:-2]):
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not agree")
    av, bv = a.value, b.value
    out = DiffArray(av @ bv)

    def bw(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if bv.ndim == 2:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    record([out], [a, b], bw)
    return out


# --- softmax family -------------------------------------------------------

def _check_finite(x: np.ndarray, op: str) -> None:
    if np.isnan(x).any():
        raise NumericalError(f"{op}: NaN in input")


def softmax(a, axis: int = -1, mask: Optional[np.ndarray] = None) -> DiffArray:
    """Max-shifted softmax. ``mask`` (bool, True = keep) zeroes excluded slots."""
    a = as_diff(a)
    x = a.value
    _check_finite(x, "softmax")
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = DiffArray(y)
    record([out], [a], lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),))
    return out


def log_softmax(a, axis: int = -1) -> DiffArray:
    a = as_diff(a)
    x = a.value
    _check_finite(x, "log_softmax")
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    y = z - lse
    out = DiffArray(y)
    p = np.exp(y)
    record([out], [a], lambda g: (g - p * np.sum(g, axis=axis, keepdims=True),))
    return out


def logsumexp(a, axis: int = -1, mask: Optional[np.ndarray] = None) -> DiffArray:
    a = as_diff(a)
    x = a.value
    _check_finite(x, "logsumexp")
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    s = np.sum(np.exp(x - m), axis=axis, keepdims=True)
    val = np.log(s) + m
    w = np.exp(x - val)
    out = DiffArray(np.squeeze(val, axis=axis))
    record([out], [a], lambda g: (np.expand_dims(g, axis) * w,))
    return out


def nll_gather(logp, targets, weights: Optional[np.ndarray] = None) -> DiffArray:
    """Negative summed log-probability of ``targets`` along the last axis.

    ``logp`` has shape [..., V]; ``targets`` integer array of shape [...].
    ``weights`` (same shape as targets) masks or scales individual terms.
    """
    logp = as_diff(logp)
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != logp.shape[:-1]:
        raise ShapeError(f"nll_gather: targets {t.shape} do not match log-probs {logp.shape}")
    V = logp.shape[-1]
    if t.size and (t.min() < 0 or t.max() >= V):
        raise ShapeError(f"nll_gather: target outside [0, {V})")
    w = np.ones(t.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    picked = np.take_along_axis(logp.value, t[..., None], axis=-1)[..., 0]
    out = DiffArray(-np.sum(np.where(w != 0, w * picked, 0.0)))

    def bw(g):
        full = np.zeros(logp.shape)
        np.put_along_axis(full, t[..., None], (-g * w)[..., None], axis=-1)
        return (full,)

    record([out], [logp], bw)
    return out


# --- similarity -----------------------------------------------------------

def cosine_similarity(a, b) -> DiffArray:
    """Cosine along the last axis; leading axes broadcast."""
    a, b = as_diff(a), as_diff(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} do not agree")
    av, bv = a.value, b.value
    na = np.linalg.norm(av, axis=-1, keepdims=True)
    nb = np.linalg.norm(bv, axis=-1, keepdims=True)
    if np.any(na <= NORM_EPS):
        raise NumericalError("cosine_similarity: first argument has near-zero norm")
    if np.any(nb <= NORM_EPS):
        raise NumericalError("cosine_similarity: second argument has near-zero norm")
    dot = np.sum(av * bv, axis=-1, keepdims=True)
    cos = dot / (na * nb)
    out = DiffArray(cos[..., 0])

    def bw(g):
        g = g[..., None]
        ga = g * (bv / (na * nb) - cos * av / (na * na))
        gb = g * (av / (na * nb) - cos * bv / (nb * nb))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    record([out], [a, b], bw)
    return out


# --- recurrent cells ------------------------------------------------------

def _split_gates(z: np.ndarray, d: int):
    # one tanh over all four gates; sigmoid(x) = (1 + tanh(x / 2)) / 2
    half = np.tanh(z * _gate_scale(d))
    i = 0.5 + 0.5 * half[..., :d]
    f = 0.5 + 0.5 * half[..., d:2 * d]
    g = half[..., 2 * d:3 * d]
    o = 0.5 + 0.5 * half[..., 3 * d:]
    return i, f, g, o


_GATE_SCALES: dict[int, np.ndarray] = {}


def _gate_scale(d: int) -> np.ndarray:
    if d not in _GATE_SCALES:
        s = np.full(4 * d, 0.5)
        s[2 * d:3 * d] = 1.0
        _GATE_SCALES[d] = s
    return _GATE_SCALES[d]


def _check_lstm(x, h, c, Wx, Wh, b) -> int:
    d = Wh.shape[0]
    if (Wx.ndim != 2 or Wh.shape != (d, 4 * d) or Wx.shape[1] != 4 * d or b.shape != (4 * d,)
            or x.shape[-1] != Wx.shape[0] or h.shape[-1] != d or c.shape[-1] != d):
        raise ShapeError(
            f"lstm: x {x.shape}, h {h.shape}, c {c.shape} incompatible with "
            f"Wx {Wx.shape}, Wh {Wh.shape}, b {b.shape}")
    return d


def lstm_cell(x, h_prev, c_prev, Wx, Wh, b) -> tuple[DiffArray, DiffArray]:
    """One LSTM step. Gate order along the 4d axis: input, forget, cell, output."""
    x, h_prev, c_prev, Wx, Wh, b = (as_diff(v) for v in (x, h_prev, c_prev, Wx, Wh, b))
    d = _check_lstm(x, h_prev, c_prev, Wx, Wh, b)
    xv, hv, cv = x.value, h_prev.value, c_prev.value
    z = xv @ Wx.value + hv @ Wh.value + b.value
    i, f, g, o = _split_gates(z, d)
    c = f * cv + i * g
    tc = np.tanh(c)
    h = o * tc
    h_out, c_out = DiffArray(h), DiffArray(c)

    def bw(dh, dc):
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = np.concatenate([dc * g * i * (1.0 - i),
                             dc * cv * f * (1.0 - f),
                             dc * i * (1.0 - g * g),
                             dh * tc * o * (1.0 - o)], axis=-1)
        x2 = xv.reshape(-1, xv.shape[-1])
        h2 = hv.reshape(-1, d)
        dz2 = dz.reshape(-1, 4 * d)
        return (dz @ Wx.value.T, dz @ Wh.value.T, dc * f,
                x2.T @ dz2, h2.T @ dz2, dz2.sum(axis=0))

    record([h_out, c_out], [x, h_prev, c_prev, Wx, Wh, b], bw)
    return h_out, c_out


def lstm_layer(xs, Wx, Wh, b, lengths: Optional[np.ndarray] = None) -> DiffArray:
    """Run an LSTM over xs [B, T, d_in] from a zero state; returns hs [B, T, d].

    Rows with ``lengths[r] < T`` freeze their state after their last real
    step, so ``hs[:, -1]`` is each row's final state. Numerically this is
    the unrolled ``lstm_cell`` recurrence; it exists as one primitive so a
    long sequence costs one tape record.
    """
    xs, Wx, Wh, b = (as_diff(v) for v in (xs, Wx, Wh, b))
    if xs.ndim != 3:
        raise ShapeError(f"lstm_layer: expected [B, T, d_in], got {xs.shape}")
    B, T, din = xs.shape
    d = Wh.shape[0]
    _check_lstm(xs.value[:, 0] if T else np.zeros((B, din)), np.zeros((B, d)), np.zeros((B, d)),
                Wx.value, Wh.value, b.value)
    if T == 0:
        raise ShapeError("lstm_layer: empty sequence")
    xv = xs.value
    Whv = Wh.value
    zx = (xv.reshape(B * T, din) @ Wx.value).reshape(B, T, 4 * d) + b.value
    active = None
    if lengths is not None:
        lengths = np.asarray(lengths)
        active = (np.arange(T)[None, :] < lengths[:, None])[..., None]  # [B, T, 1]
        all_active = active.all(axis=0)[:, 0]

    hs = np.zeros((B, T, d))
    cache = []
    h = np.zeros((B, d))
    c = np.zeros((B, d))
    for t in range(T):
        z = zx[:, t] + h @ Whv
        i, f, g, o = _split_gates(z, d)
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        cache.append((h, c, i, f, g, o, tc))
        if active is not None:
            m = active[:, t]
            h_new = np.where(m, h_new, h)
            c_new = np.where(m, c_new, c)
        h, c = h_new, c_new
        hs[:, t] = h
    out = DiffArray(hs)

    def bw(ghs):
        dzs = np.zeros((B, T, 4 * d))
        WhT = Whv.T
        dh_next = np.zeros((B, d))
        dc_next = np.zeros((B, d))
        for t in range(T - 1, -1, -1):
            _, c_prev, i, f, g, o, tc = cache[t]
            dh = ghs[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = dzs[:, t]
            dz[:, :d] = dc * g * i * (1.0 - i)
            dz[:, d:2 * d] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * d:3 * d] = dc * i * (1.0 - g * g)
            dz[:, 3 * d:] = dh * tc * o * (1.0 - o)
            if active is not None and not all_active[t]:
                m = active[:, t]
                dz *= m
                dh_next = np.where(m, dz @ WhT, dh)
                dc_next = np.where(m, dc * f, dc_next)
            else:
                dh_next = dz @ WhT
                dc_next = dc * f
        h_prevs = np.stack([cache[t][0] for t in range(T)], axis=1)
        dWh = h_prevs.reshape(B * T, d).T @ dzs.reshape(B * T, 4 * d)
        dz2 = dzs.reshape(B * T, 4 * d)
        dx = (dz2 @ Wx.value.T).reshape(B, T, din)
        dWx = xv.reshape(B * T, din).T @ dz2
        return dx, dWx, dWh, dz2.sum(axis=0)

    record([out], [xs, Wx, Wh, b], bw)
    return out
