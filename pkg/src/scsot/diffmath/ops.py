"""Differentiable primitives.

Every op takes Tensors (or array-likes, treated as constants) and returns a
Tensor whose backward closure accumulates into its inputs.
"""

from __future__ import annotations

import math

import numpy as np

from .core import DTYPE, Tensor, as_tensor, make_result

BCE_EPS = 1e-7
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(*shapes) -> None:
    try:
        np.broadcast_shapes(*shapes)
    except ValueError:
        raise ValueError(f"shape mismatch: {shapes}") from None


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.shape))

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))

    return make_result(a.data * b.data, (a, b), backward, "mul")


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)

    def backward(g):
        a.accumulate(g * s)

    return make_result(a.data * s, (a,), backward, "scale")


def blend(mask, new, old) -> Tensor:
    """``mask * new + (1 - mask) * old`` with a constant 0/1 mask."""
    new, old = as_tensor(new), as_tensor(old)
    m = np.asarray(mask, dtype=DTYPE)
    _check_broadcast(m.shape, new.shape, old.shape)

    def backward(g):
        if new.requires_grad:
            new.accumulate(_unbroadcast(g * m, new.shape))
        if old.requires_grad:
            old.accumulate(_unbroadcast(g * (1.0 - m), old.shape))

    return make_result(m * new.data + (1.0 - m) * old.data, (new, old), backward, "blend")


# --- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return make_result(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` as a single node; ``x`` may carry leading batch axes."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    parents = (x, w) if b is None else (x, w, as_tensor(b))
    out = x.data @ w.data
    if b is not None:
        out = out + parents[2].data

    def backward(g):
        if x.requires_grad:
            x.accumulate(g @ w.data.T)
        if w.requires_grad:
            w.accumulate(x.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1]))
        if b is not None and parents[2].requires_grad:
            parents[2].accumulate(g.reshape(-1, w.shape[1]).sum(axis=0))

    return make_result(out, parents, backward, "linear")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a.accumulate(np.transpose(g, inverse))

    return make_result(np.transpose(a.data, axes), (a,), backward, "transpose")


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    def backward(g):
        a.accumulate(g.reshape(src))

    return make_result(a.data.reshape(shape), (a,), backward, "reshape")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    rank = tensors[0].ndim
    ax = axis % rank
    for t in tensors:
        if t.ndim != rank or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ValueError(f"concat shape mismatch: {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * rank
                idx[ax] = slice(lo, hi)
                t.accumulate(g[tuple(idx)])

    out = np.concatenate([t.data for t in tensors], axis=ax)
    return make_result(out, tensors, backward, "concat")


def slice_(a, index) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``slice_(x, (slice(None), 3))``."""
    a = as_tensor(a)
    index = index if isinstance(index, tuple) else (index,)
    for i in index:
        if not isinstance(i, (int, slice, type(Ellipsis), type(None))):
            raise TypeError("slice_ supports basic indexing only")

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        a.accumulate(full)

    return make_result(a.data[index], (a,), backward, "slice")


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.shape))

    return make_result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / n)


# --- nonlinearities ---------------------------------------------------------

def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)

    def backward(g):
        a.accumulate(g * y * (1.0 - y))

    return make_result(y, (a,), backward, "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)

    def backward(g):
        a.accumulate(g * (1.0 - y * y))

    return make_result(y, (a,), backward, "tanh")


def gelu(a) -> Tensor:
    """Tanh-approximated GELU (smooth everywhere, so gradcheck is clean)."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_SQRT_2_OVER_PI * x * (1.0 + 0.044715 * x2))
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x2)
        a.accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner))

    return make_result(y, (a,), backward, "gelu")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a.accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return make_result(y, (a,), backward, "softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply gain and bias."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm parameter shape mismatch: {gamma.shape}, {beta.shape} vs {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            x.accumulate(inv * (gh - gh.mean(axis=-1, keepdims=True)
                                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)))

    return make_result(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


# --- lookup, convolution, recurrence ----------------------------------------

def embedding_lookup(table, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding id out of range")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table.accumulate(full)

    return make_result(table.data[ids], (table,), backward, "embedding_lookup")


def depthwise_conv1d(x, w, b=None) -> Tensor:
    """Per-channel 1-D convolution along time with 'same' zero padding.

    ``x`` is (..., T, C), ``w`` is (k, C) with odd k, ``b`` is (C,).
    """
    x, w = as_tensor(x), as_tensor(w)
    k, c = w.shape
    if k % 2 == 0 or x.shape[-1] != c:
        raise ValueError(f"depthwise_conv1d needs odd kernel and matching channels: {x.shape}, {w.shape}")
    half = k // 2
    t_len = x.shape[-2]
    pad = [(0, 0)] * x.ndim
    pad[-2] = (half, half)
    xp = np.pad(x.data, pad)
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[..., j:j + t_len, :] * w.data[j]
    parents = (x, w)
    if b is not None:
        parents = (x, w, as_tensor(b))
        out += parents[2].data

    def backward(g):
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for j in range(k):
                gw[j] = (xp[..., j:j + t_len, :] * g).reshape(-1, c).sum(axis=0)
            w.accumulate(gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j:j + t_len, :] += g * w.data[j]
            x.accumulate(gxp[..., half:half + t_len, :])
        if b is not None and parents[2].requires_grad:
            parents[2].accumulate(g.reshape(-1, c).sum(axis=0))

    return make_result(out, parents, backward, "depthwise_conv1d")


def _lstm_cell_c(z, c_prev) -> Tensor:
    hdim = c_prev.shape[-1]
    zi, zf, zg = z.data[..., :hdim], z.data[..., hdim:2 * hdim], z.data[..., 2 * hdim:3 * hdim]
    i, f, gg = _sigmoid(zi), _sigmoid(zf), np.tanh(zg)
    c = f * c_prev.data + i * gg

    def backward(g):
        if z.requires_grad:
            gz = np.zeros_like(z.data)
            gz[..., :hdim] = g * gg * i * (1 - i)
            gz[..., hdim:2 * hdim] = g * c_prev.data * f * (1 - f)
            gz[..., 2 * hdim:3 * hdim] = g * i * (1 - gg * gg)
            z.accumulate(gz)
        if c_prev.requires_grad:
            c_prev.accumulate(g * f)

    return make_result(c, (z, c_prev), backward, "lstm_cell_c")


def _lstm_cell_h(z, c) -> Tensor:
    hdim = c.shape[-1]
    o = _sigmoid(z.data[..., 3 * hdim:])
    tc = np.tanh(c.data)

    def backward(g):
        if z.requires_grad:
            gz = np.zeros_like(z.data)
            gz[..., 3 * hdim:] = g * tc * o * (1 - o)
            z.accumulate(gz)
        if c.requires_grad:
            c.accumulate(g * o * (1 - tc * tc))

    return make_result(o * tc, (z, c), backward, "lstm_cell_h")


def lstm_step(x, h, c, w, b) -> tuple:
    """One LSTM step; gate layout in ``w`` (I+H, 4H) is [input, forget, cell, output].

    Returns the new ``(h, c)`` pair.
    """
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    w = as_tensor(w)
    hdim = h.shape[-1]
    if w.shape != (x.shape[-1] + hdim, 4 * hdim) or c.shape != h.shape:
        raise ValueError(f"lstm_step shape mismatch: x{x.shape} h{h.shape} c{c.shape} w{w.shape}")
    z = linear(concat([x, h], axis=-1), w, b)
    c_new = _lstm_cell_c(z, c)
    return _lstm_cell_h(z, c_new), c_new


# --- losses -----------------------------------------------------------------

def cross_entropy_logits(logits, targets, weights=None) -> Tensor:
    """Weighted sum of token negative log-likelihoods.

    ``logits`` is (..., V); ``targets`` holds integer ids of shape (...).
    ``weights`` defaults to a uniform mean.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} vs logits {logits.shape}")
    if weights is None:
        weights = np.full(targets.shape, 1.0 / max(targets.size, 1))
    weights = np.asarray(weights, dtype=DTYPE)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(weights * picked).sum()

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        logits.accumulate(g * weights[..., None] * (p - onehot))

    return make_result(loss, (logits,), backward, "cross_entropy_logits")


def binary_cross_entropy(probs, targets, weights=None, eps: float = BCE_EPS) -> Tensor:
    """Weighted sum of elementwise BCE, probabilities clamped to [eps, 1-eps]."""
    probs = as_tensor(probs)
    t = np.asarray(targets, dtype=DTYPE)
    if t.shape != probs.shape:
        raise ValueError(f"targets shape {t.shape} vs probs {probs.shape}")
    if weights is None:
        weights = np.full(t.shape, 1.0 / max(t.size, 1))
    weights = np.asarray(weights, dtype=DTYPE)
    p = np.clip(probs.data, eps, 1.0 - eps)
    loss = -(weights * (t * np.log(p) + (1 - t) * np.log(1 - p))).sum()
    inside = (probs.data > eps) & (probs.data < 1.0 - eps)

    def backward(g):
        probs.accumulate(g * weights * inside * (p - t) / (p * (1 - p)))

    return make_result(loss, (probs,), backward, "binary_cross_entropy")


PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "concat": concat,
    "slice": slice_,
    "softmax": softmax,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "gelu": gelu,
    "layer_norm": layer_norm,
    "embedding_lookup": embedding_lookup,
    "depthwise_conv1d": depthwise_conv1d,
    "lstm_step": lstm_step,
    "cross_entropy_logits": cross_entropy_logits,
    "binary_cross_entropy": binary_cross_entropy,
}


def primitive_forward(kind: str, *inputs, **kwargs):
    """Dispatch a primitive by name."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)
