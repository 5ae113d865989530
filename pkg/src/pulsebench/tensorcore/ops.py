"""Forward/backward kernels for the graph primitives.

Each kernel is a pair ``fwd(inputs, attrs) -> (out, ctx)`` and
``bwd(grad_out, ctx, attrs) -> tuple of input grads``.  Arrays are float32,
row-major, channels-last (NHWC) for images.  A backward kernel may return ``None`` for inputs
that never carry gradient (shape-only operands).
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

DTYPE = np.float32


@contextmanager
def precision(dtype):
    """Run every kernel in ``dtype`` for the duration (float64 for gradient checks)."""
    global DTYPE
    old, DTYPE = DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = old


class ShapeError(ValueError):
    """Raised when a node's operands violate its shape rule."""


def _unbroadcast(grad, shape):
    # sum out axes that broadcasting expanded
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise -------------------------------------------------------------

def identity_fwd(xs, attrs):
    return xs[0], None


def identity_bwd(g, ctx, attrs):
    return (g,)


def add_fwd(xs, attrs):
    a, b = xs
    _check_broadcast(a, b)
    return a + b, (a.shape, b.shape)


def add_bwd(g, ctx, attrs):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def sub_fwd(xs, attrs):
    a, b = xs
    _check_broadcast(a, b)
    return a - b, (a.shape, b.shape)


def sub_bwd(g, ctx, attrs):
    sa, sb = ctx
    return _unbroadcast(g, sa), -_unbroadcast(g, sb)


def mul_fwd(xs, attrs):
    a, b = xs
    _check_broadcast(a, b)
    return a * b, (a, b)


def mul_bwd(g, ctx, attrs):
    a, b = ctx
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def div_fwd(xs, attrs):
    a, b = xs
    _check_broadcast(a, b)
    out = a / b
    return out, (a, b, out)


def div_bwd(g, ctx, attrs):
    a, b, out = ctx
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)


def scalar_mul_fwd(xs, attrs):
    return xs[0] * DTYPE(attrs["c"]), None


def scalar_mul_bwd(g, ctx, attrs):
    return (g * DTYPE(attrs["c"]),)


def tanh_fwd(xs, attrs):
    y = np.tanh(xs[0])
    return y, y


def tanh_bwd(g, y, attrs):
    return (g * (1 - y * y),)


def sigmoid_fwd(xs, attrs):
    x = xs[0]
    y = (0.5 * (1 + np.tanh(0.5 * x))).astype(DTYPE)
    return y, y


def sigmoid_bwd(g, y, attrs):
    return (g * y * (1 - y),)


def dropout_fwd(xs, attrs):
    x = xs[0]
    rng = attrs.get("_rng")
    rate = attrs["rate"]
    if rng is None or rate == 0:
        return x, None
    keep = (rng.random(x.shape, dtype=DTYPE) >= rate).astype(DTYPE) / DTYPE(1 - rate)
    return x * keep, keep


def dropout_bwd(g, keep, attrs):
    return (g if keep is None else g * keep,)


# -- reductions and reshapes -------------------------------------------------

def sum_fwd(xs, attrs):
    x = xs[0]
    axes = attrs.get("axes")
    keepdims = attrs.get("keepdims", False)
    if axes is not None and any(a >= x.ndim or a < -x.ndim for a in axes):
        raise ShapeError(f"sum axes {axes} out of range for rank {x.ndim}")
    return np.sum(x, axis=axes, keepdims=keepdims, dtype=DTYPE), x.shape


def sum_bwd(g, shape, attrs):
    axes = attrs.get("axes")
    if axes is None:
        return (np.broadcast_to(g, shape).astype(DTYPE),)
    if not attrs.get("keepdims", False):
        g = np.expand_dims(g, tuple(a % len(shape) for a in axes))
    return (np.broadcast_to(g, shape).astype(DTYPE),)


def reshape_fwd(xs, attrs):
    x = xs[0]
    shape = tuple(attrs["shape"])
    try:
        return x.reshape(shape), x.shape
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc


def reshape_bwd(g, shape, attrs):
    return (g.reshape(shape),)


def standardize_fwd(xs, attrs):
    """Zero-mean, unit-variance along the last axis."""
    x = xs[0]
    eps = attrs.get("eps", 1e-8)
    xc = x - x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + DTYPE(eps))
    y = xc * inv
    return y, (y, inv)


def standardize_bwd(g, ctx, attrs):
    y, inv = ctx
    gm = g.mean(axis=-1, keepdims=True)
    gy = (g * y).mean(axis=-1, keepdims=True)
    return (inv * (g - gm - y * gy),)


def mse_fwd(xs, attrs):
    pred, target = xs
    if pred.shape != target.shape:
        raise ShapeError(f"mse operands {pred.shape} vs {target.shape}")
    diff = pred - target
    return np.asarray(np.mean(diff * diff), dtype=DTYPE), diff


def mse_bwd(g, diff, attrs):
    scale = g * DTYPE(2.0 / diff.size)
    return diff * scale, -diff * scale


# -- layers ------------------------------------------------------------------

def dense_fwd(xs, attrs):
    x, w = xs[0], xs[1]
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense expects [N,D]x[D,M], got {x.shape}x{w.shape}")
    out = x @ w
    if len(xs) == 3:
        b = xs[2]
        if b.shape != (w.shape[1],):
            raise ShapeError(f"dense bias {b.shape} vs {w.shape[1]} outputs")
        out = out + b
    return out, (x, w)


def dense_bwd(g, ctx, attrs):
    x, w = ctx
    grads = (g @ w.T, x.T @ g)
    if attrs.get("has_bias"):
        grads = grads + (g.sum(axis=0),)
    return grads


def _pad_amount(k, padding):
    if padding == "same":
        return (k - 1) // 2, k - 1 - (k - 1) // 2
    if padding == "valid":
        return 0, 0
    raise ShapeError(f"unknown padding {padding!r}")


def conv2d_fwd(xs, attrs):
    """x [N,H,W,C], w [k,k,C,O] (channels-last)."""
    x, w = xs[0], xs[1]
    s = attrs.get("stride", 1)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2] or w.shape[0] != w.shape[1]:
        raise ShapeError(f"conv2d expects x[N,H,W,C], w[k,k,C,O]; got {x.shape}, {w.shape}")
    k = w.shape[0]
    lo, hi = _pad_amount(k, attrs.get("padding", "same"))
    xp = np.pad(x, ((0, 0), (lo, hi), (lo, hi), (0, 0))) if lo or hi else x
    hp, wp = xp.shape[1:3]
    if hp < k or wp < k:
        raise ShapeError(f"conv2d kernel {k} larger than padded input {(hp, wp)}")
    ho, wo = (hp - k) // s + 1, (wp - k) // s + 1
    n, c, o = x.shape[0], x.shape[3], w.shape[3]
    if k == 1:
        cols = xp[:, ::s, ::s] if s > 1 else xp
    else:
        cols = np.concatenate([xp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
                               for i in range(k) for j in range(k)], axis=3)
    out = cols.reshape(-1, k * k * c) @ w.reshape(-1, o)
    if len(xs) == 3:
        b = xs[2]
        if b.shape != (o,):
            raise ShapeError(f"conv2d bias {b.shape} vs {o} filters")
        out += b
    return out.reshape(n, ho, wo, o), (cols, w, xp.shape, (lo, hi), (ho, wo))


def conv2d_bwd(g, ctx, attrs):
    cols, w, xp_shape, (lo, hi), (ho, wo) = ctx
    s = attrs.get("stride", 1)
    k, _, c, o = w.shape
    g2 = g.reshape(-1, o)
    gw = (cols.reshape(-1, k * k * c).T @ g2).reshape(w.shape)
    gcols = (g2 @ w.reshape(-1, o).T).reshape(*g.shape[:3], k * k * c)
    if k == 1 and s == 1:
        gxp = gcols
    else:
        gxp = np.zeros(xp_shape, dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                b = (i * k + j) * c
                gxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += gcols[..., b:b + c]
    gx = gxp[:, lo:xp_shape[1] - hi, lo:xp_shape[2] - hi] if lo or hi else gxp
    grads = (gx, gw)
    if attrs.get("has_bias"):
        grads = grads + (g2.sum(axis=0),)
    return grads


def avg_pool2d_fwd(xs, attrs):
    """Non-overlapping k x k mean over axes 1, 2 of [N,H,W,C]."""
    x = xs[0]
    k = attrs.get("k", 2)
    if x.ndim != 4 or x.shape[1] % k or x.shape[2] % k:
        raise ShapeError(f"avg_pool2d({k}) needs [N,H,W,C] with H,W divisible by {k}; got {x.shape}")
    out = None
    for i in range(k):
        for j in range(k):
            part = x[:, i::k, j::k]
            out = part.copy() if out is None else out + part
    return out * DTYPE(1.0 / (k * k)), x.shape


def avg_pool2d_bwd(g, shape, attrs):
    k = attrs.get("k", 2)
    gx = np.empty(shape, dtype=DTYPE)
    gk = g * DTYPE(1.0 / (k * k))
    for i in range(k):
        for j in range(k):
            gx[:, i::k, j::k] = gk
    return (gx,)


def temporal_shift_fwd(xs, attrs):
    """x is [N*T, h, w, C]; channels [0,f) pull from t-1, [f,2f) from t+1."""
    x = xs[0]
    t = attrs["frames"]
    if x.ndim != 4 or x.shape[0] % t:
        raise ShapeError(f"temporal_shift needs leading dim divisible by {t}; got {x.shape}")
    fold = int(np.floor(x.shape[3] * attrs["fraction"]))
    if fold == 0:
        return x, fold
    v = x.reshape(-1, t, *x.shape[1:])
    out = v.copy()
    out[:, 0, ..., :fold] = 0
    out[:, 1:, ..., :fold] = v[:, :-1, ..., :fold]
    out[:, -1, ..., fold:2 * fold] = 0
    out[:, :-1, ..., fold:2 * fold] = v[:, 1:, ..., fold:2 * fold]
    return out.reshape(x.shape), fold


def temporal_shift_bwd(g, fold, attrs):
    if fold == 0:
        return (g,)
    t = attrs["frames"]
    v = g.reshape(-1, t, *g.shape[1:])
    out = v.copy()
    out[:, -1, ..., :fold] = 0
    out[:, :-1, ..., :fold] = v[:, 1:, ..., :fold]
    out[:, 0, ..., fold:2 * fold] = 0
    out[:, 1:, ..., fold:2 * fold] = v[:, :-1, ..., fold:2 * fold]
    return (out.reshape(g.shape),)


KERNELS = {
    "identity": (identity_fwd, identity_bwd),
    "add": (add_fwd, add_bwd),
    "sub": (sub_fwd, sub_bwd),
    "mul": (mul_fwd, mul_bwd),
    "div": (div_fwd, div_bwd),
    "scalar_mul": (scalar_mul_fwd, scalar_mul_bwd),
    "tanh": (tanh_fwd, tanh_bwd),
    "sigmoid": (sigmoid_fwd, sigmoid_bwd),
    "dropout": (dropout_fwd, dropout_bwd),
    "sum": (sum_fwd, sum_bwd),
    "reshape": (reshape_fwd, reshape_bwd),
    "standardize": (standardize_fwd, standardize_bwd),
    "mse_loss": (mse_fwd, mse_bwd),
    "dense": (dense_fwd, dense_bwd),
    "conv2d": (conv2d_fwd, conv2d_bwd),
    "avg_pool2d": (avg_pool2d_fwd, avg_pool2d_bwd),
    "temporal_shift": (temporal_shift_fwd, temporal_shift_bwd),
}
