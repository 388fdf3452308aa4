"""Differentiable primitives.

Each op computes its forward value with numpy (or a kernel from
:mod:`.kernels`), checks it is finite, and, when a trace is active and any
input requires a gradient, records a closure that maps the output gradient to
input gradients. Python scalars and arrays are promoted to constant tensors of
the other operand's dtype, so the same graph runs in float32 or float64.
"""
import math

import numpy as np

from ..errors import ConfigurationError, DimensionError
from . import kernels
from .tensor import Tensor, active_trace, check_finite


def _const(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _const(b, a.dtype)
    b = _const(b, np.float32)
    return _const(a, b.dtype), b


def _emit(op, data, inputs, backward_fn):
    check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    tr = active_trace()
    if tr is not None and any(t.requires_grad for t in inputs):
        tr.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ------------------------------------------------------------ elementwise


def add(a, b):
    a, b = _pair(a, b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", out, (a, b), bwd)


def sub(a, b):
    a, b = _pair(a, b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", out, (a, b), bwd)


def mul(a, b):
    a, b = _pair(a, b)
    out = a.data * b.data

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", out, (a, b), bwd)


def div(a, b):
    a, b = _pair(a, b)
    with np.errstate(all="ignore"):  # non-finite results are reported by _emit
        out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("div", out, (a, b), bwd)


def relu(x):
    out = np.maximum(x.data, 0)
    return _emit("relu", out, (x,), lambda g: (g * (out > 0),))


def sigmoid(x):
    # split by sign to avoid overflow in exp
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def exp(x):
    with np.errstate(all="ignore"):
        out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x):
    with np.errstate(all="ignore"):
        out = np.log(x.data)
    return _emit("log", out, (x,), lambda g: (g / x.data,))


def pow_scalar(x, p):
    """``x ** p`` for a constant exponent; ``x`` must be nonnegative if ``p`` is fractional."""
    p = float(p)
    if p == 0:
        out = np.ones_like(x.data)
        return _emit("pow", out, (x,), lambda g: (np.zeros_like(g),))
    with np.errstate(all="ignore"):
        out = np.power(x.data, p)

    def bwd(g):
        return (g * p * np.power(x.data, p - 1),)

    return _emit("pow", out, (x,), bwd)


def clamp(x, lo, hi):
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit("clamp", out, (x,), lambda g: (g * inside,))


# ------------------------------------------------------------ shape and reduction


def sum(x, axis=None, keepdims=False):  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _emit("sum", out, (x,), bwd)


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype, copy=True),)

    return _emit("mean", out, (x,), bwd)


def reshape(x, shape):
    out = x.data.reshape(shape)
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _emit("transpose", out, (x,), lambda g: (g.transpose(inv),))


def getitem(x, idx):
    out = np.array(x.data[idx], dtype=x.dtype)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit("getitem", out, (x,), bwd)


def concat(tensors, axis=0):
    tensors = list(tensors)
    dtype = next(t.dtype for t in tensors if isinstance(t, Tensor))
    tensors = [_const(t, dtype) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, tuple(tensors), bwd)


def embedding(weight, idx):
    """Rows of ``weight`` selected by the integer array ``idx``."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise DimensionError(f"embedding index out of range for {weight.shape[0]} rows")
    out = weight.data[idx]

    def bwd(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, idx, g)
        return (gw,)

    return _emit("embedding", out, (weight,), bwd)


# ------------------------------------------------------------ linear algebra


def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("matmul", out, (a, b), bwd)


def linear(x, weight, bias=None):
    """Affine map ``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input features {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, weight.shape[0])
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _emit("linear", out, inputs, bwd)


# ------------------------------------------------------------ normalisation and activations


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (x,), bwd)


def layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def bwd(g):
        red = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gb = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv / n * (n * gh - gh.sum(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        return gx, gg, gb

    return _emit("layer_norm", out.astype(x.dtype, copy=False), (x, gamma, beta), bwd)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Batch normalisation of (N, C, L) over the batch and temporal axes.

    In training mode the batch statistics normalise and the running buffers
    (plain arrays, updated in place) track them with the given momentum; the
    running variance uses the unbiased estimate. Eval mode uses the buffers.
    """
    if x.ndim != 3 or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batch_norm expects (N, {gamma.shape[0]}, L), got {x.shape}")
    if training:
        m = x.shape[0] * x.shape[2]
        mu, var = kernels.batchnorm_stats(x.data)
        inv = 1.0 / np.sqrt(var + eps)
        running_mean *= 1 - momentum
        running_mean += (momentum * mu).astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += (momentum * var * (m / max(m - 1, 1))).astype(running_var.dtype)
        gam = gamma.data.astype(np.float64)
        out = kernels.channel_affine(x.data, gam * inv, beta.data - gam * inv * mu)

        def bwd(g):
            gx, gg, gb = kernels.batchnorm_backward(g, x.data, mu, inv, gamma.data, need_x=x.requires_grad)
            return gx, gg, gb

    else:
        inv = 1.0 / np.sqrt(running_var.astype(np.float64) + eps)
        scale = gamma.data * inv
        out = kernels.channel_affine(x.data, scale, beta.data - scale * running_mean)
        xhat = None

        def bwd(g):
            nonlocal xhat
            if xhat is None:
                xhat = (x.data - running_mean.astype(x.dtype)[None, :, None]) * inv.astype(x.dtype)[None, :, None]
            gg = (g * xhat).sum(axis=(0, 2)) if gamma.requires_grad else None
            gb = g.sum(axis=(0, 2)) if beta.requires_grad else None
            gx = g * scale.astype(x.dtype)[None, :, None] if x.requires_grad else None
            return gx, gg, gb

    return _emit("batch_norm", out, (x, gamma, beta), bwd)


def dropout(x, p, rng=None, training=False):
    """Inverted dropout: Bernoulli keep-mask scaled by 1/(1-p) in training, identity otherwise."""
    if not 0 <= p < 1:
        raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}", module="numerics")
    if not training or p == 0:
        return x
    if rng is None:
        raise ConfigurationError("training-mode dropout needs a random generator", module="numerics")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) / x.dtype.type(1 - p)
    out = x.data * mask
    return _emit("dropout", out, (x,), lambda g: (g * mask,))


# ------------------------------------------------------------ temporal layers


def conv1d(x, weight, bias=None, stride=1, padding=0):
    """1-D cross-correlation of (N, C_in, L) or (C_in, L) input."""
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1, *x.shape))
    if x.ndim != 3 or weight.ndim != 3:
        raise DimensionError(f"conv1d expects (N, C, L) input and (O, C, K) weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv1d: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    if stride < 1 or padding < 0:
        raise ConfigurationError("conv1d needs stride >= 1 and padding >= 0", module="numerics")
    k = weight.shape[2]
    if k > x.shape[2] + 2 * padding:
        raise DimensionError(f"conv1d: kernel {k} longer than padded input {x.shape[2] + 2 * padding}")
    b = bias.data if bias is not None else np.zeros(weight.shape[0], x.dtype)
    out = kernels.conv1d_forward(x.data, weight.data, b, stride, padding)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gx, gw, gb = kernels.conv1d_backward(x.data, weight.data, g, stride, padding, need_x=x.requires_grad)
        if bias is None:
            return gx, gw
        return gx, gw, gb

    out = _emit("conv1d", out, inputs, bwd)
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def maxpool1d(x, kernel_size=2, stride=2):
    """Non-overlapping max pool over the last axis; output length floor(L/2)."""
    if kernel_size != 2 or stride != 2:
        raise ConfigurationError("only kernel 2 / stride 2 max pooling is implemented", module="numerics")
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1, *x.shape))
    length = x.shape[-1]
    out, arg = kernels.maxpool2_forward(x.data)
    out = _emit("maxpool1d", out, (x,), lambda g: (kernels.maxpool2_backward(g, arg, length),))
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def global_avg_pool(x):
    """Mean over the last (temporal) axis."""
    return mean(x, axis=-1)


# ------------------------------------------------------------ attention


def multi_head_attention(x, heads, params):
    """Scaled dot-product self-attention over the token axis.

    ``x`` is (T, D) or (B, T, D). ``params`` maps ``wq, wk, wv, wo`` (each
    (D, D), applied as ``x @ W.T``) and optional biases ``bq, bk, bv, bo``.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1, *x.shape))
    bsz, t, d = x.shape
    if heads < 1 or d % heads:
        raise ConfigurationError(f"model dim {d} not divisible by {heads} heads", module="numerics")
    hd = d // heads

    def split(z):
        return transpose(reshape(z, (bsz, t, heads, hd)), (0, 2, 1, 3))

    q = split(linear(x, params["wq"], params.get("bq")))
    k = split(linear(x, params["wk"], params.get("bk")))
    v = split(linear(x, params["wv"], params.get("bv")))
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    attn = softmax(scores, axis=-1)
    ctx = transpose(matmul(attn, v), (0, 2, 1, 3))
    out = linear(reshape(ctx, (bsz, t, d)), params["wo"], params.get("bo"))
    if squeeze:
        out = reshape(out, (t, d))
    return out
