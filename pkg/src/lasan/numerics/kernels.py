"""Hot inner loops: 1-D convolution and stride-2 max pooling.

Every kernel exists twice, a numba ``@njit`` loop nest and a numpy/BLAS
version. ``lasan._accel.USE_NUMBA`` (env ``LASAN_NUMBA``) picks the default.
The numba convolution only pays off while ``C_in * K`` is small; above
``NUMBA_CONV_MAX_CK`` the BLAS im2col path is faster even with numba on.

All kernels are dtype-generic (float32 for training, float64 for the
gradient-check shadow) and reduce in a fixed order, so repeated calls are
bit-identical.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import _accel
from .._accel import njit

NUMBA_CONV_MAX_CK = 64


# ---------------------------------------------------------------- numba path


@njit(fastmath=True)
def _conv_fwd_nb(xp, w, b, stride, lout):
    n_batch, c_in, _ = xp.shape
    c_out, _, k_size = w.shape
    out = np.empty((n_batch, c_out, lout), xp.dtype)
    for n in range(n_batch):
        for o in range(c_out):
            acc = out[n, o]
            acc[:] = b[o]
            for c in range(c_in):
                row = xp[n, c]
                for k in range(k_size):
                    wv = w[o, c, k]
                    if stride == 1:
                        for t in range(lout):
                            acc[t] += wv * row[t + k]
                    else:
                        for t in range(lout):
                            acc[t] += wv * row[t * stride + k]
    return out


@njit(fastmath=True)
def _conv_bwd_nb(xp, w, g, stride, need_x):
    n_batch, c_in, lp = xp.shape
    c_out, _, k_size = w.shape
    lout = g.shape[2]
    gxp = np.zeros((n_batch, c_in, lp), xp.dtype)
    gw = np.zeros((c_out, c_in, k_size), xp.dtype)
    for n in range(n_batch):
        for o in range(c_out):
            go = g[n, o]
            for c in range(c_in):
                row = xp[n, c]
                grow = gxp[n, c]
                for k in range(k_size):
                    s = xp[0, 0, 0] * 0
                    wv = w[o, c, k]
                    if stride == 1:
                        for t in range(lout):
                            s += go[t] * row[t + k]
                        if need_x:
                            for t in range(lout):
                                grow[t + k] += wv * go[t]
                    else:
                        for t in range(lout):
                            s += go[t] * row[t * stride + k]
                        if need_x:
                            for t in range(lout):
                                grow[t * stride + k] += wv * go[t]
                    gw[o, c, k] += s
    return gxp, gw


@njit
def _maxpool2_fwd_nb(x):
    n_batch, chans, length = x.shape
    lout = length // 2
    out = np.empty((n_batch, chans, lout), x.dtype)
    arg = np.empty((n_batch, chans, lout), np.uint8)
    for n in range(n_batch):
        for c in range(chans):
            for t in range(lout):
                a = x[n, c, 2 * t]
                b = x[n, c, 2 * t + 1]
                if b > a:
                    out[n, c, t] = b
                    arg[n, c, t] = 1
                else:
                    out[n, c, t] = a
                    arg[n, c, t] = 0
    return out, arg


@njit
def _maxpool2_bwd_nb(g, arg, length):
    n_batch, chans, lout = g.shape
    gx = np.zeros((n_batch, chans, length), g.dtype)
    for n in range(n_batch):
        for c in range(chans):
            for t in range(lout):
                gx[n, c, 2 * t + arg[n, c, t]] = g[n, c, t]
    return gx


@njit
def _bn_stats_nb(x):
    n_batch, chans, length = x.shape
    mean = np.zeros(chans)
    var = np.zeros(chans)
    m = n_batch * length
    for c in range(chans):
        s = 0.0
        for n in range(n_batch):
            for t in range(length):
                s += x[n, c, t]
        mu = s / m
        q = 0.0
        for n in range(n_batch):
            for t in range(length):
                d = x[n, c, t] - mu
                q += d * d
        mean[c] = mu
        var[c] = q / m
    return mean, var


@njit(fastmath=True)
def _affine_nb(x, scale, shift):
    n_batch, chans, length = x.shape
    out = np.empty_like(x)
    for n in range(n_batch):
        for c in range(chans):
            a = scale[c]
            b = shift[c]
            for t in range(length):
                out[n, c, t] = x[n, c, t] * a + b
    return out


@njit
def _bn_bwd_nb(g, x, mean, inv, gamma, need_x):
    n_batch, chans, length = x.shape
    m = n_batch * length
    sum_g = np.zeros(chans)
    sum_gh = np.zeros(chans)
    for c in range(chans):
        sg = 0.0
        sgh = 0.0
        for n in range(n_batch):
            for t in range(length):
                gv = g[n, c, t]
                sg += gv
                sgh += gv * (x[n, c, t] - mean[c])
        sum_g[c] = sg
        sum_gh[c] = sgh * inv[c]
    gx = np.empty_like(x)
    if need_x:
        for c in range(chans):
            k = gamma[c] * inv[c]
            a = sum_g[c] / m
            b = sum_gh[c] * inv[c] / m
            for n in range(n_batch):
                for t in range(length):
                    gx[n, c, t] = k * (g[n, c, t] - a - (x[n, c, t] - mean[c]) * b)
    return gx, sum_gh, sum_g


# ---------------------------------------------------------------- numpy path


def _chunks(n_batch, per_sample, budget=1 << 18):
    step = max(1, budget // max(per_sample, 1))
    for lo in range(0, n_batch, step):
        yield slice(lo, min(n_batch, lo + step))


def _cols(xp, k_size, stride, lout):
    # (n, C*K, Lout) im2col block for a batch slice
    n, c_in = xp.shape[:2]
    win = sliding_window_view(xp, k_size, axis=-1)[..., : (lout - 1) * stride + 1 : stride, :]
    return win.transpose(0, 1, 3, 2).reshape(n, c_in * k_size, lout)


def _conv_fwd_np(xp, w, b, stride, lout):
    n_batch = xp.shape[0]
    c_out, c_in, k_size = w.shape
    w2 = w.reshape(c_out, c_in * k_size)
    out = np.empty((n_batch, c_out, lout), xp.dtype)
    for sl in _chunks(n_batch, c_in * k_size * lout):
        np.matmul(w2, _cols(xp[sl], k_size, stride, lout), out=out[sl])
    out += b[None, :, None]
    return out


def _conv_bwd_np(xp, w, g, stride, need_x):
    n_batch, c_in, _ = xp.shape
    c_out, _, k_size = w.shape
    lout = g.shape[2]
    w2t = np.ascontiguousarray(w.reshape(c_out, c_in * k_size).T)
    gw = np.zeros((c_out, c_in * k_size), xp.dtype)
    gxp = np.zeros_like(xp)
    span = (lout - 1) * stride + 1
    for sl in _chunks(n_batch, c_in * k_size * lout):
        cols = _cols(xp[sl], k_size, stride, lout)
        gw += np.tensordot(g[sl], cols, axes=([0, 2], [0, 2]))
        if need_x:
            gcols = np.matmul(w2t, g[sl]).reshape(-1, c_in, k_size, lout)
            dst = gxp[sl]
            for k in range(k_size):
                dst[:, :, k : k + span : stride] += gcols[:, :, k, :]
    return gxp, gw.reshape(c_out, c_in, k_size)


def _maxpool2_fwd_np(x):
    lout = x.shape[-1] // 2
    pairs = x[..., : 2 * lout].reshape(*x.shape[:-1], lout, 2)
    arg = (pairs[..., 1] > pairs[..., 0]).astype(np.uint8)
    out = np.where(arg == 1, pairs[..., 1], pairs[..., 0])
    return out, arg


def _maxpool2_bwd_np(g, arg, length):
    lout = g.shape[-1]
    gx = np.zeros((*g.shape[:-1], length), g.dtype)
    pairs = gx[..., : 2 * lout].reshape(*g.shape[:-1], lout, 2)
    pairs[..., 0] = np.where(arg == 0, g, 0)
    pairs[..., 1] = np.where(arg == 1, g, 0)
    return gx


def _bn_stats_np(x):
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=(0, 2))
    var = ((x64 - mean[None, :, None]) ** 2).mean(axis=(0, 2))
    return mean, var


def _affine_np(x, scale, shift):
    return x * scale.astype(x.dtype)[None, :, None] + shift.astype(x.dtype)[None, :, None]


def _bn_bwd_np(g, x, mean, inv, gamma, need_x):
    m = x.shape[0] * x.shape[2]
    xhat = (x - mean.astype(x.dtype)[None, :, None]) * inv.astype(x.dtype)[None, :, None]
    sum_g = g.sum(axis=(0, 2), dtype=np.float64)
    sum_gh = (g * xhat).sum(axis=(0, 2), dtype=np.float64)
    gx = None
    if need_x:
        k = (gamma * inv).astype(x.dtype)[None, :, None]
        gx = k * (g - (sum_g / m).astype(x.dtype)[None, :, None] - xhat * (sum_gh / m).astype(x.dtype)[None, :, None])
    return gx, sum_gh, sum_g


# ---------------------------------------------------------------- dispatch


def _use_numba(use_numba):
    return _accel.USE_NUMBA if use_numba is None else (use_numba and _accel.HAVE_NUMBA)


def conv_out_length(length, k_size, stride, padding):
    return (length + 2 * padding - k_size) // stride + 1


def conv1d_forward(x, w, b, stride=1, padding=0, use_numba=None):
    """Cross-correlate ``x`` (N, C_in, L) with ``w`` (C_out, C_in, K)."""
    lout = conv_out_length(x.shape[-1], w.shape[-1], stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else np.ascontiguousarray(x)
    if _use_numba(use_numba) and w.shape[1] * w.shape[2] <= NUMBA_CONV_MAX_CK:
        return _conv_fwd_nb(xp, np.ascontiguousarray(w), np.ascontiguousarray(b), stride, lout)
    return _conv_fwd_np(xp, w, b, stride, lout)


def conv1d_backward(x, w, g, stride=1, padding=0, need_x=True, use_numba=None):
    """Return ``(grad_x, grad_w, grad_b)`` for :func:`conv1d_forward`."""
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else np.ascontiguousarray(x)
    g = np.ascontiguousarray(g)
    if _use_numba(use_numba) and w.shape[1] * w.shape[2] <= NUMBA_CONV_MAX_CK:
        gxp, gw = _conv_bwd_nb(xp, np.ascontiguousarray(w), g, stride, need_x)
    else:
        gxp, gw = _conv_bwd_np(xp, w, g, stride, need_x)
    gb = g.sum(axis=(0, 2))
    gx = None
    if need_x:
        gx = gxp[:, :, padding : padding + x.shape[-1]] if padding else gxp
    return gx, gw, gb


def maxpool2_forward(x, use_numba=None):
    """Kernel-2 stride-2 max pool over the last axis of (N, C, L); floor length."""
    if _use_numba(use_numba):
        return _maxpool2_fwd_nb(np.ascontiguousarray(x))
    return _maxpool2_fwd_np(x)


def maxpool2_backward(g, arg, length, use_numba=None):
    if _use_numba(use_numba):
        return _maxpool2_bwd_nb(np.ascontiguousarray(g), arg, length)
    return _maxpool2_bwd_np(g, arg, length)


def batchnorm_stats(x, use_numba=None):
    """Per-channel mean and population variance of (N, C, L), in float64."""
    if _use_numba(use_numba):
        return _bn_stats_nb(np.ascontiguousarray(x))
    return _bn_stats_np(x)


def channel_affine(x, scale, shift, use_numba=None):
    """``x * scale[c] + shift[c]`` over (N, C, L), in the dtype of ``x``."""
    scale = np.asarray(scale, dtype=x.dtype)
    shift = np.asarray(shift, dtype=x.dtype)
    if _use_numba(use_numba):
        return _affine_nb(np.ascontiguousarray(x), scale, shift)
    return _affine_np(x, scale, shift)


def batchnorm_backward(g, x, mean, inv, gamma, need_x=True, use_numba=None):
    """Training-mode batchnorm gradients ``(grad_x, grad_gamma, grad_beta)``.

    ``mean`` and ``inv`` (1/sqrt(var + eps)) are the float64 batch statistics
    used in the forward pass.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    if _use_numba(use_numba):
        gx, gg, gb = _bn_bwd_nb(np.ascontiguousarray(g), np.ascontiguousarray(x), mean, inv, gamma, need_x)
        gx = gx if need_x else None
    else:
        gx, gg, gb = _bn_bwd_np(g, x, mean, inv, gamma, need_x)
    return gx, gg.astype(x.dtype), gb.astype(x.dtype)
