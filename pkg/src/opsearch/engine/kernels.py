"""Forward kernels and vector-Jacobian products for the executable instructions.

Kernels are dtype-generic: they compute in the dtype of their inputs (float32
in normal use, float64 under finite-difference checks).  A VJP receives the
forward inputs, the forward output and the output cotangent, and returns one
cotangent per operand.
"""
from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..catalog import norm_axes, reduce_axis
from ..errors import KernelMissing

EPS = 1e-5


class Kernel(NamedTuple):
    forward: Callable
    vjp: Callable


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- linear algebra ----------------------------------------------------------


def _matmul(xs, hp):
    return np.matmul(xs[0], xs[1])


def _matmul_vjp(xs, out, g, hp):
    a, b = xs
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]


def _add(xs, hp):
    return xs[0] + xs[1]


def _add_vjp(xs, out, g, hp):
    return [_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)]


def _sub(xs, hp):
    return xs[0] - xs[1]


def _sub_vjp(xs, out, g, hp):
    return [_unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)]


def _hadamard(xs, hp):
    return xs[0] * xs[1]


def _hadamard_vjp(xs, out, g, hp):
    a, b = xs
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _dot(xs, hp):
    a, b = xs
    return np.sum(a * b, axis=-1, keepdims=True)


def _dot_vjp(xs, out, g, hp):
    a, b = xs
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _outer(xs, hp):
    return np.multiply.outer(xs[0], xs[1])


def _outer_vjp(xs, out, g, hp):
    a, b = xs
    return [g @ b, g.T @ a]


def _vector_norm(xs, hp):
    (x,) = xs
    return np.sqrt(np.sum(x * x, axis=-1, keepdims=True))


def _vector_norm_vjp(xs, out, g, hp):
    (x,) = xs
    safe = np.where(out > 0, out, 1)
    return [np.where(out > 0, g * x / safe, 0)]


def _matrix_norm(xs, hp):
    (x,) = xs
    col = np.sum(np.abs(x), axis=-2)
    return np.max(col, axis=-1, keepdims=True)


def _matrix_norm_vjp(xs, out, g, hp):
    (x,) = xs
    col = np.sum(np.abs(x), axis=-2)
    arg = np.argmax(col, axis=-1)
    mask = np.zeros_like(col)
    np.put_along_axis(mask, arg[..., None], 1, axis=-1)
    return [np.sign(x) * (mask * g)[..., None, :]]


def _frobenius(xs, hp):
    (x,) = xs
    return np.sqrt(np.sum(x * x, axis=(-2, -1)))[..., None]


def _frobenius_vjp(xs, out, g, hp):
    (x,) = xs
    n = out[..., None]
    safe = np.where(n > 0, n, 1)
    return [np.where(n > 0, g[..., None] * x / safe, 0)]


def _identity(xs, hp):
    return xs[0]


def _identity_vjp(xs, out, g, hp):
    return [g]


def _zeros(xs, hp):
    return np.zeros_like(xs[0])


def _zeros_vjp(xs, out, g, hp):
    return [np.zeros_like(xs[0])]


def _transpose(xs, hp):
    return np.swapaxes(xs[0], -1, -2)


def _transpose_vjp(xs, out, g, hp):
    return [np.swapaxes(g, -1, -2)]


def _reshape(xs, hp):
    return xs[0].reshape(hp["target"])


def _reshape_vjp(xs, out, g, hp):
    return [g.reshape(xs[0].shape)]


# -- activations ---------------------------------------------------------------


def _sigmoid(xs, hp):
    x = xs[0]
    return np.where(x >= 0, 1 / (1 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1 + np.exp(-np.abs(x)))).astype(x.dtype)


def _sigmoid_vjp(xs, out, g, hp):
    return [g * out * (1 - out)]


def _relu(xs, hp):
    return np.maximum(xs[0], 0)


def _relu_vjp(xs, out, g, hp):
    return [g * (xs[0] > 0)]


def _leaky(xs, hp):
    x = xs[0]
    return np.where(x > 0, x, x * x.dtype.type(hp["slope"]))


def _leaky_vjp(xs, out, g, hp):
    x = xs[0]
    return [g * np.where(x > 0, 1, x.dtype.type(hp["slope"])).astype(x.dtype)]


def _tanh(xs, hp):
    return np.tanh(xs[0])


def _tanh_vjp(xs, out, g, hp):
    return [g * (1 - out * out)]


def _softmax(xs, hp):
    x = xs[0]
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def _softmax_vjp(xs, out, g, hp):
    return [out * (g - np.sum(g * out, axis=-1, keepdims=True))]


# -- convolution / pooling ----------------------------------------------------


def _windows(xp: np.ndarray, k: int, s: int, d: int, ho: int, wo: int) -> np.ndarray:
    """[N, C, Ho, Wo, k, k] view of the (already padded) input."""
    span = d * (k - 1) + 1
    v = sliding_window_view(xp, (span, span), axis=(2, 3))
    return v[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s, ::d, ::d]


def _out_hw(h, w, hp):
    k, s, p, d = hp["kernel"], hp["stride"], hp["padding"], hp.get("dilation", 1)
    return (h + 2 * p - d * (k - 1) - 1) // s + 1, (w + 2 * p - d * (k - 1) - 1) // s + 1


def _pad(x, p, value=0.0):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _cross_correlation(xs, hp):
    x, w = xs
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    ho, wo = _out_hw(h, wd, hp)
    cols = _windows(_pad(x, hp["padding"]), k, hp["stride"], hp["dilation"], ho, wo)
    if hp["reduce"] == "sum":
        flat = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        out = flat @ w.reshape(co, c * k * k).T
        return np.ascontiguousarray(out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))
    # per input channel maps, laid out output-channel major: index o * C + c
    flat = cols.transpose(1, 0, 2, 3, 4, 5).reshape(c, n * ho * wo, k * k)
    wk = w.reshape(co, c, k * k).transpose(1, 2, 0)
    out = np.matmul(flat, wk)  # [C, N*Ho*Wo, Co]
    out = out.reshape(c, n, ho, wo, co).transpose(1, 4, 0, 2, 3)
    return np.ascontiguousarray(out.reshape(n, co * c, ho, wo))


def _col2im(dcols, x_shape, hp, k):
    n, c, h, wd = x_shape
    p, s, d = hp["padding"], hp["stride"], hp.get("dilation", 1)
    ho, wo = dcols.shape[2], dcols.shape[3]
    dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i * d : i * d + s * (ho - 1) + 1 : s, j * d : j * d + s * (wo - 1) + 1 : s] += dcols[..., i, j]
    if p:
        dxp = dxp[:, :, p:-p, p:-p]
    return dxp


def _cross_correlation_vjp(xs, out, g, hp):
    x, w = xs
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    ho, wo = g.shape[2], g.shape[3]
    cols = _windows(_pad(x, hp["padding"]), k, hp["stride"], hp["dilation"], ho, wo)
    if hp["reduce"] == "sum":
        gf = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
        flat = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        gw = (gf.T @ flat).reshape(w.shape)
        dflat = gf @ w.reshape(co, c * k * k)
        dcols = dflat.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    else:
        g5 = g.reshape(n, co, c, ho, wo).transpose(2, 0, 3, 4, 1).reshape(c, n * ho * wo, co)
        flat = cols.transpose(1, 0, 2, 3, 4, 5).reshape(c, n * ho * wo, k * k)
        wk = w.reshape(co, c, k * k).transpose(1, 2, 0)  # [C, kk, Co]
        gwk = np.matmul(np.swapaxes(flat, 1, 2), g5)  # [C, kk, Co]
        gw = gwk.transpose(2, 0, 1).reshape(w.shape)
        dflat = np.matmul(g5, np.swapaxes(wk, 1, 2))  # [C, NHW, kk]
        dcols = dflat.reshape(c, n, ho, wo, k, k).transpose(1, 0, 2, 3, 4, 5)
    return [_col2im(dcols, x.shape, hp, k), gw]


def _pool_windows(x, hp, fill):
    k, s, p = hp["kernel"], hp["stride"], hp["padding"]
    ho, wo = _out_hw(x.shape[2], x.shape[3], hp)
    return _windows(_pad(x, p, fill), k, s, 1, ho, wo)


def _maxpool(xs, hp):
    win = _pool_windows(xs[0], hp, -np.inf)
    return win.max(axis=(4, 5))


def _maxpool_vjp(xs, out, g, hp):
    x = xs[0]
    k = hp["kernel"]
    win = _pool_windows(x, hp, -np.inf)
    n, c, ho, wo = out.shape
    arg = win.reshape(n, c, ho, wo, k * k).argmax(axis=-1)
    dcols = np.zeros((n, c, ho, wo, k, k), dtype=g.dtype)
    flat = dcols.reshape(n, c, ho, wo, k * k)
    np.put_along_axis(flat, arg[..., None], g[..., None], axis=-1)
    return [_col2im(dcols, x.shape, dict(hp, dilation=1), k)]


def _avgpool(xs, hp):
    win = _pool_windows(xs[0], hp, 0.0)
    return win.mean(axis=(4, 5), dtype=np.float64).astype(xs[0].dtype)


def _avgpool_vjp(xs, out, g, hp):
    x = xs[0]
    k = hp["kernel"]
    dcols = np.broadcast_to((g / (k * k))[..., None, None], g.shape + (k, k))
    return [_col2im(dcols, x.shape, dict(hp, dilation=1), k)]


# -- probability / statistics --------------------------------------------------


def _moments(x):
    axes = norm_axes(x.ndim)
    mu = np.mean(x, axis=axes, keepdims=True, dtype=np.float64)
    d = x.astype(np.float64) - mu
    sigma = np.sqrt(np.mean(d * d, axis=axes, keepdims=True))
    return axes, d, sigma


def _standardize(xs, hp):
    x = xs[0]
    _, d, sigma = _moments(x)
    return (d / (sigma + EPS)).astype(x.dtype)


def _standardize_vjp(xs, out, g, hp):
    x = xs[0]
    axes, d, sigma = _moments(x)
    n = np.prod([x.shape[a] for a in axes])
    big = sigma + EPS
    g64 = g.astype(np.float64)
    gm = np.mean(g64, axis=axes, keepdims=True)
    gd = np.sum(g64 * d, axis=axes, keepdims=True)
    safe = np.where(sigma > 0, sigma, 1.0)
    corr = np.where(sigma > 0, d * gd / (n * safe * big * big), 0.0)
    return [((g64 - gm) / big - corr).astype(x.dtype)]


def _coef_view(coef, ndim):
    return [c.reshape((1, -1) + (1,) * (ndim - 2)) for c in coef]


def _poly3(xs, hp):
    x, coef = xs
    axes = norm_axes(x.ndim)
    d = x - np.mean(x, axis=axes, keepdims=True, dtype=np.float64).astype(x.dtype)
    a, b, c = _coef_view(coef, x.ndim)
    return a * d * d * d + b * d + c


def _poly3_vjp(xs, out, g, hp):
    x, coef = xs
    axes = norm_axes(x.ndim)
    d = x - np.mean(x, axis=axes, keepdims=True, dtype=np.float64).astype(x.dtype)
    a, b, _ = _coef_view(coef, x.ndim)
    h = g * (3 * a * d * d + b)
    gx = h - np.mean(h, axis=axes, keepdims=True, dtype=np.float64).astype(x.dtype)
    keep = tuple(i for i in range(x.ndim) if i != 1)
    gcoef = np.stack([np.sum(g * d ** 3, axis=keep), np.sum(g * d, axis=keep), np.sum(g, axis=keep)])
    return [gx, gcoef.astype(coef.dtype)]


# -- aggregation ----------------------------------------------------------------


def _grouped(x, gs):
    ax = reduce_axis(x.ndim)
    shape = x.shape[:ax] + (x.shape[ax] // gs, gs) + x.shape[ax + 1:]
    return x.reshape(shape), ax + 1


def _sum(xs, hp):
    v, ax = _grouped(xs[0], hp["group_size"])
    return np.sum(v, axis=ax, dtype=np.float64).astype(xs[0].dtype)


def _sum_vjp(xs, out, g, hp):
    x = xs[0]
    ax = reduce_axis(x.ndim)
    return [np.repeat(g, hp["group_size"], axis=ax)]


def _mean(xs, hp):
    v, ax = _grouped(xs[0], hp["group_size"])
    return np.mean(v, axis=ax, dtype=np.float64).astype(xs[0].dtype)


def _mean_vjp(xs, out, g, hp):
    x = xs[0]
    ax = reduce_axis(x.ndim)
    return [np.repeat(g / hp["group_size"], hp["group_size"], axis=ax)]


def _extreme(pick):
    def fwd(xs, hp):
        v, ax = _grouped(xs[0], hp["group_size"])
        return pick(v, axis=ax)

    def vjp(xs, out, g, hp):
        x = xs[0]
        v, ax = _grouped(x, hp["group_size"])
        arg = (np.argmax if pick is np.max else np.argmin)(v, axis=ax)
        gv = np.zeros_like(v)
        np.put_along_axis(gv, np.expand_dims(arg, ax), np.expand_dims(g, ax), axis=ax)
        return [gv.reshape(x.shape)]

    return fwd, vjp


_max, _max_vjp = _extreme(np.max)
_min, _min_vjp = _extreme(np.min)


def _sqrt(xs, hp):
    return np.sqrt(xs[0])


def _sqrt_vjp(xs, out, g, hp):
    return [g / (2 * out)]


def _concat(xs, hp):
    return np.concatenate(xs, axis=1)


def _concat_vjp(xs, out, g, hp):
    c0 = xs[0].shape[1]
    return [g[:, :c0], g[:, c0:]]


def _wshape(x, w, ax):
    return w.reshape((1,) * (ax + 1) + (w.shape[0],) + (1,) * (x.ndim - ax - 1))


def _weighted_mean(xs, hp):
    x, w = xs
    v, ax = _grouped(x, hp["group_size"])
    ww = _wshape(x, w, ax - 1)
    return np.sum(v * ww, axis=ax) / np.sum(w)


def _weighted_mean_vjp(xs, out, g, hp):
    x, w = xs
    gs = hp["group_size"]
    v, ax = _grouped(x, gs)
    ww = _wshape(x, w, ax - 1)
    total = np.sum(w)
    ge = np.expand_dims(g, ax)
    gx = (ge * ww / total).reshape(x.shape)
    diff = v - np.expand_dims(out, ax)
    keep = tuple(i for i in range(v.ndim) if i != ax)
    gw = np.sum(ge * diff, axis=keep) / total
    return [gx, gw.astype(w.dtype)]


KERNELS: dict[str, Kernel] = {
    "matmul": Kernel(_matmul, _matmul_vjp),
    "add": Kernel(_add, _add_vjp),
    "sub": Kernel(_sub, _sub_vjp),
    "hadamard": Kernel(_hadamard, _hadamard_vjp),
    "dot": Kernel(_dot, _dot_vjp),
    "outer": Kernel(_outer, _outer_vjp),
    "vector_norm": Kernel(_vector_norm, _vector_norm_vjp),
    "matrix_norm": Kernel(_matrix_norm, _matrix_norm_vjp),
    "frobenius_norm": Kernel(_frobenius, _frobenius_vjp),
    "identity": Kernel(_identity, _identity_vjp),
    "zeros": Kernel(_zeros, _zeros_vjp),
    "transpose": Kernel(_transpose, _transpose_vjp),
    "reshape": Kernel(_reshape, _reshape_vjp),
    "sigmoid": Kernel(_sigmoid, _sigmoid_vjp),
    "relu": Kernel(_relu, _relu_vjp),
    "leaky_relu": Kernel(_leaky, _leaky_vjp),
    "tanh": Kernel(_tanh, _tanh_vjp),
    "softmax": Kernel(_softmax, _softmax_vjp),
    "cross_correlation": Kernel(_cross_correlation, _cross_correlation_vjp),
    "maxpool": Kernel(_maxpool, _maxpool_vjp),
    "avgpool": Kernel(_avgpool, _avgpool_vjp),
    "standardize": Kernel(_standardize, _standardize_vjp),
    "poly3": Kernel(_poly3, _poly3_vjp),
    "sum": Kernel(_sum, _sum_vjp),
    "mean": Kernel(_mean, _mean_vjp),
    "max": Kernel(_max, _max_vjp),
    "min": Kernel(_min, _min_vjp),
    "sqrt": Kernel(_sqrt, _sqrt_vjp),
    "concat": Kernel(_concat, _concat_vjp),
    "weighted_mean": Kernel(_weighted_mean, _weighted_mean_vjp),
}


def kernel(opcode: str) -> Kernel:
    try:
        return KERNELS[opcode]
    except KeyError:
        raise KernelMissing(f"no kernel for {opcode!r}") from None
