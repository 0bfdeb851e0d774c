"""Differentiable layer primitives.

Every op validates shapes and computes the output extent before touching
data, runs forward in the input's dtype (float32 compute, float64
verification), and registers an analytic backward closure on the active
tape. Convolutions run as NHWC im2col + GEMM internally; the public
layout is [N, C, H, W].
"""

from __future__ import annotations

import numpy as np

from .tape import active_tape
from .tensor import Parameter, ShapeError, Tensor


def _record(out: Tensor, parents: tuple, backward_fn) -> Tensor:
    tape = active_tape()
    if tape is not None:
        tape.record(out, parents, backward_fn)
    return out


def conv_output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    """Exact output extent for a conv axis; rejects non-exact divisions."""
    span = extent + 2 * padding - kernel
    if span < 0:
        raise ShapeError(f"kernel {kernel} does not fit extent {extent} with padding {padding}")
    if span % stride != 0:
        raise ShapeError(
            f"conv extent ({extent} + 2*{padding} - {kernel}) = {span} is not divisible by stride {stride}"
        )
    return span // stride + 1


def _to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """xp: padded NHWC input. Returns [N*ho*wo, kh*kw*C] patch matrix."""
    n, _, _, c = xp.shape
    col = np.empty((n, ho, wo, kh * kw, c), dtype=xp.dtype)
    idx = 0
    for ki in range(kh):
        for kj in range(kw):
            col[:, :, :, idx, :] = xp[:, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride, :]
            idx += 1
    return col.reshape(n * ho * wo, kh * kw * c)


def _check_image(x: Tensor, name: str = "input") -> None:
    if len(x.shape) != 4:
        raise ShapeError(f"{name} must be [N,C,H,W], got {x.shape}")


def conv2d(x: Tensor, weight: Parameter, bias: Parameter | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [N,C,H,W] with weight [O,C,kh,kw] -> [N,O,H',W']."""
    _check_image(x)
    n, c, h, w = x.shape
    if len(weight.shape) != 4 or weight.shape[1] != c:
        raise ShapeError(f"weight {weight.shape} incompatible with input channels {c}")
    o, _, kh, kw = weight.shape
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} != ({o},)")
    ho = conv_output_extent(h, kh, stride, padding)
    wo = conv_output_extent(w, kw, stride, padding)
    dtype = x.dtype

    xd = x.data
    if kh == kw == stride and padding == 0:
        # patchify fast path (kernel == stride): pure reshape, no window gather
        xr = xd.reshape(n, c, ho, kh, wo, kw)
        col = np.ascontiguousarray(xr.transpose(0, 2, 4, 3, 5, 1)).reshape(n * ho * wo, kh * kw * c)
        xp = None
    else:
        xp = _to_nhwc(xd)
        if padding:
            xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
        col = _im2col(xp, kh, kw, stride, ho, wo)

    # rows of w_mat ordered (ki, kj, c) to match im2col column order
    w_mat = np.ascontiguousarray(weight.value.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, o))
    out_mat = col @ w_mat
    if bias is not None:
        out_mat += bias.value.data
    out = Tensor._wrap(_to_nchw(out_mat.reshape(n, ho, wo, o)))

    def backward(g: np.ndarray):
        g_mat = _to_nhwc(g).reshape(n * ho * wo, o)
        dw_mat = col.T @ g_mat
        dw = np.ascontiguousarray(dw_mat.reshape(kh, kw, c, o).transpose(3, 2, 0, 1))
        db = g_mat.sum(axis=0) if bias is not None else None
        dcol = (g_mat @ w_mat.T).reshape(n, ho, wo, kh * kw, c)
        if xp is None:
            dxr = dcol.reshape(n, ho, wo, kh, kw, c).transpose(0, 5, 1, 3, 2, 4)
            dx = np.ascontiguousarray(dxr).reshape(n, c, h, w)
        else:
            dxp = np.zeros_like(xp)
            idx = 0
            for ki in range(kh):
                for kj in range(kw):
                    dxp[:, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride, :] += dcol[:, :, :, idx, :]
                    idx += 1
            if padding:
                dxp = dxp[:, padding : padding + h, padding : padding + w, :]
            dx = _to_nchw(dxp)
        if bias is not None:
            return dx.astype(dtype, copy=False), dw.astype(dtype, copy=False), db.astype(dtype, copy=False)
        return dx.astype(dtype, copy=False), dw.astype(dtype, copy=False)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, backward)


def downsample2x(x: Tensor, weight: Parameter, bias: Parameter | None = None) -> Tensor:
    """Learnable stride-2 halving: an even-kernel conv (exact extent halving)."""
    k = weight.shape[2]
    if k % 2:
        raise ShapeError(f"downsample2x needs an even kernel for exact halving, got {k}")
    return conv2d(x, weight, bias, stride=2, padding=0)


def linear1x1(x: Tensor, weight: Parameter, bias: Parameter | None = None) -> Tensor:
    """Per-pixel channel mixing, i.e. a 1x1 convolution. weight: [O, C]."""
    _check_image(x)
    n, c, h, w = x.shape
    if weight.shape != (weight.shape[0], c):
        raise ShapeError(f"weight {weight.shape} incompatible with channels {c}")
    o = weight.shape[0]
    x_mat = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    out_mat = x_mat @ weight.value.data.T
    if bias is not None:
        out_mat += bias.value.data
    out = Tensor._wrap(_to_nchw(out_mat.reshape(n, h, w, o)))

    def backward(g: np.ndarray):
        g_mat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = g_mat.T @ x_mat
        dx = _to_nchw((g_mat @ weight.value.data).reshape(n, h, w, c))
        if bias is not None:
            return dx, dw, g_mat.sum(axis=0)
        return dx, dw

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, backward)


class RunningStats:
    """Batch-norm running mean/variance buffers (not optimized parameters)."""

    __slots__ = ("mean", "var", "momentum", "eps")

    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batchnorm2d(x: Tensor, gamma: Parameter, beta: Parameter, stats: RunningStats, train: bool) -> Tensor:
    """Per-channel normalization; train mode uses batch stats and updates
    running stats, eval mode uses the running stats."""
    _check_image(x)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must be [{c}], got {gamma.shape}/{beta.shape}")
    m = n * h * w
    if train and m < 2:
        raise ShapeError(f"batchnorm train mode needs >=2 elements per channel, got {m}")
    xd = x.data
    eps = stats.eps

    if train:
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        stats.mean = ((1.0 - stats.momentum) * stats.mean + stats.momentum * mean).astype(stats.mean.dtype)
        stats.var = ((1.0 - stats.momentum) * stats.var + stats.momentum * var).astype(stats.var.dtype)
    else:
        mean = stats.mean.astype(xd.dtype)
        var = stats.var.astype(xd.dtype)

    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[:, None, None]) * invstd[:, None, None]
    out = Tensor._wrap(gamma.value.data[:, None, None] * xhat + beta.value.data[:, None, None])

    def backward(g: np.ndarray):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.value.data[:, None, None]
        if train:
            s1 = dxhat.sum(axis=(0, 2, 3))
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3))
            dx = (invstd[:, None, None] / m) * (m * dxhat - s1[:, None, None] - xhat * s2[:, None, None])
        else:
            dx = dxhat * invstd[:, None, None]
        return dx.astype(xd.dtype, copy=False), dgamma, dbeta

    return _record(out, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.maximum(x.data, 0))

    def backward(g: np.ndarray):
        return ((x.data > 0) * g,)

    return _record(out, (x,), backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor x2 on both spatial axes."""
    _check_image(x)
    n, c, h, w = x.shape
    xd = x.data
    out_arr = np.broadcast_to(xd[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)
    out = Tensor._wrap(out_arr)

    def backward(g: np.ndarray):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record(out, (x,), backward)


def subsample2x(x: Tensor) -> Tensor:
    """Nearest (strided) x2 spatial decimation; used for skip-carry resampling."""
    _check_image(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"subsample2x needs even extents, got {h}x{w}")
    out = Tensor._wrap(x.data[:, :, ::2, ::2])

    def backward(g: np.ndarray):
        dx = np.zeros((n, c, h, w), dtype=x.dtype)
        dx[:, :, ::2, ::2] = g
        return (dx,)

    return _record(out, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add requires identical shapes, got {a.shape} vs {b.shape}")
    out = Tensor._wrap(a.data + b.data)

    def backward(g: np.ndarray):
        return g, g

    return _record(out, (a, b), backward)


def concat_channels(xs: list[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels needs at least one input")
    base = xs[0].shape
    for t in xs[1:]:
        if len(t.shape) != 4 or t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ShapeError(f"concat mismatch: {t.shape} vs {base}")
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]
    out = Tensor._wrap(np.concatenate([t.data for t in xs], axis=1))

    def backward(g: np.ndarray):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return _record(out, tuple(xs), backward)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.asarray(x.data.sum(), dtype=x.dtype))

    def backward(g: np.ndarray):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return _record(out, (x,), backward)


def mul_const(x: Tensor, c: float) -> Tensor:
    out = Tensor._wrap(x.data * x.dtype.type(c))

    def backward(g: np.ndarray):
        return (g * x.dtype.type(c),)

    return _record(out, (x,), backward)
