"""Differentiable primitives used by the segmentation networks.

All image tensors are NCHW. Ops preserve the dtype of their inputs so the
same code runs the float32 training path and the float64 gradient checks.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .tensor import Tensor, as_tensor, make_result


class ShapeError(ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)

    return make_result(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    mask = out > 0

    def backward(g):
        return (g * mask,)

    return make_result(out, (x,), backward, "relu")


def softmax_channel(x: Tensor) -> Tensor:
    """Softmax over axis 1."""
    if x.ndim < 2:
        raise ShapeError("softmax_channel needs a channel axis")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return make_result(p, (x,), backward, "softmax_channel")


def elementwise(kind: str, *inputs) -> Tensor:
    """Dispatch by name: relu, add, mul, softmax_channel."""
    table = {"relu": relu, "add": add, "mul": mul, "softmax_channel": softmax_channel}
    try:
        fn = table[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*inputs)


def concat_channels(tensors: list) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:1] != ref[:1] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"cannot concatenate {t.shape} with {ref} on channels")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=1))

    out = np.concatenate([t.data for t in tensors], axis=1)
    return make_result(out, tuple(tensors), backward, "concat")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return make_result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward, "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size

    def backward(g):
        return (np.full(shape, g / n, dtype=g.dtype),)

    return make_result(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward, "mean")


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _im2col(xp, kh, kw, stride, dilation, oh, ow):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    hspan = stride * (oh - 1) + 1
    wspan = stride * (ow - 1) + 1
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            cols[:, :, i, j] = xp[:, :, hi:hi + hspan:stride, wj:wj + wspan:stride]
    return cols


def _col2im(dcols, xp_shape, stride, dilation):
    n, c, kh, kw, oh, ow = dcols.shape
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    hspan = stride * (oh - 1) + 1
    wspan = stride * (ow - 1) + 1
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            dxp[:, :, hi:hi + hspan:stride, wj:wj + wspan:stride] += dcols[:, :, i, j]
    return dxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2D cross-correlation, NCHW input and FCkHkW weight."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and weight, got {x.shape} and {weight.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("stride and dilation must be positive, padding non-negative")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"input has {c} channels but weight expects {cw}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"bias shape {bias.shape} does not match {f} filters")
    oh = conv_output_size(h, kh, stride, padding, dilation)
    ow = conv_output_size(w, kw, stride, padding, dilation)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d output would be empty: input {h}x{w}, kernel {kh}x{kw}, "
            f"padding {padding}, dilation {dilation}"
        )

    xd, wd = x.data, weight.data
    w2 = wd.reshape(f, -1)
    pointwise = kh == 1 and kw == 1 and padding == 0
    if pointwise:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        cols = np.ascontiguousarray(xs).reshape(n, c, oh * ow)
        xp_shape = None
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        xp_shape = xp.shape
        cols = _im2col(xp, kh, kw, stride, dilation, oh, ow).reshape(n, c * kh * kw, oh * ow)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, f, oh, ow)

    def backward(g):
        g3 = g.reshape(n, f, oh * ow)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g3)
            if pointwise:
                dcols = dcols.reshape(n, c, oh, ow)
                if stride > 1:
                    gx = np.zeros(xd.shape, dtype=g.dtype)
                    gx[:, :, ::stride, ::stride] = dcols
                else:
                    gx = dcols
            else:
                dxp = _col2im(dcols.reshape(n, c, kh, kw, oh, ow), xp_shape, stride, dilation)
                gx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# normalization


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray | None,
                 running_var: np.ndarray | None, training: bool, momentum: float = 0.1,
                 eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    In training mode the running buffers are updated in place with
    ``momentum`` (unbiased batch variance, as torch does).
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d expects NCHW input, got {x.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    m = n * h * w
    if m < 1:
        raise ShapeError("batch_norm2d needs at least one value per channel")
    xd = x.data
    if training:
        mean = xd.mean(axis=(0, 2, 3))
        xc = xd - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        if running_mean is not None:
            unbiased = var * (m / (m - 1)) if m > 1 else var
            running_mean *= 1 - momentum
            running_mean += momentum * mean
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None:
            raise RuntimeError("eval-mode batch norm needs running statistics")
        mean = running_mean.astype(xd.dtype, copy=False)
        var = running_var.astype(xd.dtype, copy=False)
        xc = xd - mean[None, :, None, None]
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype, copy=False)
    xhat = xc * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                mean_g = gxhat.mean(axis=(0, 2, 3))
                mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3))
                gx = (gxhat - mean_g[None, :, None, None]
                      - xhat * mean_gx[None, :, None, None]) * inv_std[None, :, None, None]
            else:
                gx = gxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward, "batch_norm2d")


# ---------------------------------------------------------------------------
# pooling


def max_pool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Max pooling. Gradient goes to the first maximal tap in row-major order."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if kernel > h + 2 * padding or kernel > w + 2 * padding:
        raise ShapeError(f"pool kernel {kernel} larger than input {h}x{w}")
    oh = conv_output_size(h, kernel, stride, padding, 1)
    ow = conv_output_size(w, kernel, stride, padding, 1)
    xd = x.data
    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    else:
        xp = xd
    taps = _im2col(xp, kernel, kernel, stride, 1, oh, ow).reshape(n, c, kernel * kernel, oh, ow)
    idx = taps.argmax(axis=2)
    out = np.take_along_axis(taps, idx[:, :, None], axis=2)[:, :, 0]

    def backward(g):
        dcols = np.zeros((n, c, kernel * kernel, oh, ow), dtype=g.dtype)
        np.put_along_axis(dcols, idx[:, :, None], g[:, :, None], axis=2)
        dxp = _col2im(dcols.reshape(n, c, kernel, kernel, oh, ow), xp.shape, stride, 1)
        return (dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp,)

    return make_result(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


def global_avg_pool2d(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)

    def backward(g):
        return (np.broadcast_to(g * scale, x.shape).astype(g.dtype, copy=True),)

    return make_result(x.data.mean(axis=(2, 3), keepdims=True), (x,), backward, "global_avg_pool2d")


def pool2d(x: Tensor, kind: str, kernel: int = 2, stride: int = 2, padding: int = 0) -> Tensor:
    if kind == "max":
        return max_pool2d(x, kernel, stride, padding)
    if kind == "global_avg":
        return global_avg_pool2d(x)
    raise ValueError(f"unknown pool kind {kind!r}")


# ---------------------------------------------------------------------------
# resampling


@lru_cache(maxsize=128)
def _interp_matrix(src: int, dst: int, dtype_name: str) -> np.ndarray:
    """Row i holds the weights of output sample i (half-pixel centres, clamped)."""
    mat = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for i in range(dst):
        s = (i + 0.5) * scale - 0.5
        s = min(max(s, 0.0), src - 1.0)
        lo = int(np.floor(s))
        hi = min(lo + 1, src - 1)
        frac = s - lo
        mat[i, lo] += 1.0 - frac
        mat[i, hi] += frac
    mat = mat.astype(dtype_name)
    mat.setflags(write=False)
    return mat


def bilinear_resize(x: Tensor, size: tuple) -> Tensor:
    """Bilinear resampling of the two trailing axes to ``size``."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects NCHW input, got {x.shape}")
    oh, ow = size
    if oh < 1 or ow < 1:
        raise ShapeError("target size must be positive")
    h, w = x.shape[2:]
    if (oh, ow) == (h, w):
        return x
    dt = x.dtype.name
    ah = _interp_matrix(h, oh, dt)
    aw = _interp_matrix(w, ow, dt)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def backward(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return make_result(out, (x,), backward, "bilinear")


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample factor must be a positive integer, got {factor}")
    h, w = x.shape[2:]
    return bilinear_resize(x, (h * factor, w * factor))
