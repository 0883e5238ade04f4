"""Differentiable kernels used by the network.

Activation layout for 2-D feature maps is ``(batch, channels, freq, time)``.
Convolutions use "same" output size with reflect padding; normalisation
statistics are accumulated in float64.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .. import spectral
from ..errors import SizeError
from .tensor import Tensor, as_tensor, make_node, unbroadcast

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def scale(x: Tensor, a: float) -> Tensor:
    a = np.asarray(a, dtype=x.dtype)
    return make_node(x.data * a, (x,), lambda g: (g * a,))


def sum(x: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype),)

    return make_node(np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype),
                     (x,), back)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def square(x: Tensor) -> Tensor:
    d = x.data
    return make_node(d * d, (x,), lambda g: (2.0 * d * g,))


def mse(a: Tensor, b) -> Tensor:
    return mean(square(a - as_tensor(b, a.dtype)))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; ``weight`` is ``(out, in)``."""
    if x.shape[-1] != weight.shape[1]:
        raise SizeError(f"linear: input features {x.shape[-1]} != weight {weight.shape}")
    xd, wd = x.data, weight.data
    y = xd @ wd.T
    parents = [x, weight]
    if bias is not None:
        y = y + bias.data
        parents.append(bias)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = [g @ wd, g2.T @ xd.reshape(-1, xd.shape[-1])]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_node(y, parents, back)


def conv1x1(x: Tensor, weight: Tensor) -> Tensor:
    """Pointwise channel mixing; ``weight`` is ``(out, in)``."""
    if x.shape[1] != weight.shape[1]:
        raise SizeError(f"conv1x1: {x.shape[1]} input channels, weight {weight.shape}")
    b = x.shape[0]
    x2 = x.data.reshape(b, x.shape[1], -1)
    wd = weight.data
    y = np.matmul(wd, x2).reshape((b, wd.shape[0]) + x.shape[2:])

    def back(g):
        g2 = g.reshape(b, wd.shape[0], -1)
        gx = np.matmul(wd.T, g2).reshape(x.shape) if x.requires_grad else None
        gw = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0) if weight.requires_grad else None
        return gx, gw

    return make_node(y, (x, weight), back)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    return x + reshape(bias, (1, -1, 1, 1))


def _reflect_pad(d: np.ndarray, axis: int, p: int) -> np.ndarray:
    if p == 0:
        return d
    if p >= d.shape[axis]:
        raise SizeError(f"reflect pad {p} needs axis length > {p}, got {d.shape[axis]}")
    widths = [(0, 0)] * d.ndim
    widths[axis] = (p, p)
    return np.pad(d, widths, mode="reflect")


def _reflect_pad_adjoint(g: np.ndarray, axis: int, p: int) -> np.ndarray:
    if p == 0:
        return g
    g = np.moveaxis(g, axis, -1)
    n = g.shape[-1] - 2 * p
    out = g[..., p:p + n].copy()
    out[..., 1:p + 1] += g[..., :p][..., ::-1]
    out[..., n - 1 - p:n - 1] += g[..., p + n:][..., ::-1]
    return np.moveaxis(out, -1, axis)


def _conv_axis(x: Tensor, weight: Tensor, axis: int, dilation: int) -> Tensor:
    """Same-size convolution along one spatial axis, computed as one matrix product
    over the stacked (tap, channel) axis."""
    co, ci, k = weight.shape
    if x.shape[1] != ci:
        raise SizeError(f"conv: {x.shape[1]} input channels, weight {weight.shape}")
    if k % 2 != 1:
        raise SizeError("conv kernels must have odd length")
    b, spatial = x.shape[0], x.shape[2:]
    p = dilation * (k - 1) // 2
    n = x.shape[axis]
    xp = _reflect_pad(x.data, axis, p)

    def tap(arr, j):
        sl = [slice(None)] * arr.ndim
        sl[axis] = slice(j * dilation, j * dilation + n)
        return arr[tuple(sl)]

    cols = np.concatenate([tap(xp, j) for j in range(k)], axis=1).reshape(b, k * ci, -1)
    wm = np.ascontiguousarray(weight.data.transpose(0, 2, 1).reshape(co, k * ci))
    y = np.matmul(wm, cols).reshape((b, co) + spatial)

    def back(g):
        g2 = g.reshape(b, co, -1)
        gw = None
        if weight.requires_grad:
            gwm = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            gw = np.ascontiguousarray(gwm.reshape(co, k, ci).transpose(0, 2, 1))
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wm.T, g2).reshape((b, k, ci) + spatial)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for j in range(k):
                tap(gxp, j)[...] += gcols[:, j]
            gx = _reflect_pad_adjoint(gxp, axis, p)
        return gx, gw

    return make_node(y, (x, weight), back)


def conv_time(x: Tensor, weight: Tensor, dilation: int = 1) -> Tensor:
    """Convolution along the time axis; ``weight`` is ``(out, in, k)``."""
    return _conv_axis(x, weight, 3, dilation)


def conv_freq_dilated(x: Tensor, weight: Tensor, dilation: int) -> Tensor:
    """Dilated convolution along the frequency axis; ``weight`` is ``(out, in, k)``."""
    return _conv_axis(x, weight, 2, dilation)


def group_norm_shift_free(x: Tensor, groups: int, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise each (sample, group) to zero mean and unit variance, then apply a
    per-channel gain.  There is no additive shift."""
    b, c = x.shape[:2]
    if c % groups:
        raise SizeError(f"{c} channels not divisible into {groups} groups")
    dt = x.dtype
    xd = x.data.reshape(b, groups, -1)
    m = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True, dtype=np.float64)
    centred = xd - mu.astype(dt)
    var = np.einsum("bgm,bgm->bg", centred, centred, dtype=np.float64)[..., None] / m
    inv = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (centred * inv).reshape(x.shape)
    gshape = (1, c) + (1,) * (x.ndim - 2)
    gd = gain.data.reshape(gshape)

    def back(g):
        gg = None
        if gain.requires_grad:
            axes = tuple(i for i in range(x.ndim) if i != 1)
            gg = np.sum(g * xhat, axis=axes, dtype=np.float64).astype(dt)
        gx = None
        if x.requires_grad:
            dxh = (g * gd).reshape(b, groups, m)
            xh = xhat.reshape(b, groups, m)
            mean_d = dxh.mean(axis=-1, keepdims=True, dtype=np.float64).astype(dt)
            mean_dx = (np.einsum("bgm,bgm->bg", dxh, xh, dtype=np.float64)[..., None] / m).astype(dt)
            gx = dxh - mean_d
            gx -= xh * mean_dx
            gx *= inv
            gx = gx.reshape(x.shape)
        return gx, gg

    return make_node(xhat * gd, (x, gain), back)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    d = x.data
    d2 = d * d  # explicit products: float power is far slower than multiplication
    t = d2 * (GELU_C * GELU_A)
    t += GELU_C
    t *= d
    np.tanh(t, out=t)
    y = t + 1.0
    y *= 0.5
    y *= d

    def back(g):
        dy = d2 * (3.0 * GELU_A)
        dy += 1.0
        dy *= 1.0 - t * t
        dy *= (0.5 * GELU_C) * d
        dy += 0.5 * (1.0 + t)
        dy *= g
        return (dy,)

    return make_node(y, (x,), back)


def film_scale(x: Tensor, scale_vector: Tensor) -> Tensor:
    """Per-sample, per-channel multiplicative modulation: ``x * s[:, :, None, None]``."""
    if scale_vector.shape != x.shape[:2]:
        raise SizeError(f"film scale {scale_vector.shape} does not match {x.shape[:2]}")
    s = scale_vector.data.reshape(scale_vector.shape + (1,) * (x.ndim - 2))
    xd = x.data

    def back(g):
        gs = np.sum(g * xd, axis=tuple(range(2, x.ndim)), dtype=np.float64).astype(x.dtype)
        return g * s, gs

    return make_node(xd * s, (x, scale_vector), back)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))]

    return make_node(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), back)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def back(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[sl] = g
        return (full,)

    return make_node(x.data[sl], (x,), back)


def split(x: Tensor, axis: int, sizes: Sequence[int]) -> list[Tensor]:
    if np.sum(sizes) != x.shape[axis]:
        raise SizeError(f"split sizes {list(sizes)} do not add up to {x.shape[axis]}")
    bounds = np.cumsum([0] + list(sizes))
    return [slice_axis(x, axis, int(bounds[i]), int(bounds[i + 1])) for i in range(len(sizes))]


def downsample(x: Tensor, axis: int) -> Tensor:
    """Anti-aliased decimation by two along ``axis``."""
    return make_node(spectral.resample_halve(x.data, axis).astype(x.dtype), (x,),
                     lambda g: (spectral.resample_halve_adjoint(g, axis).astype(x.dtype),))


def upsample(x: Tensor, axis: int) -> Tensor:
    """Anti-imaged interpolation by two along ``axis``."""
    return make_node(spectral.resample_double(x.data, axis).astype(x.dtype), (x,),
                     lambda g: (spectral.resample_double_adjoint(g, axis).astype(x.dtype),))


def linear_map(x: Tensor, forward: Callable, adjoint: Callable) -> Tensor:
    """Wrap a fixed linear operator given as a (forward, adjoint) pair of callables."""
    return make_node(np.asarray(forward(x.data)).astype(x.dtype), (x,),
                     lambda g: (np.asarray(adjoint(g)).astype(x.dtype),))


__all__ = [
    "Tensor", "add_channel_bias", "concat", "conv1x1", "conv_freq_dilated", "conv_time",
    "downsample", "film_scale", "gelu", "group_norm_shift_free", "linear", "linear_map",
    "mean", "mse", "reshape", "scale", "slice_axis", "split", "square", "sum", "unbroadcast",
    "upsample",
]
