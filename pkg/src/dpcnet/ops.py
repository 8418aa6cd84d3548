"""Forward/backward implementations of the operations the network uses.

All volumetric ops work on unbatched ``(C, D, H, W)`` arrays. Convolutions use
the cross-correlation convention (no kernel flip).
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import Function, Tensor

LEAKY_SLOPE = 0.01
NORM_EPS = 1e-5


def _triple(v) -> Tuple[int, int, int]:
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t


def _check_volume(name: str, x: np.ndarray) -> None:
    if x.ndim != 4:
        raise ValueError(f"{name}: expected a (C, D, H, W) array, got shape {x.shape}")


class Conv3d(Function):
    name = "conv3d"

    def forward(self, x, w, b=None, stride=1, padding=0):
        _check_volume(self.name, x)
        if w.ndim != 5:
            raise ValueError(f"conv3d: weight must be 5-D, got {w.shape}")
        if x.shape[0] != w.shape[1]:
            raise ValueError(f"conv3d: input has {x.shape[0]} channels, weight expects {w.shape[1]}")
        stride, padding = _triple(stride), _triple(padding)
        if min(stride) < 1:
            raise ValueError("conv3d: stride must be >= 1")
        ksize = w.shape[2:]
        padded = tuple(n + 2 * p for n, p in zip(x.shape[1:], padding))
        out_sp = tuple((n - k) // s + 1 for n, k, s in zip(padded, ksize, stride))
        if any(n < k for n, k in zip(padded, ksize)) or min(out_sp) < 1:
            raise ValueError(f"conv3d: kernel {ksize} does not fit input {x.shape[1:]} with padding {padding}")
        xp = np.pad(x, ((0, 0),) + tuple((p, p) for p in padding)) if any(padding) else x
        cols = sliding_window_view(xp, ksize, axis=(1, 2, 3))
        cols = cols[:, :: stride[0], :: stride[1], :: stride[2]]
        out = np.tensordot(w, cols, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
        if b is not None:
            out += b[:, None, None, None]
        self.cols, self.w, self.has_bias = cols, w, b is not None
        self.xp_shape, self.x_shape = xp.shape, x.shape
        self.stride, self.padding = stride, padding
        return out

    def backward(self, g):
        cols, w = self.cols, self.w
        gw = np.tensordot(g, cols, axes=([1, 2, 3], [1, 2, 3]))
        gcols = np.tensordot(w, g, axes=([0], [0]))  # (Ci, kd, kh, kw, D', H', W')
        gxp = np.zeros(self.xp_shape, dtype=g.dtype)
        sd, sh, sw = self.stride
        od, oh, ow = g.shape[1:]
        kd, kh, kw = w.shape[2:]
        for a in range(kd):
            for b in range(kh):
                for c in range(kw):
                    gxp[:, a : a + sd * od : sd, b : b + sh * oh : sh, c : c + sw * ow : sw] += gcols[:, a, b, c]
        pd, ph, pw = self.padding
        D, H, W = self.x_shape[1:]
        gx = gxp[:, pd : pd + D, ph : ph + H, pw : pw + W]
        gb = g.sum(axis=(1, 2, 3)) if self.has_bias else None
        return (np.ascontiguousarray(gx), gw, gb)


class ConvTranspose3d(Function):
    """Transposed convolution with a 2x2x2 kernel and stride 2 (non-overlapping)."""

    name = "conv3d_transpose"

    def forward(self, x, w):
        _check_volume(self.name, x)
        if w.ndim != 5 or w.shape[2:] != (2, 2, 2):
            raise ValueError(f"conv3d_transpose: weight must be (C_in, C_out, 2, 2, 2), got {w.shape}")
        if x.shape[0] != w.shape[0]:
            raise ValueError(f"conv3d_transpose: input has {x.shape[0]} channels, weight expects {w.shape[0]}")
        _, D, H, W = x.shape
        co = w.shape[1]
        t = np.tensordot(w, x, axes=([0], [0]))  # (Co, 2, 2, 2, D, H, W)
        self.x, self.w = x, w
        return t.transpose(0, 4, 1, 5, 2, 6, 3).reshape(co, 2 * D, 2 * H, 2 * W)

    def backward(self, g):
        x, w = self.x, self.w
        _, D, H, W = x.shape
        g7 = g.reshape(w.shape[1], D, 2, H, 2, W, 2)
        gx = np.tensordot(w, g7, axes=([1, 2, 3, 4], [0, 2, 4, 6]))
        gw = np.tensordot(x, g7, axes=([1, 2, 3], [1, 3, 5]))  # (Ci, Co, 2, 2, 2)
        return (gx, gw)


class InstanceNorm(Function):
    name = "instance_norm"

    def forward(self, x, gamma, beta, eps=NORM_EPS):
        _check_volume(self.name, x)
        if eps <= 0:
            raise ValueError("instance_norm: eps must be positive")
        mean = x.mean(axis=(1, 2, 3), keepdims=True)
        xc = x - mean
        var = (xc * xc).mean(axis=(1, 2, 3), keepdims=True)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
        self.xhat, self.rstd, self.gamma = xhat, rstd, gamma
        return xhat * gamma[:, None, None, None] + beta[:, None, None, None]

    def backward(self, g):
        xhat, rstd = self.xhat, self.rstd
        ggamma = (g * xhat).sum(axis=(1, 2, 3))
        gbeta = g.sum(axis=(1, 2, 3))
        dxhat = g * self.gamma[:, None, None, None]
        gx = rstd * (
            dxhat
            - dxhat.mean(axis=(1, 2, 3), keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=(1, 2, 3), keepdims=True)
        )
        return (gx, ggamma, gbeta)


class LeakyReLU(Function):
    name = "leaky_relu"

    def forward(self, x, slope=LEAKY_SLOPE):
        self.pos = x > 0
        self.slope = slope
        return np.where(self.pos, x, x * slope)

    def backward(self, g):
        return (np.where(self.pos, g, g * self.slope),)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, x):
        self.y = expit(x)
        return self.y

    def backward(self, g):
        y = self.y
        return (g * y * (1 - y),)


class SoftmaxChannel(Function):
    name = "softmax_channel"

    def forward(self, x):
        if x.ndim < 2:
            raise ValueError("softmax_channel: input needs a channel axis")
        e = np.exp(x - x.max(axis=0, keepdims=True))
        self.y = e / e.sum(axis=0, keepdims=True)
        return self.y

    def backward(self, g):
        y = self.y
        return (y * (g - (g * y).sum(axis=0, keepdims=True)),)


class Linear(Function):
    name = "linear"

    def forward(self, x, w, b):
        if x.ndim != 1 or w.ndim != 2 or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
            raise ValueError(f"linear: incompatible shapes x{x.shape} W{w.shape} b{b.shape}")
        self.x, self.w = x, w
        return w @ x + b

    def backward(self, g):
        return (self.w.T @ g, np.outer(g, self.x), g)


class ChannelMean(Function):
    name = "channel_mean"

    def forward(self, x):
        _check_volume(self.name, x)
        self.c = x.shape[0]
        return x.mean(axis=0, keepdims=True)

    def backward(self, g):
        return (np.broadcast_to(g / self.c, (self.c,) + g.shape[1:]).copy(),)


class ChannelMax(Function):
    name = "channel_max"

    def forward(self, x):
        _check_volume(self.name, x)
        self.idx = x.argmax(axis=0)[None]
        self.shape = x.shape
        return np.take_along_axis(x, self.idx, axis=0)

    def backward(self, g):
        gx = np.zeros(self.shape, dtype=g.dtype)
        np.put_along_axis(gx, self.idx, g, axis=0)
        return (gx,)


class SpatialMean(Function):
    name = "spatial_mean"

    def forward(self, x):
        _check_volume(self.name, x)
        self.shape = x.shape
        return x.mean(axis=(1, 2, 3))

    def backward(self, g):
        n = np.prod(self.shape[1:])
        return (np.broadcast_to((g / n)[:, None, None, None], self.shape).copy(),)


class SpatialMax(Function):
    name = "spatial_max"

    def forward(self, x):
        _check_volume(self.name, x)
        flat = x.reshape(x.shape[0], -1)
        self.idx = flat.argmax(axis=1)
        self.shape = x.shape
        return flat[np.arange(x.shape[0]), self.idx]

    def backward(self, g):
        gx = np.zeros((self.shape[0], int(np.prod(self.shape[1:]))), dtype=g.dtype)
        gx[np.arange(self.shape[0]), self.idx] = g
        return (gx.reshape(self.shape),)


def _block_sum(x: np.ndarray) -> np.ndarray:
    # Pairwise adds keep sums of replicated blocks exact: v+v, 2v+2v, 4v+4v.
    c, d, h, w = x.shape
    r = x.reshape(c, d // 2, 2, h // 2, 2, w // 2, 2)
    r = r[:, :, 0] + r[:, :, 1]
    r = r[:, :, :, 0] + r[:, :, :, 1]
    return r[..., 0] + r[..., 1]


def _replicate(x: np.ndarray) -> np.ndarray:
    c, d, h, w = x.shape
    big = np.broadcast_to(x[:, :, None, :, None, :, None], (c, d, 2, h, 2, w, 2))
    return big.reshape(c, 2 * d, 2 * h, 2 * w)


class UpsampleNearest(Function):
    name = "upsample_nearest"

    def forward(self, x):
        _check_volume(self.name, x)
        return _replicate(x)

    def backward(self, g):
        return (_block_sum(g),)


class DownsampleAvg(Function):
    name = "downsample_avg"

    def forward(self, x):
        _check_volume(self.name, x)
        if any(n % 2 for n in x.shape[1:]):
            raise ValueError(f"downsample_avg: spatial extents must be even, got {x.shape[1:]}")
        return _block_sum(x) * 0.125

    def backward(self, g):
        return (_replicate(g * 0.125),)


class Concat(Function):
    name = "concat"

    def forward(self, *xs, axis=0):
        ref = xs[0].shape
        for x in xs[1:]:
            if x.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis % len(ref)):
                raise ValueError(f"concat: extent mismatch {ref} vs {x.shape} on axis {axis}")
        self.axis = axis
        self.splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return np.concatenate(xs, axis=axis)

    def backward(self, g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, self.splits, axis=self.axis))


def _broadcast_axes(a_shape, b_shape, opname) -> Tuple[int, ...]:
    if len(a_shape) != len(b_shape):
        raise ValueError(f"{opname}: rank mismatch {a_shape} vs {b_shape}")
    axes = []
    for i, (m, n) in enumerate(zip(a_shape, b_shape)):
        if m != n:
            if n != 1:
                raise ValueError(f"{opname}: cannot broadcast {b_shape} onto {a_shape}")
            axes.append(i)
    return tuple(axes)


class MulBroadcast(Function):
    name = "mul_broadcast"

    def forward(self, a, b):
        self.axes = _broadcast_axes(a.shape, b.shape, self.name)
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        gb = g * self.a
        if self.axes:
            gb = gb.sum(axis=self.axes, keepdims=True)
        return (g * self.b, gb)


class Add(Function):
    name = "add"

    def forward(self, a, b):
        self.axes = _broadcast_axes(a.shape, b.shape, self.name)
        return a + b

    def backward(self, g):
        gb = g.sum(axis=self.axes, keepdims=True) if self.axes else g
        return (g, gb)


class Scale(Function):
    name = "scale"

    def forward(self, x, factor=1.0):
        self.factor = factor
        return x * factor

    def backward(self, g):
        return (g * self.factor,)


class Sum(Function):
    name = "sum"

    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.sum(), dtype=x.dtype)

    def backward(self, g):
        return (np.full(self.shape, g, dtype=g.dtype),)


class Reshape(Function):
    name = "reshape"

    def forward(self, x, shape=()):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.shape),)


# Functional wrappers ---------------------------------------------------------


def conv3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    args = (x, w) if b is None else (x, w, b)
    return Conv3d.apply(*args, stride=stride, padding=padding)


def conv3d_transpose(x: Tensor, w: Tensor) -> Tensor:
    return ConvTranspose3d.apply(x, w)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    return InstanceNorm.apply(x, gamma, beta, eps=eps)


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    return LeakyReLU.apply(x, slope=slope)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def softmax_channel(x: Tensor) -> Tensor:
    return SoftmaxChannel.apply(x)


def pointwise(x: Tensor, kind: str, slope: float = LEAKY_SLOPE) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax_channel":
        return softmax_channel(x)
    raise ValueError(f"unknown pointwise kind {kind!r}")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return Linear.apply(x, w, b)


def squeeze_channel(x: Tensor) -> Tuple[Tensor, Tensor]:
    """Per-voxel mean and max over channels, each shaped (1, D, H, W)."""
    return ChannelMean.apply(x), ChannelMax.apply(x)


def squeeze_spatial(x: Tensor) -> Tuple[Tensor, Tensor]:
    """Per-channel mean and max over all voxels, each shaped (C,)."""
    return SpatialMean.apply(x), SpatialMax.apply(x)


def resample2x(x: Tensor, mode: str) -> Tensor:
    if mode == "up_nearest":
        return UpsampleNearest.apply(x)
    if mode == "down_avg":
        return DownsampleAvg.apply(x)
    raise ValueError(f"unknown resample mode {mode!r}")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ValueError("concat: nothing to concatenate")
    if len(xs) == 1:
        return xs[0]
    return Concat.apply(*xs, axis=axis)


def mul_broadcast(a: Tensor, b: Tensor) -> Tensor:
    return MulBroadcast.apply(a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def scale(x: Tensor, factor: float) -> Tensor:
    return Scale.apply(x, factor=factor)


def sum_all(x: Tensor) -> Tensor:
    return Sum.apply(x)


def reshape(x: Tensor, shape) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))
