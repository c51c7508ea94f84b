"""Spatial operators: convolution, transposed convolution, pooling,
batch normalization and bilinear upsampling.

Convolutions go through an im2col buffer laid out as (C*kh*kw, N*L) so the
whole batch is a single GEMM; the adjoint scatters back with one strided
add per kernel tap.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Parameter, ShapeError, Tensor, record


def _pair(v) -> tuple:
    if isinstance(v, (tuple, list)):
        return (int(v[0]), int(v[1]))
    return (int(v), int(v))


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    dilation: tuple = (1, 1)
    has_bias: bool = True

    def __post_init__(self):
        for name in ("kernel", "stride", "padding", "dilation"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.dilation) < 1:
            raise ValueError("kernel, stride and dilation must be positive")
        if min(self.padding) < 0:
            raise ValueError("padding must be non-negative")

    def output_size(self, h: int, w: int) -> tuple:
        (kh, kw), (sh, sw), (ph, pw), (dh, dw) = self.kernel, self.stride, self.padding, self.dilation
        oh = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
        ow = (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"{self} gives non-positive output size for input {h}x{w}")
        return oh, ow

    def transposed_output_size(self, h: int, w: int) -> tuple:
        (kh, kw), (sh, sw), (ph, pw), (dh, dw) = self.kernel, self.stride, self.padding, self.dilation
        oh = (h - 1) * sh - 2 * ph + dh * (kh - 1) + 1
        ow = (w - 1) * sw - 2 * pw + dw * (kw - 1) + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"{self} gives non-positive transposed output for input {h}x{w}")
        return oh, ow

    def swapped(self) -> "ConvSpec":
        """The spec whose conv2d is the adjoint of this spec's transposed_conv2d."""
        return ConvSpec(self.out_channels, self.in_channels, self.kernel, self.stride,
                        self.padding, self.dilation, self.has_bias)

    @property
    def weight_dims(self) -> tuple:
        return (self.out_channels, self.in_channels) + self.kernel

    @property
    def transposed_weight_dims(self) -> tuple:
        return (self.in_channels, self.out_channels) + self.kernel


def im2col(x: np.ndarray, kernel, stride, padding, dilation, out_hw) -> np.ndarray:
    """Unfold ``x`` to shape (C*kh*kw, N*oh*ow)."""
    n, c, _, _ = x.shape
    (kh, kw), (sh, sw), (ph, pw), (dh, dw) = kernel, stride, padding, dilation
    oh, ow = out_hw
    if (kh, kw, sh, sw, ph, pw) == (1, 1, 1, 1, 0, 0):
        return x.transpose(1, 0, 2, 3).reshape(c, n * oh * ow)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else np.ascontiguousarray(x)
    s = xp.strides
    win = as_strided(
        xp,
        shape=(c, kh, kw, n, oh, ow),
        strides=(s[1], s[2] * dh, s[3] * dw, s[0], s[2] * sh, s[3] * sw),
        writeable=False,
    )
    return win.reshape(c * kh * kw, n * oh * ow)


def col2im(cols: np.ndarray, x_shape, kernel, stride, padding, dilation, out_hw) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back into an image."""
    n, c, h, w = x_shape
    (kh, kw), (sh, sw), (ph, pw), (dh, dw) = kernel, stride, padding, dilation
    oh, ow = out_hw
    if (kh, kw, sh, sw, ph, pw) == (1, 1, 1, 1, 0, 0):
        return cols.reshape(c, n, h, w).transpose(1, 0, 2, 3)
    cols = cols.reshape(c, kh, kw, n, oh, ow).transpose(3, 0, 1, 2, 4, 5)
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        r0 = i * dh
        for j in range(kw):
            c0 = j * dw
            xp[:, :, r0:r0 + sh * (oh - 1) + 1:sh, c0:c0 + sw * (ow - 1) + 1:sw] += cols[:, :, i, j]
    return xp[:, :, ph:ph + h, pw:pw + w]


def _bias_view(bias: Tensor, channels: int) -> np.ndarray:
    if bias.data.size != channels:
        raise ShapeError(f"bias has {bias.data.size} entries, expected {channels}")
    return bias.data.reshape(1, channels, 1, 1)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    n, c, h, w = x.dims
    if c != spec.in_channels:
        raise ShapeError(f"conv2d: input has {c} channels, spec expects {spec.in_channels}")
    if weight.dims != spec.weight_dims:
        raise ShapeError(f"conv2d: weight dims {weight.dims}, spec expects {spec.weight_dims}")
    oh, ow = spec.output_size(h, w)
    geo = (spec.kernel, spec.stride, spec.padding, spec.dilation, (oh, ow))
    cols = im2col(x.data, *geo)
    wmat = weight.data.reshape(spec.out_channels, -1)
    out = (wmat @ cols).reshape(spec.out_channels, n, oh, ow).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + _bias_view(bias, spec.out_channels)
    out = np.ascontiguousarray(out)

    def back(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(spec.out_channels, -1)
        gw = (gmat @ cols.T).reshape(weight.dims) if weight.requires_grad else None
        gx = col2im(wmat.T @ gmat, x.dims, *geo) if x.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3)).reshape(bias.dims) if bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", out, inputs, back)


def transposed_conv2d(x: Tensor, weight: Tensor, spec: ConvSpec, bias: Optional[Tensor] = None) -> Tensor:
    """Adjoint of conv2d; weight dims are (in, out, kh, kw).

    With the same weight array, ``<conv2d(a, W, None, spec.swapped()), b>``
    equals ``<a, transposed_conv2d(b, W, spec)>``.
    """
    n, c, h, w = x.dims
    if c != spec.in_channels:
        raise ShapeError(f"transposed_conv2d: input has {c} channels, spec expects {spec.in_channels}")
    if weight.dims != spec.transposed_weight_dims:
        raise ShapeError(f"transposed_conv2d: weight dims {weight.dims}, expected {spec.transposed_weight_dims}")
    oh, ow = spec.transposed_output_size(h, w)
    geo = (spec.kernel, spec.stride, spec.padding, spec.dilation, (h, w))
    out_shape = (n, spec.out_channels, oh, ow)
    wmat = weight.data.reshape(spec.in_channels, -1)
    xmat = x.data.transpose(1, 0, 2, 3).reshape(spec.in_channels, -1)
    out = col2im(wmat.T @ xmat, out_shape, *geo)
    if bias is not None:
        out = out + _bias_view(bias, spec.out_channels)
    out = np.ascontiguousarray(out)

    def back(g):
        gcols = im2col(g, *geo)
        gx = None
        if x.requires_grad:
            gx = (wmat @ gcols).reshape(spec.in_channels, n, h, w).transpose(1, 0, 2, 3)
        gw = (xmat @ gcols.T).reshape(weight.dims) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3)).reshape(bias.dims) if bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("transposed_conv2d", out, inputs, back)


def _pool_geometry(x: Tensor, window, stride, padding):
    kh, kw = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    ph, pw = _pair(padding)
    _, _, h, w = x.dims
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeError(f"pool window {kh}x{kw} larger than input {h}x{w}")
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    return (kh, kw), (sh, sw), (ph, pw), (oh, ow)


def _windows(xp: np.ndarray, kernel, stride, out_hw) -> np.ndarray:
    n, c = xp.shape[:2]
    s = xp.strides
    return as_strided(
        xp,
        shape=(n, c, out_hw[0], out_hw[1], kernel[0], kernel[1]),
        strides=(s[0], s[1], s[2] * stride[0], s[3] * stride[1], s[2], s[3]),
        writeable=False,
    )


def max_pool(x: Tensor, window=2, stride=None, padding=0) -> Tensor:
    """Max pooling; ties route the gradient to the first element in row-major order."""
    kernel, strides, pad, (oh, ow) = _pool_geometry(x, window, stride, padding)
    n, c, h, w = x.dims
    xp = x.data
    if pad != (0, 0):
        xp = np.pad(xp, ((0, 0), (0, 0), (pad[0],) * 2, (pad[1],) * 2), constant_values=-np.inf)
    win = _windows(np.ascontiguousarray(xp), kernel, strides, (oh, ow)).reshape(n, c, oh, ow, -1)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        onehot = np.zeros((n, c, oh, ow, kernel[0] * kernel[1]), dtype=g.dtype)
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        cols = onehot.reshape(n, c, oh, ow, kernel[0], kernel[1]).transpose(1, 4, 5, 0, 2, 3)
        return (col2im(cols, (n, c, h, w), kernel, strides, pad, (1, 1), (oh, ow)),)

    return record("max_pool", np.ascontiguousarray(out), (x,), back)


def avg_pool(x: Tensor, window=2, stride=None) -> Tensor:
    kernel, strides, pad, (oh, ow) = _pool_geometry(x, window, stride, 0)
    n, c, h, w = x.dims
    area = kernel[0] * kernel[1]
    win = _windows(np.ascontiguousarray(x.data), kernel, strides, (oh, ow))
    out = win.sum(axis=(-2, -1)) / area

    def back(g):
        share = np.broadcast_to((g / area)[:, :, :, :, None, None], (n, c, oh, ow) + kernel)
        cols = share.transpose(1, 4, 5, 0, 2, 3)
        return (col2im(cols, (n, c, h, w), kernel, strides, pad, (1, 1), (oh, ow)),)

    return record("avg_pool", out.astype(x.dtype), (x,), back)


class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    def __init__(self, channels: int, name: str = "bn", momentum: float = 0.1,
                 epsilon: float = 1e-5, dtype=np.float32):
        if not 0 < momentum < 1:
            raise ValueError("momentum must be in (0, 1)")
        self.channels = channels
        self.gamma = Parameter(np.ones((1, channels, 1, 1), dtype=dtype), f"{name}.weight")
        self.beta = Parameter(np.zeros((1, channels, 1, 1), dtype=dtype), f"{name}.bias")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.epsilon = epsilon


def batch_norm(x: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    n, c, h, w = x.dims
    if c != state.channels:
        raise ShapeError(f"batch_norm: input has {c} channels, state has {state.channels}")
    gamma, beta = state.gamma, state.beta
    gd = gamma.data.astype(x.dtype, copy=False)
    bd = beta.data.astype(x.dtype, copy=False)
    eps = state.epsilon

    if mode == "eval":
        inv_std = (1.0 / np.sqrt(state.running_var.astype(x.dtype) + eps)).reshape(1, c, 1, 1)
        xhat = (x.data - state.running_mean.astype(x.dtype).reshape(1, c, 1, 1)) * inv_std
        out = gd * xhat + bd

        def back_eval(g):
            return (
                g * gd * inv_std,
                (g * xhat).sum(axis=(0, 2, 3)).reshape(gamma.dims),
                g.sum(axis=(0, 2, 3)).reshape(beta.dims),
            )

        return record("batch_norm", out.astype(x.dtype, copy=False), (x, gamma, beta), back_eval)

    if mode != "train":
        raise ValueError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    m = n * h * w
    if m < 2:
        raise ValueError("batch_norm in train mode needs at least 2 values per channel")
    mean = x.data.mean(axis=(0, 2, 3))
    centered = x.data - mean.reshape(1, c, 1, 1)
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv_std = (1.0 / np.sqrt(var + eps)).reshape(1, c, 1, 1)
    xhat = centered * inv_std
    out = gd * xhat + bd

    mom = state.momentum
    rdt = state.running_mean.dtype
    state.running_mean[:] = ((1 - mom) * state.running_mean + mom * mean).astype(rdt)
    state.running_var[:] = ((1 - mom) * state.running_var + mom * var * (m / (m - 1))).astype(rdt)

    def back_train(g):
        dxhat = g * gd
        sum_d = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        gx = inv_std / m * (m * dxhat - sum_d - xhat * sum_dx)
        return (
            gx,
            (g * xhat).sum(axis=(0, 2, 3)).reshape(gamma.dims),
            g.sum(axis=(0, 2, 3)).reshape(beta.dims),
        )

    return record("batch_norm", out.astype(x.dtype, copy=False), (x, gamma, beta), back_train)


def interpolation_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear resampling weights, align_corners=False with border clamping."""
    ratio = n_in / n_out
    src = (np.arange(n_out) + 0.5) * ratio - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    mat = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample the last two axes of ``x`` (no gradient)."""
    mh = interpolation_matrix(x.shape[-2], out_h, x.dtype)
    mw = interpolation_matrix(x.shape[-1], out_w, x.dtype)
    return mh @ x @ mw.T


def bilinear_upsample(x: Tensor, scale_factor: int) -> Tensor:
    if int(scale_factor) != scale_factor or scale_factor < 1:
        raise ValueError("scale must be a positive integer")
    scale_factor = int(scale_factor)
    n, c, h, w = x.dims
    mh = interpolation_matrix(h, h * scale_factor, x.dtype)
    mw = interpolation_matrix(w, w * scale_factor, x.dtype)
    out = mh @ x.data @ mw.T
    return record("bilinear_upsample", out, (x,), lambda g: (mh.T @ g @ mw,))
