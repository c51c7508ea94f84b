"""Modulated deformable convolution.

Each output location ``p`` reads tap ``k`` at
``p*stride - pad + dilation*kernel_index(k) + offset(k, p)`` through a
bilinear sampler (zero outside the plane) and scales it by ``mask(k, p)``.
Offsets are stored interleaved per tap: channel ``2k`` is the row shift,
``2k+1`` the column shift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Conv2d, Module, he_normal
from .ops import ConvSpec
from .tensor import NumericError, Parameter, ShapeError, Tensor, record, sigmoid


def bilinear_sample(plane: np.ndarray, row: float, col: float) -> float:
    """Sample a 2-D array at a fractional position; zero outside."""
    if not (np.isfinite(row) and np.isfinite(col)):
        raise NumericError(f"non-finite sample position ({row}, {col})")
    h, w = plane.shape
    r0, c0 = int(np.floor(row)), int(np.floor(col))
    total = 0.0
    for qr in (r0, r0 + 1):
        wr = max(0.0, 1.0 - abs(row - qr))
        if wr == 0.0 or not 0 <= qr < h:
            continue
        for qc in (c0, c0 + 1):
            wc = max(0.0, 1.0 - abs(col - qc))
            if wc and 0 <= qc < w:
                total += plane[qr, qc] * wr * wc
    return total


@dataclass(frozen=True)
class DeformSpec:
    base: ConvSpec

    @property
    def taps(self) -> int:
        return self.base.kernel[0] * self.base.kernel[1]

    @property
    def offset_channels(self) -> int:
        return 2 * self.taps

    @property
    def mask_channels(self) -> int:
        return self.taps


def tap_grid(kernel) -> np.ndarray:
    """(K, 2) kernel indices (row, col) in row-major tap order."""
    kh, kw = kernel
    rows, cols = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1)


def centered_grid(kernel) -> np.ndarray:
    """Tap indices relative to the kernel center, (K, 2)."""
    kh, kw = kernel
    return tap_grid(kernel) - np.array([(kh - 1) // 2, (kw - 1) // 2])


def dilation_offsets(kernel, d: int, n: int, out_h: int, out_w: int, dtype=np.float64) -> np.ndarray:
    """Constant offsets (d-1)*grid that turn a dilation-1 kernel into dilation d."""
    shift = (d - 1) * centered_grid(kernel).astype(dtype)  # (K, 2)
    off = shift.reshape(-1)  # interleaved (dy0, dx0, dy1, ...)
    return np.broadcast_to(off.reshape(1, -1, 1, 1), (n, off.size, out_h, out_w)).copy()


def _sampling(x: np.ndarray, positions_r: np.ndarray, positions_c: np.ndarray):
    """Gather bilinear corners for every (n, c, K, L) sample.

    Returns (values, corner data) where corner data is reused by backward.
    """
    n, c, h, w = x.shape
    r0 = np.floor(positions_r)
    c0 = np.floor(positions_c)
    fr = positions_r - r0
    fc = positions_c - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    xflat = x.reshape(n, c, h * w)
    corners = []
    for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
        rr, cc = r0 + dr, c0 + dc
        valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        idx = np.where(valid, rr * w + cc, 0)  # (n, K, L)
        vals = np.take_along_axis(xflat, idx.reshape(n, 1, -1), axis=2)
        vals = vals.reshape((n, c) + idx.shape[1:]) * valid[:, None]
        wr = fr if dr else 1 - fr
        wc = fc if dc else 1 - fc
        corners.append((idx, valid, vals, wr, wc, dr, dc))
    sampled = sum(vals * (wr * wc)[:, None] for _, _, vals, wr, wc, _, _ in corners)
    return sampled, corners


def _scatter_corners(gsamp: np.ndarray, corners, shape) -> np.ndarray:
    n, c, h, w = shape
    flat = np.zeros(n * c * h * w, dtype=gsamp.dtype)
    plane = (np.arange(n)[:, None] * c + np.arange(c)[None, :]) * (h * w)  # (n, c)
    for idx, valid, _, wr, wc, _, _ in corners:
        contrib = gsamp * (wr * wc * valid)[:, None]
        target = plane[:, :, None, None] + idx[:, None]
        flat += np.bincount(target.ravel(), weights=contrib.ravel(), minlength=flat.size)
    return flat.reshape(shape)


def _position_grads(gsamp: np.ndarray, corners):
    d_r = np.zeros(gsamp.shape[:1] + gsamp.shape[2:], dtype=gsamp.dtype)
    d_c = np.zeros_like(d_r)
    for _, _, vals, wr, wc, dr, dc in corners:
        weighted = (gsamp * vals).sum(axis=1)
        d_r += weighted * (wc if dr else -wc)
        d_c += weighted * (wr if dc else -wr)
    return d_r, d_c


def sample_points(x: Tensor, rows: Tensor, cols: Tensor) -> Tensor:
    """Differentiable bilinear reads of ``x`` at P positions per image.

    ``rows`` and ``cols`` are (n, 1, 1, P); the result is (n, c, 1, P).
    Gradients flow to the plane and to both coordinates.
    """
    n, c, h, w = x.dims
    if rows.dims != cols.dims or rows.dims[:3] != (n, 1, 1):
        raise ShapeError(f"positions must be (n, 1, 1, P), got {rows.dims} and {cols.dims}")
    if not (np.all(np.isfinite(rows.data)) and np.all(np.isfinite(cols.data))):
        raise NumericError("sample positions must be finite")
    sampled, corners = _sampling(x.data, rows.data[:, 0], cols.data[:, 0])  # (n, c, 1, P)

    def back(g):
        gx = _scatter_corners(g, corners, x.dims) if x.requires_grad else None
        d_r, d_c = _position_grads(g, corners)
        return gx, d_r[:, None], d_c[:, None]

    return record("sample_points", sampled, (x, rows, cols), back)


def deform_conv2d(x: Tensor, offsets: Tensor, masks: Tensor, weight: Tensor, bias, spec: DeformSpec) -> Tensor:
    base = spec.base
    n, c, h, w = x.dims
    if c != base.in_channels:
        raise ShapeError(f"deform_conv2d: input has {c} channels, spec expects {base.in_channels}")
    if weight.dims != base.weight_dims:
        raise ShapeError(f"deform_conv2d: weight dims {weight.dims}, expected {base.weight_dims}")
    oh, ow = base.output_size(h, w)
    K, L = spec.taps, oh * ow
    if offsets.dims != (n, 2 * K, oh, ow):
        raise ShapeError(f"offsets dims {offsets.dims}, expected {(n, 2 * K, oh, ow)}")
    if masks.dims != (n, K, oh, ow):
        raise ShapeError(f"masks dims {masks.dims}, expected {(n, K, oh, ow)}")
    if not np.all(np.isfinite(offsets.data)):
        raise NumericError("deform_conv2d: offsets must be finite")

    dt = x.dtype
    grid = tap_grid(base.kernel)
    (sh, sw), (ph, pw), (dh, dw) = base.stride, base.padding, base.dilation
    oy, ox = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    base_r = (oy.ravel()[None, :] * sh - ph + dh * grid[:, :1]).astype(dt)  # (K, L)
    base_c = (ox.ravel()[None, :] * sw - pw + dw * grid[:, 1:]).astype(dt)
    off = offsets.data.reshape(n, K, 2, L)
    pos_r = base_r[None] + off[:, :, 0]
    pos_c = base_c[None] + off[:, :, 1]

    sampled, corners = _sampling(x.data, pos_r, pos_c)  # (n, c, K, L)
    m = masks.data.reshape(n, 1, K, L)
    cols = (sampled * m).transpose(1, 2, 0, 3).reshape(c * K, n * L)
    wmat = weight.data.reshape(base.out_channels, c * K)
    out = (wmat @ cols).reshape(base.out_channels, n, oh, ow).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def back(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(base.out_channels, n * L)
        gw = (gmat @ cols.T).reshape(weight.dims) if weight.requires_grad else None
        gcols = (wmat.T @ gmat).reshape(c, K, n, L).transpose(2, 0, 1, 3)  # (n, c, K, L)
        gmask = (gcols * sampled).sum(axis=1).reshape(masks.dims) if masks.requires_grad else None
        gsamp = gcols * m
        gx = _scatter_corners(gsamp, corners, x.dims) if x.requires_grad else None
        goff = None
        if offsets.requires_grad:
            d_r, d_c = _position_grads(gsamp, corners)  # (n, K, L) each
            goff = np.stack([d_r, d_c], axis=2).reshape(offsets.dims)
        grads = [gx, goff, gmask, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)).reshape(bias.dims) if bias.requires_grad else None)
        return grads

    inputs = [x, offsets, masks, weight] + ([bias] if bias is not None else [])
    return record("deform_conv2d", out, inputs, back)


class DeformLayer(Module):
    """Modulated deformable convolution with its own offset/mask branch.

    The branch is a 3x3 convolution (same stride and padding as the main
    kernel) emitting 2K offsets followed by K pre-logistic masks. It starts
    at zero, so a fresh layer is a 0.5-modulated ordinary convolution.
    """

    def __init__(self, spec: DeformSpec, rng=None, dtype=np.float32):
        self.spec = spec
        base = spec.base
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = base.in_channels * base.kernel[0] * base.kernel[1]
        self.weight = Parameter(he_normal(rng, base.weight_dims, fan_in, dtype))
        self.bias = Parameter(np.zeros((1, base.out_channels, 1, 1), dtype=dtype)) if base.has_bias else None
        # padding chosen so the branch output grid matches the main kernel's
        pad = tuple(p + (1 - (k - 1) // 2) * d for p, k, d in zip(base.padding, base.kernel, base.dilation))
        self.offset_spec = ConvSpec(base.in_channels, 3 * spec.taps, (3, 3), base.stride, pad, base.dilation)
        self.offset = Conv2d(self.offset_spec, dtype=dtype, zero_init=True)

    def offsets_and_masks(self, x: Tensor):
        branch = self.offset(x)
        K = self.spec.taps
        offsets = _channel_slice(branch, 0, 2 * K)
        masks = sigmoid(_channel_slice(branch, 2 * K, 3 * K))
        return offsets, masks

    def __call__(self, x: Tensor) -> Tensor:
        offsets, masks = self.offsets_and_masks(x)
        return deform_conv2d(x, offsets, masks, self.weight, self.bias, self.spec)


def _channel_slice(t: Tensor, lo: int, hi: int) -> Tensor:
    def back(g):
        full = np.zeros_like(t.data)
        full[:, lo:hi] = g
        return (full,)

    return record("channel_slice", np.ascontiguousarray(t.data[:, lo:hi]), (t,), back)


def deform_layer_forward(x: Tensor, layer: DeformLayer) -> Tensor:
    return layer(x)
