"""Training objectives: mean squared error, binary cross-entropy, SSIM negation."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, record

LOSS_KINDS = ("mse", "bce", "ssim_negation")

BCE_CLAMP = 1e-7
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _same_dims(pred: Tensor, target: Tensor, name: str) -> None:
    if pred.dims != target.dims:
        raise ShapeError(f"{name}: prediction {pred.dims} vs target {target.dims}")


def _scalar(value, dtype) -> np.ndarray:
    return np.asarray(value, dtype=dtype).reshape(1, 1, 1, 1)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    _same_dims(pred, target, "mse")
    diff = pred.data - target.data
    n = diff.size

    def back(g):
        gd = g.reshape(-1)[0] * 2.0 / n * diff
        return gd, -gd

    return record("mse", _scalar(np.mean(diff * diff), pred.dtype), (pred, target), back)


def bce(pred: Tensor, target: Tensor) -> Tensor:
    _same_dims(pred, target, "bce")
    p = np.clip(pred.data, BCE_CLAMP, 1 - BCE_CLAMP)
    t = target.data
    n = p.size
    loss = -np.mean(t * np.log(p) + (1 - t) * np.log1p(-p))
    inside = (pred.data >= BCE_CLAMP) & (pred.data <= 1 - BCE_CLAMP)

    def back(g):
        s = g.reshape(-1)[0] / n
        gp = s * (p - t) / (p * (1 - p)) * inside
        gt = s * (np.log1p(-p) - np.log(p))
        return gp, gt

    return record("bce", _scalar(loss, pred.dtype), (pred, target), back)


@lru_cache(maxsize=8)
def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(a: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Valid-mode correlation of (n, h, w) maps with a 2-D kernel."""
    win = sliding_window_view(a, k.shape, axis=(-2, -1))
    return np.einsum("nijkl,kl->nij", win, k)


def _filter_adjoint(g: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`_filter_valid` (full-mode convolution)."""
    kh, kw = k.shape
    padded = np.pad(g, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    return _filter_valid(padded, k[::-1, ::-1])


def ssim_map(x: np.ndarray, y: np.ndarray, window: np.ndarray = None):
    """Per-window SSIM for (n, h, w) maps plus the moments backward needs."""
    k = gaussian_window() if window is None else window
    mx, my = _filter_valid(x, k), _filter_valid(y, k)
    vx = _filter_valid(x * x, k) - mx * mx
    vy = _filter_valid(y * y, k) - my * my
    cxy = _filter_valid(x * y, k) - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * cxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = vx + vy + SSIM_C2
    s = a1 * a2 / (b1 * b2)
    return s, (mx, my, a1, a2, b1, b2)


def ssim_loss(pred: Tensor, target: Tensor) -> Tensor:
    """1 - mean SSIM over every valid 11x11 Gaussian window."""
    _same_dims(pred, target, "ssim_loss")
    n, c, h, w = pred.dims
    if c != 1:
        raise ShapeError("ssim_loss expects single-channel maps")
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(f"ssim_loss needs maps of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    k = gaussian_window().astype(pred.dtype)
    x, y = pred.data[:, 0], target.data[:, 0]
    s, (mx, my, a1, a2, b1, b2) = ssim_map(x, y, k)
    count = s.size

    def back(g):
        scale = -g.reshape(-1)[0] / count
        # dS with respect to the local moments E[x], E[y], E[x^2], E[y^2], E[xy]
        d_vx = -s / b2
        d_vy = d_vx
        d_cxy = 2 * a1 / (b1 * b2)
        d_mx = 2 * my * a2 / (b1 * b2) - s * 2 * mx / b1 + d_vx * (-2 * mx) + d_cxy * (-my)
        d_my = 2 * mx * a2 / (b1 * b2) - s * 2 * my / b1 + d_vy * (-2 * my) + d_cxy * (-mx)
        adj = lambda m: _filter_adjoint(scale * m, k)  # noqa: E731
        a_cxy = adj(d_cxy)
        gx = adj(d_mx) + 2 * x * adj(d_vx) + y * a_cxy
        gy = adj(d_my) + 2 * y * adj(d_vy) + x * a_cxy
        return gx[:, None], gy[:, None]

    return record("ssim_loss", _scalar(1.0 - s.mean(), pred.dtype), (pred, target), back)


def get_loss(kind: str):
    try:
        return {"mse": mse, "bce": bce, "ssim_negation": ssim_loss}[kind]
    except KeyError:
        raise ValueError(f"unknown loss {kind!r}; expected one of {LOSS_KINDS}") from None
