"""Salient-object-detection scores: MAE, F-measure, weighted F, S-measure, E-measure.

All functions take a prediction ``s`` with values in [0, 1] and a binary
mask ``g`` of the same (h, w) shape. Degenerate masks (all background or
all foreground) have fixed conventions documented per function, so every
score is always a finite number in [0, 1].
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .ops import resize_bilinear
from .tensor import ShapeError

BETA2 = 0.3
S_ALPHA = 0.5
E_EPS = 1e-12
EPS = np.spacing(1.0)
WF_SIGMA = 5.0
WF_SIZE = 7
WF_ALPHA = np.log(0.5) / 5

COLUMNS = ("E", "S", "Wf", "F", "MAE")


def saliency_map(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2:
        raise ShapeError(f"saliency map must be 2-D, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("saliency map contains non-finite values")
    return np.clip(s, 0.0, 1.0)


def ground_truth_mask(g) -> np.ndarray:
    g = np.asarray(g)
    if g.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {g.shape}")
    if g.dtype != bool and not np.all((g == 0) | (g == 1)):
        raise ValueError("mask values must be 0 or 1")
    return g.astype(bool)


def _operands(s, g):
    s, g = saliency_map(s), ground_truth_mask(g)
    if s.shape != g.shape:
        raise ShapeError(f"prediction {s.shape} and mask {g.shape} differ in size")
    return s, g


def adaptive_threshold(s: np.ndarray) -> float:
    return min(2.0 * float(np.mean(s)), 1.0)


def binarize(s: np.ndarray, threshold: float) -> np.ndarray:
    # a zero score is never a detection, so s == 0 everywhere has no positives
    return (s >= threshold) & (s > 0)


def mae(s, g) -> float:
    s, g = _operands(s, g)
    return float(np.mean(np.abs(s - g)))


def f_measure(s, g, threshold: Union[str, float] = "adaptive", beta2: float = BETA2) -> float:
    """F-beta of ``s`` binarized at ``threshold`` (``"adaptive"`` or a number)."""
    s, g = _operands(s, g)
    t = adaptive_threshold(s) if threshold == "adaptive" else float(threshold)
    pred = binarize(s, t)
    tp = np.count_nonzero(pred & g)
    if tp == 0:
        return 0.0
    precision = tp / np.count_nonzero(pred)
    recall = tp / np.count_nonzero(g)
    return float((1 + beta2) * precision * recall / (beta2 * precision + recall))


def truncated_gaussian(size: int = WF_SIZE, sigma: float = WF_SIGMA) -> np.ndarray:
    half = (size - 1) / 2
    y, x = np.ogrid[-half:half + 1, -half:half + 1]
    h = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    return h / h.sum()


def nearest_foreground(g: np.ndarray):
    """Distance to, and flat index of, the nearest foreground pixel.

    Among equidistant foreground pixels the first in row-major order wins.
    Foreground pixels map to themselves. ``g`` must contain foreground.
    """
    h, w = g.shape
    fg = np.flatnonzero(g)
    coords = np.stack(np.divmod(fg, w), axis=1)
    dist = ndimage.distance_transform_edt(~g)
    index = np.arange(h * w)
    bg = np.flatnonzero(~g)
    if bg.size:
        pts = np.stack(np.divmod(bg, w), axis=1)
        d2 = np.rint(dist.reshape(-1)[bg] ** 2).astype(np.int64)
        tree = cKDTree(coords)
        # exact squared distances are integers, so a relative slack cannot admit the next ring
        radii = np.sqrt(d2) * (1 + 1e-9)
        for k, (p, cand) in enumerate(zip(pts, tree.query_ball_point(pts, radii))):
            cand = np.asarray(cand)
            cd2 = ((coords[cand] - p) ** 2).sum(axis=1)
            index[bg[k]] = fg[cand[cd2 == d2[k]].min()]
    return dist, index.reshape(h, w)


def weighted_f(s, g, beta2: float = 1.0) -> float:
    s, g = _operands(s, g)
    if not g.any():
        return 0.0
    gf = g.astype(np.float64)
    dist, nearest = nearest_foreground(g)
    err = np.abs(s - gf)
    # background errors take the error of their nearest foreground pixel
    et = err.reshape(-1)[nearest]
    ea = ndimage.convolve(et, truncated_gaussian(), mode="constant", cval=0.0)
    min_e = np.where(g & (ea < err), ea, err)
    b = np.where(g, 1.0, 2.0 - np.exp(WF_ALPHA * dist))
    ew = min_e * b
    tpw = gf.sum() - ew[g].sum()
    fpw = ew[~g].sum()
    recall = 1.0 - ew[g].mean()
    precision = tpw / (tpw + fpw + EPS)
    q = (1 + beta2) * recall * precision / (recall + beta2 * precision + EPS)
    return float(np.clip(q, 0.0, 1.0))


def _s_object_part(values: np.ndarray) -> float:
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2 * x / (x * x + 1 + sigma + EPS)


def _s_object(s: np.ndarray, g: np.ndarray) -> float:
    u = g.mean()
    fg = _s_object_part((s * g)[g])
    bg = _s_object_part(((1 - s) * ~g)[~g])
    return u * fg + (1 - u) * bg


def centroid_split(g: np.ndarray) -> tuple:
    """Split point (row, col): the mask centroid, rounded half up, plus one."""
    rows, cols = np.nonzero(g)
    return int(np.floor(rows.mean() + 0.5)) + 1, int(np.floor(cols.mean() + 0.5)) + 1


def _block_ssim(x: np.ndarray, y: np.ndarray) -> float:
    n = x.size
    if n == 0:
        return 0.0
    mx, my = x.mean(), y.mean()
    vx = ((x - mx) ** 2).sum() / (n - 1 + EPS)
    vy = ((y - my) ** 2).sum() / (n - 1 + EPS)
    cxy = ((x - mx) * (y - my)).sum() / (n - 1 + EPS)
    a = 4 * mx * my * cxy
    b = (mx * mx + my * my) * (vx + vy)
    if a != 0:
        return a / (b + EPS)
    return 1.0 if b == 0 else 0.0


def _s_region(s: np.ndarray, g: np.ndarray) -> float:
    h, w = g.shape
    r, c = centroid_split(g)
    gf = g.astype(np.float64)
    total = 0.0
    for rs in (slice(0, r), slice(r, h)):
        for cs in (slice(0, c), slice(c, w)):
            block = s[rs, cs]
            total += block.size / (h * w) * _block_ssim(block, gf[rs, cs])
    return total


def s_measure(s, g, alpha: float = S_ALPHA) -> float:
    s, g = _operands(s, g)
    u = g.mean()
    if u == 0:
        return float(1 - s.mean())
    if u == 1:
        return float(s.mean())
    score = alpha * _s_object(s, g) + (1 - alpha) * _s_region(s, g)
    return float(np.clip(score, 0.0, 1.0))


def e_measure(s, g) -> float:
    s, g = _operands(s, g)
    sb = binarize(s, adaptive_threshold(s)).astype(np.float64)
    u = g.mean()
    if u == 0:
        return float(1 - sb.mean())
    if u == 1:
        return float(sb.mean())
    phi_g = g - u
    phi_s = sb - sb.mean()
    xi = 2 * phi_g * phi_s / (phi_g ** 2 + phi_s ** 2 + E_EPS)
    return float(np.mean((xi + 1) ** 2 / 4))


@dataclass(frozen=True)
class MetricReport:
    e_measure: float
    s_measure: float
    weighted_f: float
    f_measure: float
    mae: float
    count: int = 1

    def row(self) -> tuple:
        return self.e_measure, self.s_measure, self.weighted_f, self.f_measure, self.mae

    @classmethod
    def mean(cls, reports: Sequence["MetricReport"]) -> "MetricReport":
        if not reports:
            raise ValueError("cannot average an empty set of reports")
        cols = np.array([r.row() for r in reports], dtype=np.float64)
        return cls(*(float(v) for v in cols.mean(axis=0)), count=len(reports))


def score(s, g) -> MetricReport:
    s, g = _operands(s, g)
    return MetricReport(e_measure(s, g), s_measure(s, g), weighted_f(s, g), f_measure(s, g), mae(s, g))


def _fit(pred: np.ndarray, mask: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != mask.shape:
        pred = resize_bilinear(pred, *mask.shape)
    return pred


def evaluate_pairs(
    preds: Mapping[str, np.ndarray],
    masks: Mapping[str, np.ndarray],
    workers: int = 1,
) -> tuple:
    """Score name-matched pairs; returns (mean report, [(name, report), ...]).

    Predictions are bilinearly resized to their mask's size. Pairs are
    reported in sorted name order regardless of ``workers``.
    """
    missing = sorted(set(preds) ^ set(masks))
    if missing:
        raise KeyError(f"unmatched names: {', '.join(missing)}")
    names = sorted(preds)
    if not names:
        raise ValueError("no pairs to evaluate")

    def one(name):
        mask = ground_truth_mask(masks[name])
        return score(_fit(preds[name], mask), mask)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            reports = list(pool.map(one, names))
    else:
        reports = [one(n) for n in names]
    return MetricReport.mean(reports), list(zip(names, reports))


def to_csv(per_pair: Sequence[tuple], mean: MetricReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("name",) + COLUMNS)
    for name, rep in per_pair:
        writer.writerow((name,) + tuple(f"{v:.6f}" for v in rep.row()))
    writer.writerow(("mean",) + tuple(f"{v:.6f}" for v in mean.row()))
    return buf.getvalue()


def to_table(per_pair: Sequence[tuple], mean: Optional[MetricReport] = None) -> str:
    rows = [(name,) + tuple(f"{v:.4f}" for v in rep.row()) for name, rep in per_pair]
    if mean is not None:
        rows.append(("mean",) + tuple(f"{v:.4f}" for v in mean.row()))
    header = ("name",) + COLUMNS
    width = [max(len(r[i]) for r in rows + [header]) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(width[0]) if i == 0 else c.rjust(width[i])  # noqa: E731
                              for i, c in enumerate(r))
    return "\n".join([fmt(header)] + [fmt(r) for r in rows]) + "\n"


REPORT_FIELDS = tuple(f.name for f in fields(MetricReport))
