"""Similarity metrics, patchwise aggregation and correlation tables.

Patch metrics take two ``(H, W, 3)`` images in ``[0, 1]`` (or index maps /
masks where noted) and return one scalar. L1 and L2 are means over pixels
and channels, so they stay in ``[0, 1]``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special, stats

from .errors import DimensionError, EvaluationError

LOWER_IS_BETTER = {"l1", "l2", "ce", "cross_entropy", "focal", "lpips"}
HIGHER_IS_BETTER = {"psnr", "ssim", "k_off", "dice", "haarpsi", "accuracy"}


def _pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return pred, target


def l1(pred, target) -> float:
    pred, target = _pair(pred, target)
    return float(np.mean(np.abs(pred - target)))


def l2(pred, target) -> float:
    pred, target = _pair(pred, target)
    return float(np.mean((pred - target) ** 2))


def psnr(pred, target, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    mse = l2(pred, target)
    if mse == 0.0:
        return math.inf
    return float(10.0 * np.log10(max_val ** 2 / mse))


def ssim(pred, target, window: int = 8, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM over all ``window`` x ``window`` positions, channels averaged.

    Uses uniform windows with population (biased) moments.
    """
    pred, target = _pair(pred, target)
    if pred.ndim == 2:
        pred, target = pred[..., None], target[..., None]
    if pred.shape[0] < window or pred.shape[1] < window:
        raise DimensionError(f"patch {pred.shape[:2]} smaller than window {window}")
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    wx = sliding_window_view(pred, (window, window), axis=(0, 1))
    wy = sliding_window_view(target, (window, window), axis=(0, 1))
    mx, my = wx.mean(axis=(-2, -1)), wy.mean(axis=(-2, -1))
    dx = wx - mx[..., None, None]
    dy = wy - my[..., None, None]
    vx = (dx * dx).mean(axis=(-2, -1))
    vy = (dy * dy).mean(axis=(-2, -1))
    cov = (dx * dy).mean(axis=(-2, -1))
    s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return float(np.mean(s))


def _logits_nchw(logits, target):
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target)
    if logits.ndim == target.ndim + 1 and logits.ndim == 3:
        logits, target = logits[None], target[None]
    if logits.shape[0] != target.shape[0] or logits.shape[2:] != target.shape[1:]:
        raise DimensionError(f"logits {logits.shape} do not match target {target.shape}")
    target = target.astype(np.intp)
    if target.size and (target.min() < 0 or target.max() >= logits.shape[1]):
        raise ValueError(f"target index outside {logits.shape[1]} classes")
    return logits, target


def focal(logits, target, gamma: float = 2.0, alpha: float = 1.0) -> float:
    """Mean pixel focal loss; ``logits`` is ``(k, h, w)`` or ``(n, k, h, w)``."""
    logits, target = _logits_nchw(logits, target)
    logp = special.log_softmax(logits, axis=1)
    logpt = np.take_along_axis(logp, target[:, None], axis=1)[:, 0]
    weight = 1.0 if gamma == 0 else (-np.expm1(logpt)) ** gamma
    return float(np.mean(-alpha * weight * logpt))


def cross_entropy(logits, target) -> float:
    return focal(logits, target, gamma=0.0)


def k_off_accuracy(pred_q, target_q, k: int = 2, cyclic: bool = True,
                   n_classes: int = 64) -> float:
    """Share of pixels whose palette index lies within ``k`` of the target."""
    pred_q = np.asarray(pred_q, dtype=np.int64)
    target_q = np.asarray(target_q, dtype=np.int64)
    if pred_q.shape != target_q.shape:
        raise DimensionError(f"shape mismatch: {pred_q.shape} vs {target_q.shape}")
    dist = np.abs(pred_q - target_q)
    if cyclic:
        dist = np.minimum(dist, n_classes - dist)
    return float(np.mean(dist <= k))


def dice(pred_mask, target_mask) -> float:
    """``2|A & B| / (|A| + |B|)`` on masks (positive = value > 0); empty pair gives 1."""
    a = np.asarray(pred_mask) > 0
    b = np.asarray(target_mask) > 0
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.sum(a & b)) / total


PATCH_METRICS = {"l1": l1, "l2": l2, "psnr": psnr, "ssim": ssim}


# ---------------------------------------------------------------------------
# aggregation


def direction(name: str) -> str:
    if name in HIGHER_IS_BETTER:
        return "higher"
    if name in LOWER_IS_BETTER:
        return "lower"
    raise KeyError(f"unknown metric {name!r}")


@dataclass
class MetricReport:
    name: str
    values: np.ndarray
    mean: float
    sd: float
    direction: str
    n_excluded: int = 0

    @property
    def n(self) -> int:
        return len(self.values)


def aggregate(name: str, values, direction_: str | None = None) -> MetricReport:
    """Mean and population SD of per-patch values; infinities are excluded and counted."""
    values = np.asarray(values, dtype=np.float64).ravel()
    finite = values[np.isfinite(values)]
    n_excluded = int(values.size - finite.size)
    mean = float(np.mean(finite)) if finite.size else math.nan
    sd = float(np.std(finite)) if finite.size else math.nan
    return MetricReport(name, values, mean, sd, direction_ or direction(name), n_excluded)


def evaluate_regions(pred, target, regions, metrics=("l1", "l2", "psnr", "ssim")) -> dict:
    """Per-patch metric values over ``regions``, aggregated per metric."""
    pred, target = _pair(pred, target)
    out = {}
    for name in metrics:
        fn = PATCH_METRICS[name]
        out[name] = aggregate(name, [fn(pred[r.slices], target[r.slices]) for r in regions])
    return out


@dataclass
class CorrelationTable:
    names: list
    pearson: np.ndarray
    spearman: np.ndarray
    n_models: int = 0
    meta: dict = field(default_factory=dict)

    def combined(self) -> np.ndarray:
        """Pearson above the diagonal, Spearman below, ones on it."""
        n = len(self.names)
        out = np.eye(n)
        iu = np.triu_indices(n, 1)
        il = np.tril_indices(n, -1)
        out[iu] = self.pearson[iu]
        out[il] = self.spearman[il]
        return out


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx, dy = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(np.sum(dx * dx)) * float(np.sum(dy * dy)))
    return float(np.sum(dx * dy) / denom) if denom > 0 else math.nan


def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    return pearson(stats.rankdata(x, method="average"), stats.rankdata(y, method="average"))


def correlate(scores: dict) -> CorrelationTable:
    """``scores`` maps model name -> {metric name -> value}."""
    if len(scores) < 2:
        raise EvaluationError("correlation needs at least two models")
    models = list(scores)
    names = sorted(set.intersection(*(set(v) for v in scores.values())))
    if not names:
        raise EvaluationError("models share no metric")
    data = np.array([[scores[m][n] for n in names] for m in models], dtype=np.float64)
    k = len(names)
    p, s = np.eye(k), np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            p[i, j] = p[j, i] = pearson(data[:, i], data[:, j])
            s[i, j] = s[j, i] = spearman(data[:, i], data[:, j])
    return CorrelationTable(names, p, s, len(models))


# ---------------------------------------------------------------------------
# report files

REPORT_HEADER = ("dataset", "model", "loss", "epoch", "metric", "mean", "sd", "n_patches")


def write_metric_csv(path, rows) -> Path:
    """``rows`` are dicts with the :data:`REPORT_HEADER` keys."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_HEADER, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path


def read_metric_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["mean"] = float(row["mean"])
        row["sd"] = float(row["sd"]) if row.get("sd") not in (None, "") else math.nan
    return rows


def write_matrix_csv(path, names, matrix) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + list(names))
        for name, row in zip(names, np.asarray(matrix)):
            writer.writerow([name] + [f"{v:.6f}" for v in row])
    return path
