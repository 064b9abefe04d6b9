"""Template-matching defect detection against a simulated golden die.

A score map compares the wafer photo with the simulation pixel by pixel or
through sliding windows; thresholding it gives a defect mask, and average
precision over all distinct thresholds measures how well it ranks labeled
defect pixels above the rest.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from . import metrics as M
from .errors import ConfigError, DimensionError, EvaluationError
from .raster import shift_raster

DEFAULT_THRESHOLD = 0.1


@dataclass
class ScoreMap:
    scores: np.ndarray
    metric: str = "l2"
    window: int | None = None
    stride: int | None = None

    @property
    def shape(self):
        return self.scores.shape


@dataclass
class PRResult:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    average_precision: float
    n_positive: int = 0
    meta: dict = field(default_factory=dict)


def _pair(photo, simulation):
    photo = np.asarray(photo, dtype=np.float64)
    simulation = np.asarray(simulation, dtype=np.float64)
    if photo.shape != simulation.shape:
        raise DimensionError(f"photo {photo.shape} vs simulation {simulation.shape}")
    return photo, simulation


def score_pixelwise(photo, simulation, metric: str = "l2") -> ScoreMap:
    """Channel-mean squared (``l2``) or absolute (``l1``) difference per pixel."""
    photo, simulation = _pair(photo, simulation)
    diff = photo - simulation
    if metric == "l2":
        s = diff * diff
    elif metric == "l1":
        s = np.abs(diff)
    else:
        raise ConfigError(f"pixelwise metric must be l1 or l2, got {metric!r}")
    if s.ndim == 3:
        s = s.mean(axis=2)
    return ScoreMap(s, metric)


def _window_starts(n: int, window: int, stride: int) -> np.ndarray:
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] != n - window:
        starts.append(n - window)  # last window flush with the edge
    return np.asarray(starts)


def _dissimilarity(metric: str):
    if metric == "ssim_dissim":
        return lambda a, b: 1.0 - M.ssim(a, b, window=min(8, a.shape[0], a.shape[1]))
    if metric == "psnr":
        raise ConfigError("psnr is a similarity without an upper bound; use l1, l2 or ssim_dissim")
    if metric in M.PATCH_METRICS:
        return M.PATCH_METRICS[metric]
    raise ConfigError(f"unknown window metric {metric!r}")


def score_windowed(photo, simulation, metric: str = "ssim_dissim", window: int = 16,
                   stride: int = 4) -> ScoreMap:
    """Each pixel gets the mean dissimilarity of all windows covering it.

    Windows start every ``stride`` pixels; an extra window flush with the
    right/bottom edge is added so every pixel is covered.
    """
    photo, simulation = _pair(photo, simulation)
    h, w = photo.shape[:2]
    if window < 1 or stride < 1:
        raise ConfigError("window and stride must be positive")
    if window > h or window > w:
        raise DimensionError(f"window {window} exceeds image {h}x{w}")
    ys, xs = _window_starts(h, window, stride), _window_starts(w, window, stride)
    total = np.zeros((h, w))
    count = np.zeros((h, w))
    if metric in ("l1", "l2"):
        diff = photo - simulation
        per_px = diff * diff if metric == "l2" else np.abs(diff)
        if per_px.ndim == 3:
            per_px = per_px.mean(axis=2)
        means = sliding_window_view(per_px, (window, window)).mean(axis=(-2, -1))
        values = means[np.ix_(ys, xs)]
    else:
        fn = _dissimilarity(metric)
        values = np.array([[fn(photo[y:y + window, x:x + window],
                               simulation[y:y + window, x:x + window]) for x in xs] for y in ys])
    for i, y in enumerate(ys):
        for j, x in enumerate(xs):
            total[y:y + window, x:x + window] += values[i, j]
            count[y:y + window, x:x + window] += 1
    return ScoreMap(total / count, metric, window, stride)


def binarize(score_map, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Boolean mask of pixels scoring strictly above ``threshold``."""
    if threshold < 0:
        raise ConfigError("threshold must be non-negative")
    scores = score_map.scores if isinstance(score_map, ScoreMap) else np.asarray(score_map)
    return scores > threshold


def _positive_mask(labels) -> np.ndarray:
    mask = labels.mask if hasattr(labels, "mask") else np.asarray(labels)
    return np.asarray(mask) > 0


def precision_recall(score_map, labels) -> PRResult:
    """Sweep every distinct score as a threshold (ties form one block).

    ``thresholds`` are descending; at threshold ``t`` pixels with score
    ``>= t`` are predicted positive. AP is ``sum (R_i - R_{i-1}) P_i``.
    """
    scores = score_map.scores if isinstance(score_map, ScoreMap) else np.asarray(score_map)
    positive = _positive_mask(labels)
    if scores.shape != positive.shape:
        raise DimensionError(f"score map {scores.shape} vs labels {positive.shape}")
    n_pos = int(positive.sum())
    if n_pos == 0:
        raise EvaluationError("average precision is undefined without positive labels")
    s = scores.ravel().astype(np.float64)
    y = positive.ravel()
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each tie block
    block_end = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[block_end].astype(np.float64)
    n_pred = (block_end + 1).astype(np.float64)
    precision = tp / n_pred
    recall = tp / n_pos
    ap = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return PRResult(s[block_end], precision, recall, ap, n_pos)


def average_precision(score_map, labels) -> float:
    return precision_recall(score_map, labels).average_precision


def misalignment_probe(photo, simulation, max_shift: int = 4):
    """Exhaustive integer shift of the photo that best matches the simulation.

    Returns ``(best_shift, score_before, score_after)`` where ``best_shift``
    is the ``(dx, dy)`` to apply to the photo and the scores are l2 over
    the region unaffected by any candidate shift.
    """
    photo, simulation = _pair(photo, simulation)
    if max_shift < 0:
        raise ConfigError("max_shift must be non-negative")
    h, w = photo.shape[:2]
    m = max_shift
    if 2 * m >= min(h, w):
        raise DimensionError("max_shift too large for the image")
    core = (slice(m, h - m), slice(m, w - m))
    ref = simulation[core]
    before = M.l2(photo[core], ref)
    best, best_score = (0, 0), before
    for dy in range(-m, m + 1):
        for dx in range(-m, m + 1):
            if dx == 0 and dy == 0:
                continue
            cand = M.l2(shift_raster(photo, dx, dy)[core], ref)
            if cand < best_score:
                best, best_score = (dx, dy), cand
    return best, before, best_score


def smooth(score_map: ScoreMap, size: int = 3) -> ScoreMap:
    """Optional box smoothing of a score map."""
    from scipy.ndimage import uniform_filter

    return ScoreMap(uniform_filter(score_map.scores, size=size, mode="nearest"),
                    score_map.metric + f"+box{size}", score_map.window, score_map.stride)


# ---------------------------------------------------------------------------
# export


def export_score_png(path, score_map: ScoreMap, vmax: float | None = None) -> tuple[Path, Path]:
    """16-bit grayscale PNG plus a sidecar text file with the linear scale."""
    path = Path(path)
    s = score_map.scores
    vmax = float(s.max()) if vmax is None else float(vmax)
    scale = 65535.0 / vmax if vmax > 0 else 0.0
    data = np.round(np.clip(s, 0.0, vmax if vmax > 0 else 0.0) * scale).astype(np.uint16)
    Image.fromarray(data).save(path)
    sidecar = path.with_suffix(".scale.txt")
    sidecar.write_text(f"metric {score_map.metric}\nwindow {score_map.window}\n"
                       f"stride {score_map.stride}\nvmin 0\nvmax {vmax!r}\n"
                       f"score = pixel * {vmax!r} / 65535\n", encoding="utf-8")
    return path, sidecar


def load_score_png(path) -> ScoreMap:
    path = Path(path)
    meta = dict(line.split(" ", 1) for line in
                path.with_suffix(".scale.txt").read_text(encoding="utf-8").splitlines()[:5])
    with Image.open(path) as img:
        data = np.asarray(img, dtype=np.float64)
    vmax = float(meta["vmax"])
    return ScoreMap(data * vmax / 65535.0, meta["metric"])


def save_heatmap(path, score_map: ScoreMap, vmax: float | None = None, cmap: str = "inferno") -> Path:
    from matplotlib import colormaps

    s = score_map.scores
    vmax = float(s.max()) if vmax is None else float(vmax)
    norm = s / vmax if vmax > 0 else np.zeros_like(s)
    rgba = colormaps[cmap](np.clip(norm, 0.0, 1.0))
    Image.fromarray((rgba[..., :3] * 255).round().astype(np.uint8)).save(path)
    return Path(path)


def save_triptych(path, target, simulation, mask, gap: int = 4) -> Path:
    """Target | simulation | binarized map, side by side."""
    target, simulation = _pair(target, simulation)
    mask_rgb = np.repeat(np.asarray(mask, dtype=np.float64)[..., None], 3, axis=2)
    h = target.shape[0]
    spacer = np.ones((h, gap, 3))
    row = np.concatenate([target, spacer, simulation, spacer, mask_rgb], axis=1)
    Image.fromarray((np.clip(row, 0, 1) * 255).round().astype(np.uint8)).save(path)
    return Path(path)
