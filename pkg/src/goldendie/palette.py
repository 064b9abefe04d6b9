"""Color palettes: k-means quantization and path ordering of the centroids.

The palette is fitted with Lloyd's algorithm on a uniform pixel sample, then
reordered so that consecutive entries are close in RGB. Consecutive indices
being perceptually similar is what makes "k-off" accuracy meaningful.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .raster import as_photo

DEFAULT_SAMPLE_SIZE = 1_000_000
_CHUNK = 16384


@dataclass
class Palette:
    centroids: np.ndarray
    order_cost: float = float("nan")
    history: list[float] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64).reshape(-1, 3)

    @property
    def k(self) -> int:
        return len(self.centroids)

    def __len__(self) -> int:
        return self.k

    def to_text(self) -> str:
        return "".join(f"{i} {r:.6f} {g:.6f} {b:.6f}\n"
                       for i, (r, g, b) in enumerate(self.centroids))

    def sha256(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "Palette":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"missing palette file: {path}")
        rows = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4 or int(parts[0]) != len(rows):
                raise DataError(f"{path}:{lineno}: expected 'index r g b' in order")
            rows.append([float(v) for v in parts[1:]])
        centroids = np.array(rows)
        return cls(centroids, path_cost(centroids))


def path_cost(points: np.ndarray, order=None) -> float:
    """Total Euclidean length of the open path visiting ``points`` in ``order``."""
    pts = np.asarray(points, dtype=np.float64)
    if order is not None:
        pts = pts[np.asarray(order)]
    if len(pts) < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


# ---------------------------------------------------------------------------
# k-means


def _assign(points: np.ndarray, centroids: np.ndarray, chunk: int = 8192):
    """Nearest centroid and squared distance per point, in cache-sized blocks."""
    labels = np.empty(len(points), dtype=np.intp)
    cost = np.empty(len(points))
    cc = np.einsum("ij,ij->i", centroids, centroids)
    neg2c = -2.0 * centroids.T
    for start in range(0, len(points), chunk):
        block = points[start:start + chunk]
        d = block @ neg2c
        d += cc
        lab = np.argmin(d, axis=1)
        labels[start:start + chunk] = lab
        best = d[np.arange(len(block)), lab] + np.einsum("ij,ij->i", block, block)
        cost[start:start + chunk] = np.maximum(best, 0.0)
    return labels, cost


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = (np.einsum("ij,ij->i", points, points)[:, None]
         - 2.0 * points @ centroids.T
         + np.einsum("ij,ij->i", centroids, centroids)[None, :])
    return np.maximum(d, 0.0)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    closest = _sq_dists(points, centroids[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centroids[i] = points[idx]
        closest = np.minimum(closest, _sq_dists(points, centroids[i:i + 1])[:, 0])
    return centroids


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
           max_iter: int = 100, tol: float = 1e-6):
    """Lloyd's iterations from a k-means++ start.

    Returns ``(centroids, labels, history)`` where ``history`` holds the
    within-cluster sum of squares after each assignment step.
    """
    points = np.asarray(points, dtype=np.float64)
    centroids = _kmeans_pp(points, k, rng)
    history = []
    labels = None
    for _ in range(max_iter):
        labels, point_cost = _assign(points, centroids)
        history.append(float(point_cost.sum()))

        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        _bin_sums(sums, labels, points)
        new = centroids.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        # empty clusters are re-seeded at the points worst served by their centroid
        if not filled.all():
            taken = set()
            for j in np.flatnonzero(~filled):
                for idx in np.argsort(point_cost)[::-1]:
                    if idx not in taken:
                        taken.add(idx)
                        new[j] = points[idx]
                        point_cost[idx] = 0.0
                        break
        shift = np.max(np.linalg.norm(new - centroids, axis=1))
        centroids = new
        if shift < tol:
            break
    labels, point_cost = _assign(points, centroids)
    history.append(float(point_cost.sum()))
    return centroids, labels, history


def _bin_sums(out, labels, points):
    for c in range(points.shape[1]):
        out[:, c] = np.bincount(labels, weights=points[:, c], minlength=len(out))


def _fill_distinct(colors: np.ndarray, k: int) -> np.ndarray:
    """Pad fewer than ``k`` distinct colors with slightly nudged copies."""
    colors = list(map(tuple, colors))
    seen = set(colors)
    out = list(colors)
    step = 1
    while len(out) < k:
        for base in colors:
            if len(out) >= k:
                break
            c = np.asarray(base)
            direction = 0.5 - c
            norm = np.linalg.norm(direction)
            direction = direction / norm if norm > 0 else np.array([1.0, 0.0, 0.0])
            cand = tuple(np.round(np.clip(c + step * 1e-3 * direction, 0, 1), 6))
            if cand not in seen:
                seen.add(cand)
                out.append(cand)
        step += 1
    return np.array(out[:k])


def fit_palette(photo, k: int = 64, sample_size: int | None = None, seed: int = 0,
                max_iter: int = 100, tol: float = 1e-6, order: bool = True) -> Palette:
    """Fit a ``k``-color palette to a photo and order it along a short path."""
    photo = as_photo(photo)
    if k < 2:
        raise ValueError("k must be at least 2")
    pixels = photo.reshape(-1, 3)
    n = len(pixels)
    if sample_size is None:
        sample_size = min(DEFAULT_SAMPLE_SIZE, n)
    if not 0 < sample_size <= n:
        raise ValueError(f"sample_size must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    sample = pixels if sample_size == n else pixels[rng.choice(n, sample_size, replace=False)]

    distinct = np.unique(sample, axis=0)
    history: list[float] = []
    if len(distinct) <= k:
        centroids = _fill_distinct(distinct, k)
    else:
        centroids, _, history = kmeans(sample, k, rng, max_iter=max_iter, tol=tol)
        centroids = np.round(centroids, 6)
        if len(np.unique(centroids, axis=0)) < k:
            centroids = _fill_distinct(np.unique(centroids, axis=0), k)
    centroids = np.clip(centroids, 0.0, 1.0)
    palette = order_palette(centroids) if order else Palette(centroids, path_cost(centroids))
    palette.history = history
    return palette


# ---------------------------------------------------------------------------
# path ordering


def _nearest_neighbor(dist: np.ndarray, start: int) -> list[int]:
    n = len(dist)
    visited = np.zeros(n, bool)
    path = [start]
    visited[start] = True
    for _ in range(n - 1):
        row = np.where(visited, np.inf, dist[path[-1]])
        nxt = int(np.argmin(row))
        path.append(nxt)
        visited[nxt] = True
    return path


def _two_opt(path: np.ndarray, dist: np.ndarray) -> bool:
    """One sweep of first-improvement 2-opt on an open path; True if improved."""
    n = len(path)
    improved = False
    eps = 1e-12
    for i in range(n - 1):
        a = path[i - 1] if i > 0 else -1
        # candidate segment ends j > i; reversing path[i..j]
        js = np.arange(i + 1, n)
        b = path[i]
        c = path[js]
        nxt = np.where(js + 1 < n, path[np.minimum(js + 1, n - 1)], -1)
        old = dist[c, nxt] * (nxt >= 0)
        new = dist[b, nxt] * (nxt >= 0)
        if a >= 0:
            old = old + dist[a, b]
            new = new + dist[a, c]
        gain = old - new
        best = int(np.argmax(gain))
        if gain[best] > eps:
            j = int(js[best])
            path[i:j + 1] = path[i:j + 1][::-1].copy()
            improved = True
    return improved


def _or_opt(path: np.ndarray, dist: np.ndarray) -> bool:
    """Relocate one segment of length 1-3 (either orientation); True if improved."""
    n = len(path)
    eps = 1e-12

    def d(u, v):
        u, v = np.asarray(u), np.asarray(v)
        ok = (u >= 0) & (v >= 0)
        return np.where(ok, dist[np.maximum(u, 0), np.maximum(v, 0)], 0.0)

    for seg_len in (1, 2, 3):
        for i in range(n - seg_len + 1):
            seg = path[i:i + seg_len]
            prev = path[i - 1] if i > 0 else -1
            nxt = path[i + seg_len] if i + seg_len < n else -1
            removal_gain = d(prev, seg[0]) + d(seg[-1], nxt) - d(prev, nxt)
            rest = np.concatenate([path[:i], path[i + seg_len:]])
            # insertion slots: before rest[pos], pos = 0..m
            u = np.concatenate([[-1], rest])
            v = np.concatenate([rest, [-1]])
            base = d(u, v)
            fwd = removal_gain - (d(u, seg[0]) + d(seg[-1], v) - base)
            rev = removal_gain - (d(u, seg[-1]) + d(seg[0], v) - base)
            delta = np.stack([fwd, rev], axis=1).ravel()
            best = int(np.argmax(delta))
            if delta[best] > eps:
                pos, flip = divmod(best, 2)
                ins = seg[::-1] if flip else seg
                path[:] = np.concatenate([rest[:pos], ins, rest[pos:]])
                return True
    return False


def _improve(path: list[int], dist: np.ndarray) -> np.ndarray:
    path = np.asarray(path)
    while True:
        while _two_opt(path, dist):
            pass
        if not _or_opt(path, dist):
            return path


def order_palette(centroids) -> Palette:
    """Reorder colors along a short open path through RGB space.

    Nearest-neighbor construction from every start node (plus the identity
    order), each refined by 2-opt and or-opt until no move improves; the
    shortest resulting path wins.
    """
    pts = np.asarray(centroids, dtype=np.float64)
    n = len(pts)
    if n < 3:
        return Palette(pts.copy(), path_cost(pts))
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    starts = [list(range(n))] + [_nearest_neighbor(dist, s) for s in range(n)]
    best_path, best_cost = None, np.inf
    for start in starts:
        path = _improve(start, dist)
        cost = path_cost(pts, path)
        if cost < best_cost - 1e-12:
            best_path, best_cost = path, cost
    # a path and its reverse are the same route; start from the darker end
    if pts[best_path[0]].sum() > pts[best_path[-1]].sum():
        best_path = best_path[::-1]
    return Palette(pts[best_path], best_cost)


def brute_force_path(points) -> tuple[tuple[int, ...], float]:
    """Exhaustive minimum open path; only feasible for small inputs."""
    pts = np.asarray(points, dtype=np.float64)
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(len(pts))):
        if perm[0] > perm[-1]:
            continue
        cost = path_cost(pts, perm)
        if cost < best_cost:
            best, best_cost = perm, cost
    return best, best_cost


# ---------------------------------------------------------------------------
# mappings


def quantize(photo, palette: Palette) -> np.ndarray:
    """Nearest-centroid index per pixel; ties go to the lowest index."""
    photo = np.asarray(photo, dtype=np.float64)
    pixels = photo.reshape(-1, 3)
    centroids = palette.centroids
    out = np.empty(len(pixels), dtype=np.uint8 if palette.k <= 256 else np.int32)
    for start in range(0, len(pixels), _CHUNK):
        block = pixels[start:start + _CHUNK]
        d = np.sum((block[:, None, :] - centroids[None, :, :]) ** 2, axis=-1)
        out[start:start + _CHUNK] = np.argmin(d, axis=1)
    return out.reshape(photo.shape[:-1])


def reconstruct(q, palette: Palette) -> np.ndarray:
    """Map palette indices back to RGB."""
    q = np.asarray(q)
    if q.size and (q.min() < 0 or q.max() >= palette.k):
        raise IndexError(f"palette index out of range for a {palette.k}-color palette")
    return palette.centroids[q.astype(np.intp)]
