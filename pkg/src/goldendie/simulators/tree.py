"""Pixelwise decision-tree simulator.

Every CAD layer is binary, so a pixel's input is one of ``2**k_in`` patterns.
Training therefore works on a per-pattern count matrix instead of the raw
sample: a split on layer ``j`` (threshold 0) sends each pattern left or right
and the Gini impurity of a node follows from its summed class counts. This is
exact CART on the sample, only cheaper.

Nodes are split greedily (largest Gini decrease, ties to the lowest layer
index) until a node is pure, holds a single pattern, or reaches
``max_depth``. Leaves predict the majority class, ties to the lowest index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DataError, DimensionError, TrainingError
from ..raster import PatchRegion, as_cad

DEFAULT_SAMPLES = 5_000_000


def pattern_codes(cad: np.ndarray) -> np.ndarray:
    """Integer code of each pixel's CAD column: bit ``j`` set iff layer ``j`` is +1."""
    cad = np.asarray(cad)
    k = cad.shape[-1]
    if k > 62:
        raise DimensionError("at most 62 CAD layers are supported")
    weights = (1 << np.arange(k, dtype=np.int64))
    return ((cad > 0).astype(np.int64) * weights).sum(axis=-1)


@dataclass
class TreeModel:
    """Flat array representation of a binary tree.

    ``feature[i] == -1`` marks a leaf. Internal nodes send ``layer == -1``
    pixels to ``left[i]`` and ``+1`` pixels to ``right[i]``.
    """

    k_in: int
    k_out: int
    feature: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    counts: np.ndarray
    n_samples: int = 0
    palette_hash: str | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def depth(self) -> int:
        best, stack = 0, [(0, 0)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            if self.feature[node] >= 0:
                stack += [(int(self.left[node]), d + 1), (int(self.right[node]), d + 1)]
        return best

    def leaf_of_codes(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        node = np.zeros(codes.shape, dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            f = self.feature[node[active]]
            bit = (codes[active] >> f) & 1
            node[active] = np.where(bit == 1, self.right[node[active]], self.left[node[active]])
            active = self.feature[node] >= 0
        return node

    def _check(self, cad):
        cad = np.asarray(cad)
        if cad.ndim != 3 or cad.shape[2] != self.k_in:
            raise DimensionError(f"tree expects {self.k_in} CAD layers, got shape {cad.shape}")
        return cad

    def predict_classes(self, cad: np.ndarray) -> np.ndarray:
        """``(H, W)`` class map; evaluated once per distinct CAD pattern."""
        codes = pattern_codes(self._check(cad))
        uniq, inverse = np.unique(codes, return_inverse=True)
        return self.value[self.leaf_of_codes(uniq)][inverse].reshape(codes.shape).astype(np.int64)

    def predict_proba(self, cad: np.ndarray) -> np.ndarray:
        """``(H, W, k_out)`` leaf class frequencies."""
        codes = pattern_codes(self._check(cad))
        uniq, inverse = np.unique(codes, return_inverse=True)
        c = self.counts[self.leaf_of_codes(uniq)].astype(np.float64)
        c /= np.maximum(c.sum(axis=1, keepdims=True), 1)
        return c[inverse].reshape(codes.shape + (self.k_out,))

    # -- persistence --------------------------------------------------------

    def to_dict(self) -> dict:
        return {"format": "goldendie-tree", "version": 1, "k_in": self.k_in, "k_out": self.k_out,
                "n_samples": self.n_samples, "palette_hash": self.palette_hash,
                "feature": self.feature.tolist(), "left": self.left.tolist(),
                "right": self.right.tolist(), "value": self.value.tolist(),
                "counts": self.counts.tolist(), "meta": self.meta}

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict()), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "TreeModel":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        if raw.get("format") != "goldendie-tree":
            raise DataError(f"{path} is not a tree checkpoint")
        arr = lambda key: np.asarray(raw[key], dtype=np.int64)  # noqa: E731
        return cls(raw["k_in"], raw["k_out"], arr("feature"), arr("left"), arr("right"),
                   arr("value"), arr("counts"), raw.get("n_samples", 0),
                   raw.get("palette_hash"), raw.get("meta", {}))


def _gini(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(n * (1.0 - np.sum(p * p)))


def _majority(counts: np.ndarray) -> int:
    return int(np.argmax(counts))


def fit_tree_counts(codes: np.ndarray, counts: np.ndarray, k_in: int,
                    max_depth: int | None = None) -> TreeModel:
    """Grow a tree from per-pattern class counts.

    ``codes`` are distinct pattern codes and ``counts[i]`` the class histogram
    of pattern ``codes[i]``.
    """
    codes = np.asarray(codes, dtype=np.int64)
    counts = np.asarray(counts, dtype=np.int64)
    k_out = counts.shape[1]
    feature, left, right, value, node_counts = [], [], [], [], []

    def new_node(total):
        feature.append(-1)
        left.append(-1)
        right.append(-1)
        value.append(_majority(total))
        node_counts.append(total)
        return len(feature) - 1

    root = new_node(counts.sum(axis=0))
    stack = [(root, np.arange(len(codes)), 0)]
    while stack:
        node, members, depth = stack.pop()
        total = node_counts[node]
        if len(members) <= 1 or np.count_nonzero(total) <= 1:
            continue
        if max_depth is not None and depth >= max_depth:
            continue
        parent = _gini(total)
        best = None
        for j in range(k_in):
            on = ((codes[members] >> j) & 1).astype(bool)
            if on.all() or not on.any():
                continue
            c_on = counts[members[on]].sum(axis=0)
            gain = parent - _gini(total - c_on) - _gini(c_on)
            if best is None or gain > best[0] + 1e-12:
                best = (gain, j, on)
        if best is None:
            continue
        _, j, on = best
        feature[node] = j
        l_node = new_node(counts[members[~on]].sum(axis=0))
        r_node = new_node(counts[members[on]].sum(axis=0))
        left[node], right[node] = l_node, r_node
        stack.append((r_node, members[on], depth + 1))
        stack.append((l_node, members[~on], depth + 1))

    as_arr = lambda v: np.asarray(v, dtype=np.int64)  # noqa: E731
    return TreeModel(k_in, k_out, as_arr(feature), as_arr(left), as_arr(right), as_arr(value),
                     np.asarray(node_counts, dtype=np.int64).reshape(-1, k_out),
                     int(counts.sum()))


def sample_pixels(shape, n_samples: int, rng: np.random.Generator,
                  regions: list[PatchRegion] | None = None) -> np.ndarray:
    """Flat pixel indices drawn without replacement, capped at the pool size."""
    height, width = shape[:2]
    if regions is None:
        pool = None
        n_pool = height * width
    else:
        pool = np.concatenate([(np.arange(r.y0, r.y0 + r.h)[:, None] * width
                                + np.arange(r.x0, r.x0 + r.w)[None, :]).ravel() for r in regions])
        n_pool = len(pool)
    n = min(int(n_samples), n_pool)
    if n <= 0:
        raise TrainingError("empty training sample")
    if n == n_pool:
        idx = np.arange(n_pool)
    else:
        idx = np.sort(rng.choice(n_pool, size=n, replace=False))
    return idx if pool is None else pool[idx]


def train_tree(quantized: np.ndarray, cad: np.ndarray, k_out: int = 64,
               n_samples: int = DEFAULT_SAMPLES, seed: int = 0,
               regions: list[PatchRegion] | None = None, max_depth: int | None = None,
               palette_hash: str | None = None) -> TreeModel:
    """Fit the tree on randomly sampled ``(CAD column, palette index)`` pairs."""
    cad = as_cad(cad)
    q = np.asarray(quantized)
    if q.shape != cad.shape[:2]:
        raise DimensionError(f"quantized image {q.shape} vs CAD {cad.shape[:2]}")
    if q.size and q.max() >= k_out:
        raise DataError(f"class index {int(q.max())} outside {k_out} classes")
    rng = np.random.default_rng(seed)
    idx = sample_pixels(q.shape, n_samples, rng, regions)
    codes = pattern_codes(cad.reshape(-1, cad.shape[2])[idx])
    targets = q.reshape(-1)[idx].astype(np.int64)
    uniq, inverse = np.unique(codes, return_inverse=True)
    counts = np.zeros((len(uniq), k_out), dtype=np.int64)
    np.add.at(counts, (inverse, targets), 1)
    model = fit_tree_counts(uniq, counts, cad.shape[2], max_depth)
    model.palette_hash = palette_hash
    model.meta = {"seed": int(seed), "patterns": int(len(uniq))}
    return model


def predict_tree(model: TreeModel, cad: np.ndarray, palette) -> np.ndarray:
    """RGB simulation: tree class per pixel, then palette lookup."""
    classes = model.predict_classes(cad)
    if palette.k != model.k_out:
        raise DimensionError(f"tree has {model.k_out} classes, palette {palette.k}")
    return palette.centroids[classes]
