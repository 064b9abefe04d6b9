"""Raster containers, patch addressing and dataset directory I/O.

All rasters are stored with the spatial axes first:

* photo: ``(H, W, 3)`` float64 RGB in ``[0, 1]``
* CAD stack: ``(H, W, k_in)`` int8 with values in ``{-1, +1}``
* quantized image: ``(H, W)`` uint8 palette indices
* defect mask: ``(H, W)`` int8 with values in ``{-1, +1}``

On disk, photos are 8-bit RGB PNGs, layers and labels are 1-bit PNGs encoding
``{0, 1}`` and quantized images are 8-bit grayscale PNGs.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image

from .errors import DataError, DimensionError, RegionError

DEFECT_CLASSES = ("dust", "nitride", "resist", "letters")


def as_photo(data) -> np.ndarray:
    photo = np.asarray(data, dtype=np.float64)
    if photo.ndim != 3 or photo.shape[2] != 3:
        raise DimensionError(f"photo must have shape (H, W, 3), got {photo.shape}")
    if photo.size and (photo.min() < 0.0 or photo.max() > 1.0):
        raise ValueError("photo values must lie in [0, 1]")
    return photo


def as_cad(data) -> np.ndarray:
    cad = np.asarray(data)
    if cad.ndim == 2:
        cad = cad[:, :, None]
    if cad.ndim != 3 or cad.shape[2] < 1:
        raise DimensionError(f"CAD stack must have shape (H, W, k_in), got {cad.shape}")
    if not np.all((cad == 1) | (cad == -1)):
        raise ValueError("CAD values must be exactly -1 or +1")
    return cad.astype(np.int8, copy=False)


def as_quantized(data, k: int = 64) -> np.ndarray:
    q = np.asarray(data)
    if q.ndim != 2:
        raise DimensionError(f"quantized image must be 2-D, got {q.shape}")
    if q.size and (q.min() < 0 or q.max() >= k):
        raise ValueError(f"palette indices must lie in [0, {k - 1}]")
    return q.astype(np.uint8, copy=False)


def encode_binary(values: np.ndarray) -> np.ndarray:
    """{-1, +1} -> {0, 1}."""
    return ((np.asarray(values) + 1) // 2).astype(np.uint8)


def decode_binary(bits: np.ndarray) -> np.ndarray:
    """{0, 1} -> {-1, +1}."""
    return (2 * np.asarray(bits, dtype=np.int8) - 1).astype(np.int8)


@dataclass
class DefectLabels:
    """Binary ground-truth defect mask, optionally split per defect class."""

    mask: np.ndarray
    per_class: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.int8)
        self.per_class = {k: np.asarray(v, dtype=np.int8) for k, v in self.per_class.items()}

    @classmethod
    def empty(cls, shape, classes=DEFECT_CLASSES) -> "DefectLabels":
        return cls(-np.ones(shape, np.int8), {c: -np.ones(shape, np.int8) for c in classes})

    @classmethod
    def from_classes(cls, per_class: dict[str, np.ndarray]) -> "DefectLabels":
        masks = [np.asarray(m, dtype=np.int8) for m in per_class.values()]
        mask = np.maximum.reduce(masks) if masks else None
        return cls(mask, per_class)

    @property
    def shape(self):
        return self.mask.shape

    @property
    def positive(self) -> np.ndarray:
        return self.mask > 0

    def mark(self, cls_name: str, where: np.ndarray) -> None:
        """Set ``where`` positive in the class mask and in the union mask."""
        self.mask[where] = 1
        if cls_name not in self.per_class:
            self.per_class[cls_name] = -np.ones(self.mask.shape, np.int8)
        self.per_class[cls_name][where] = 1

    def is_consistent(self) -> bool:
        if not self.per_class:
            return True
        return bool(np.array_equal(self.mask, np.maximum.reduce(list(self.per_class.values()))))

    def shifted(self, dx: int, dy: int = 0) -> "DefectLabels":
        return DefectLabels(shift_raster(self.mask, dx, dy),
                            {k: shift_raster(v, dx, dy) for k, v in self.per_class.items()})


class PatchRegion(NamedTuple):
    x0: int
    y0: int
    w: int
    h: int

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y0 + self.h), slice(self.x0, self.x0 + self.w)

    def fits(self, height: int, width: int) -> bool:
        return (self.x0 >= 0 and self.y0 >= 0 and self.w > 0 and self.h > 0
                and self.x0 + self.w <= width and self.y0 + self.h <= height)


def extract_patch(raster: np.ndarray, region: PatchRegion) -> np.ndarray:
    """Copy ``region`` out of a raster with spatial axes first."""
    height, width = raster.shape[:2]
    if not region.fits(height, width):
        raise RegionError(f"{region} does not fit inside a {height}x{width} raster")
    return raster[region.slices].copy()


def shift_raster(raster: np.ndarray, dx: int, dy: int = 0) -> np.ndarray:
    """Translate content by whole pixels, replicating the border into the gap.

    ``out[y, x] = raster[y - dy, x - dx]`` wherever the source is in bounds.
    """
    out = np.asarray(raster)
    h, w = out.shape[:2]
    ys = np.clip(np.arange(h) - dy, 0, h - 1)
    xs = np.clip(np.arange(w) - dx, 0, w - 1)
    return out[ys][:, xs].copy()


def tile_regions(height: int, width: int, patch_size: int) -> list[PatchRegion]:
    """Row-major grid of full ``patch_size`` tiles; partial edge tiles are dropped."""
    if patch_size < 1:
        raise RegionError("patch_size must be positive")
    if patch_size > height or patch_size > width:
        raise RegionError(f"patch size {patch_size} exceeds raster {height}x{width}")
    return [PatchRegion(x, y, patch_size, patch_size)
            for y in range(0, height - patch_size + 1, patch_size)
            for x in range(0, width - patch_size + 1, patch_size)]


def split_patches(shape, patch_size: int = 64, fraction: float = 0.7, seed: int = 0):
    """Randomly scatter the tile grid into train and validation regions.

    ``shape`` is ``(H, W, ...)`` or anything with a ``photo`` attribute.
    Returns ``(train, val)``, each sorted in row-major order.
    """
    if hasattr(shape, "photo"):
        shape = shape.photo.shape
    height, width = shape[:2]
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    tiles = tile_regions(height, width, patch_size)
    n_train = int(round(fraction * len(tiles)))
    order = np.random.default_rng(seed).permutation(len(tiles))
    train_idx = np.sort(order[:n_train])
    val_idx = np.sort(order[n_train:])
    return [tiles[i] for i in train_idx], [tiles[i] for i in val_idx]


# ---------------------------------------------------------------------------
# file I/O


def save_photo(path, photo: np.ndarray) -> None:
    data = np.round(as_photo(photo) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def load_photo(path) -> np.ndarray:
    with Image.open(_existing(path)) as img:
        data = np.asarray(img.convert("RGB"), dtype=np.float64)
    return data / 255.0


def save_binary(path, values: np.ndarray) -> None:
    Image.fromarray(encode_binary(values).astype(bool)).save(path)


def load_binary(path) -> np.ndarray:
    with Image.open(_existing(path)) as img:
        if img.mode == "1":
            bits = np.asarray(img, dtype=np.uint8)
        else:
            raw = np.asarray(img.convert("L"))
            values = np.unique(raw)
            if not set(values.tolist()) <= {0, 1, 255}:
                raise DataError(f"{path}: non-binary pixel values {values[:8].tolist()}")
            bits = (raw > 0).astype(np.uint8)
    return decode_binary(bits)


def save_quantized(path, q: np.ndarray) -> None:
    Image.fromarray(as_quantized(q, 256), mode="L").save(path)


def load_quantized(path, k: int = 64) -> np.ndarray:
    with Image.open(_existing(path)) as img:
        q = np.asarray(img.convert("L"))
    return as_quantized(q, k)


def _existing(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    return path


@dataclass
class DatasetManifest:
    name: str
    photo: str
    layers: list[str]
    labels: str | None = None
    label_classes: dict[str, str] = field(default_factory=dict)
    palette: str | None = None
    split_seed: int = 0
    split_fraction: float = 0.7
    root: Path = field(default=Path("."), repr=False, compare=False)

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def to_dict(self) -> dict:
        out = {"name": self.name, "photo": self.photo, "layers": list(self.layers),
               "labels": self.labels, "palette": self.palette,
               "split_seed": self.split_seed, "split_fraction": self.split_fraction}
        if self.label_classes:
            out["label_classes"] = dict(self.label_classes)
        return out

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = _existing(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid manifest ({exc})") from exc
        missing = {"name", "photo", "layers"} - raw.keys()
        if missing:
            raise DataError(f"{path}: manifest lacks {sorted(missing)}")
        return cls(name=raw["name"], photo=raw["photo"], layers=list(raw["layers"]),
                   labels=raw.get("labels"), label_classes=dict(raw.get("label_classes") or {}),
                   palette=raw.get("palette"), split_seed=int(raw.get("split_seed", 0)),
                   split_fraction=float(raw.get("split_fraction", 0.7)), root=path.parent)


@dataclass
class Dataset:
    name: str
    photo: np.ndarray
    cad: np.ndarray
    labels: DefectLabels | None = None
    manifest: DatasetManifest | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.photo.shape[:2]

    def palette_path(self) -> Path | None:
        if self.manifest is None or not self.manifest.palette:
            return None
        return self.manifest.resolve(self.manifest.palette)


def load_dataset(manifest_path) -> Dataset:
    """Load photo, CAD stack and (optional) labels referenced by a manifest."""
    manifest = DatasetManifest.read(manifest_path)
    photo = load_photo(manifest.resolve(manifest.photo))
    height, width = photo.shape[:2]

    layers = []
    for rel in manifest.layers:
        layer = load_binary(manifest.resolve(rel))
        if layer.shape != (height, width):
            raise DimensionError(f"layer {rel} is {layer.shape[0]}x{layer.shape[1]}, "
                                 f"photo is {height}x{width}")
        layers.append(layer)
    if not layers:
        raise DataError("manifest lists no CAD layers")
    cad = np.stack(layers, axis=-1)

    labels = None
    if manifest.labels and manifest.resolve(manifest.labels).is_file():
        mask = load_binary(manifest.resolve(manifest.labels))
        if mask.shape != (height, width):
            raise DimensionError(f"labels {manifest.labels} do not match photo dimensions")
        per_class = {}
        for cls_name, rel in manifest.label_classes.items():
            sub = load_binary(manifest.resolve(rel))
            if sub.shape != (height, width):
                raise DimensionError(f"label class {cls_name} does not match photo dimensions")
            per_class[cls_name] = sub
        labels = DefectLabels(mask, per_class)
    return Dataset(manifest.name, photo, cad, labels, manifest)


def write_dataset(directory, name: str, photo, cad, labels: DefectLabels | None = None,
                  split_seed: int = 0, split_fraction: float = 0.7,
                  palette: str | None = None) -> Path:
    """Write rasters plus ``manifest.json`` into ``directory``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cad = as_cad(cad)
    save_photo(directory / "photo.png", photo)
    layer_files = []
    for i in range(cad.shape[2]):
        rel = f"layer_{i}.png"
        save_binary(directory / rel, cad[:, :, i])
        layer_files.append(rel)
    label_file, class_files = None, {}
    if labels is not None:
        label_file = "labels.png"
        save_binary(directory / label_file, labels.mask)
        for cls_name, sub in labels.per_class.items():
            rel = f"labels_{cls_name}.png"
            save_binary(directory / rel, sub)
            class_files[cls_name] = rel
    manifest = DatasetManifest(name, "photo.png", layer_files, label_file, class_files,
                               palette, split_seed, split_fraction, root=directory)
    return manifest.write(directory / "manifest.json")


def default_output_root() -> Path:
    return Path(os.environ.get("GOLDENDIE_OUT", "goldendie_out"))
