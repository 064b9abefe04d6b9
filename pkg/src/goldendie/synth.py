"""Procedural synthetic wafers with pixel-perfect defect labels.

Layout grammar
--------------
A square canvas carries five CAD layers:

0. ``trace``   Manhattan waveguide polylines, 10-20 px wide
1. ``metal``   rectangular contact pads, often attached to a trace end
2. ``text``    labels drawn with a 5x7 bitmap font at 2x or 3x scale
3. ``etch``    large etched fields
4. ``opening`` windows cut into metal pads

The clean render colors each pixel from its CAD column vector by layer
priority (text > metal > trace > etch > substrate), with one exception that
no per-pixel model can learn: trace pixels within ``border_px`` of a
non-trace pixel take a darker border color.

Defects are painted onto the clean render and recorded in per-class masks:
dark dust speckles, bright nitride blobs, ragged mid-tone resist particles,
and burned letters (whole glyph boxes tinted). Counts are Poisson with the
configured per-megapixel rate. Gaussian noise is added last and is shared
by the defective and defect-free renders of the same seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .raster import DEFECT_CLASSES, DefectLabels, PatchRegion, shift_raster

LAYER_NAMES = ("trace", "metal", "text", "etch", "opening")
MIN_SIZE = 256

SUBSTRATE = (0.52, 0.47, 0.58)
ETCH = (0.36, 0.34, 0.46)
TRACE = (0.72, 0.70, 0.76)
TRACE_BORDER = (0.30, 0.26, 0.34)
METAL = (0.80, 0.66, 0.34)
METAL_OPENING = (0.62, 0.50, 0.28)
OPENING = (0.45, 0.42, 0.40)
TEXT = (0.86, 0.85, 0.82)

DUST = (0.10, 0.09, 0.08)
NITRIDE = (0.93, 0.93, 0.80)
RESIST = (0.42, 0.28, 0.18)
BURN = (0.22, 0.12, 0.06)

_FONT = {
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11110", "00001", "00001", "01110", "00001", "00001", "11110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
    "A": ("01110", "10001", "10001", "11111", "10001", "10001", "10001"),
    "B": ("11110", "10001", "10001", "11110", "10001", "10001", "11110"),
    "C": ("01110", "10001", "10000", "10000", "10000", "10001", "01110"),
    "D": ("11100", "10010", "10001", "10001", "10001", "10010", "11100"),
    "E": ("11111", "10000", "10000", "11110", "10000", "10000", "11111"),
    "F": ("11111", "10000", "10000", "11110", "10000", "10000", "10000"),
    "G": ("01110", "10001", "10000", "10111", "10001", "10001", "01111"),
    "H": ("10001", "10001", "10001", "11111", "10001", "10001", "10001"),
    "I": ("01110", "00100", "00100", "00100", "00100", "00100", "01110"),
    "K": ("10001", "10010", "10100", "11000", "10100", "10010", "10001"),
    "L": ("10000", "10000", "10000", "10000", "10000", "10000", "11111"),
    "M": ("10001", "11011", "10101", "10101", "10001", "10001", "10001"),
    "N": ("10001", "10001", "11001", "10101", "10011", "10001", "10001"),
    "P": ("11110", "10001", "10001", "11110", "10000", "10000", "10000"),
    "R": ("11110", "10001", "10001", "11110", "10100", "10010", "10001"),
    "S": ("01111", "10000", "10000", "01110", "00001", "00001", "11110"),
    "T": ("11111", "00100", "00100", "00100", "00100", "00100", "00100"),
    "U": ("10001", "10001", "10001", "10001", "10001", "10001", "01110"),
    "W": ("10001", "10001", "10001", "10101", "10101", "10101", "01010"),
    "X": ("10001", "10001", "01010", "00100", "01010", "10001", "10001"),
}
_GLYPHS = {ch: np.array([[c == "1" for c in row] for row in rows]) for ch, rows in _FONT.items()}
_ALPHABET = "".join(_FONT)


@dataclass
class SynthConfig:
    size: int = 1024
    seed: int = 0
    rate_dust: float = 8.0
    rate_nitride: float = 8.0
    rate_resist: float = 8.0
    letter_defect_fraction: float = 0.2
    noise_sigma: float = 0.02
    misalignment_px: int = 0
    border_px: int = 1
    trace_density: float = 45.0
    pad_density: float = 30.0
    label_density: float = 25.0
    etch_density: float = 6.0

    def validate(self) -> "SynthConfig":
        if self.size < MIN_SIZE:
            raise ConfigError(f"size must be at least {MIN_SIZE}, got {self.size}")
        for name in ("rate_dust", "rate_nitride", "rate_resist", "noise_sigma",
                     "trace_density", "pad_density", "label_density", "etch_density"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0.0 <= self.letter_defect_fraction <= 1.0:
            raise ConfigError("letter_defect_fraction must lie in [0, 1]")
        if self.border_px < 0:
            raise ConfigError("border_px must be non-negative")
        return self

    @classmethod
    def from_mapping(cls, values: dict) -> "SynthConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigError(f"unknown [synth] keys: {sorted(unknown)}")
        kwargs = {}
        for key, raw in values.items():
            default = getattr(cls, key)
            kwargs[key] = type(default)(raw)
        return cls(**kwargs).validate()

    def megapixels(self) -> float:
        return self.size * self.size / 1e6


@dataclass
class SynthScene:
    """Component geometry, one boolean mask per CAD layer plus glyph boxes."""

    size: int
    layers: dict[str, np.ndarray]
    glyph_boxes: list[PatchRegion] = field(default_factory=list)
    components: dict[str, int] = field(default_factory=dict)

    def cad(self) -> np.ndarray:
        stack = np.stack([self.layers[name] for name in LAYER_NAMES], axis=-1)
        return np.where(stack, 1, -1).astype(np.int8)


@dataclass
class SceneReport:
    size: int
    seed: int
    defects: dict[str, int]
    glyphs: int
    misalignment_px: int = 0

    def __str__(self) -> str:
        parts = ", ".join(f"{k}={v}" for k, v in self.defects.items())
        return (f"synthetic wafer {self.size}x{self.size} seed={self.seed}: "
                f"{self.glyphs} glyphs; defects {parts}; misalignment {self.misalignment_px}px")


@dataclass
class SynthResult:
    photo: np.ndarray
    cad: np.ndarray
    labels: DefectLabels
    report: SceneReport
    golden: np.ndarray
    scene: SynthScene

    def __iter__(self):
        return iter((self.photo, self.cad, self.labels, self.report))


# ---------------------------------------------------------------------------
# layout


def _rect(mask, x0, y0, w, h):
    s = mask.shape[0]
    x1, y1 = min(s, int(x0 + w)), min(s, int(y0 + h))
    x0, y0 = max(0, int(x0)), max(0, int(y0))
    if x1 > x0 and y1 > y0:
        mask[y0:y1, x0:x1] = True
    return x0, y0, x1, y1


def build_scene(config: SynthConfig, rng: np.random.Generator) -> SynthScene:
    s = config.size
    mp = config.megapixels()
    layers = {name: np.zeros((s, s), bool) for name in LAYER_NAMES}
    counts = {}

    n_etch = rng.poisson(config.etch_density * mp)
    for _ in range(n_etch):
        w, h = rng.integers(60, 260, size=2)
        _rect(layers["etch"], rng.integers(-w // 2, s), rng.integers(-h // 2, s), w, h)
    counts["etch"] = int(n_etch)

    ends = []
    n_traces = rng.poisson(config.trace_density * mp)
    for _ in range(n_traces):
        width = int(rng.integers(10, 21))
        x, y = rng.integers(0, s, size=2)
        horizontal = bool(rng.integers(2))
        for _ in range(int(rng.integers(1, 4))):
            length = int(rng.integers(40, 300)) * (1 if rng.random() < 0.5 else -1)
            if horizontal:
                x1 = int(np.clip(x + length, 0, s - 1))
                _rect(layers["trace"], min(x, x1), y - width // 2, abs(x1 - x) + width, width)
                x = x1
            else:
                y1 = int(np.clip(y + length, 0, s - 1))
                _rect(layers["trace"], x - width // 2, min(y, y1), width, abs(y1 - y) + width)
                y = y1
            horizontal = not horizontal
        ends.append((x, y))
    counts["trace"] = int(n_traces)

    n_pads = rng.poisson(config.pad_density * mp)
    for i in range(n_pads):
        w, h = rng.integers(24, 72, size=2)
        if ends and rng.random() < 0.5:
            cx, cy = ends[int(rng.integers(len(ends)))]
        else:
            cx, cy = rng.integers(0, s, size=2)
        x0, y0, x1, y1 = _rect(layers["metal"], cx - w // 2, cy - h // 2, w, h)
        margin = int(rng.integers(5, 9))
        if rng.random() < 0.6 and x1 - x0 > 2 * margin + 4 and y1 - y0 > 2 * margin + 4:
            _rect(layers["opening"], x0 + margin, y0 + margin,
                  x1 - x0 - 2 * margin, y1 - y0 - 2 * margin)
    counts["pad"] = int(n_pads)

    glyph_boxes = []
    n_labels = rng.poisson(config.label_density * mp)
    for _ in range(n_labels):
        scale = int(rng.integers(2, 4))
        text = "".join(rng.choice(list(_ALPHABET), size=int(rng.integers(3, 8))))
        gw, gh = 5 * scale, 7 * scale
        advance = gw + scale
        total = advance * len(text)
        if total >= s or gh >= s:
            continue
        x = int(rng.integers(0, s - total))
        y = int(rng.integers(0, s - gh))
        for j, ch in enumerate(text):
            gx = x + j * advance
            bitmap = np.kron(_GLYPHS[ch], np.ones((scale, scale), bool))
            layers["text"][y:y + gh, gx:gx + gw] |= bitmap
            glyph_boxes.append(PatchRegion(gx, y, gw, gh))
    counts["label"] = int(n_labels)
    return SynthScene(s, layers, glyph_boxes, counts)


def render(scene: SynthScene, border_px: int = 1) -> np.ndarray:
    """Defect-free, noise-free photo of a scene."""
    s = scene.size
    img = np.empty((s, s, 3))
    img[:] = SUBSTRATE
    L = scene.layers
    img[L["etch"]] = ETCH
    img[L["opening"] & ~L["metal"]] = OPENING
    img[L["trace"]] = TRACE
    if border_px > 0:
        core = ndimage.binary_erosion(L["trace"], structure=np.ones((3, 3), bool),
                                      iterations=border_px, border_value=1)
        img[L["trace"] & ~core] = TRACE_BORDER
    img[L["metal"]] = METAL
    img[L["metal"] & L["opening"]] = METAL_OPENING
    img[L["text"]] = TEXT
    return img


# ---------------------------------------------------------------------------
# defects


def _paint(photo, labels, cls_name, ys, xs, color, rng, mottle=0.02):
    s = photo.shape[0]
    keep = (ys >= 0) & (ys < s) & (xs >= 0) & (xs < s)
    ys, xs = ys[keep], xs[keep]
    if len(ys) == 0:
        return
    shade = np.asarray(color) + rng.uniform(-mottle, mottle, size=(len(ys), 3))
    photo[ys, xs] = np.clip(shade, 0.0, 1.0)
    where = np.zeros(labels.shape, bool)
    where[ys, xs] = True
    labels.mark(cls_name, where)


def _blob(radius: float, harmonics: int, amplitude: float, rng) -> np.ndarray:
    """Boolean star-shaped blob with a randomly perturbed radius profile."""
    r_max = int(np.ceil(radius * (1 + amplitude))) + 1
    yy, xx = np.mgrid[-r_max:r_max + 1, -r_max:r_max + 1]
    theta = np.arctan2(yy, xx)
    profile = np.ones_like(theta)
    for k in range(2, harmonics + 1):
        profile += rng.uniform(0, amplitude / (k - 1) ** 0.5) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    mask = np.hypot(yy, xx) <= radius * profile
    mask[r_max, r_max] = True
    return mask


def inject_dust(photo, labels: DefectLabels, count: int, rng):
    """Point-like dark speckles covering 1-16 px each."""
    s = photo.shape[0]
    for _ in range(int(count)):
        side = int(rng.integers(1, 5))
        y0, x0 = rng.integers(0, s, size=2)
        cells = rng.random((side, side)) < 0.75
        cells[rng.integers(side), rng.integers(side)] = True
        ys, xs = np.nonzero(cells)
        _paint(photo, labels, "dust", ys + y0, xs + x0, DUST, rng, mottle=0.03)
    return photo, labels


def inject_nitride(photo, labels: DefectLabels, count: int, rng):
    """Irregular bright blobs, 8-40 px across."""
    s = photo.shape[0]
    for _ in range(int(count)):
        mask = _blob(rng.uniform(4, 20), 4, 0.25, rng)
        c = mask.shape[0] // 2
        y0, x0 = rng.integers(0, s, size=2)
        ys, xs = np.nonzero(mask)
        _paint(photo, labels, "nitride", ys - c + y0, xs - c + x0, NITRIDE, rng)
    return photo, labels


def inject_resist(photo, labels: DefectLabels, count: int, rng):
    """Mid-tone particles with a ragged boundary."""
    s = photo.shape[0]
    for _ in range(int(count)):
        mask = _blob(rng.uniform(3, 10), 9, 0.45, rng)
        edge = mask & ~ndimage.binary_erosion(mask)
        mask &= ~(edge & (rng.random(mask.shape) < 0.4))
        c = mask.shape[0] // 2
        mask[c, c] = True
        y0, x0 = rng.integers(0, s, size=2)
        ys, xs = np.nonzero(mask)
        _paint(photo, labels, "resist", ys - c + y0, xs - c + x0, RESIST, rng, mottle=0.04)
    return photo, labels


def burn_letters(photo, labels: DefectLabels, scene: SynthScene, fraction: float, rng):
    """Tint a ``fraction`` share of glyph boxes toward a burnt color."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError("fraction must lie in [0, 1]")
    n_glyphs = len(scene.glyph_boxes)
    n_burn = int(np.floor(fraction * n_glyphs + 0.5))
    chosen = rng.choice(n_glyphs, size=n_burn, replace=False) if n_burn else []
    for idx in sorted(int(i) for i in chosen):
        box = scene.glyph_boxes[idx]
        sl = box.slices
        alpha = rng.uniform(0.45, 0.75, size=(box.h, box.w, 1))
        photo[sl] = (1 - alpha) * photo[sl] + alpha * np.asarray(BURN)
        where = np.zeros(labels.shape, bool)
        where[sl] = True
        labels.mark("letters", where)
    return photo, labels


# ---------------------------------------------------------------------------


def _streams(seed: int):
    layout_ss, noise_ss, *defect_ss = np.random.SeedSequence(seed).spawn(6)
    return layout_ss, noise_ss, defect_ss


def _defect_streams(config: SynthConfig, defect_ss):
    for cls_name, ss in zip(DEFECT_CLASSES[:3], defect_ss):
        yield cls_name, np.random.default_rng(ss)


def _draw_count(config: SynthConfig, cls_name: str, rng) -> int:
    rate = getattr(config, f"rate_{cls_name}")
    return int(rng.poisson(rate * config.megapixels()))


def defect_counts(config: SynthConfig) -> dict[str, int]:
    """Poisson defect counts ``generate`` would realize, without rendering."""
    _, _, defect_ss = _streams(config.seed)
    return {name: _draw_count(config, name, rng) for name, rng in _defect_streams(config, defect_ss)}


def generate(config: SynthConfig) -> SynthResult:
    """Render a synthetic wafer: photo, 5-layer CAD stack and defect labels.

    Unpacks as ``photo, cad, labels, report``; the noise-free defect-free
    render aligned with the CAD stack is available as ``.golden``.
    """
    config.validate()
    layout_ss, noise_ss, defect_ss = _streams(config.seed)
    scene = build_scene(config, np.random.default_rng(layout_ss))
    golden = render(scene, config.border_px)

    photo = golden.copy()
    labels = DefectLabels.empty(golden.shape[:2])
    injectors = {"dust": inject_dust, "nitride": inject_nitride, "resist": inject_resist}
    realized = {}
    for cls_name, rng in _defect_streams(config, defect_ss):
        count = _draw_count(config, cls_name, rng)
        injectors[cls_name](photo, labels, count, rng)
        realized[cls_name] = count
    burn_letters(photo, labels, scene, config.letter_defect_fraction,
                 np.random.default_rng(defect_ss[3]))
    realized["letters"] = int(np.floor(config.letter_defect_fraction * len(scene.glyph_boxes) + 0.5))

    if config.noise_sigma > 0:
        noise = np.random.default_rng(noise_ss).normal(0.0, config.noise_sigma, photo.shape)
        photo = np.clip(photo + noise, 0.0, 1.0)
    if config.misalignment_px:
        photo = shift_raster(photo, config.misalignment_px, 0)
        labels = labels.shifted(config.misalignment_px, 0)

    report = SceneReport(config.size, config.seed, realized, len(scene.glyph_boxes),
                         config.misalignment_px)
    return SynthResult(photo, scene.cad(), labels, report, golden, scene)
