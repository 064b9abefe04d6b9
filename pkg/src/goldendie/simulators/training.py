"""U-Net training loop, checkpoint selection and tiled whole-wafer inference."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields

import numpy as np

from ..errors import ConfigError, DimensionError, TrainingError
from ..raster import PatchRegion, as_cad, split_patches
from .unet import CLASSIFICATION, DEFAULT_WIDTHS, LOSS_MODE, LOSSES, REGRESSION, UNet, focal_loss

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")


@dataclass
class TrainConfig:
    patch_size: int = 64
    batch_size: int = 32
    max_batch: int = 128
    variance_threshold: float = 0.0
    lr0: float = 5e-3
    decay_factor: float = 0.6
    decay_epochs: tuple = (1, 3, 5, 8)
    epochs: int = 10
    optimizer: str = "sgd"
    momentum: float = 0.0
    adam_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    widths: tuple = DEFAULT_WIDTHS
    loss: str = "cross_entropy"
    gamma: float = 2.0
    split_fraction: float = 0.7
    split_seed: int = 0
    val_batch: int = 32

    def validate(self) -> "TrainConfig":
        if self.patch_size % 8 or self.patch_size < 8:
            raise ConfigError("patch_size must be a positive multiple of 8")
        if not 1 <= self.batch_size <= self.max_batch:
            raise ConfigError(f"batch_size must lie in [1, {self.max_batch}]")
        if not 0.0 <= self.variance_threshold <= 50.0:
            raise ConfigError("variance_threshold must lie in [0, 50]")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}; choose from {sorted(LOSSES)}")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.lr0 <= 0 or self.adam_lr <= 0 or not 0 < self.decay_factor <= 1:
            raise ConfigError("learning rates must be positive and decay_factor in (0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if len(self.widths) != 4:
            raise ConfigError("widths needs four entries")
        return self

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown [train] keys: {sorted(unknown)}")
        kwargs = {}
        for key, raw in values.items():
            default = getattr(cls, key)
            if isinstance(default, tuple):
                items = raw.replace(",", " ").split() if isinstance(raw, str) else raw
                kwargs[key] = tuple(int(v) for v in items)
            elif isinstance(default, bool):
                kwargs[key] = str(raw).lower() in ("1", "true", "yes", "on")
            else:
                kwargs[key] = type(default)(raw)
        return cls(**kwargs).validate()

    @property
    def mode(self) -> str:
        return LOSS_MODE[self.loss]

    @property
    def base_lr(self) -> float:
        return self.lr0 if self.optimizer == "sgd" else self.adam_lr


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """LR used during ``epoch`` (1-based): decays after each listed epoch."""
    n_decays = sum(1 for d in config.decay_epochs if d < epoch)
    return config.base_lr * config.decay_factor ** n_decays


def lr_schedule(config: TrainConfig) -> list[float]:
    return [learning_rate(config, e) for e in range(1, config.epochs + 1)]


def patch_variance(quantized: np.ndarray, region: PatchRegion) -> float:
    """Population variance of the palette indices inside ``region``."""
    return float(np.var(quantized[region.slices].astype(np.float64)))


def variance_filter(quantized: np.ndarray, regions, threshold: float) -> list[PatchRegion]:
    """Keep regions whose quantized-target variance reaches ``threshold``."""
    return [r for r in regions if patch_variance(quantized, r) >= threshold]


@dataclass
class Checkpoint:
    """Model state after one epoch together with its validation scores."""

    epoch: int
    state: dict
    scores: dict
    mode: str
    k_in: int
    k_out: int
    widths: tuple
    loss: str = ""
    lr: float = 0.0
    train_loss: float = float("nan")
    palette_hash: str | None = None
    meta: dict = field(default_factory=dict)

    def build(self) -> UNet:
        net = UNet(self.k_in, self.mode, self.k_out, widths=self.widths)
        net.load_state(self.state)
        return net


def select_best(checkpoints, metric: str = "l2") -> Checkpoint:
    """Lowest validation ``metric``; ties go to the earliest epoch."""
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise TrainingError("no checkpoints to select from")
    if metric == "primary-loss":
        metric = "ce" if checkpoints[0].mode == CLASSIFICATION else "l2"
    best = checkpoints[0]
    for ck in checkpoints[1:]:
        if ck.scores[metric] < best.scores[metric]:
            best = ck
    return best


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, params: dict, momentum: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()} if momentum else None

    def step(self, grads: dict, lr: float) -> None:
        for name, p in self.params.items():
            g = grads[name]
            if self.velocity is not None:
                v = self.velocity[name]
                v *= self.momentum
                v += g
                g = v
            p -= lr * g


class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# batching helpers


def _cad_batch(cad: np.ndarray, regions) -> np.ndarray:
    return np.stack([cad[r.slices].transpose(2, 0, 1) for r in regions]).astype(np.float32)


def _target_batch(mode: str, photo, quantized, regions) -> np.ndarray:
    if mode == REGRESSION:
        return np.stack([photo[r.slices].transpose(2, 0, 1) for r in regions]).astype(np.float32)
    return np.stack([quantized[r.slices] for r in regions]).astype(np.intp)


def _loss_fn(config: TrainConfig):
    if config.loss == "focal":
        return lambda logits, target: focal_loss(logits, target, gamma=config.gamma)
    return LOSSES[config.loss]


def evaluate_patches(net: UNet, cad, photo, quantized, regions, palette=None,
                     batch: int = 32) -> dict:
    """Mean validation L2 (RGB) and, for classification, mean cross-entropy."""
    l2_vals, ce_vals = [], []
    for start in range(0, len(regions), batch):
        chunk = regions[start:start + batch]
        logits = net.forward(_cad_batch(cad, chunk), train=False)
        if net.mode == REGRESSION:
            rgb = np.tanh(logits.astype(np.float64)) / 2.0 + 0.5
        else:
            rgb = palette.centroids[np.argmax(logits, axis=1)].transpose(0, 3, 1, 2)
            tgt = np.stack([quantized[r.slices] for r in chunk])
            ce = focal_loss(logits, tgt, gamma=0.0, reduction="none")[0]
            ce_vals += list(ce.reshape(len(chunk), -1).mean(axis=1))
        ref = np.stack([photo[r.slices].transpose(2, 0, 1) for r in chunk])
        l2_vals += list(((rgb - ref) ** 2).reshape(len(chunk), -1).mean(axis=1))
    scores = {"l2": float(np.mean(l2_vals))}
    if ce_vals:
        scores["ce"] = float(np.mean(ce_vals))
    return scores


def train_unet(photo, cad, config: TrainConfig, quantized=None, palette=None,
               train_regions=None, val_regions=None, callback=None) -> list[Checkpoint]:
    """Train a U-Net on patches of one wafer; returns one checkpoint per epoch.

    ``quantized`` is required for classification losses and for the variance
    filter. Region lists default to the seeded patch split of the wafer.
    """
    config.validate()
    cad = as_cad(cad)
    photo = np.asarray(photo, dtype=np.float64)
    if photo.shape[:2] != cad.shape[:2]:
        raise DimensionError(f"photo {photo.shape[:2]} vs CAD {cad.shape[:2]}")
    mode = config.mode
    if mode == CLASSIFICATION and (palette is None or quantized is None):
        raise ConfigError("classification losses need a palette and a quantized target")
    if quantized is None:
        raise ConfigError("the variance filter needs the quantized target")
    if train_regions is None or val_regions is None:
        tr, va = split_patches(photo.shape, config.patch_size, config.split_fraction,
                               config.split_seed)
        train_regions = tr if train_regions is None else train_regions
        val_regions = va if val_regions is None else val_regions
    kept = variance_filter(quantized, train_regions, config.variance_threshold)
    if not kept:
        raise TrainingError(f"no training patch reaches variance {config.variance_threshold}")

    k_out = palette.k if mode == CLASSIFICATION else 3
    net = UNet(cad.shape[2], mode, k_out, widths=config.widths, seed=config.seed)
    params = net.params()
    if config.optimizer == "sgd":
        opt = SGD(params, config.momentum)
    else:
        opt = Adam(params, config.beta1, config.beta2, config.adam_eps)
    loss_fn = _loss_fn(config)
    rng = np.random.default_rng(config.seed)
    palette_hash = palette.sha256() if palette is not None and mode == CLASSIFICATION else None

    checkpoints = []
    for epoch in range(1, config.epochs + 1):
        lr = learning_rate(config, epoch)
        order = rng.permutation(len(kept))
        losses = []
        t0 = time.perf_counter()
        for start in range(0, len(order), config.batch_size):
            chunk = [kept[i] for i in order[start:start + config.batch_size]]
            x = _cad_batch(cad, chunk)
            y = _target_batch(mode, photo, quantized, chunk)
            net.zero_grad()
            loss, d_logits = loss_fn(net.forward(x, train=True), y)
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            net.backward(d_logits)
            opt.step(net.grads(), lr)
            losses.append(float(loss))
        scores = evaluate_patches(net, cad, photo, quantized, val_regions, palette,
                                  config.val_batch) if val_regions else {}
        ck = Checkpoint(epoch, net.state(), scores, mode, net.k_in, net.k_out, net.widths,
                        config.loss, lr, float(np.mean(losses)), palette_hash,
                        {"n_train": len(kept), "n_val": len(val_regions),
                         "seconds": time.perf_counter() - t0})
        checkpoints.append(ck)
        log.info("epoch %d lr %.3g loss %.4f val %s", epoch, lr, ck.train_loss, scores)
        if callback is not None:
            callback(ck)
    return checkpoints


# ---------------------------------------------------------------------------
# inference


def infer(model, cad, palette=None, tile: int = 256, batch: int = 20,
          output: str = "rgb") -> np.ndarray:
    """Whole-wafer simulation by independent ``tile`` x ``tile`` tiles.

    ``model`` is a :class:`UNet` or :class:`Checkpoint`; batch-norm uses its
    running statistics. The CAD stack is reflect-padded up to the tile grid
    and the result cropped back. ``output`` is ``"rgb"`` (``(H, W, 3)``) or
    ``"index"`` (classification only, ``(H, W)``).
    """
    net = model.build() if isinstance(model, Checkpoint) else model
    if tile % 8:
        raise ConfigError("tile must be a multiple of 8")
    if batch < 1:
        raise ConfigError("batch must be positive")
    if output not in ("rgb", "index"):
        raise ConfigError(f"unknown output {output!r}")
    if net.mode == CLASSIFICATION and output == "rgb" and palette is None:
        raise ConfigError("classification output needs a palette")
    if output == "index" and net.mode != CLASSIFICATION:
        raise ConfigError("index output needs a classification model")
    cad = as_cad(cad)
    if cad.shape[2] != net.k_in:
        raise DimensionError(f"model expects {net.k_in} layers, got {cad.shape[2]}")
    h, w = cad.shape[:2]
    ph, pw = -h % tile, -w % tile
    padded = np.pad(cad, ((0, ph), (0, pw), (0, 0)), mode="reflect") if ph or pw else cad
    tiles = [PatchRegion(x, y, tile, tile) for y in range(0, h + ph, tile)
             for x in range(0, w + pw, tile)]
    shape = (h + ph, w + pw) + ((3,) if output == "rgb" else ())
    out = np.empty(shape, dtype=np.float64 if output == "rgb" else np.uint8)
    for start in range(0, len(tiles), batch):
        chunk = tiles[start:start + batch]
        logits = net.forward(_cad_batch(padded, chunk), train=False)
        if net.mode == REGRESSION:
            vals = (np.tanh(logits.astype(np.float64)) / 2.0 + 0.5).transpose(0, 2, 3, 1)
        else:
            idx = np.argmax(logits, axis=1)
            vals = palette.centroids[idx] if output == "rgb" else idx
        for r, v in zip(chunk, vals):
            out[r.slices] = v
    return out[:h, :w]
