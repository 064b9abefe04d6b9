"""U-Net simulator: CAD layers in, RGB or palette-class logits out."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, DimensionError
from .layers import BatchNorm, Conv1x1, Conv3x3, MaxPool2, ReLU, Upsample2

REGRESSION = "regression"
CLASSIFICATION = "classification"
DEFAULT_WIDTHS = (16, 32, 64, 128)


class DoubleConv:
    """(conv3x3 -> BN -> ReLU) x 2."""

    def __init__(self, c_in, c_out, rng, dtype):
        self.layers = [Conv3x3(c_in, c_out, rng, dtype), BatchNorm(c_out, dtype=dtype), ReLU(),
                       Conv3x3(c_out, c_out, rng, dtype), BatchNorm(c_out, dtype=dtype), ReLU()]
        self.names = ["conv1", "bn1", "relu1", "conv2", "bn2", "relu2"]

    def forward(self, x, train):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


class UNet:
    """Three-level U-Net with zero-padded convs and bilinear upsampling.

    ``widths`` gives the channel count of the three encoder stages and the
    bottleneck; decoder stages mirror the encoder.
    """

    def __init__(self, k_in: int, mode: str = CLASSIFICATION, k_out: int | None = None,
                 widths=DEFAULT_WIDTHS, seed: int = 0, dtype=np.float32):
        if mode not in (REGRESSION, CLASSIFICATION):
            raise ConfigError(f"unknown mode {mode!r}")
        if len(widths) != 4:
            raise ConfigError("widths must list 3 encoder stages and the bottleneck")
        if k_out is None:
            k_out = 3 if mode == REGRESSION else 64
        if mode == REGRESSION and k_out != 3:
            raise ConfigError("regression mode predicts exactly 3 channels")
        self.k_in, self.k_out, self.mode = int(k_in), int(k_out), mode
        self.widths = tuple(int(w) for w in widths)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        w1, w2, w3, wb = self.widths

        self.enc = [DoubleConv(k_in, w1, rng, dtype), DoubleConv(w1, w2, rng, dtype),
                    DoubleConv(w2, w3, rng, dtype)]
        self.pools = [MaxPool2() for _ in range(3)]
        self.bottleneck = DoubleConv(w3, wb, rng, dtype)
        self.ups = [Upsample2() for _ in range(3)]
        self.dec = [DoubleConv(wb + w3, w3, rng, dtype), DoubleConv(w3 + w2, w2, rng, dtype),
                    DoubleConv(w2 + w1, w1, rng, dtype)]
        self.head = Conv1x1(w1, k_out, rng, dtype)
        self._skip_channels = None

    # -- parameter access -------------------------------------------------

    def _named_layers(self):
        blocks = [(f"enc{i + 1}", b) for i, b in enumerate(self.enc)]
        blocks.append(("bottleneck", self.bottleneck))
        blocks += [(f"dec{3 - i}", b) for i, b in enumerate(self.dec)]
        for prefix, block in blocks:
            for name, layer in zip(block.names, block.layers):
                yield f"{prefix}.{name}", layer
        yield "head", self.head

    def params(self) -> dict[str, np.ndarray]:
        return {f"{p}.{k}": v for p, layer in self._named_layers() for k, v in layer.params().items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {f"{p}.{k}": v for p, layer in self._named_layers() for k, v in layer.grads().items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{p}.{k}": v for p, layer in self._named_layers() for k, v in layer.buffers().items()}

    def state(self) -> dict[str, np.ndarray]:
        """Copies of all parameters and running statistics."""
        out = {k: v.copy() for k, v in self.params().items()}
        out.update({k: v.copy() for k, v in self.buffers().items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        targets = {**self.params(), **self.buffers()}
        missing = set(targets) - set(state)
        if missing:
            raise KeyError(f"state lacks tensors: {sorted(missing)[:5]}")
        for name, arr in targets.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise DimensionError(f"{name}: expected {arr.shape}, got {src.shape}")
            arr[...] = src

    def zero_grad(self) -> None:
        for g in self.grads().values():
            g[...] = 0

    def set_bn_tracking(self, enabled: bool) -> None:
        for _, layer in self._named_layers():
            if isinstance(layer, BatchNorm):
                layer.track_running_stats = enabled

    def n_params(self) -> int:
        return sum(v.size for v in self.params().values())

    # -- forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """``(N, k_in, h, w)`` CAD batch -> ``(N, k_out, h, w)`` logits.

        ``train=True`` normalizes with batch statistics and caches activations
        for :meth:`backward`; ``train=False`` uses running statistics.
        """
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        n, c, h, w = x.shape
        if c != self.k_in:
            raise DimensionError(f"expected {self.k_in} input layers, got {c}")
        if h % 8 or w % 8:
            raise DimensionError(f"spatial size {h}x{w} must be divisible by 8")
        a = np.ascontiguousarray(x.transpose(1, 0, 2, 3), dtype=self.dtype)
        skips = []
        for block, pool in zip(self.enc, self.pools):
            a = block.forward(a, train)
            skips.append(a)
            a = pool.forward(a, train)
        a = self.bottleneck.forward(a, train)
        self._skip_channels = []
        for block, up, skip in zip(self.dec, self.ups, reversed(skips)):
            a = up.forward(a, train)
            self._skip_channels.append(a.shape[0])
            a = block.forward(np.concatenate([a, skip], axis=0), train)
        out = self.head.forward(a, train)
        return out.transpose(1, 0, 2, 3)

    def backward(self, d_logits: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; returns the gradient w.r.t. the input."""
        g = np.ascontiguousarray(np.asarray(d_logits, self.dtype).transpose(1, 0, 2, 3))
        g = self.head.backward(g)
        d_skips = []
        for block, up, n_up in zip(reversed(self.dec), reversed(self.ups),
                                   reversed(self._skip_channels)):
            g = block.backward(g)
            d_skips.append(g[n_up:])
            g = up.backward(g[:n_up])
        g = self.bottleneck.backward(g)
        for block, pool, d_skip in zip(reversed(self.enc), reversed(self.pools), reversed(d_skips)):
            g = pool.backward(g) + d_skip
            g = block.backward(g)
        return g.transpose(1, 0, 2, 3)


# ---------------------------------------------------------------------------
# output mapping and losses


def to_rgb(logits: np.ndarray, mode: str, palette=None, channel_axis: int = 1) -> np.ndarray:
    """Map logits to RGB in [0, 1], channels last.

    Regression applies ``tanh(x) / 2 + 0.5``; classification looks up the
    palette color of the arg-max class (ties to the lowest index).
    """
    logits = np.asarray(logits)
    if mode == REGRESSION:
        if logits.shape[channel_axis] != 3:
            raise DimensionError("regression logits need 3 channels")
        rgb = np.tanh(logits.astype(np.float64)) / 2.0 + 0.5
        return np.moveaxis(rgb, channel_axis, -1)
    if mode == CLASSIFICATION:
        if palette is None:
            raise ConfigError("classification output needs a palette")
        idx = np.argmax(logits, axis=channel_axis)
        if logits.shape[channel_axis] != palette.k:
            raise DimensionError(f"{logits.shape[channel_axis]} classes vs {palette.k}-color palette")
        return palette.centroids[idx]
    raise ConfigError(f"unknown mode {mode!r}")


def log_softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def l2_loss(logits: np.ndarray, target_rgb: np.ndarray, reduction: str = "mean"):
    """Mean squared error of the tanh-scaled output; target is ``(N, 3, h, w)``.

    ``reduction="none"`` returns the per-element squared errors and no
    gradient.
    """
    t = np.tanh(logits)
    pred = t / 2.0 + 0.5
    diff = pred - target_rgb
    if reduction == "none":
        return diff * diff, None
    loss = np.mean(diff * diff)
    grad = (2.0 / diff.size) * diff * (1.0 - t * t) / 2.0
    return loss, grad.astype(logits.dtype, copy=False)


def cross_entropy_loss(logits: np.ndarray, target: np.ndarray, reduction: str = "mean"):
    """Mean pixel cross-entropy; ``target`` holds class indices ``(N, h, w)``."""
    return focal_loss(logits, target, gamma=0.0, reduction=reduction)


def focal_loss(logits: np.ndarray, target: np.ndarray, gamma: float = 2.0, alpha: float = 1.0,
               reduction: str = "mean"):
    """Mean pixel focal loss ``-alpha (1 - p_t)^gamma log p_t`` and its logit gradient.

    ``reduction="none"`` returns per-pixel losses and no gradient. Losses
    are returned as numpy scalars in at least float64 so extended
    precision inputs keep their precision.
    """
    target = np.asarray(target, dtype=np.intp)
    k = logits.shape[1]
    if target.size and target.max() >= k:
        raise ValueError(f"target index {target.max()} outside {k} classes")
    logp = log_softmax(logits.astype(np.promote_types(logits.dtype, np.float64)), axis=1)
    logpt = np.take_along_axis(logp, target[:, None], axis=1)[:, 0]
    pt = np.exp(logpt)
    loss = -alpha * logpt if gamma == 0.0 else -alpha * np.clip(1.0 - pt, 0.0, None) ** gamma * logpt
    if reduction != "mean":
        return loss, None
    p = np.exp(logp)
    m = target.size
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, target[:, None], 1.0, axis=1)
    if gamma == 0.0:
        grad = alpha * (p - onehot) / m
    else:
        one_minus = np.clip(1.0 - pt, 0.0, None)
        weight = one_minus ** gamma
        # dL/dpt, then chain through dpt/dz_j = pt (delta_tj - p_j)
        dl_dpt = alpha * (gamma * one_minus ** (gamma - 1.0) * logpt - weight / pt)
        grad = (dl_dpt * pt)[:, None] * (onehot - p) / m
    return np.mean(loss), grad.astype(logits.dtype, copy=False)


LOSSES = {"l2": l2_loss, "cross_entropy": cross_entropy_loss, "focal": focal_loss}
LOSS_MODE = {"l2": REGRESSION, "cross_entropy": CLASSIFICATION, "focal": CLASSIFICATION}
