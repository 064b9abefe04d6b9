"""Minimal numpy layers with explicit backward passes.

Activations are laid out channels-first *and* batch-second, ``(C, N, H, W)``,
so every convolution is a single ``(C_out, C_in*9) @ (C_in*9, N*H*W)`` GEMM
and channel concatenation is a concatenation along axis 0.

Each layer keeps the cache of its most recent training-mode forward call;
``backward`` must follow the matching ``forward``.
"""

from __future__ import annotations

import numpy as np


class Layer:
    def params(self) -> dict[str, np.ndarray]:
        return {}

    def grads(self) -> dict[str, np.ndarray]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}


def _pad_hw(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))


class Conv3x3(Layer):
    """Zero-padded 3x3 convolution, stride 1, no bias."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32):
        bound = np.sqrt(6.0 / (c_in * 9))
        self.weight = rng.uniform(-bound, bound, (c_out, c_in, 3, 3)).astype(dtype)
        self.d_weight = np.zeros_like(self.weight)
        self._cols = None
        self._shape = None

    def params(self):
        return {"weight": self.weight}

    def grads(self):
        return {"weight": self.d_weight}

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        c, n, h, w = x.shape
        xp = _pad_hw(x)
        c_out = self.weight.shape[0]
        if not train:
            # one im2col + GEMM per sample: bounded memory, and results do
            # not depend on how samples are grouped into batches
            w2 = self.weight.reshape(c_out, -1)
            out = np.empty((c_out, n, h, w), dtype=np.result_type(x, self.weight))
            cols = np.empty((c, 3, 3, h, w), dtype=x.dtype)
            for i in range(n):
                for dy in range(3):
                    for dx in range(3):
                        cols[:, dy, dx] = xp[:, i, dy:dy + h, dx:dx + w]
                out[:, i] = (w2 @ cols.reshape(c * 9, -1)).reshape(c_out, h, w)
            return out
        cols = np.empty((c, 3, 3, n, h, w), dtype=x.dtype)
        for dy in range(3):
            for dx in range(3):
                cols[:, dy, dx] = xp[:, :, dy:dy + h, dx:dx + w]
        cols = cols.reshape(c * 9, -1)
        self._cols, self._shape = cols, x.shape
        return (self.weight.reshape(c_out, -1) @ cols).reshape(c_out, n, h, w)

    def backward(self, g: np.ndarray) -> np.ndarray:
        c, n, h, w = self._shape
        c_out = self.weight.shape[0]
        g2 = g.reshape(c_out, -1)
        self.d_weight += (g2 @ self._cols.T).reshape(self.weight.shape)
        dcols = (self.weight.reshape(c_out, -1).T @ g2).reshape(c, 3, 3, n, h, w)
        dxp = np.zeros((c, n, h + 2, w + 2), dtype=g.dtype)
        for dy in range(3):
            for dx in range(3):
                dxp[:, :, dy:dy + h, dx:dx + w] += dcols[:, dy, dx]
        self._cols = None
        return dxp[:, :, 1:-1, 1:-1]


class Conv1x1(Layer):
    """Pointwise convolution with bias (the output head)."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32):
        bound = 1.0 / np.sqrt(c_in)
        self.weight = rng.uniform(-bound, bound, (c_out, c_in)).astype(dtype)
        self.bias = rng.uniform(-bound, bound, c_out).astype(dtype)
        self.d_weight = np.zeros_like(self.weight)
        self.d_bias = np.zeros_like(self.bias)
        self._x = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def grads(self):
        return {"weight": self.d_weight, "bias": self.d_bias}

    def forward(self, x, train=True):
        c, n, h, w = x.shape
        if not train:
            out = np.empty((self.weight.shape[0], n, h, w), dtype=np.result_type(x, self.weight))
            for i in range(n):
                out[:, i] = (self.weight @ x[:, i].reshape(c, -1)
                             + self.bias[:, None]).reshape(-1, h, w)
            return out
        x2 = x.reshape(c, -1)
        self._x = x2
        out = self.weight @ x2 + self.bias[:, None]
        return out.reshape(-1, n, h, w)

    def backward(self, g):
        c_out, n, h, w = g.shape
        g2 = g.reshape(c_out, -1)
        self.d_weight += g2 @ self._x.T
        self.d_bias += g2.sum(axis=1)
        dx = (self.weight.T @ g2).reshape(-1, n, h, w)
        self._x = None
        return dx


class BatchNorm(Layer):
    """Per-channel batch normalization over (N, H, W)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.gamma = np.ones(channels, dtype)
        self.beta = np.zeros(channels, dtype)
        self.d_gamma = np.zeros_like(self.gamma)
        self.d_beta = np.zeros_like(self.beta)
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)
        self.momentum = momentum
        self.eps = eps
        self.track_running_stats = True
        self._cache = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.d_gamma, "beta": self.d_beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, train=True):
        c = x.shape[0]
        if not train:
            scale = self.gamma / np.sqrt(self.running_var + self.eps)
            shift = self.beta - self.running_mean * scale
            return x * scale.reshape(c, 1, 1, 1) + shift.reshape(c, 1, 1, 1)
        m = x[0].size
        mean = x.mean(axis=(1, 2, 3))
        centered = x - mean.reshape(c, 1, 1, 1)
        var = np.mean(centered * centered, axis=(1, 2, 3))
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = centered * inv_std.reshape(c, 1, 1, 1)
        if self.track_running_stats:
            unbiased = var * m / max(m - 1, 1)
            self.running_mean *= 1 - self.momentum
            self.running_mean += self.momentum * mean
            self.running_var *= 1 - self.momentum
            self.running_var += self.momentum * unbiased
        self._cache = (xhat, inv_std)
        return xhat * self.gamma.reshape(c, 1, 1, 1) + self.beta.reshape(c, 1, 1, 1)

    def backward(self, g):
        xhat, inv_std = self._cache
        c = g.shape[0]
        m = g[0].size
        self.d_gamma += np.sum(g * xhat, axis=(1, 2, 3))
        self.d_beta += np.sum(g, axis=(1, 2, 3))
        dxhat = g * self.gamma.reshape(c, 1, 1, 1)
        s1 = dxhat.sum(axis=(1, 2, 3)).reshape(c, 1, 1, 1)
        s2 = np.sum(dxhat * xhat, axis=(1, 2, 3)).reshape(c, 1, 1, 1)
        self._cache = None
        return (inv_std.reshape(c, 1, 1, 1) / m) * (m * dxhat - s1 - xhat * s2)


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x, train=True):
        mask = x > 0
        if train:
            self._mask = mask
        return x * mask

    def backward(self, g):
        out = g * self._mask
        self._mask = None
        return out


class MaxPool2(Layer):
    """2x2 max pooling, stride 2; ties route the gradient to the first maximum."""

    def __init__(self):
        self._idx = None
        self._shape = None

    def forward(self, x, train=True):
        c, n, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"max pooling needs even spatial size, got {h}x{w}")
        windows = x.reshape(c, n, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        windows = windows.reshape(c, n, h // 2, w // 2, 4)
        idx = np.argmax(windows, axis=-1)
        if train:
            self._idx, self._shape = idx, x.shape
        return np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(self, g):
        c, n, h, w = self._shape
        windows = np.zeros((c, n, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(windows, self._idx[..., None], g[..., None], axis=-1)
        self._idx = None
        return (windows.reshape(c, n, h // 2, w // 2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5).reshape(c, n, h, w))


def bilinear_matrix(n: int, dtype=np.float64) -> np.ndarray:
    """``(2n, n)`` operator for 2x bilinear upsampling with half-pixel centers."""
    out = np.zeros((2 * n, n), dtype=dtype)
    for i in range(2 * n):
        src = max((i + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        out[i, i0] += 1.0 - frac
        out[i, i1] += frac
    return out


class Upsample2(Layer):
    """Parameter-free 2x bilinear upsampling, applied separably."""

    def __init__(self):
        self._mats = {}
        self._shape = None

    def _mat(self, n, dtype):
        key = (n, np.dtype(dtype).str)
        if key not in self._mats:
            self._mats[key] = bilinear_matrix(n, dtype)
        return self._mats[key]

    def forward(self, x, train=True):
        c, n, h, w = x.shape
        uh, uw = self._mat(h, x.dtype), self._mat(w, x.dtype)
        if train:
            self._shape = x.shape
        return np.matmul(np.matmul(uh, x), uw.T)

    def backward(self, g):
        c, n, h, w = self._shape
        uh, uw = self._mat(h, g.dtype), self._mat(w, g.dtype)
        return np.matmul(np.matmul(uh.T, g), uw)
