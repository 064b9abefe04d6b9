"""Finite-difference gradient check for the U-Net.

The check uses its own functional forward pass, written independently of
the layer classes. Every op broadcasts over an optional leading
*perturbation* axis, so a whole chunk of perturbed parameter copies runs in
one vectorized call. Activations only gain that axis after the first
perturbed tensor, which also skips recomputing the unchanged prefix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import bilinear_matrix
from .unet import LOSSES, LOSS_MODE, UNet

BN_EPS = 1e-5


def _conv3x3(a, w):
    h, wd = a.shape[-2:]
    pad = [(0, 0)] * (a.ndim - 2) + [(1, 1), (1, 1)]
    ap = np.pad(a, pad)
    cols = np.stack([ap[..., dy:dy + h, dx:dx + wd] for dy in range(3) for dx in range(3)], axis=-4)
    lead, c_in, n = cols.shape[:-5], cols.shape[-5], cols.shape[-3]
    cols = cols.reshape(lead + (c_in * 9, n * h * wd))
    c_out = w.shape[-4]
    out = w.reshape(w.shape[:-4] + (c_out, c_in * 9)) @ cols
    return out.reshape(out.shape[:-1] + (n, h, wd))


def _bn(a, gamma, beta):
    mean = a.mean(axis=(-3, -2, -1), keepdims=True)
    var = ((a - mean) ** 2).mean(axis=(-3, -2, -1), keepdims=True)
    xhat = (a - mean) / np.sqrt(var + BN_EPS)
    return xhat * gamma[..., None, None, None] + beta[..., None, None, None]


def _pool(a):
    *lead, c, n, h, w = a.shape
    return a.reshape(tuple(lead) + (c, n, h // 2, 2, w // 2, 2)).max(axis=(-3, -1))


def _up(a):
    uh = bilinear_matrix(a.shape[-2], a.dtype)
    uw = bilinear_matrix(a.shape[-1], a.dtype)
    return uh @ a @ uw.T


def _cat(a, b):
    lead = np.broadcast_shapes(a.shape[:-4], b.shape[:-4])
    a = np.broadcast_to(a, lead + a.shape[-4:])
    b = np.broadcast_to(b, lead + b.shape[-4:])
    return np.concatenate([a, b], axis=-4)


def _double(a, p, prefix):
    for i in (1, 2):
        a = _conv3x3(a, p[f"{prefix}.conv{i}.weight"])
        a = np.maximum(_bn(a, p[f"{prefix}.bn{i}.gamma"], p[f"{prefix}.bn{i}.beta"]), 0)
    return a


def functional_forward(params: dict, x: np.ndarray) -> np.ndarray:
    """Training-mode U-Net forward from a parameter dict.

    ``x`` is ``(N, C, H, W)``. Any parameter may carry an extra leading axis
    of size ``P``; the result is then ``(P, N, k_out, H, W)``.
    """
    a = np.ascontiguousarray(np.swapaxes(x, 0, 1))
    skips = []
    for i in (1, 2, 3):
        a = _double(a, params, f"enc{i}")
        skips.append(a)
        a = _pool(a)
    a = _double(a, params, "bottleneck")
    for i, skip in zip((3, 2, 1), reversed(skips)):
        a = _double(_cat(_up(a), skip), params, f"dec{i}")
    w, b = params["head.weight"], params["head.bias"]
    c, n, h, wd = a.shape[-4:]
    out = w @ a.reshape(a.shape[:-4] + (c, n * h * wd)) + b[..., :, None]
    out = out.reshape(out.shape[:-1] + (n, h, wd))
    return np.swapaxes(out, -4, -3)


def loss_increment(loss: str, z0: np.ndarray, delta: np.ndarray, target, gamma: float = 2.0):
    """Per-copy mean of ``loss(z0 + delta) - loss(z0)`` without cancellation.

    ``z0`` is ``(N, K, H, W)`` and ``delta`` ``(P, N, K, H, W)``. The
    increment is expanded algebraically (``log1p``/``expm1``) so that plain
    float64 resolves changes far below the loss value itself.
    """
    z0 = np.asarray(z0, np.float64)
    delta = np.asarray(delta, np.float64)
    if loss == "l2":
        t0 = np.tanh(z0)
        tb = np.tanh(delta)
        # tanh(a + b) - tanh(a) = tanh(b) (1 - tanh(a)^2) / (1 + tanh(a) tanh(b))
        d = 0.5 * tb * (1.0 - t0 * t0) / (1.0 + t0 * tb)
        e0 = t0 / 2.0 + 0.5 - target
        inc = d * (2.0 * e0 + d)
        return inc.reshape(len(delta), -1).mean(axis=1)
    tgt = np.asarray(target, np.intp)[:, None]
    logp0 = z0 - z0.max(axis=1, keepdims=True)
    logp0 = logp0 - np.log(np.exp(logp0).sum(axis=1, keepdims=True))
    p0 = np.exp(logp0)
    d_lse = np.log1p(np.sum(p0 * np.expm1(delta), axis=2))
    d_logpt = np.take_along_axis(delta, np.broadcast_to(tgt, delta.shape[:1] + tgt.shape), axis=2)[:, :, 0] - d_lse
    if loss == "cross_entropy":
        inc = -d_logpt
    else:
        logpt0 = np.take_along_axis(logp0, tgt, axis=1)[:, 0]
        pt0 = np.exp(logpt0)
        q0 = 1.0 - pt0
        dq = -pt0 * np.expm1(d_logpt)
        w0 = q0 ** gamma
        dw = w0 * np.expm1(gamma * np.log1p(dq / q0))
        inc = -((w0 + dw) * d_logpt + dw * logpt0)
    return inc.reshape(len(delta), -1).mean(axis=1)


@dataclass
class GradCheckResult:
    loss: str
    max_rel_error: float
    max_abs_error: float
    worst_param: str
    n_params: int
    per_tensor: dict

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic, numeric, floor: float = 0.0):
    """``|a - n| / max(|a|, |n|, floor)``, with ``0/0`` read as 0."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    diff = np.abs(analytic - numeric)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(diff == 0, 0.0, diff / scale)


def numeric_gradients(net: UNet, x, target, loss: str, h: float = 1e-5,
                      chunk: int = 256, dtype=np.longdouble) -> dict:
    """Central differences of the loss for every scalar parameter.

    The forward runs in ``dtype`` (extended precision by default); loss
    changes are evaluated with :func:`loss_increment`.
    """
    base = {k: v.astype(dtype) for k, v in net.params().items()}
    x = np.asarray(x, dtype)
    z0 = functional_forward(base, x)
    out = {}
    for name, p in base.items():
        flat = p.ravel()
        g = np.empty(flat.size, dtype=np.float64)
        for start in range(0, flat.size, chunk):
            idx = np.arange(start, min(start + chunk, flat.size))
            vals = []
            for sign in (1.0, -1.0):
                stack = np.repeat(flat[None], len(idx), axis=0)
                stack[np.arange(len(idx)), idx] += sign * h
                params = dict(base)
                params[name] = stack.reshape((len(idx),) + p.shape)
                delta = functional_forward(params, x) - z0
                vals.append(loss_increment(loss, z0, delta, target))
            g[idx] = (vals[0] - vals[1]) / (2 * h)
        out[name] = g.reshape(p.shape)
    return out


def check_gradients(loss: str, widths=(2, 4, 8, 16), size: int = 8, batch: int = 2,
                    k_in: int = 5, seed: int = 0, h: float = 1e-5,
                    floor: float = 0.0, dtype=np.longdouble) -> GradCheckResult:
    """Compare back-propagated gradients with central finite differences."""
    rng = np.random.default_rng(seed)
    mode = LOSS_MODE[loss]
    net = UNet(k_in, mode, widths=widths, seed=seed + 1, dtype=dtype)
    net.set_bn_tracking(False)
    x = np.where(rng.random((batch, k_in, size, size)) < 0.5, -1.0, 1.0)
    if mode == "regression":
        target = rng.random((batch, 3, size, size))
    else:
        target = rng.integers(0, net.k_out, (batch, size, size))
    net.zero_grad()
    _, d_logits = LOSSES[loss](net.forward(x, train=True), target)
    net.backward(d_logits)
    analytic = {k: v.copy() for k, v in net.grads().items()}
    numeric = numeric_gradients(net, x, target, loss, h=h, dtype=dtype)
    per_tensor, worst, worst_name, worst_abs = {}, -1.0, "", 0.0
    for name, a in analytic.items():
        rel = relative_error(a, numeric[name], floor)
        per_tensor[name] = float(rel.max())
        worst_abs = max(worst_abs, float(np.abs(a - numeric[name]).max()))
        if rel.max() > worst:
            worst, worst_name = float(rel.max()), name
    return GradCheckResult(loss, worst, worst_abs, worst_name, net.n_params(), per_tensor)
