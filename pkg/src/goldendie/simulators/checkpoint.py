"""Versioned binary checkpoint files.

Layout (all integers little-endian)::

    8 bytes   magic  b"GDIECKPT"
    u16       format version
    u32       header length in bytes
    header    UTF-8 JSON: mode, k_in, k_out, widths, epoch, scores, loss,
              lr, palette hash and a tensor manifest (name, shape, offset)
    blobs     float32 little-endian tensors, parameters then BN statistics
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import DataError
from .training import Checkpoint

MAGIC = b"GDIECKPT"
VERSION = 1
_DTYPE = np.dtype("<f4")


def save_checkpoint(path, ck: Checkpoint) -> Path:
    path = Path(path)
    tensors, offset = [], 0
    blobs = []
    for name in sorted(ck.state):
        arr = np.ascontiguousarray(ck.state[name], dtype=_DTYPE)
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {"mode": ck.mode, "k_in": ck.k_in, "k_out": ck.k_out, "widths": list(ck.widths),
              "epoch": ck.epoch, "scores": ck.scores, "loss": ck.loss, "lr": ck.lr,
              "train_loss": ck.train_loss, "palette_hash": ck.palette_hash,
              "meta": ck.meta, "tensors": tensors}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path, palette=None) -> Checkpoint:
    """Read a checkpoint; if ``palette`` is given its hash must match."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing checkpoint: {path}")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise DataError(f"{path} is not a U-Net checkpoint")
    version, n_header = struct.unpack_from("<HI", data, 8)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<HI")
    header = json.loads(data[start:start + n_header].decode("utf-8"))
    body = start + n_header
    state = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        lo = body + t["offset"]
        hi = lo + count * _DTYPE.itemsize
        if hi > len(data):
            raise DataError(f"{path}: truncated tensor {t['name']}")
        state[t["name"]] = np.frombuffer(data[lo:hi], dtype=_DTYPE).reshape(t["shape"]).copy()
    if palette is not None and header.get("palette_hash") not in (None, palette.sha256()):
        raise DataError(f"{path}: checkpoint was trained with a different palette")
    return Checkpoint(header["epoch"], state, header["scores"], header["mode"], header["k_in"],
                      header["k_out"], tuple(header["widths"]), header.get("loss", ""),
                      header.get("lr", 0.0), header.get("train_loss", float("nan")),
                      header.get("palette_hash"), header.get("meta", {}))
