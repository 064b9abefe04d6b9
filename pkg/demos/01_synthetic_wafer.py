"""
A synthetic wafer and its 64-color palette
==========================================

Generate a wafer photo with its CAD stack and defect labels, fit the
palette, and look at how much color detail quantization throws away.

Run with ``python demos/01_synthetic_wafer.py [out_dir]``.
"""

import sys
from pathlib import Path

import numpy as np

from goldendie.palette import fit_palette, quantize, reconstruct
from goldendie.raster import save_photo
from goldendie.synth import SynthConfig, generate

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

# %%
# Five binary CAD layers drive the render; defects and noise go on top.
r = generate(SynthConfig(size=512, seed=7))
print(r.report)
print("CAD layer coverage:", np.round((r.cad > 0).mean(axis=(0, 1)), 3))
print("labeled defect pixels:", int(np.sum(r.labels.mask > 0)))

save_photo(out / "photo.png", r.photo)
save_photo(out / "golden.png", r.golden)
save_photo(out / "labels.png", np.repeat((r.labels.mask > 0)[..., None], 3, axis=2).astype(float))

# %%
# The palette is ordered along a short path through RGB space, so nearby
# indices mean nearby colors.
pal = fit_palette(r.photo, k=64, sample_size=100_000, seed=0)
q = quantize(r.photo, pal)
steps = np.linalg.norm(np.diff(pal.centroids, axis=0), axis=1)
print(f"palette path cost {pal.order_cost:.3f}, largest step {steps.max():.3f}")

# %%
# Reconstruction error shrinks as k grows.
for k in (8, 16, 32, 64):
    p = pal if k == 64 else fit_palette(r.photo, k=k, sample_size=100_000, seed=0)
    err = np.mean((reconstruct(quantize(r.photo, p), p) - r.photo) ** 2)
    print(f"k={k:2d}  reconstruction L2 {err:.2e}")

save_photo(out / "quantized.png", reconstruct(q, pal))
print("wrote", sorted(p.name for p in out.iterdir()))
