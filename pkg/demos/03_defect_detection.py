"""
Template matching against a golden die
======================================

With a perfect simulation every labeled pixel outranks the background.
Noise, windowed scores and a misaligned photo each change the picture.
"""

import numpy as np

from goldendie import defectmap as D
from goldendie.synth import SynthConfig, generate

# %%
# Noise-free photo against its own clean render: AP is exactly 1.
clean = generate(SynthConfig(size=512, seed=2, noise_sigma=0.0))
print("oracle AP:", D.average_precision(D.score_pixelwise(clean.photo, clean.golden), clean.labels))

# %%
# With noise the ranking degrades slightly; windowed SSIM blurs the map.
r = generate(SynthConfig(size=512, seed=2))
pix = D.score_pixelwise(r.photo, r.golden)
print(f"pixelwise l2 AP {D.average_precision(pix, r.labels):.3f}")
print(f"smoothed l2 AP  {D.average_precision(D.smooth(pix, 3), r.labels):.3f}")
win = D.score_windowed(r.photo[:256, :256], r.golden[:256, :256], "ssim_dissim", window=16, stride=4)
if np.any(r.labels.mask[:256, :256] > 0):
    print(f"windowed ssim AP (crop) {D.average_precision(win, r.labels.mask[:256, :256]):.3f}")

mask = D.binarize(pix, 0.1)
print(f"threshold 0.1 flags {int(mask.sum())} px against {int(np.sum(r.labels.mask > 0))} labeled")

# %%
# A two-pixel stage offset; the probe finds the shift that undoes it.
shifted = generate(SynthConfig(size=512, seed=2, misalignment_px=2))
shift, before, after = D.misalignment_probe(shifted.photo, shifted.golden, max_shift=4)
print(f"probe shift {shift}: l2 {before:.5f} -> {after:.5f}")
