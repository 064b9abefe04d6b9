"""
Decision tree versus U-Net
==========================

The tree sees one CAD column per pixel, so it cannot place the dark trace
border that depends on the neighborhood. A U-Net can.

Run with ``python demos/02_tree_vs_unet.py``; takes about three minutes.
Smaller wafers give the U-Net too few patches to catch up within ten epochs.
"""

import time

import numpy as np

from goldendie.palette import fit_palette, quantize
from goldendie.raster import split_patches
from goldendie.simulators import TrainConfig, infer, predict_tree, select_best, train_tree, train_unet
from goldendie.synth import SynthConfig, generate

r = generate(SynthConfig(size=1024, seed=1))
pal = fit_palette(r.photo, k=64, sample_size=200_000, seed=0)
q = quantize(r.photo, pal)
train, val = split_patches(r.photo.shape, 64, 0.7, 0)


def val_l2(sim):
    return np.mean([np.mean((sim[v.slices] - r.photo[v.slices]) ** 2) for v in val])


# %%
tree = train_tree(q, r.cad, seed=0, regions=train)
tree_sim = predict_tree(tree, r.cad, pal)
print(f"tree: {tree.n_nodes} nodes, val L2 {val_l2(tree_sim):.5f}")

# %%
# Adam mode with small batches: one wafer gives only a few hundred steps.
cfg = TrainConfig(loss="cross_entropy", epochs=10, optimizer="adam", adam_lr=1e-3, batch_size=8)
t0 = time.perf_counter()
cks = train_unet(r.photo, r.cad, cfg, quantized=q, palette=pal,
                 train_regions=train, val_regions=val)
for ck in cks:
    print(f"epoch {ck.epoch:2d}  lr {ck.lr:.2e}  train {ck.train_loss:.3f}  val l2 {ck.scores['l2']:.5f}")
best = select_best(cks, "l2")
unet_sim = infer(best, r.cad, pal)
print(f"U-Net epoch {best.epoch}: val L2 {val_l2(unet_sim):.5f} ({time.perf_counter() - t0:.0f}s)")

# %%
# Where do they differ most? On trace borders.
border = (r.cad[..., 0] > 0) & (np.abs(r.golden - (0.30, 0.26, 0.34)).sum(axis=2) < 1e-9)
for name, sim in (("tree", tree_sim), ("unet", unet_sim)):
    print(f"{name}: L2 on trace border {np.mean((sim[border] - r.photo[border]) ** 2):.4f}")
