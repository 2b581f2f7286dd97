"""
Learning how a lesion moves between two scans
=============================================

Trains a small deformation network on synthetic pairs for a couple of hundred
steps, then warps an early SDF towards a later one. A few minutes on a CPU.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from gliomadiff.phantoms import PhantomConfig, generate_cohort
from gliomadiff.sdfprob import mask_to_sdf
from gliomadiff.warpnet import OptimConfig, WarpNetConfig, predict_field, train_warpnet, warp

cohort = generate_cohort(PhantomConfig(n_patients=60, seed=3))
net, losses = train_warpnet(cohort, WarpNetConfig(base_channels=8), OptimConfig(steps=200, lr=1e-3))
print(f"loss {np.mean(losses[:10]):.4f} -> {np.mean(losses[-20:]):.4f}")

# held-out patient
s1, s2 = generate_cohort(PhantomConfig(n_patients=1, seed=3), start_index=999)[0].studies[:2]
phi1, phi2 = mask_to_sdf(s1.gtv_mask), mask_to_sdf(s2.gtv_mask)
field = predict_field(net, phi1, phi2, s2.day - s1.day)
moved = warp(phi1.phi, field)
print("mean |phi2 - phi1|        :", np.abs(phi2.phi - phi1.phi).mean().round(3))
print("mean |phi2 - warp(phi1)|  :", np.abs(phi2.phi - moved).mean().round(3))

fig, ax = plt.subplots(1, 3, figsize=(11, 3.6))
for a, img, title in zip(ax, (phi1.phi, moved, phi2.phi), ("phi1", "phi1 warped", "phi2")):
    a.imshow(img, cmap="RdBu_r", vmin=-15, vmax=30)
    a.contour(img, levels=[0], colors="k")
    a.set_title(title)
    a.axis("off")
step = 4
yy, xx = np.mgrid[0:moved.shape[0]:step, 0:moved.shape[1]:step]
ax[1].quiver(xx, yy, field.v[::step, ::step, 0], -field.v[::step, ::step, 1], color="g")
fig.tight_layout()
fig.savefig(Path(__file__).with_suffix(".png"), dpi=90)
