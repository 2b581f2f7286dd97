"""
From tumor masks to probability maps
====================================

A binary GTV mask is turned into a signed distance map (mm, negative inside)
and then into a tumor-presence probability with a logistic fall-off. Run with
``python notebooks/01_sdf_and_probability_maps.py``; a PNG lands next to it.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from gliomadiff.phantoms import PhantomConfig, generate_cohort
from gliomadiff.sdfprob import mask_to_sdf, prob_to_mask, sdf_to_prob, threshold_distance

# one synthetic patient, first study
series = generate_cohort(PhantomConfig(n_patients=1, seed=7))[0]
mask = series.studies[0].gtv_mask

sdf = mask_to_sdf(mask, spacing_mm=1.0)
prob = sdf_to_prob(sdf, beta=0.1, mu=15.0)

# the 0.5 contour sits mu mm outside the tumor edge, the 0.8 contour hugs it
print("P at the boundary  :", prob.p[sdf.phi == 0].mean().round(4))
print("0.8 cut distance mm:", round(threshold_distance(0.8, 0.1, 15.0), 3))
print("area  GTV / P>0.8 / P>0.5 (px):", int(mask.sum()), int(prob_to_mask(prob, 0.8).sum()),
      int(prob_to_mask(prob, 0.5).sum()))

fig, ax = plt.subplots(1, 3, figsize=(11, 3.4))
ax[0].imshow(mask, cmap="gray")
ax[0].set_title("GTV mask")
im = ax[1].imshow(sdf.phi, cmap="RdBu_r")
ax[1].contour(sdf.phi, levels=[0], colors="k")
ax[1].set_title("signed distance (mm)")
fig.colorbar(im, ax=ax[1], fraction=0.046)
im = ax[2].imshow(prob.p, cmap="magma", vmin=0, vmax=1)
ax[2].contour(prob.p, levels=[0.5, 0.8], colors=["w", "c"])
ax[2].set_title("P(tumor), contours 0.5 / 0.8")
fig.colorbar(im, ax=ax[2], fraction=0.046)
for a in ax:
    a.axis("off")
fig.tight_layout()
fig.savefig(Path(__file__).with_suffix(".png"), dpi=90)
