"""Time-conditioned glioma growth prediction with a multitask diffusion model.

Modules: ``sdfprob`` (signed distance and probability maps), ``dataio``
(longitudinal series and triplets), ``phantoms`` (synthetic cohorts),
``warpnet`` (deformation network), ``diffusion`` (DDPM process), ``model``
(the multitask U-Net and its training/inference), ``metrics``, ``experiment``
and ``cli``.
"""

__version__ = "0.1.0"
