"""Signed distance fields and logistic tumor-probability maps.

A binary GTV mask is turned into a signed Euclidean distance map in mm
(negative inside the tumor, zero on its boundary pixels) and then into a
per-pixel tumor-presence probability through a logistic decay.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.special import expit

DEFAULT_BETA = 0.1
DEFAULT_MU = 15.0
DEFAULT_THRESHOLD = 0.8

_FOUR_NEIGHBORS = ndimage.generate_binary_structure(2, 1)


class DegenerateMask(ValueError):
    """Raised when a mask has no tumor/background interface."""


@dataclass
class SdfMap:
    phi: np.ndarray
    spacing_mm: float = 1.0


@dataclass
class ProbMap:
    p: np.ndarray
    beta: float = DEFAULT_BETA
    mu: float = DEFAULT_MU


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Tumor pixels with at least one in-image background 4-neighbor."""
    m = np.asarray(mask).astype(bool)
    # border_value=1: the outside of the image never counts as background
    eroded = ndimage.binary_erosion(m, structure=_FOUR_NEIGHBORS, border_value=1)
    return m & ~eroded


def mask_to_sdf(mask: np.ndarray, spacing_mm: float = 1.0) -> SdfMap:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {m.shape}")
    m = m.astype(bool)
    if not m.any():
        raise DegenerateMask("mask has no tumor pixel")
    if m.all():
        raise DegenerateMask("mask has no background pixel, boundary is empty")
    boundary = boundary_pixels(m)
    # exact EDT to the nearest boundary pixel (zeros of the input)
    dist = ndimage.distance_transform_edt(~boundary) * float(spacing_mm)
    phi = np.where(m, -dist, dist)
    phi[boundary] = 0.0
    return SdfMap(phi=phi, spacing_mm=float(spacing_mm))


def logistic(phi, beta: float = DEFAULT_BETA, mu: float = DEFAULT_MU):
    """1 / (1 + exp(beta * (phi - mu))), evaluated without overflow."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    return expit(-beta * (np.asarray(phi, dtype=np.float64) - mu))


def sdf_to_prob(sdf: SdfMap, beta: float = DEFAULT_BETA, mu: float = DEFAULT_MU) -> ProbMap:
    phi = sdf.phi if isinstance(sdf, SdfMap) else np.asarray(sdf)
    return ProbMap(p=logistic(phi, beta, mu), beta=beta, mu=mu)


def prob_to_mask(prob, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    p = prob.p if isinstance(prob, ProbMap) else np.asarray(prob)
    return (p > threshold).astype(np.uint8)


def threshold_distance(threshold: float, beta: float = DEFAULT_BETA, mu: float = DEFAULT_MU) -> float:
    """SDF value where the logistic crosses ``threshold``: p > threshold iff phi < this."""
    return mu + np.log((1.0 - threshold) / threshold) / beta


def mask_to_prob(mask: np.ndarray, spacing_mm: float = 1.0,
                 beta: float = DEFAULT_BETA, mu: float = DEFAULT_MU) -> ProbMap:
    return sdf_to_prob(mask_to_sdf(mask, spacing_mm), beta, mu)
