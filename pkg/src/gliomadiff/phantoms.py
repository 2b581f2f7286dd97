"""Synthetic longitudinal glioma phantoms.

Each patient carries one star-convex lesion whose mean radius grows
linearly with time, ``r(d) = r0 + g * d / 100``, modulated per angle by a
smooth low-frequency perturbation that stays fixed over the series. FLAIR
shows a bright rim around the lesion, T1CE an enhancing core, and the dose
map is a plateau over the dilated GTV with a cosine falloff.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .dataio import PatientSeries, Study


class PhantomError(RuntimeError):
    pass


@dataclass
class PhantomConfig:
    image_size: int = 64
    n_patients: int = 10
    n_studies_per_patient: int = 3
    day_gap_range: Tuple[int, int] = (30, 180)
    base_radius_range: Tuple[float, float] = (4.0, 9.0)
    growth_rate_range: Tuple[float, float] = (0.5, 2.5)
    irregularity: float = 0.15
    dose_margin_px: int = 3
    seed: int = 0
    noise_std: float = 0.03
    # probability that a patient develops a satellite lesion (hard cases)
    fragment_prob: float = 0.0
    # extra studies drawn uniformly in [0, max_extra_studies] per patient
    max_extra_studies: int = 0

    def validate(self) -> None:
        if self.n_studies_per_patient < 3:
            raise ValueError("n_studies_per_patient must be >= 3")
        if self.image_size < 16 or self.n_patients < 0:
            raise ValueError("image_size must be >= 16 and n_patients >= 0")
        for name in ("day_gap_range", "base_radius_range", "growth_rate_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0 or (name != "growth_rate_range" and lo <= 0):
                raise ValueError(f"{name} must be a non-empty positive range, got {(lo, hi)}")
        if not 0.0 <= self.irregularity <= 1.0:
            raise ValueError("irregularity must lie in [0, 1]")
        if self.dose_margin_px < 0:
            raise ValueError("dose_margin_px must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown phantom config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


def _angular_profile(rng: np.random.Generator, irregularity: float, n_harmonics: int = 3):
    amps = rng.uniform(0.3, 1.0, n_harmonics)
    phases = rng.uniform(0, 2 * np.pi, n_harmonics)
    orders = np.arange(2, 2 + n_harmonics)
    norm = amps.sum()

    def profile(theta):
        f = sum(a * np.cos(k * theta + p) for a, k, p in zip(amps, orders, phases))
        return 1.0 + irregularity * f / norm

    return profile


def _brain_background(rng: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[:n, :n].astype(np.float64)
    c = (n - 1) / 2.0
    ry, rx = 0.46 * n, 0.40 * n
    ell = ((yy - c) / ry) ** 2 + ((xx - c) / rx) ** 2
    head = 1.0 / (1.0 + np.exp((ell - 1.0) * 20.0))
    texture = ndimage.gaussian_filter(rng.standard_normal((n, n)), sigma=n / 12.0)
    texture /= np.abs(texture).max() + 1e-12
    flair_bg = -0.9 + head * (0.8 + 0.15 * texture)
    t1_bg = -0.9 + head * (0.9 + 0.12 * texture)
    return flair_bg, t1_bg


def _dose_map(mask: np.ndarray, margin: int) -> np.ndarray:
    if margin == 0:
        return mask.astype(np.float32)
    d = ndimage.distance_transform_edt(mask == 0)
    dose = np.ones_like(d)
    ramp = (d > margin) & (d < 2 * margin)
    dose[ramp] = 0.5 * (1.0 + np.cos(np.pi * (d[ramp] - margin) / margin))
    dose[d >= 2 * margin] = 0.0
    dose[mask > 0] = 1.0
    return dose.astype(np.float32)


def _render_study(mask: np.ndarray, rim: np.ndarray, flair_bg, t1_bg, rng, noise_std):
    core = ndimage.gaussian_filter(mask.astype(np.float64), 0.7)
    flair = flair_bg + 1.0 * rim + 0.35 * core
    t1ce = t1_bg - 0.3 * rim + 0.6 * core
    flair = flair + noise_std * rng.standard_normal(mask.shape)
    t1ce = t1ce + noise_std * rng.standard_normal(mask.shape)
    return (np.clip(flair, -1, 1).astype(np.float32),
            np.clip(t1ce, -1, 1).astype(np.float32))


def _generate_patient(cfg: PhantomConfig, index: int) -> PatientSeries:
    rng = np.random.default_rng([cfg.seed, index])
    n = cfg.image_size
    n_studies = cfg.n_studies_per_patient + int(rng.integers(0, cfg.max_extra_studies + 1))
    gaps = rng.integers(cfg.day_gap_range[0], cfg.day_gap_range[1] + 1, n_studies - 1)
    days = np.concatenate([[0], np.cumsum(gaps)]).astype(int)
    r0 = rng.uniform(*cfg.base_radius_range)
    g = rng.uniform(*cfg.growth_rate_range)
    profile = _angular_profile(rng, cfg.irregularity)
    flair_bg, t1_bg = _brain_background(rng, n)
    satellite = None
    if cfg.fragment_prob > 0 and rng.uniform() < cfg.fragment_prob:
        satellite = (rng.uniform(0, 2 * np.pi), int(rng.integers(1, n_studies)))

    yy, xx = np.mgrid[:n, :n].astype(np.float64)
    max_extent = 1.0 + cfg.irregularity
    for _ in range(10):
        r_last = (r0 + g * days[-1] / 100.0) * max_extent
        room = n / 2.0 - r_last - cfg.dose_margin_px - 2
        if room > 0:
            break
        g *= 0.5
        r0 = max(cfg.base_radius_range[0] * 0.5, r0 * 0.8)
    else:
        raise PhantomError(f"patient {index}: lesion does not fit in a {n}x{n} image after 10 attempts")
    c = (n - 1) / 2.0
    center = np.array([c, c]) + rng.uniform(-room, room, 2) * 0.6
    dy, dx = yy - center[0], xx - center[1]
    dist = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)

    studies = []
    for k, day in enumerate(days):
        r = r0 + g * day / 100.0
        mask = (dist <= r * profile(theta)).astype(np.float32)
        if satellite is not None and k >= satellite[1]:
            ang = satellite[0]
            sr = 0.45 * r
            sc = center + (r + sr + 1.5) * np.array([np.sin(ang), np.cos(ang)])
            sc = np.clip(sc, sr + 1, n - sr - 2)
            mask = np.maximum(mask, (np.hypot(yy - sc[0], xx - sc[1]) <= sr).astype(np.float32))
        edt_out = ndimage.distance_transform_edt(mask == 0)
        rim = np.exp(-((edt_out - 1.5) ** 2) / 2.0) * (mask == 0)
        flair, t1ce = _render_study(mask, rim, flair_bg, t1_bg, rng, cfg.noise_std)
        studies.append(Study(flair=flair, t1ce=t1ce, gtv_mask=mask,
                             dose=_dose_map(mask, cfg.dose_margin_px), day=int(day)))
    return PatientSeries(patient_id=f"P{index:04d}", studies=studies)


def generate_cohort(cfg: PhantomConfig, start_index: int = 0) -> List[PatientSeries]:
    """Deterministic cohort: patient ``i`` depends only on ``(cfg.seed, i)``."""
    cfg.validate()
    return [_generate_patient(cfg, start_index + i) for i in range(cfg.n_patients)]


def mix_real_synthetic(real: Sequence[PatientSeries], synth: Sequence[PatientSeries],
                       n_synth: int, rng: np.random.Generator) -> List[PatientSeries]:
    if n_synth < 0 or n_synth > len(synth):
        raise ValueError(f"n_synth={n_synth} but only {len(synth)} synthetic series available")
    picked = [synth[i] for i in rng.choice(len(synth), size=n_synth, replace=False)] if n_synth else []
    mixed = list(real) + picked
    order = rng.permutation(len(mixed))
    return [mixed[i] for i in order]
