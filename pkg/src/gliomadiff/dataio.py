"""Longitudinal dataset model, on-disk format and triplet sampling.

On disk a dataset is a directory holding ``manifest.json`` plus one raw file
per tensor (H*W little-endian float32, row-major)::

    {"spacing_mm": 1.0,
     "patients": [{"id": "P000",
                   "studies": [{"day": 0, "flair": "P000/s0_flair.raw",
                                "t1ce": ..., "gtv": ..., "dose": ...,
                                "shape": [64, 64]}, ...]}]}
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence

import numpy as np

MANIFEST_NAME = "manifest.json"
CHANNELS = ("flair", "t1ce", "gtv", "dose")
DEFAULT_MIN_AREA_MM2 = 75.0
DEFAULT_JITTER_DAYS = 5


class ValidationError(ValueError):
    pass


@dataclass
class Study:
    flair: np.ndarray
    t1ce: np.ndarray
    gtv_mask: np.ndarray
    dose: np.ndarray
    day: int

    @property
    def shape(self):
        return self.flair.shape

    def validate(self) -> None:
        shapes = {a.shape for a in (self.flair, self.t1ce, self.gtv_mask, self.dose)}
        if len(shapes) != 1 or len(self.flair.shape) != 2:
            raise ValidationError(f"image shapes differ or are not 2D: {sorted(shapes)}")
        if not np.isin(self.gtv_mask, (0, 1)).all():
            raise ValidationError("gtv_mask must contain only 0 and 1")
        if self.dose.min() < 0 or self.dose.max() > 1:
            raise ValidationError("dose must lie in [0, 1]")
        for name in ("flair", "t1ce"):
            img = getattr(self, name)
            if img.min() < -1 or img.max() > 1:
                raise ValidationError(f"{name} must lie in [-1, 1]")
        if self.day < 0:
            raise ValidationError("day must be >= 0")

    def __eq__(self, other):
        if not isinstance(other, Study):
            return NotImplemented
        return self.day == other.day and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("flair", "t1ce", "gtv_mask", "dose")
        )


@dataclass
class PatientSeries:
    patient_id: str
    studies: List[Study] = field(default_factory=list)

    def validate(self) -> None:
        try:
            if len(self.studies) < 3:
                raise ValidationError(f"needs >= 3 studies, has {len(self.studies)}")
            days = [s.day for s in self.studies]
            if any(b <= a for a, b in zip(days, days[1:])):
                raise ValidationError(f"days must be strictly increasing, got {days}")
            if len({s.shape for s in self.studies}) != 1:
                raise ValidationError("studies have different image shapes")
            for s in self.studies:
                s.validate()
        except ValidationError as exc:
            raise ValidationError(f"patient {self.patient_id}: {exc}") from None

    def __len__(self):
        return len(self.studies)


@dataclass
class Triplet:
    s1: Study
    s2: Study
    s3: Study
    patient_id: str = ""

    @property
    def dl1(self) -> int:
        return self.s2.day - self.s1.day

    @property
    def dl2(self) -> int:
        return self.s3.day - self.s2.day


def _write_raw(path: Path, arr: np.ndarray) -> None:
    np.ascontiguousarray(arr, dtype="<f4").tofile(path)


def _read_raw(path: Path, shape) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(f"missing tensor file: {path}")
    data = np.fromfile(path, dtype="<f4")
    n = int(np.prod(shape))
    if data.size != n:
        raise OSError(f"{path}: expected {n} float32 values, found {data.size}")
    return data.reshape(shape).astype(np.float32)


def save_series(series: Sequence[PatientSeries], directory, spacing_mm: float = 1.0) -> Path:
    """Write ``series`` under ``directory`` and return the manifest path."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    if not os.access(root, os.W_OK):
        raise PermissionError(f"directory not writable: {root}")
    patients = []
    for ps in series:
        ps.validate()
        pdir = root / ps.patient_id
        pdir.mkdir(exist_ok=True)
        studies = []
        for i, st in enumerate(ps.studies):
            entry = {"day": int(st.day)}
            for name, arr in zip(CHANNELS, (st.flair, st.t1ce, st.gtv_mask, st.dose)):
                rel = f"{ps.patient_id}/s{i}_{name}.raw"
                _write_raw(root / rel, arr)
                entry[name] = rel
            entry["shape"] = [int(d) for d in st.shape]
            studies.append(entry)
        patients.append({"id": ps.patient_id, "studies": studies})
    manifest = {"spacing_mm": float(spacing_mm), "patients": patients}
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return path


def read_manifest(manifest_path) -> dict:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    return json.loads(path.read_text(encoding="utf-8"))


def load_series(manifest_path) -> List[PatientSeries]:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    manifest = read_manifest(path)
    root = path.parent
    out = []
    for p in manifest["patients"]:
        studies = []
        for entry in p["studies"]:
            shape = tuple(entry["shape"])
            arrs = [_read_raw(root / entry[name], shape) for name in CHANNELS]
            studies.append(Study(flair=arrs[0], t1ce=arrs[1], gtv_mask=arrs[2],
                                 dose=arrs[3], day=int(entry["day"])))
        ps = PatientSeries(patient_id=str(p["id"]), studies=studies)
        ps.validate()
        out.append(ps)
    return out


def load_spacing(manifest_path) -> float:
    return float(read_manifest(manifest_path).get("spacing_mm", 1.0))


def enumerate_triplets(series: PatientSeries) -> List[Triplet]:
    """All (s_i, s_{i+1}) input pairs with every strictly later study as target."""
    st = series.studies
    return [
        Triplet(st[i], st[i + 1], st[j], patient_id=series.patient_id)
        for i in range(len(st) - 2)
        for j in range(i + 2, len(st))
    ]


def filter_slices(triplets: Sequence[Triplet], min_area_mm2: float = DEFAULT_MIN_AREA_MM2,
                  spacing_mm: float = 1.0) -> List[Triplet]:
    """Keep triplets whose target tumor area is at least ``min_area_mm2``."""
    if min_area_mm2 < 0 or spacing_mm <= 0:
        raise ValueError("need min_area_mm2 >= 0 and spacing_mm > 0")
    px_area = spacing_mm ** 2
    return [t for t in triplets if float(t.s3.gtv_mask.sum()) * px_area >= min_area_mm2]


def jitter_condition(dl: int, magnitude_days: int = DEFAULT_JITTER_DAYS,
                     rng: np.random.Generator | None = None) -> int:
    if magnitude_days < 0:
        raise ValueError("magnitude_days must be >= 0")
    if magnitude_days == 0:
        return int(dl)
    rng = rng if rng is not None else np.random.default_rng()
    u = int(rng.integers(-magnitude_days, magnitude_days + 1))
    return max(1, int(dl) + u)


def sample_triplet(triplets: Sequence[Triplet], rng: np.random.Generator) -> Triplet:
    # uniform over the enumeration
    return triplets[int(rng.integers(len(triplets)))]
