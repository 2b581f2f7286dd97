"""Evaluation metrics for probability maps and generated images."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, fields
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import convolve2d
from scipy.special import xlogy

EPS = 1e-7
PSNR_CAP_DB = 100.0
OUTLIER_CM2 = 30.0

# follow-up gap clusters, inclusive day ranges
INTERVAL_BINS: Tuple[Tuple[str, int, float], ...] = (
    ("0-60", 0, 60),
    ("61-120", 61, 120),
    ("121-180", 121, 180),
    ("181-280", 181, 280),
    ("281-365", 281, 365),
    ("366+", 366, math.inf),
)


class DegenerateSupport(ValueError):
    pass


def _p(x) -> np.ndarray:
    return np.asarray(getattr(x, "p", x), dtype=np.float64)


def _clamp(p):
    return np.clip(p, EPS, 1.0 - EPS)


@dataclass
class CalibrationReport:
    bin_edges: np.ndarray
    bin_confidence: np.ndarray
    bin_frequency: np.ndarray
    bin_counts: np.ndarray
    ece: float

    def to_dict(self) -> dict:
        nan_none = lambda a: [None if not np.isfinite(v) else float(v) for v in a]  # noqa: E731
        return {
            "bin_edges": [float(v) for v in self.bin_edges],
            "bin_confidence": nan_none(self.bin_confidence),
            "bin_frequency": nan_none(self.bin_frequency),
            "bin_counts": [int(v) for v in self.bin_counts],
            "ece": float(self.ece),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationReport":
        arr = lambda k: np.array([np.nan if v is None else v for v in d[k]], dtype=np.float64)  # noqa: E731
        return cls(np.asarray(d["bin_edges"]), arr("bin_confidence"), arr("bin_frequency"),
                   np.asarray(d["bin_counts"], dtype=np.int64), float(d["ece"]))


@dataclass
class EvalRecord:
    patient_id: str
    dl2_days: int
    rmse: float
    ce: float
    kl: float
    dice: float
    pearson_r: float
    mse_gen: float
    psnr: float
    ssim: float
    true_area_px: int = 0
    pred_area_px: int = 0
    # optional scores from external plug-ins (e.g. LPIPS); not written to CSV
    extras: dict = field(default_factory=dict, compare=False, repr=False)


def rmse(p_true, p_hat) -> float:
    a, b = _p(p_true), _p(p_hat)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def soft_ce(p_true, p_hat) -> float:
    P, Q = _p(p_true), _clamp(_p(p_hat))
    return float(np.mean(-(P * np.log(Q) + (1 - P) * np.log(1 - Q))))


def kl_divergence(p_true, p_hat) -> float:
    """Mean per-pixel Bernoulli KL(P || P_hat); P_hat is clamped, 0 log 0 = 0."""
    P, Q = _p(p_true), _clamp(_p(p_hat))
    kl = xlogy(P, P) - xlogy(P, Q) + xlogy(1 - P, 1 - P) - xlogy(1 - P, 1 - Q)
    return float(np.mean(kl))


def ece(p_true_binary, p_hat, n_bins: int = 10) -> CalibrationReport:
    """Expected calibration error over equal-width bins of predicted probability.

    ``p_true_binary`` supplies the observed frequency. Arrays of any shape are
    flattened, so several maps may be concatenated beforehand.
    """
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    y = np.asarray(p_true_binary, dtype=np.float64).ravel()
    q = _p(p_hat).ravel()
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    # right-closed last bin so q == 1 is counted
    idx = np.clip(np.searchsorted(edges, q, side="right") - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=q, minlength=n_bins)
    freq_sum = np.bincount(idx, weights=y, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        conf = np.where(counts > 0, conf_sum / counts, np.nan)
        freq = np.where(counts > 0, freq_sum / counts, np.nan)
    n = max(int(counts.sum()), 1)
    gap = np.where(counts > 0, np.abs(conf - freq), 0.0)
    return CalibrationReport(edges, conf, freq, counts, float(np.sum(counts / n * gap)))


def dice(p_true, p_hat, threshold: float = 0.8) -> float:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    a, b = _p(p_true) > threshold, _p(p_hat) > threshold
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


def psnr(img_true, img_hat, data_range: float = 2.0) -> float:
    mse = float(np.mean((np.asarray(img_true, np.float64) - np.asarray(img_hat, np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(data_range ** 2 / mse)))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(img_true, img_hat, data_range: float = 2.0, win_size: int = 11,
         sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all fully-covered 11x11 Gaussian windows."""
    x = np.asarray(img_true, np.float64)
    y = np.asarray(img_hat, np.float64)
    w = _gaussian_window(win_size, sigma)
    f = lambda a: convolve2d(a, w, mode="valid")  # noqa: E731
    mx, my = f(x), f(y)
    vx = f(x * x) - mx * mx
    vy = f(y * y) - my * my
    cxy = f(x * y) - mx * my
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return float(s.mean())


def pearson_masked(p_true, p_hat, support_threshold: float = 0.2) -> float:
    a, b = _p(p_true), _p(p_hat)
    sup = a > support_threshold
    if sup.sum() < 2:
        raise DegenerateSupport("support has fewer than 2 pixels")
    x, y = a[sup], b[sup]
    xc, yc = x - x.mean(), y - y.mean()
    den = np.sqrt((xc ** 2).sum() * (yc ** 2).sum())
    if den == 0:
        raise DegenerateSupport("zero variance on support")
    return float((xc * yc).sum() / den)


def area_agreement(records: Sequence[Tuple[np.ndarray, np.ndarray]], spacing_mm: float = 1.0,
                   outlier_cm2: float = OUTLIER_CM2) -> dict:
    """Predicted vs true tumor areas in cm^2 with outlier flags."""
    px_cm2 = (spacing_mm ** 2) / 100.0
    rows = []
    for true_mask, pred_mask in records:
        ta = float(np.asarray(true_mask).astype(bool).sum()) * px_cm2
        pa = float(np.asarray(pred_mask).astype(bool).sum()) * px_cm2
        dev = abs(pa - ta)
        rows.append({"true_cm2": ta, "pred_cm2": pa, "deviation_cm2": dev,
                     "outlier": dev > outlier_cm2})
    mad = float(np.mean([r["deviation_cm2"] for r in rows])) if rows else 0.0
    return {"rows": rows, "mean_abs_deviation_cm2": mad}


def interval_label(dl2: int) -> str:
    d = int(dl2)
    if d < 0:
        raise ValueError(f"negative gap {dl2}")
    for label, lo, hi in INTERVAL_BINS:
        if lo <= d <= hi:
            return label
    raise AssertionError("bins cover all non-negative integers")


def interval_clusters(records: Sequence[EvalRecord]) -> List[dict]:
    if not records:
        raise ValueError("records must be non-empty")
    groups: Dict[str, List[EvalRecord]] = {label: [] for label, _, _ in INTERVAL_BINS}
    for r in records:
        groups[interval_label(r.dl2_days)].append(r)
    table = []
    for label, _, _ in INTERVAL_BINS:
        g = groups[label]
        row = {"interval": label, "count": len(g)}
        if g:
            for key in ("rmse", "dice"):
                v = np.array([getattr(r, key) for r in g])
                row[f"{key}_mean"] = float(v.mean())
                row[f"{key}_std"] = float(v.std())
        table.append(row)
    return table


def evaluate_prediction(patient_id: str, dl2: int, p_true, p_hat, img_true, img_hat,
                        threshold: float = 0.8, support_threshold: float = 0.2,
                        lpips_fn: Optional[Callable] = None) -> EvalRecord:
    """Score one prediction. ``lpips_fn`` is an optional external perceptual scorer."""
    try:
        r = pearson_masked(p_true, p_hat, support_threshold)
    except DegenerateSupport:
        r = 0.0
    it, ih = np.asarray(img_true, np.float64), np.asarray(img_hat, np.float64)
    rec = EvalRecord(
        patient_id=patient_id, dl2_days=int(dl2),
        rmse=rmse(p_true, p_hat), ce=soft_ce(p_true, p_hat), kl=kl_divergence(p_true, p_hat),
        dice=dice(p_true, p_hat, threshold), pearson_r=r,
        mse_gen=float(np.mean((it - ih) ** 2)), psnr=psnr(it, ih), ssim=ssim(it, ih),
        true_area_px=int((_p(p_true) > threshold).sum()),
        pred_area_px=int((_p(p_hat) > threshold).sum()),
    )
    if lpips_fn is not None:
        rec.extras["lpips"] = float(lpips_fn(img_true, img_hat))
    return rec


CSV_FIELDS = [f.name for f in fields(EvalRecord) if f.name != "extras"]


def records_to_csv(records: Sequence[EvalRecord]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in records:
        row = {k: getattr(r, k) for k in CSV_FIELDS}
        w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def records_from_csv(text: str) -> List[EvalRecord]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        kw = {}
        for f in fields(EvalRecord):
            if f.name == "extras":
                continue
            v = row[f.name]
            kw[f.name] = v if f.type in ("str", str) else (int(v) if f.type in ("int", int) else float(v))
        out.append(EvalRecord(**kw))
    return out


def clusters_to_csv(table: Sequence[dict]) -> str:
    cols = ["interval", "count", "rmse_mean", "rmse_std", "dice_mean", "dice_std"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for row in table:
        w.writerow({k: (f"{row[k]:.10g}" if isinstance(row.get(k), float) else row.get(k, ""))
                    for k in cols})
    return buf.getvalue()


def report_to_json(report: CalibrationReport) -> str:
    return json.dumps(report.to_dict(), indent=1)
