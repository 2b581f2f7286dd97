"""Figure writers for evaluation outputs (headless, no embedded timestamps)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import INTERVAL_BINS, EvalRecord, interval_label  # noqa: E402

# PNG metadata otherwise carries the matplotlib version string
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def _curve(ax, rep: dict, label: str, **kw):
    conf = np.array([np.nan if v is None else v for v in rep["bin_confidence"]], dtype=float)
    freq = np.array([np.nan if v is None else v for v in rep["bin_frequency"]], dtype=float)
    ok = np.isfinite(conf) & np.isfinite(freq)
    ax.plot(conf[ok], freq[ok], marker="o", label=f"{label} (ECE {rep['ece']:.3f})", **kw)


def calibration_curve(path, calib: dict) -> Path:
    """Reliability diagram: observed frequency vs mean predicted probability per bin."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot([0, 1], [0, 1], "k--", lw=1, label="perfect calibration")
    _curve(ax, calib.get("vs_target", calib), f"vs {calib.get('model_target', 'target')} target")
    if "vs_binary" in calib and calib.get("model_target") != "binary":
        _curve(ax, calib["vs_binary"], "vs binary GTV", ls=":")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("predicted probability")
    ax.set_ylabel("observed frequency")
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def interval_boxplots(path, records: Sequence[EvalRecord]) -> Path:
    """RMSE and DSC distributions per follow-up gap cluster."""
    labels = [b[0] for b in INTERVAL_BINS]
    groups = {lab: [] for lab in labels}
    for r in records:
        groups[interval_label(r.dl2_days)].append(r)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, key, name in ((axes[0], "rmse", "RMSE"), (axes[1], "dice", "DSC")):
        data = [[getattr(r, key) for r in groups[lab]] or [np.nan] for lab in labels]
        ax.boxplot(data)
        ax.set_xticks(range(1, len(labels) + 1), labels, rotation=30)
        ax.set_xlabel("gap to target (days)")
        ax.set_ylabel(name)
        for i, lab in enumerate(labels, start=1):
            ax.annotate(f"n={len(groups[lab])}", (i, 0), xycoords=("data", "axes fraction"),
                        ha="center", va="bottom", fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def area_scatter(path, areas: dict) -> Path:
    """Predicted vs true area (cm^2) with the identity line and outliers marked."""
    rows = areas["rows"]
    t = np.array([r["true_cm2"] for r in rows])
    p = np.array([r["pred_cm2"] for r in rows])
    out = np.array([r["outlier"] for r in rows], dtype=bool)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    hi = max(float(np.max(t, initial=0)), float(np.max(p, initial=0)), 1e-3) * 1.05
    ax.plot([0, hi], [0, hi], "k--", lw=1, label="identity")
    ax.scatter(t[~out], p[~out], s=14, label="cases")
    if out.any():
        ax.scatter(t[out], p[out], s=40, marker="x", c="red", label="|deviation| > 30 cm²")
    ax.set_xlim(0, hi)
    ax.set_ylim(0, hi)
    ax.set_xlabel("true area (cm²)")
    ax.set_ylabel("predicted area (cm²)")
    ax.set_title(f"mean |deviation| {areas['mean_abs_deviation_cm2']:.3f} cm²", fontsize=9)
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def prediction_preview(path, flair_prev, flair_hat, p_hat, uncertainty) -> Path:
    fig, axes = plt.subplots(1, 4, figsize=(12, 3.2))
    panels = [(flair_prev, "last input FLAIR", "gray", (-1, 1)),
              (flair_hat, "predicted FLAIR", "gray", (-1, 1)),
              (p_hat, "tumor probability", "magma", (0, 1)),
              (uncertainty, "uncertainty", "viridis", (None, None))]
    for ax, (img, title, cmap, (lo, hi)) in zip(axes, panels):
        im = ax.imshow(np.asarray(img), cmap=cmap, vmin=lo, vmax=hi)
        ax.set_title(title, fontsize=9)
        ax.axis("off")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save(fig, path)
