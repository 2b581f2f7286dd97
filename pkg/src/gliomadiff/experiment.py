"""Experiment configuration and the end-to-end pipeline stages.

Each stage reads and writes files under ``ExperimentConfig.out_dir`` so the
command-line entry points and the notebooks share one code path::

    out_dir/
      data/train/manifest.json, data/test/manifest.json
      warpnet.pt, warpnet_loss.csv
      gliomadiff.pt, gliomadiff_loss.csv
      eval/records.csv, eval/calibration.json, eval/clusters.csv, eval/areas.json
      plots/calibration.png, plots/interval_boxplots.png, plots/area_scatter.png
      predictions/<patient>_day<d>/...
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import metrics as M
from . import model as gd
from . import warpnet as wn
from .dataio import PatientSeries, enumerate_triplets, load_series, load_spacing, save_series  # noqa: F401
from .phantoms import PhantomConfig, generate_cohort
from .sdfprob import mask_to_prob

log = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).parent / "configs"


class ConfigError(ValueError):
    """Schema violation; ``keys`` lists the offending dotted key paths."""

    def __init__(self, message: str, keys: Sequence[str] = ()):
        super().__init__(message)
        self.keys = list(keys)


@dataclass
class DataConfig:
    n_test_patients: int = 20
    # test phantoms are drawn from a disjoint patient-index range
    test_start_index: int = 100000
    spacing_mm: float = 1.0


@dataclass
class EvalConfig:
    n_bins: int = 10
    threshold: float = 0.8
    support_threshold: float = 0.2
    batch_size: int = 20
    n_samples: int = 1
    # truth used for the headline ECE: "binary" observes GTV occupancy; "target"
    # scores against the model's own training target (soft map or mask)
    ece_truth: str = "binary"


@dataclass
class ExperimentConfig:
    dataset: Optional[str] = None
    out_dir: str = "runs/smoke"
    seed: int = 0
    device: str = "cpu"
    data: DataConfig = field(default_factory=DataConfig)
    phantoms: PhantomConfig = field(default_factory=PhantomConfig)
    warpnet: wn.WarpNetConfig = field(default_factory=wn.WarpNetConfig)
    warpnet_optim: wn.OptimConfig = field(default_factory=wn.OptimConfig)
    gliomadiff: gd.GliomaDiffConfig = field(default_factory=gd.GliomaDiffConfig)
    train: gd.TrainConfig = field(default_factory=gd.TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # --- paths -----------------------------------------------------------
    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    @property
    def dataset_dir(self) -> Path:
        return Path(self.dataset) if self.dataset else self.out / "data"

    def manifest(self, split: str) -> Path:
        return self.dataset_dir / split / "manifest.json"

    # --- (de)serialisation ----------------------------------------------
    def validate(self) -> None:
        self.phantoms.validate()
        self.warpnet.validate()
        self.gliomadiff.validate()
        if self.data.n_test_patients < 1 or self.data.spacing_mm <= 0:
            raise ConfigError("data: need n_test_patients >= 1 and spacing_mm > 0")
        if self.eval.ece_truth not in ("target", "binary"):
            raise ConfigError("eval.ece_truth must be 'target' or 'binary'", ["eval.ece_truth"])
        if self.eval.n_bins < 2 or not 0 < self.eval.threshold < 1:
            raise ConfigError("eval: need n_bins >= 2 and threshold in (0, 1)")
        for name, o in (("warpnet_optim", self.warpnet_optim), ("train", self.train)):
            if o.steps < 1 or o.batch_size < 1 or o.lr <= 0:
                raise ConfigError(f"{name}: steps, batch_size and lr must be positive")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        bad = _unknown_keys(cls, d)
        if bad:
            raise ConfigError(f"unknown config keys: {', '.join(bad)}", bad)
        kw = dict(d)
        try:
            for f in dataclasses.fields(cls):
                sub = f.default_factory
                if f.name in kw and sub is not dataclasses.MISSING and dataclasses.is_dataclass(sub):
                    kw[f.name] = (PhantomConfig.from_dict(kw[f.name]) if sub is PhantomConfig
                                  else sub(**kw[f.name]))
            cfg = cls(**kw)
            cfg.validate()
        except ConfigError:
            raise
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from e
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            bundled = CONFIG_DIR / path.name
            if path.parent == Path(".") and bundled.is_file():
                path = bundled
            else:
                raise FileNotFoundError(f"config not found: {path}")
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with every stage seed derived from one top-level seed."""
        d = self.to_dict()
        d["seed"] = seed
        return ExperimentConfig.from_dict(d)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return path


def _unknown_keys(cls, d, prefix: str = "") -> List[str]:
    if not isinstance(d, dict):
        return [prefix.rstrip(".") or "<root>"]
    known = {f.name: f for f in dataclasses.fields(cls)}
    bad = []
    for k, v in d.items():
        if k not in known:
            bad.append(prefix + k)
            continue
        fac = known[k].default_factory
        if fac is not dataclasses.MISSING and dataclasses.is_dataclass(fac):
            bad += _unknown_keys(fac, v, prefix + k + ".")
    return bad


def seeded(cfg: ExperimentConfig):
    """Stage configs with seeds derived from ``cfg.seed`` (phantoms, warpnet, train, eval)."""
    s = cfg.seed
    return (dataclasses.replace(cfg.phantoms, seed=s),
            dataclasses.replace(cfg.warpnet_optim, seed=s + 1),
            dataclasses.replace(cfg.train, seed=s + 2),
            s + 3)


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def make_phantoms(cfg: ExperimentConfig) -> Path:
    pcfg, _, _, _ = seeded(cfg)
    train = generate_cohort(pcfg)
    test = generate_cohort(dataclasses.replace(pcfg, n_patients=cfg.data.n_test_patients),
                           start_index=cfg.data.test_start_index)
    root = cfg.dataset_dir
    save_series(train, root / "train", cfg.data.spacing_mm)
    save_series(test, root / "test", cfg.data.spacing_mm)
    return root


def load_split(cfg: ExperimentConfig, split: str) -> Tuple[List[PatientSeries], float]:
    m = cfg.manifest(split)
    return load_series(m), load_spacing(m)


def _write_curve(path: Path, history: Dict[str, List[float]]) -> Path:
    keys = list(history)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step"] + keys)
    for i in range(len(history[keys[0]])):
        w.writerow([i] + [f"{history[k][i]:.8g}" for k in keys])
    path.write_text(buf.getvalue())
    return path


def read_curve(path) -> Dict[str, np.ndarray]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0] if k != "step"}


def train_deform(cfg: ExperimentConfig) -> Path:
    _, wopt, _, _ = seeded(cfg)
    cohort, spacing = load_split(cfg, "train")
    model, hist = wn.train_warpnet(cohort, cfg.warpnet, wopt, spacing, device=cfg.device)
    cfg.out.mkdir(parents=True, exist_ok=True)
    _write_curve(cfg.out / "warpnet_loss.csv", {"loss": hist})
    return wn.save_checkpoint(model.cpu(), cfg.out / "warpnet.pt", seed=wopt.seed)


def train_model(cfg: ExperimentConfig, warpnet_ckpt=None) -> Path:
    _, _, topt, _ = seeded(cfg)
    cohort, spacing = load_split(cfg, "train")
    warp = wn.load_checkpoint(warpnet_ckpt or cfg.out / "warpnet.pt") if cfg.gliomadiff.use_field else None
    model, hist = gd.train(cohort, warp, cfg.gliomadiff, topt, spacing, device=cfg.device)
    cfg.out.mkdir(parents=True, exist_ok=True)
    _write_curve(cfg.out / "gliomadiff_loss.csv", hist)
    return gd.save_checkpoint(model.cpu(), cfg.out / "gliomadiff.pt", seed=topt.seed)


def load_models(cfg: ExperimentConfig, checkpoint=None, warpnet_ckpt=None):
    model = gd.load_checkpoint(checkpoint or cfg.out / "gliomadiff.pt")
    warp = wn.load_checkpoint(warpnet_ckpt or cfg.out / "warpnet.pt") if model.cfg.use_field else None
    return model, warp


def _eval_cases(cohort: Sequence[PatientSeries]):
    for ps in cohort:
        for tr in enumerate_triplets(ps):
            yield ps.patient_id, tr


def evaluate(cfg: ExperimentConfig, checkpoint=None, warpnet_ckpt=None) -> Path:
    """Score every test triplet; writes records, calibration, clusters and areas."""
    _, _, _, eval_seed = seeded(cfg)
    model, warp = load_models(cfg, checkpoint, warpnet_ckpt)
    cohort, spacing = load_split(cfg, "test")
    e = cfg.eval
    gen = torch.Generator().manual_seed(eval_seed)
    cases = list(_eval_cases(cohort))
    if not cases:
        raise ValueError("test set has no triplets")
    records, masks = [], []
    y_target, y_mask, q_all = [], [], []
    for k in range(0, len(cases), e.batch_size):
        chunk = cases[k:k + e.batch_size]
        preds = gd.predict_batch(model, warp, [(tr.s1, tr.s2) for _, tr in chunk],
                                 [tr.s3.day for _, tr in chunk], generator=gen, spacing_mm=spacing,
                                 n_samples=e.n_samples, device=cfg.device)
        for (pid, tr), pr in zip(chunk, preds):
            truth = mask_to_prob(tr.s3.gtv_mask, spacing, model.cfg.prob_beta, model.cfg.prob_mu).p
            records.append(M.evaluate_prediction(pid, tr.dl2, truth, pr.p_hat, tr.s3.flair, pr.flair_hat,
                                                 e.threshold, e.support_threshold))
            masks.append((truth > e.threshold, pr.p_hat.p > e.threshold))
            binary = tr.s3.gtv_mask.astype(np.float64)
            y_mask.append(binary.ravel())
            y_target.append((truth if model.cfg.target == "prob" else binary).ravel())
            q_all.append(pr.p_hat.p.ravel())
    q = np.concatenate(q_all)
    rep_target = M.ece(np.concatenate(y_target), q, e.n_bins)
    rep_binary = M.ece(np.concatenate(y_mask), q, e.n_bins)
    headline = rep_target if e.ece_truth == "target" else rep_binary
    out = cfg.out / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "records.csv").write_text(M.records_to_csv(records))
    calib = headline.to_dict()
    calib.update(truth=e.ece_truth, model_target=model.cfg.target,
                 vs_target=rep_target.to_dict(), vs_binary=rep_binary.to_dict())
    (out / "calibration.json").write_text(json.dumps(calib, indent=1, sort_keys=True) + "\n")
    (out / "clusters.csv").write_text(M.clusters_to_csv(M.interval_clusters(records)))
    areas = M.area_agreement(masks, spacing)
    areas["patients"] = [r.patient_id for r in records]
    (out / "areas.json").write_text(json.dumps(areas, indent=1, sort_keys=True) + "\n")
    return out


def predict_one(cfg: ExperimentConfig, patient_id: str, target_day: int, checkpoint=None,
                warpnet_ckpt=None, split: Optional[str] = None) -> Path:
    """Predict one patient at ``target_day`` from the last two studies before it."""
    model, warp = load_models(cfg, checkpoint, warpnet_ckpt)
    series, spacing = None, 1.0
    for sp in ([split] if split else ["test", "train"]):
        m = cfg.manifest(sp)
        if not m.is_file():
            continue
        found = [ps for ps in load_series(m) if ps.patient_id == patient_id]
        if found:
            series, spacing = found[0], load_spacing(m)
            break
    if series is None:
        raise KeyError(f"patient {patient_id!r} not found under {cfg.dataset_dir}")
    before = [s for s in series.studies if s.day < target_day]
    if len(before) < 2:
        raise ValueError(f"patient {patient_id}: need two studies before day {target_day}")
    s1, s2 = before[-2], before[-1]
    gen = torch.Generator().manual_seed(seeded(cfg)[3])
    pr = gd.predict(model, warp, s1, s2, int(target_day), generator=gen, spacing_mm=spacing,
                    n_samples=cfg.eval.n_samples, device=cfg.device)
    out = cfg.out / "predictions" / f"{patient_id}_day{int(target_day)}"
    out.mkdir(parents=True, exist_ok=True)
    arrays = {"flair_hat": pr.flair_hat, "p_hat": pr.p_hat.p, "uncertainty": pr.uncertainty}
    for name, arr in arrays.items():
        np.asarray(arr, dtype="<f4").tofile(out / f"{name}.raw")
    meta = {"patient_id": patient_id, "target_day": int(target_day), "input_days": [s1.day, s2.day],
            "dl": [s2.day - s1.day, int(target_day) - s2.day], "shape": list(pr.p_hat.p.shape),
            "dtype": "<f4", "spacing_mm": spacing, "files": {k: f"{k}.raw" for k in arrays},
            "uncertainty": "variance" if cfg.eval.n_samples > 1 else "entropy_bits",
            "prob_beta": pr.p_hat.beta, "prob_mu": pr.p_hat.mu}
    (out / "prediction.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    from . import plots
    plots.prediction_preview(out / "preview.png", s2.flair, pr.flair_hat, pr.p_hat.p, pr.uncertainty)
    return out


def plot(cfg: ExperimentConfig) -> List[Path]:
    from . import plots
    ev = cfg.out / "eval"
    records = M.records_from_csv((ev / "records.csv").read_text())
    calib = json.loads((ev / "calibration.json").read_text())
    areas = json.loads((ev / "areas.json").read_text())
    out = cfg.out / "plots"
    out.mkdir(parents=True, exist_ok=True)
    return [
        plots.calibration_curve(out / "calibration.png", calib),
        plots.interval_boxplots(out / "interval_boxplots.png", records),
        plots.area_scatter(out / "area_scatter.png", areas),
    ]


def run_all(cfg: ExperimentConfig) -> Path:
    """make-phantoms, train-deform, train, evaluate and plot in sequence."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    cfg.save(cfg.out / "config.json")
    make_phantoms(cfg)
    if cfg.gliomadiff.use_field:
        train_deform(cfg)
    train_model(cfg)
    evaluate(cfg)
    plot(cfg)
    return cfg.out
