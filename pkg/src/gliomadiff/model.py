"""Multitask diffusion network: one shared encoder, two decoders.

The generative decoder predicts diffusion noise for the target-day FLAIR; the
predictive decoder outputs tumor-probability logits. The encoder and both
decoders are FiLM-modulated by an embedding of the day gaps [dl1, dl2]; only
the generative decoder additionally sees the diffusion-step embedding, so the
probability branch never depends on the step index.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from . import diffusion as dm
from .dataio import (DEFAULT_JITTER_DAYS, DEFAULT_MIN_AREA_MM2, PatientSeries, Study,
                     enumerate_triplets, filter_slices, jitter_condition)
from .layers import Down, ResBlock, TimeMLP, Up, check_channels
from .sdfprob import DEFAULT_BETA, DEFAULT_MU, ProbMap, logistic, mask_to_sdf
from .warpnet import WarpNet

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "gliomadiff.multitask"
CHECKPOINT_VERSION = 1
BCE_EPS = 1e-7

# per-study channels available to the source stack; suffix 1/2 selects the study
STUDY_CHANNELS = ("flair", "t1ce", "phi", "dose")
DEFAULT_SOURCES = ("flair1", "t1ce1", "phi1", "flair2", "t1ce2", "phi2", "dose2")


@dataclass
class GliomaDiffConfig:
    channels: List[int] = field(default_factory=lambda: [64, 128, 256, 512])
    time_embed_dim: int = 128
    lambda_rt: float = 0.1
    gamma: float = 2.0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sources: List[str] = field(default_factory=lambda: list(DEFAULT_SOURCES))
    use_field: bool = True
    sdf_scale_mm: float = 10.0
    prob_beta: float = DEFAULT_BETA
    prob_mu: float = DEFAULT_MU
    # "prob": logistic SDF maps as predictive targets; "binary": raw GTV masks
    target: str = "prob"
    jitter_days: int = DEFAULT_JITTER_DAYS
    min_area_mm2: float = DEFAULT_MIN_AREA_MM2

    def validate(self) -> None:
        check_channels(self.channels)
        if self.lambda_rt < 0:
            raise ValueError("lambda_rt must be >= 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.time_embed_dim % 4:
            raise ValueError("time_embed_dim must be a multiple of 4")
        if self.target not in ("prob", "binary"):
            raise ValueError("target must be 'prob' or 'binary'")
        for s in self.sources:
            if s[:-1] not in STUDY_CHANNELS or s[-1] not in "12":
                raise ValueError(f"unknown source channel {s!r}")

    @property
    def in_channels(self) -> int:
        return 1 + len(self.sources) + (2 if self.use_field else 0)

    def schedule(self) -> dm.DiffusionSchedule:
        return dm.make_linear_schedule(self.T, self.beta_start, self.beta_end)


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 4e-5
    seed: int = 0
    log_every: int = 100
    grad_clip: float = 1.0
    # "constant" or "cosine" (decay to zero over ``steps``)
    lr_schedule: str = "constant"


@dataclass
class ConditionBundle:
    """Batched conditioning: sources [B, S, H, W], field [B, 2, H, W] px, dl [B, 2] days."""
    sources: torch.Tensor
    field: Optional[torch.Tensor]
    dl: torch.Tensor

    def __post_init__(self):
        hw = self.sources.shape[-2:]
        if self.field is not None and self.field.shape[-2:] != hw:
            raise ValueError("field and sources differ in spatial shape")
        if (self.dl < 1).any():
            raise ValueError("day gaps must be >= 1")


class MultiTaskUNet(nn.Module):
    def __init__(self, cfg: GliomaDiffConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = cfg.channels
        e = cfg.time_embed_dim
        self.rho = TimeMLP(2, e)  # day gaps
        self.tau = TimeMLP(1, e)  # diffusion step
        self.stem = nn.Conv2d(cfg.in_channels, ch[0], 3, padding=1)
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        c_prev = ch[0]
        for i, c in enumerate(ch):
            self.enc.append(ResBlock(c_prev, c, e))
            if i < len(ch) - 1:
                self.down.append(Down(c))
            c_prev = c
        self.mid = ResBlock(ch[-1], ch[-1], e)
        self.gen_up, self.gen_dec, self.gen_head = self._decoder(ch, e)
        self.pred_up, self.pred_dec, self.pred_head = self._decoder(ch, e)

    @staticmethod
    def _decoder(ch, e):
        ups, blocks = nn.ModuleList(), nn.ModuleList()
        c_prev = ch[-1]
        for i in reversed(range(len(ch) - 1)):
            ups.append(Up(c_prev))
            blocks.append(ResBlock(c_prev + ch[i], ch[i], e))
            c_prev = ch[i]
        head = nn.Sequential(nn.GroupNorm(min(8, ch[0]), ch[0]), nn.SiLU(),
                             nn.Conv2d(ch[0], 1, 3, padding=1))
        return ups, blocks, head

    def encode(self, x: torch.Tensor, emb_dl: torch.Tensor):
        h = self.stem(x)
        skips = []
        for i, block in enumerate(self.enc):
            h = block(h, emb_dl)
            if i < len(self.down):
                skips.append(h)
                h = self.down[i](h)
        return self.mid(h, emb_dl), skips

    @staticmethod
    def _decode(h, skips, emb, ups, blocks, head):
        skips = list(skips)
        for up, block in zip(ups, blocks):
            h = block(torch.cat([up(h), skips.pop()], dim=1), emb)
        return head(h)

    def stack_inputs(self, x_t: torch.Tensor, cond: ConditionBundle) -> torch.Tensor:
        parts = [x_t, cond.sources]
        if self.cfg.use_field:
            if cond.field is None:
                raise ValueError("model expects a deformation field")
            parts.append(cond.field / x_t.shape[-1])
        return torch.cat(parts, dim=1)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond: ConditionBundle,
                branches: Tuple[str, ...] = ("gen", "pred")):
        if x_t.shape[-2:] != cond.sources.shape[-2:] or x_t.shape[1] != 1:
            raise ValueError(f"x_t {tuple(x_t.shape)} does not match sources {tuple(cond.sources.shape)}")
        dtype = self.stem.weight.dtype
        emb_dl = self.rho(cond.dl.to(dtype))
        h, skips = self.encode(self.stack_inputs(x_t, cond), emb_dl)
        eps_hat = logits = None
        if "gen" in branches:
            emb_gen = emb_dl + self.tau(t.to(dtype).view(-1))
            eps_hat = self._decode(h, skips, emb_gen, self.gen_up, self.gen_dec, self.gen_head)
        if "pred" in branches:
            logits = self._decode(h, skips, emb_dl, self.pred_up, self.pred_dec, self.pred_head)
        return eps_hat, logits


def rt_weighted_loss(p_true: torch.Tensor, logits: torch.Tensor, dose: torch.Tensor,
                     gamma: float = 2.0) -> torch.Tensor:
    """Mean of (1 + R^gamma) * soft-label BCE(P, sigmoid(logits))."""
    if p_true.shape != logits.shape or dose.shape != logits.shape:
        raise ValueError("p_true, logits and dose must share a shape")
    q = torch.sigmoid(logits).clamp(BCE_EPS, 1 - BCE_EPS)
    bce = -(p_true * torch.log(q) + (1 - p_true) * torch.log(1 - q))
    return ((1 + dose.clamp(0, 1) ** gamma) * bce).mean()


def total_loss(eps, eps_hat, p_true, logits, dose, cfg: GliomaDiffConfig, return_terms=False):
    l_diff = dm.simple_loss(eps, eps_hat)
    l_rt = rt_weighted_loss(p_true, logits, dose, cfg.gamma)
    loss = l_diff + cfg.lambda_rt * l_rt
    return (loss, l_diff, l_rt) if return_terms else loss


def binary_entropy_bits(p) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), BCE_EPS, 1 - BCE_EPS)
    return -(p * np.log(p) + (1 - p) * np.log(1 - p)) / np.log(2.0)


class StudyBank:
    """Flat per-study arrays (images, SDFs, target maps) for fast batching."""

    def __init__(self, cohort: Sequence[PatientSeries], cfg: GliomaDiffConfig, spacing_mm: float):
        self.index: Dict[Tuple[int, int], int] = {}
        flair, t1ce, phi, dose, mask, days = [], [], [], [], [], []
        for p, ps in enumerate(cohort):
            for k, st in enumerate(ps.studies):
                self.index[(p, k)] = len(flair)
                flair.append(st.flair)
                t1ce.append(st.t1ce)
                dose.append(st.dose)
                mask.append(st.gtv_mask)
                phi.append(mask_to_sdf(st.gtv_mask, spacing_mm).phi)
                days.append(st.day)
        f32 = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float32))  # noqa: E731
        self.flair, self.t1ce, self.dose, self.mask = f32(flair), f32(t1ce), f32(dose), f32(mask)
        self.phi_mm = f32(phi)
        self.phi = self.phi_mm / cfg.sdf_scale_mm
        self.prob = f32(logistic(np.asarray(phi), cfg.prob_beta, cfg.prob_mu))
        self.days = torch.as_tensor(days, dtype=torch.long)

    def channel(self, name: str, idx: torch.Tensor) -> torch.Tensor:
        return getattr(self, name)[idx]


def build_sources(cfg: GliomaDiffConfig, get) -> torch.Tensor:
    """Stack ``cfg.sources``; ``get(channel, which)`` returns [B, H, W] for study 1 or 2."""
    return torch.stack([get(s[:-1], int(s[-1])) for s in cfg.sources], dim=1)


def training_triplets(cohort: Sequence[PatientSeries], cfg: GliomaDiffConfig,
                      spacing_mm: float) -> List[Tuple[int, int, int, int]]:
    """(patient, i, i+1, j) index tuples that pass the target-area filter."""
    out = []
    for p, ps in enumerate(cohort):
        trips = enumerate_triplets(ps)
        keep = {id(t) for t in filter_slices(trips, cfg.min_area_mm2, spacing_mm)}
        n = len(ps.studies)
        pos = [(i, j) for i in range(n - 2) for j in range(i + 2, n)]
        out += [(p, i, i + 1, j) for t, (i, j) in zip(trips, pos) if id(t) in keep]
    return out


def _field_for(warpnet: Optional[WarpNet], phi1: torch.Tensor, phi2: torch.Tensor,
               dl1: torch.Tensor, sdf_scale_mm: float) -> Optional[torch.Tensor]:
    """Frozen warpnet field; phi inputs in mm, [B, H, W]."""
    if warpnet is None:
        return None
    s = warpnet.cfg.sdf_scale_mm
    with torch.no_grad():
        return warpnet(phi1[:, None] / s, phi2[:, None] / s, dl1.float())


def train(cohort: Sequence[PatientSeries], warpnet: Optional[WarpNet], cfg: GliomaDiffConfig,
          opt: TrainConfig, spacing_mm: float = 1.0, device: str = "cpu"):
    """Train the multitask model; returns (model, history dict of per-step losses)."""
    cfg.validate()
    trips = training_triplets(cohort, cfg, spacing_mm)
    if not trips:
        raise ValueError("no training triplets left after enumeration and filtering")
    if cfg.use_field and warpnet is None:
        raise ValueError("use_field requires a pretrained warpnet")
    torch.manual_seed(opt.seed)
    rng = np.random.default_rng(opt.seed)
    gen = torch.Generator().manual_seed(opt.seed)
    bank = StudyBank(cohort, cfg, spacing_mm)
    sched = cfg.schedule()
    model = MultiTaskUNet(cfg).to(device)
    if warpnet is not None:
        warpnet.to(device).eval()
        for prm in warpnet.parameters():
            prm.requires_grad_(False)
    optim = torch.optim.Adam(model.parameters(), lr=opt.lr)
    if opt.lr_schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown lr_schedule {opt.lr_schedule!r}")
    decay = torch.optim.lr_scheduler.CosineAnnealingLR(optim, opt.steps) \
        if opt.lr_schedule == "cosine" else None
    tri = np.asarray([[bank.index[(p, a)], bank.index[(p, b)], bank.index[(p, c)]]
                      for p, a, b, c in trips])
    history: Dict[str, List[float]] = {"total": [], "diff": [], "rt": []}
    model.train()
    for step in range(opt.steps):
        sel = tri[rng.integers(len(tri), size=opt.batch_size)]
        i1, i2, i3 = (torch.as_tensor(sel[:, k]) for k in range(3))
        dl1 = (bank.days[i2] - bank.days[i1]).numpy()
        dl2 = (bank.days[i3] - bank.days[i2]).numpy()
        dl = torch.tensor([[jitter_condition(int(a), cfg.jitter_days, rng),
                            jitter_condition(int(b), cfg.jitter_days, rng)]
                           for a, b in zip(dl1, dl2)], dtype=torch.float32)
        pick = {1: i1, 2: i2}
        sources = build_sources(cfg, lambda ch, w: bank.channel(ch, pick[w])).to(device)
        dl = dl.to(device)
        fld = _field_for(warpnet, bank.phi_mm[i1].to(device), bank.phi_mm[i2].to(device), dl[:, 0],
                         cfg.sdf_scale_mm) if cfg.use_field else None
        cond = ConditionBundle(sources, fld, dl)
        x0 = bank.flair[i3][:, None]
        p_true = (bank.prob if cfg.target == "prob" else bank.mask)[i3][:, None].to(device)
        t = torch.randint(1, sched.T + 1, (opt.batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        x_t = dm.q_sample(x0, t, eps, sched).float().to(device)
        eps_hat, logits = model(x_t, t.to(device), cond)
        loss, l_diff, l_rt = total_loss(eps.to(device), eps_hat, p_true, logits,
                                        bank.dose[i2][:, None].to(device), cfg, return_terms=True)
        optim.zero_grad(set_to_none=True)
        loss.backward()
        if opt.grad_clip:
            nn.utils.clip_grad_norm_(model.parameters(), opt.grad_clip)
        optim.step()
        if decay is not None:
            decay.step()
        history["total"].append(loss.item())
        history["diff"].append(l_diff.item())
        history["rt"].append(l_rt.item())
        if opt.log_every and step % opt.log_every == 0:
            log.info("step %d total %.4f diff %.4f rt %.4f", step, *(history[k][-1] for k in history))
    model.eval()
    return model, history


@dataclass
class Prediction:
    flair_hat: np.ndarray
    p_hat: ProbMap
    uncertainty: np.ndarray
    logits: np.ndarray


def condition_from_studies(cfg: GliomaDiffConfig, warpnet: Optional[WarpNet],
                           pairs: Sequence[Tuple[Study, Study]], target_days: Sequence[int],
                           spacing_mm: float = 1.0, device: str = "cpu") -> ConditionBundle:
    phis = {}
    feats = {}
    for w in (1, 2):
        studies = [p[w - 1] for p in pairs]
        phi_mm = torch.as_tensor(np.stack([mask_to_sdf(s.gtv_mask, spacing_mm).phi for s in studies]),
                                 dtype=torch.float32)
        phis[w] = phi_mm
        feats[(w, "phi")] = phi_mm / cfg.sdf_scale_mm
        for ch in ("flair", "t1ce", "dose"):
            feats[(w, ch)] = torch.as_tensor(np.stack([getattr(s, ch) for s in studies]),
                                             dtype=torch.float32)
    for (s1, s2), td in zip(pairs, target_days):
        if td <= s2.day:
            raise ValueError(f"target_day {td} must be after the last input day {s2.day}")
    dl = torch.tensor([[s2.day - s1.day, td - s2.day] for (s1, s2), td in zip(pairs, target_days)],
                      dtype=torch.float32)
    dl = dl.to(device)
    sources = build_sources(cfg, lambda ch, w: feats[(w, ch)]).to(device)
    fld = _field_for(warpnet, phis[1].to(device), phis[2].to(device), dl[:, 0],
                     cfg.sdf_scale_mm) if cfg.use_field else None
    return ConditionBundle(sources, fld, dl)


@torch.no_grad()
def predict_batch(model: MultiTaskUNet, warpnet: Optional[WarpNet],
                  pairs: Sequence[Tuple[Study, Study]], target_days: Sequence[int],
                  sched: Optional[dm.DiffusionSchedule] = None,
                  generator: Optional[torch.Generator] = None, spacing_mm: float = 1.0,
                  n_samples: int = 1, device: str = "cpu") -> List[Prediction]:
    """Sample target-day FLAIR and probability maps for a batch of input pairs.

    With ``n_samples > 1`` the sampler is run repeatedly; the returned maps are
    the sample means and the uncertainty is the per-pixel variance of p_hat
    instead of the Bernoulli entropy.
    """
    model.to(device).eval()
    if warpnet is not None:
        warpnet.to(device)
    sched = sched or model.cfg.schedule()
    cond = condition_from_studies(model.cfg, warpnet, pairs, target_days, spacing_mm, device)
    B = len(pairs)
    H, W = cond.sources.shape[-2:]
    flairs, probs = [], []
    for _ in range(n_samples):
        def eps_fn(x, t):
            return model(x, t, cond, branches=("gen",))[0]
        # noise is drawn on the CPU generator so results do not depend on the device
        x_T = torch.randn((B, 1, H, W), generator=generator).to(device)
        x0 = dm.sample_loop(eps_fn, (B, 1, H, W), sched, generator=generator, x_T=x_T)
        # probability branch read out on the final denoised state
        _, logits = model(x0, torch.ones(B, dtype=torch.long, device=device), cond, branches=("pred",))
        flairs.append(x0[:, 0].cpu().numpy().astype(np.float64))
        probs.append(logits[:, 0].cpu().numpy().astype(np.float64))
    out = []
    for b in range(B):
        lg = np.mean([l[b] for l in probs], axis=0)
        ps = np.stack([1.0 / (1.0 + np.exp(-l[b])) for l in probs])
        p = np.clip(ps.mean(axis=0), BCE_EPS, 1 - BCE_EPS)
        unc = ps.var(axis=0) if n_samples > 1 else binary_entropy_bits(p)
        out.append(Prediction(flair_hat=np.mean([f[b] for f in flairs], axis=0),
                              p_hat=ProbMap(p, model.cfg.prob_beta, model.cfg.prob_mu),
                              uncertainty=unc, logits=lg))
    return out


def predict(model: MultiTaskUNet, warpnet: Optional[WarpNet], s1: Study, s2: Study,
            target_day: int, sched: Optional[dm.DiffusionSchedule] = None,
            generator: Optional[torch.Generator] = None, spacing_mm: float = 1.0,
            n_samples: int = 1, device: str = "cpu") -> Prediction:
    if target_day <= s2.day:
        raise ValueError(f"target_day {target_day} must be after s2.day {s2.day}")
    return predict_batch(model, warpnet, [(s1, s2)], [target_day], sched, generator,
                         spacing_mm, n_samples, device)[0]


def save_checkpoint(model: MultiTaskUNet, path, seed: int = 0, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(model.cfg),
        "schedule": model.cfg.schedule().to_dict(),
        "seed": seed,
        "extra": extra or {},
        "state_dict": model.state_dict(),
    }, path)
    return path


def load_checkpoint(path) -> MultiTaskUNet:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT or ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} multitask checkpoint")
    model = MultiTaskUNet(GliomaDiffConfig(**ckpt["config"]))
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model
