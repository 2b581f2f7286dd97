"""Tumor-evolution module: time-conditioned displacement-field U-Net.

Given two signed distance maps and the day gap between them, the network
predicts a dense displacement field ``v`` (pixels, channel 0 = dx along
columns, channel 1 = dy along rows) such that sampling the earlier map at
``x + v(x)`` reproduces the later one.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataio import PatientSeries
from .layers import Down, ResBlock, TimeMLP, Up
from .sdfprob import SdfMap, mask_to_sdf

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "gliomadiff.warpnet"
CHECKPOINT_VERSION = 1


@dataclass
class WarpNetConfig:
    levels: int = 4
    base_channels: int = 32
    time_embed_dim: int = 64
    lambda_smooth: float = 0.1
    # SDF inputs and loss are expressed in units of this many mm
    sdf_scale_mm: float = 10.0

    def validate(self) -> None:
        if self.levels < 1 or self.base_channels <= 0 or self.time_embed_dim <= 0:
            raise ValueError("levels >= 1 and positive widths required")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.lambda_smooth < 0:
            raise ValueError("lambda_smooth must be >= 0")

    @property
    def channels(self) -> List[int]:
        return [self.base_channels * 2 ** i for i in range(self.levels)]


@dataclass
class OptimConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    log_every: int = 100


@dataclass
class DeformationField:
    v: np.ndarray  # [H, W, 2] pixels, (dx, dy)

    def __post_init__(self):
        if self.v.ndim != 3 or self.v.shape[-1] != 2:
            raise ValueError(f"field must be [H, W, 2], got {self.v.shape}")
        if not np.isfinite(self.v).all():
            raise ValueError("field contains non-finite values")

    def to_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(np.moveaxis(self.v, -1, 0)[None].copy(), dtype=dtype)

    @classmethod
    def from_tensor(cls, t: torch.Tensor) -> "DeformationField":
        return cls(np.moveaxis(t.detach().cpu().numpy()[0], 0, -1).astype(np.float64))


class WarpNet(nn.Module):
    def __init__(self, cfg: WarpNetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = cfg.channels
        self.time = TimeMLP(1, cfg.time_embed_dim)
        self.stem = nn.Conv2d(2, ch[0], 3, padding=1)
        self.enc = nn.ModuleList()
        self.time_proj = nn.ModuleList()
        self.down = nn.ModuleList()
        c_prev = ch[0]
        for i, c in enumerate(ch):
            self.enc.append(ResBlock(c_prev, c))
            self.time_proj.append(nn.Linear(cfg.time_embed_dim, c))
            if i < len(ch) - 1:
                self.down.append(Down(c))
            c_prev = c
        self.mid = ResBlock(ch[-1], ch[-1])
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in reversed(range(len(ch) - 1)):
            self.up.append(Up(c_prev))
            self.dec.append(ResBlock(c_prev + ch[i], ch[i]))
            c_prev = ch[i]
        self.head = nn.Conv2d(ch[0], 2, 3, padding=1)
        # zero output head: the untrained network predicts the identity warp
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, phi1: torch.Tensor, phi2: torch.Tensor, dl: torch.Tensor) -> torch.Tensor:
        """phi inputs [B, 1, H, W] already divided by ``sdf_scale_mm``; dl [B] days."""
        emb = self.time(dl.view(-1))
        h = self.stem(torch.cat([phi1, phi2], dim=1))
        skips = []
        for i, block in enumerate(self.enc):
            h = block(h)
            h = h + self.time_proj[i](F.silu(emb))[:, :, None, None]
            if i < len(self.down):
                skips.append(h)
                h = self.down[i](h)
        h = self.mid(h)
        for up, block in zip(self.up, self.dec):
            h = up(h)
            h = block(torch.cat([h, skips.pop()], dim=1))
        return self.head(F.silu(h))


def warp(phi, field, padding: str = "border"):
    """Bilinearly sample ``phi`` at ``x + field(x)`` with border clamping.

    Accepts torch tensors (phi [B, C, H, W], field [B, 2, H, W]) and keeps the
    autograd graph, or a 2D numpy image with a ``DeformationField`` /
    [H, W, 2] array, returning a 2D numpy image.
    """
    if padding != "border":
        raise ValueError("only border padding is supported")
    if not torch.is_tensor(phi):
        v = field.v if isinstance(field, DeformationField) else np.asarray(field)
        img = torch.as_tensor(np.asarray(phi, dtype=np.float64))[None, None]
        fld = torch.as_tensor(np.moveaxis(v, -1, 0)[None].astype(np.float64))
        return warp(img, fld).numpy()[0, 0]
    if phi.shape[-2:] != field.shape[-2:] or field.shape[1] != 2:
        raise ValueError(f"shape mismatch: image {tuple(phi.shape)} vs field {tuple(field.shape)}")
    if not torch.isfinite(field).all():
        raise ValueError("field contains non-finite values")
    B, C, H, W = phi.shape
    gy = torch.arange(H, dtype=field.dtype, device=field.device)[:, None]
    gx = torch.arange(W, dtype=field.dtype, device=field.device)[None, :]
    xs = (gx + field[:, 0]).clamp(0, W - 1)
    ys = (gy + field[:, 1]).clamp(0, H - 1)
    x0 = xs.detach().floor()
    y0 = ys.detach().floor()
    wx = (xs - x0)[:, None]
    wy = (ys - y0)[:, None]
    x0i, y0i = x0.long(), y0.long()
    x1i = (x0i + 1).clamp(max=W - 1)
    y1i = (y0i + 1).clamp(max=H - 1)
    flat = phi.reshape(B, C, H * W)

    def gather(yi, xi):
        idx = (yi * W + xi).reshape(B, 1, H * W).expand(B, C, H * W)
        return flat.gather(2, idx).reshape(B, C, H, W)

    return ((1 - wy) * ((1 - wx) * gather(y0i, x0i) + wx * gather(y0i, x1i))
            + wy * ((1 - wx) * gather(y1i, x0i) + wx * gather(y1i, x1i)))


def smoothness(field: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of the squared forward-difference gradient norm."""
    B, _, H, W = field.shape
    dx = field[..., :, 1:] - field[..., :, :-1]
    dy = field[..., 1:, :] - field[..., :-1, :]
    return ((dx ** 2).sum() + (dy ** 2).sum()) / (B * H * W)


def _as_tensor_map(x, dtype=torch.float64) -> torch.Tensor:
    if torch.is_tensor(x):
        return x
    arr = x.phi if isinstance(x, SdfMap) else np.asarray(x)
    return torch.as_tensor(np.asarray(arr, dtype=np.float64), dtype=dtype)[None, None]


def deformation_loss(phi1, phi2, field, lambda_smooth: float = 0.1, return_terms: bool = False):
    """Mean |phi2 - phi1 o v| + lambda_smooth * mean ||grad v||^2."""
    p1 = _as_tensor_map(phi1)
    p2 = _as_tensor_map(phi2, p1.dtype)
    if not torch.is_tensor(field):
        v = field.v if isinstance(field, DeformationField) else np.asarray(field)
        field = torch.as_tensor(np.moveaxis(v, -1, 0)[None].astype(np.float64), dtype=p1.dtype)
    if p1.shape != p2.shape or p1.shape[-2:] != field.shape[-2:]:
        raise ValueError("shape mismatch between SDF maps and field")
    sim = (p2 - warp(p1, field)).abs().mean()
    smooth = smoothness(field)
    loss = sim + lambda_smooth * smooth
    return (loss, sim, smooth) if return_terms else loss


@torch.no_grad()
def predict_field(model: WarpNet, phi1, phi2, dl_days) -> DeformationField:
    p1 = phi1.phi if isinstance(phi1, SdfMap) else np.asarray(phi1)
    p2 = phi2.phi if isinstance(phi2, SdfMap) else np.asarray(phi2)
    if p1.shape != p2.shape:
        raise ValueError(f"shape mismatch {p1.shape} vs {p2.shape}")
    if int(dl_days) < 1:
        raise ValueError("dl_days must be >= 1")
    dtype = next(model.parameters()).dtype
    s = model.cfg.sdf_scale_mm
    t1 = torch.as_tensor(p1 / s, dtype=dtype)[None, None]
    t2 = torch.as_tensor(p2 / s, dtype=dtype)[None, None]
    model.eval()
    out = model(t1, t2, torch.tensor([float(dl_days)], dtype=dtype))
    return DeformationField.from_tensor(out)


def study_sdfs(series: Sequence[PatientSeries], spacing_mm: float = 1.0) -> List[List[np.ndarray]]:
    return [[mask_to_sdf(s.gtv_mask, spacing_mm).phi.astype(np.float32) for s in ps.studies]
            for ps in series]


def _pairs(series: Sequence[PatientSeries]) -> List[Tuple[int, int, int]]:
    return [(p, a, b) for p, ps in enumerate(series)
            for a in range(len(ps.studies)) for b in range(a + 1, len(ps.studies))]


def train_warpnet(cohort: Sequence[PatientSeries], cfg: WarpNetConfig, opt: OptimConfig,
                  spacing_mm: float = 1.0, sdfs=None, pairs=None,
                  device: str = "cpu") -> Tuple[WarpNet, List[float]]:
    """Fit a WarpNet on random same-patient (earlier, later) study pairs."""
    pairs = _pairs(cohort) if pairs is None else list(pairs)
    if not pairs:
        raise ValueError("cohort has no same-patient study pairs")
    torch.manual_seed(opt.seed)
    rng = np.random.default_rng(opt.seed)
    sdfs = study_sdfs(cohort, spacing_mm) if sdfs is None else sdfs
    model = WarpNet(cfg).to(device)
    optim = torch.optim.Adam(model.parameters(), lr=opt.lr)
    history = []
    s = cfg.sdf_scale_mm
    model.train()
    for step in range(opt.steps):
        idx = rng.integers(len(pairs), size=opt.batch_size)
        batch = [pairs[i] for i in idx]
        p1 = torch.as_tensor(np.stack([sdfs[p][a] for p, a, _ in batch])[:, None] / s, device=device)
        p2 = torch.as_tensor(np.stack([sdfs[p][b] for p, _, b in batch])[:, None] / s, device=device)
        dl = torch.as_tensor([float(cohort[p].studies[b].day - cohort[p].studies[a].day)
                              for p, a, b in batch], device=device)
        v = model(p1, p2, dl)
        loss = deformation_loss(p1, p2, v, cfg.lambda_smooth)
        optim.zero_grad(set_to_none=True)
        loss.backward()
        optim.step()
        history.append(loss.item())
        if opt.log_every and step % opt.log_every == 0:
            log.info("warpnet step %d loss %.5f", step, history[-1])
    model.eval()
    return model, history


def save_checkpoint(model: WarpNet, path, seed: int = 0, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(model.cfg),
        "seed": seed,
        "extra": extra or {},
        "state_dict": model.state_dict(),
    }, path)
    return path


def load_checkpoint(path) -> WarpNet:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT or ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} warpnet checkpoint")
    model = WarpNet(WarpNetConfig(**ckpt["config"]))
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model
