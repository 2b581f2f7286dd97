"""Network building blocks shared by the deformation and prediction U-Nets."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


def embed_time(values, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of one or more scalars per sample.

    ``values`` has shape [B] or [B, k]; each of the k scalars gets ``dim // k``
    features laid out as [sin..., cos...], and the k blocks are concatenated.
    """
    v = torch.as_tensor(values)
    if not v.is_floating_point():
        v = v.to(torch.get_default_dtype())
    if v.ndim == 0:
        v = v.view(1, 1)
    elif v.ndim == 1:
        v = v[:, None]
    k = v.shape[1]
    if dim <= 0 or dim % (2 * k):
        raise ValueError(f"dim={dim} must be a positive multiple of 2 * {k}")
    half = dim // (2 * k)
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=v.dtype, device=v.device) / half)
    args = v[:, :, None] * freqs  # [B, k, half]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return emb.reshape(v.shape[0], dim)


class TimeMLP(nn.Module):
    """Sinusoidal embedding followed by a 2-layer MLP."""

    def __init__(self, n_values: int, dim: int, out_dim: Optional[int] = None):
        super().__init__()
        self.dim = dim
        self.n_values = n_values
        out_dim = out_dim or dim
        self.mlp = nn.Sequential(nn.Linear(dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim))

    def forward(self, values: torch.Tensor) -> torch.Tensor:
        w = self.mlp[0].weight
        return self.mlp(embed_time(values.to(w.dtype), self.dim))


def film_modulate(features: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    """(1 + scale) * features + shift, per channel, broadcast over space."""
    return features * (1 + scale[:, :, None, None]) + shift[:, :, None, None]


class FiLM(nn.Module):
    def __init__(self, channels: int, embed_dim: int):
        super().__init__()
        self.proj = nn.Linear(embed_dim, 2 * channels)
        # start as the identity modulation
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, features: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        scale, shift = self.proj(F.silu(emb)).chunk(2, dim=1)
        return film_modulate(features, scale, shift)


def _groups(c: int) -> int:
    for g in (8, 4, 2):
        if c % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    """Residual 3x3 block, optionally FiLM-modulated by an embedding."""

    def __init__(self, c_in: int, c_out: int, embed_dim: Optional[int] = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.film = FiLM(c_out, embed_dim) if embed_dim else None
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, emb: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.norm2(h)
        if self.film is not None:
            h = self.film(h, emb)
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class Down(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv = nn.Conv2d(c, c, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Up(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


def check_channels(channels: Sequence[int]) -> None:
    if len(channels) < 1 or any(c <= 0 for c in channels):
        raise ValueError(f"invalid channel widths {list(channels)}")
