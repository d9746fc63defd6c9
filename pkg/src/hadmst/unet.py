"""Condition fusion g_t and the residual U-Net noise predictor."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .structures import ConditionBundle


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape [B, dim]."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _groups(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0:
            return g
    return 1


class ConditionFuser(nn.Module):
    """g_t: concat(psi_m, phi_s or a learned null) -> 1x1 projection + time embedding.

    Both feature maps are resampled onto a common grid before concatenation.
    When the low-resolution branch is missing, a learned null vector is
    broadcast in its place, so the condition degrades to a function of the
    morphology features and t alone.
    """

    def __init__(self, psi_channels: int, phi_channels: int, cond_channels: int, t_dim: int):
        super().__init__()
        self.phi_channels = phi_channels
        self.t_dim = t_dim
        self.null_phi = nn.Parameter(torch.zeros(phi_channels))
        nn.init.normal_(self.null_phi, std=0.02)
        self.proj = nn.Conv2d(psi_channels + phi_channels, cond_channels, 1)
        self.time_mlp = nn.Sequential(
            nn.Linear(t_dim, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim)
        )
        self.time_to_cond = nn.Linear(t_dim, cond_channels)

    def null_map(self, batch: int, grid: Sequence[int]) -> torch.Tensor:
        return self.null_phi[None, :, None, None].expand(batch, -1, *grid)

    def embed_time(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(timestep_embedding(t, self.t_dim))

    def forward(
        self,
        psi_m: torch.Tensor,
        phi_s: Optional[torch.Tensor],
        t: torch.Tensor,
        grid: Sequence[int],
    ) -> ConditionBundle:
        b = psi_m.shape[0]
        grid = tuple(grid)
        psi = psi_m if tuple(psi_m.shape[-2:]) == grid else F.interpolate(
            psi_m, size=grid, mode="bilinear", align_corners=False
        )
        if phi_s is None:
            phi = self.null_map(b, grid)
        elif tuple(phi_s.shape[-2:]) == grid:
            phi = phi_s
        else:
            phi = F.interpolate(phi_s, size=grid, mode="bilinear", align_corners=False)
        t_embed = self.embed_time(t)
        fused = self.proj(torch.cat([psi, phi], dim=1))
        fused = fused + self.time_to_cond(t_embed)[:, :, None, None]
        return ConditionBundle(psi_m=psi_m, phi_s=phi_s, t_embed=t_embed, fused=fused)


def fuse_condition(
    fuser: ConditionFuser,
    psi_m: torch.Tensor,
    phi_s: Optional[torch.Tensor],
    t,
    grid: Optional[Sequence[int]] = None,
) -> ConditionBundle:
    if not isinstance(t, torch.Tensor):
        t = torch.full((psi_m.shape[0],), int(t), dtype=torch.long)
    if grid is None:
        grid = psi_m.shape[-2:]
    return fuser(psi_m, phi_s, t, grid)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, t_dim: int, cond_channels: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, cout)
        self.c_proj = nn.Conv2d(cond_channels, cout, 1)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, t_embed, cond):
        h = self.conv1(F.silu(self.norm1(x)))
        # 1x1 projection commutes with bilinear resampling; project first, it is cheaper
        c = self.c_proj(cond)
        if c.shape[-2:] != h.shape[-2:]:
            c = F.interpolate(c, size=h.shape[-2:], mode="bilinear", align_corners=False)
        h = h + self.t_proj(t_embed)[:, :, None, None] + c
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class ConditionalUNet(nn.Module):
    """Three-resolution residual U-Net predicting the added noise.

    The fused condition is resampled and added inside every residual block;
    ``image_channels`` extra full-resolution channels (the H&E tile and its
    mask) are concatenated to the noisy map at the input.
    """

    def __init__(
        self,
        channels: int,
        image_channels: int = 4,
        base_width: int = 32,
        cond_channels: int = 64,
        t_dim: int = 128,
        mults: Sequence[int] = (1, 2, 4),
    ):
        super().__init__()
        self.channels = channels
        self.image_channels = image_channels
        widths = [base_width * m for m in mults]
        self.stem = nn.Conv2d(channels + image_channels, widths[0], 3, padding=1)
        self.down = nn.ModuleList()
        prev = widths[0]
        for w in widths:
            self.down.append(ResBlock(prev, w, t_dim, cond_channels))
            prev = w
        self.mid = ResBlock(prev, prev, t_dim, cond_channels)
        self.up = nn.ModuleList()
        for w in reversed(widths):
            self.up.append(ResBlock(prev + w, w, t_dim, cond_channels))
            prev = w
        self.out_norm = nn.GroupNorm(_groups(prev), prev)
        self.out = nn.Conv2d(prev, channels, 3, padding=1)

    @property
    def levels(self) -> int:
        return len(self.down)

    def forward(
        self, s_t: torch.Tensor, cond: ConditionBundle, image: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        if image is None:
            image = s_t.new_zeros(s_t.shape[0], self.image_channels, *s_t.shape[-2:])
        h = self.stem(torch.cat([s_t, image], dim=1))
        skips = []
        for i, block in enumerate(self.down):
            if i > 0:
                h = F.avg_pool2d(h, 2)
            h = block(h, cond.t_embed, cond.fused)
            skips.append(h)
        h = self.mid(h, cond.t_embed, cond.fused)
        for i, block in enumerate(self.up):
            skip = skips.pop()
            if h.shape[-2:] != skip.shape[-2:]:
                h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = block(torch.cat([h, skip], dim=1), cond.t_embed, cond.fused)
        return self.out(F.silu(self.out_norm(h)))
