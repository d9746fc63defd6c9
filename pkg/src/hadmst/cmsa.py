"""Cross-modal spatial alignment between morphology and low-resolution ST regions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import area_pool_matrix
from .structures import HRStMap

COS_EPS = 1e-8
PAIR_FRACTION = 0.3


class PairSelectionError(ValueError):
    pass


@dataclass
class RegionFeatures:
    """Per-region descriptors on the low-resolution grid.

    ``features`` is ``[N, d]`` or batched ``[B, N, d]``; regions are in
    row-major grid order and ``coords[k] = (row, col)`` of region ``k``.
    """

    features: torch.Tensor
    grid: Tuple[int, int]

    @property
    def coords(self) -> np.ndarray:
        h, w = self.grid
        rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        return np.stack([rr.ravel(), cc.ravel()], axis=1)

    @property
    def num_regions(self) -> int:
        return self.features.shape[-2]

    def as_map(self) -> torch.Tensor:
        """Features reshaped to ``[B, d, h, w]``."""
        f = self.features if self.features.ndim == 3 else self.features[None]
        return f.transpose(1, 2).reshape(f.shape[0], f.shape[2], *self.grid)

    @classmethod
    def from_map(cls, fmap: torch.Tensor) -> "RegionFeatures":
        b, d, h, w = fmap.shape
        return cls(fmap.reshape(b, d, h * w).transpose(1, 2), (h, w))


class LREncoder(nn.Module):
    """phi: small conv branch over the LR map, one descriptor per LR pixel."""

    def __init__(self, genes: int, dim: int = 64, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(genes, hidden, 3, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, dim, 1),
        )

    def forward(self, lr: torch.Tensor) -> torch.Tensor:
        return self.net(lr)


def encode_lr(encoder: LREncoder, lr) -> RegionFeatures:
    """Encode an LR map (``[C, h, w]``, ``[B, C, h, w]`` or an LRStMap)."""
    if isinstance(lr, HRStMap):
        lr = torch.from_numpy(np.asarray(lr.values, dtype=np.float32))
    single = lr.ndim == 3
    x = lr[None] if single else lr
    dtype = next(encoder.parameters()).dtype
    feats = RegionFeatures.from_map(encoder(x.to(dtype)))
    if single:
        feats = RegionFeatures(feats.features[0], feats.grid)
    return feats


class MorphRegionEncoder(nn.Module):
    """Full-resolution conv branch over tile+mask, area-pooled onto the LR grid.

    Each LR cell gets the morphology feature averaged over its exact HR
    footprint, so both modalities share the same region partition.
    """

    def __init__(self, dim: int = 64, hidden: int = 16, in_channels: int = 4):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, dim, 1),
        )

    def forward(self, rgb: torch.Tensor, seg: torch.Tensor, grid: Sequence[int]) -> RegionFeatures:
        f = self.net(torch.cat([rgb, seg.to(rgb.dtype)], dim=1))
        ph = torch.as_tensor(area_pool_matrix(f.shape[-2], grid[0]), dtype=f.dtype)
        pw = torch.as_tensor(area_pool_matrix(f.shape[-1], grid[1]), dtype=f.dtype)
        pooled = torch.einsum("ih,bdhw,jw->bdij", ph, f, pw)
        return RegionFeatures.from_map(pooled)


def _feats(x: Union[RegionFeatures, torch.Tensor]) -> torch.Tensor:
    return x.features if isinstance(x, RegionFeatures) else torch.as_tensor(x)


def cosine_matrix(Fm, Fs, eps: float = COS_EPS) -> torch.Tensor:
    """C[i, j] = <Fm_i, Fs_j> / (|Fm_i| |Fs_j|), denominator floored at ``eps``."""
    a, b = _feats(Fm), _feats(Fs)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"feature widths differ: {a.shape[-1]} vs {b.shape[-1]}")
    na = a.norm(dim=-1, keepdim=True)
    nb = b.norm(dim=-1, keepdim=True)
    denom = (na * nb.transpose(-1, -2)).clamp_min(eps)
    return (a @ b.transpose(-1, -2)) / denom


def euclidean_matrix(Fm, Fs) -> torch.Tensor:
    """D[i, j] = |Fm_i - Fs_j|."""
    a, b = _feats(Fm), _feats(Fs)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"feature widths differ: {a.shape[-1]} vs {b.shape[-1]}")
    diff = a.unsqueeze(-2) - b.unsqueeze(-3)
    return torch.linalg.vector_norm(diff, dim=-1)


@dataclass
class PairSelection:
    positives: np.ndarray  # [k, 2] of (i, j)
    negatives: np.ndarray
    n: int

    def masks(self, device=None) -> Tuple[torch.Tensor, torch.Tensor]:
        pos = torch.zeros(self.n, self.n, dtype=torch.bool, device=device)
        neg = torch.zeros_like(pos)
        pos[self.positives[:, 0], self.positives[:, 1]] = True
        neg[self.negatives[:, 0], self.negatives[:, 1]] = True
        return pos, neg


def select_pairs(C, fraction: float = PAIR_FRACTION) -> PairSelection:
    """Top ``fraction`` of all N^2 region pairs by similarity are positives,
    the bottom ``fraction`` negatives.

    Ties are broken by (i, j) in lexicographic order: among equal scores the
    earlier pair ranks higher.
    """
    c = C.detach().cpu().numpy() if isinstance(C, torch.Tensor) else np.asarray(C)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("similarity matrix has non-finite entries")
    n = c.shape[0]
    if n * n < 4:
        raise PairSelectionError(f"need at least 4 region pairs, got {n * n}")
    k = int(np.floor(fraction * n * n))
    # row-major flattening is lexicographic (i, j); a stable sort keeps it for ties
    order = np.argsort(-c.ravel(), kind="stable")
    idx = np.stack(np.unravel_index(order, c.shape), axis=1)
    return PairSelection(positives=idx[:k], negatives=idx[len(idx) - k:], n=n)


def contrastive_terms(
    C: torch.Tensor,
    D: torch.Tensor,
    pairs: PairSelection,
    tau: float = 0.1,
    margin: float = 1.0,
) -> dict:
    """The cosine, Euclidean and InfoNCE components, unweighted."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if len(pairs.positives) == 0 or len(pairs.negatives) == 0:
        raise PairSelectionError("pair selection is empty")
    pi, pj = (torch.as_tensor(pairs.positives[:, k]) for k in (0, 1))
    ni, nj = (torch.as_tensor(pairs.negatives[:, k]) for k in (0, 1))
    c_pos, c_neg = C[pi, pj], C[ni, nj]
    d_pos, d_neg = D[pi, pj], D[ni, nj]

    l_cos = (1.0 - c_pos).mean() + F.relu(c_neg).mean()
    l_euc = (d_pos ** 2).mean() + (F.relu(margin - d_neg) ** 2).mean()

    # per positive (i, j): -log softmax of C_ij against the negatives sharing row i
    _, neg_mask = pairs.masks(C.device)
    logits = C / tau
    row_max = logits.detach().max(dim=1, keepdim=True).values
    z = logits - row_max
    neg_sum = (torch.exp(z) * neg_mask).sum(dim=1)
    has_neg = neg_sum > 0
    log_neg = torch.where(has_neg, torch.log(torch.where(has_neg, neg_sum, torch.ones_like(neg_sum))),
                          torch.full_like(neg_sum, float("-inf")))
    z_pos = z[pi, pj]
    l_nce = (torch.logaddexp(z_pos, log_neg[pi]) - z_pos).mean()
    return {"cosine": l_cos, "euclidean": l_euc, "infonce": l_nce}


def contrastive_loss(
    C: torch.Tensor,
    D: torch.Tensor,
    pairs: PairSelection,
    lambda1: float = 0.5,
    lambda2: float = 1.0,
    tau: float = 0.1,
    margin: float = 1.0,
) -> torch.Tensor:
    terms = contrastive_terms(C, D, pairs, tau=tau, margin=margin)
    return terms["cosine"] + lambda1 * terms["euclidean"] + lambda2 * terms["infonce"]


def alignment_loss(
    Fm: RegionFeatures,
    Fs: RegionFeatures,
    lambda1: float = 0.5,
    lambda2: float = 1.0,
    tau: float = 0.1,
    margin: float = 1.0,
    fraction: float = PAIR_FRACTION,
) -> torch.Tensor:
    """Batch-mean contrastive loss, pairs re-selected per sample from detached C."""
    a, b = _feats(Fm), _feats(Fs)
    if a.ndim == 2:
        a, b = a[None], b[None]
    losses = []
    for fa, fb in zip(a, b):
        C = cosine_matrix(fa, fb)
        D = euclidean_matrix(fa, fb)
        pairs = select_pairs(C, fraction)
        losses.append(contrastive_loss(C, D, pairs, lambda1, lambda2, tau, margin))
    return torch.stack(losses).mean()
