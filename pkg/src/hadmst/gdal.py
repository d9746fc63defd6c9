"""Gene-wise differential adversarial learning.

Genes are nodes of a co-expression graph; attention-weighted message passing
over that graph yields gene embeddings, which condition both a channel-aware
patch discriminator and the generator's condition maps.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .structures import ConditionBundle, HRStMap, ShapeError


class InsufficientDataError(ValueError):
    pass


@dataclass
class CoexpressionGraph:
    weights: np.ndarray  # [C, C] Pearson r, 0 for zero-variance genes, diag 1
    adjacency: np.ndarray  # [C, C] bool, symmetric, diag True
    gene_panel: List[str]

    @property
    def num_genes(self) -> int:
        return self.weights.shape[0]

    def permuted(self, perm: Sequence[int]) -> "CoexpressionGraph":
        p = np.asarray(perm)
        return CoexpressionGraph(
            self.weights[np.ix_(p, p)], self.adjacency[np.ix_(p, p)],
            [self.gene_panel[i] for i in p],
        )

    def save(self, path_prefix) -> None:
        """Write ``<prefix>.npy`` (weights and adjacency stacked) and ``<prefix>.json``."""
        import json

        np.save(f"{path_prefix}.npy", np.stack([self.weights, self.adjacency.astype(np.float64)]))
        with open(f"{path_prefix}.json", "w") as fh:
            json.dump({"gene_panel": self.gene_panel}, fh, indent=2)

    @classmethod
    def load(cls, path_prefix) -> "CoexpressionGraph":
        import json

        arr = np.load(f"{path_prefix}.npy")
        with open(f"{path_prefix}.json") as fh:
            panel = json.load(fh)["gene_panel"]
        return cls(arr[0], arr[1] > 0.5, panel)


def build_coexpression_graph(
    expression_samples: np.ndarray,
    threshold: float = 0.3,
    gene_panel: Optional[Sequence[str]] = None,
) -> CoexpressionGraph:
    """Pearson co-expression graph over the columns of ``expression_samples``.

    An edge is kept when ``|r| >= threshold``; self-loops are always present
    with weight 1. Genes with zero variance keep only their self-loop.
    """
    x = np.asarray(expression_samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expression samples must be [M, C]")
    m, c = x.shape
    if m < 3:
        raise InsufficientDataError(f"need at least 3 samples for correlations, got {m}")
    xc = x - x.mean(axis=0)
    ss = np.sqrt((xc ** 2).sum(axis=0))
    live = ss > 0
    r = np.zeros((c, c))
    if live.any():
        z = xc[:, live] / ss[live]
        r[np.ix_(live, live)] = np.clip(z.T @ z, -1.0, 1.0)
    r = 0.5 * (r + r.T)
    np.fill_diagonal(r, 1.0)
    adj = np.abs(r) >= threshold
    adj[~live, :] = False
    adj[:, ~live] = False
    np.fill_diagonal(adj, True)
    panel = list(gene_panel) if gene_panel is not None else [f"gene{i}" for i in range(c)]
    return CoexpressionGraph(weights=r, adjacency=adj, gene_panel=panel)


class GraphAttentionLayer(nn.Module):
    """H' = act(sum_u a_vu W H_u) with a_vu a softmax over the neighbourhood.

    The attention logit is a learned GAT-style score plus the correlation
    weight scaled by a learned coefficient.
    """

    def __init__(self, din: int, dout: int, activate: bool = True):
        super().__init__()
        self.W = nn.Linear(din, dout, bias=False)
        self.att_src = nn.Parameter(torch.randn(dout) * 0.1)
        self.att_dst = nn.Parameter(torch.randn(dout) * 0.1)
        self.corr_scale = nn.Parameter(torch.tensor(1.0))
        self.activate = activate

    def attention(self, h: torch.Tensor, weights: torch.Tensor, adjacency: torch.Tensor):
        wh = self.W(h)
        learned = F.leaky_relu((wh @ self.att_dst)[:, None] + (wh @ self.att_src)[None, :], 0.2)
        logits = learned + self.corr_scale * weights.to(wh.dtype)
        logits = logits.masked_fill(~adjacency, float("-inf"))
        return torch.softmax(logits, dim=1), wh

    def forward(self, h, weights, adjacency):
        a, wh = self.attention(h, weights, adjacency)
        out = a @ wh
        return F.relu(out) if self.activate else out


def make_gnn_layers(d_in: int, d_g: int, num_layers: int) -> nn.ModuleList:
    dims = [d_in] + [d_g] * num_layers
    return nn.ModuleList(
        GraphAttentionLayer(dims[i], dims[i + 1], activate=i < num_layers - 1)
        for i in range(num_layers)
    )


def gnn_forward(
    graph: CoexpressionGraph, H0: torch.Tensor, layers: Sequence[GraphAttentionLayer]
) -> torch.Tensor:
    """Propagate node features through ``layers`` (ReLU between, identity last)."""
    if H0.shape[0] != graph.num_genes:
        raise ShapeError(f"{H0.shape[0]} node rows for a {graph.num_genes}-gene graph")
    w = torch.as_tensor(graph.weights, dtype=H0.dtype)
    adj = torch.as_tensor(graph.adjacency, dtype=torch.bool)
    h = H0
    for layer in layers:
        h = layer(h, w, adj)
    return h


class GeneGraphEncoder(nn.Module):
    """Learned per-gene input features propagated over a fixed co-expression graph."""

    def __init__(self, graph: CoexpressionGraph, d_g: int = 64, num_layers: int = 2):
        super().__init__()
        self.gene_panel = list(graph.gene_panel)
        self.register_buffer("weights", torch.as_tensor(graph.weights, dtype=torch.float32))
        self.register_buffer("adjacency", torch.as_tensor(graph.adjacency, dtype=torch.bool))
        self.H0 = nn.Parameter(torch.randn(graph.num_genes, d_g) * 0.5)
        self.layers = make_gnn_layers(d_g, d_g, num_layers)

    def forward(self) -> torch.Tensor:
        h = self.H0
        for layer in self.layers:
            h = layer(h, self.weights, self.adjacency)
        return h


class ChannelAwareDiscriminator(nn.Module):
    """Patch discriminator applied to each gene channel with shared weights.

    Per channel c and patch p the score is ``psi(f_cp) + <V e_c, f_cp>`` where
    ``f_cp`` is the patch feature from the shared encoder and ``e_c`` the gene
    embedding of channel c (projection-discriminator conditioning).
    """

    def __init__(self, d_g: int = 64, patch: int = 32, width: int = 32):
        super().__init__()
        if patch < 8 or patch & (patch - 1):
            raise ValueError("patch size must be a power of two >= 8")
        self.patch = patch
        feat = 2 * width
        self.encoder = nn.Sequential(
            nn.Conv2d(1, width, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, feat, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(feat, feat, 4, 2, 1), nn.LeakyReLU(0.2),
        )
        self.score = nn.Linear(feat, 1)
        self.embed_proj = nn.Linear(d_g, feat, bias=False)

    def forward(self, st: torch.Tensor, gene_embeds: torch.Tensor) -> torch.Tensor:
        """``st`` is ``[B, C, H, W]``; returns realness scores ``[B, C, P]``."""
        b, c, h, w = st.shape
        if gene_embeds.shape[0] != c:
            raise ShapeError(f"{c} map channels but {gene_embeds.shape[0]} gene embeddings")
        f = self.encoder(st.reshape(b * c, 1, h, w))
        f = F.avg_pool2d(f, self.patch // 8)
        f = f.flatten(2).transpose(1, 2).reshape(b, c, -1, f.shape[1])  # [B, C, P, feat]
        proj = self.embed_proj(gene_embeds.to(f.dtype))  # [C, feat]
        return self.score(f).squeeze(-1) + torch.einsum("bcpf,cf->bcp", f, proj)


def discriminate(disc: ChannelAwareDiscriminator, st_map, gene_embeds: torch.Tensor) -> torch.Tensor:
    """Scores ``[C, P]`` for a single map, ``[B, C, P]`` for a batch."""
    if isinstance(st_map, HRStMap):
        x = torch.as_tensor(np.asarray(st_map.values, dtype=np.float32))
    else:
        x = st_map
    single = x.ndim == 3
    out = disc(x[None] if single else x, gene_embeds)
    return out[0] if single else out


def adversarial_losses(real_scores: torch.Tensor, fake_scores: torch.Tensor):
    """Non-saturating logistic GAN losses ``(L_D, L_G)``."""
    if real_scores.shape != fake_scores.shape:
        raise ShapeError("real and fake score shapes differ")
    loss_d = F.softplus(-real_scores).mean() + F.softplus(fake_scores).mean()
    loss_g = F.softplus(-fake_scores).mean()
    return loss_d, loss_g


class GeneContextFiLM(nn.Module):
    """Mean-pooled gene embeddings -> per-channel scale/shift of the fused condition."""

    def __init__(self, d_g: int, cond_channels: int):
        super().__init__()
        self.head = nn.Linear(d_g, 2 * cond_channels)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, gene_embeds: torch.Tensor, fused: torch.Tensor) -> torch.Tensor:
        scale, shift = self.head(gene_embeds.mean(dim=0).to(fused.dtype)).chunk(2)
        return fused * (1.0 + scale[None, :, None, None]) + shift[None, :, None, None]


def fuse_gene_context(
    film: GeneContextFiLM, gene_embeds: torch.Tensor, cond: ConditionBundle
) -> ConditionBundle:
    return replace(cond, fused=film(gene_embeds, cond.fused))
