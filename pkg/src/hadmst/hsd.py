"""H&E-driven semantic distillation: morphology + mask + tissue prompt -> psi(m)."""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from .structures import HistologyTile, SegMask, ShapeError

logger = logging.getLogger(__name__)

SEG_THRESHOLD = 0.5
STUB_RAW_DIM = 768

# Any callable mapping a prompt to a float vector (e.g. a client for a hosted
# language model). Failures fall back to the hashed stub.
PromptBackend = Callable[[str], Sequence[float]]


def segment_cells(
    tile: Union[HistologyTile, np.ndarray, torch.Tensor], threshold: float = SEG_THRESHOLD
):
    """Threshold a hematoxylin proxy (1 - mean RGB) into a binary nucleus mask.

    Accepts a :class:`HistologyTile` (returns a :class:`SegMask`) or a raw
    ``[..., 3, H, W]`` array/tensor (returns the same kind, channel dim 1).
    """
    if isinstance(tile, HistologyTile):
        stain = 1.0 - tile.rgb.mean(axis=0, keepdims=True)
        return SegMask((stain > threshold).astype(np.uint8))
    if isinstance(tile, torch.Tensor):
        stain = 1.0 - tile.mean(dim=-3, keepdim=True)
        return (stain > threshold).to(tile.dtype)
    rgb = np.asarray(tile)
    stain = 1.0 - rgb.mean(axis=-3, keepdims=True)
    return (stain > threshold).astype(np.uint8)


class MorphologyEncoder(nn.Module):
    """Patch-embedding transformer over the concatenated tile and mask.

    Output is a token grid ``[B, width, H / patch, W / patch]``.
    """

    def __init__(
        self,
        image_size: int = 256,
        patch: int = 16,
        width: int = 128,
        depth: int = 4,
        heads: int = 4,
        in_channels: int = 4,
    ):
        super().__init__()
        if image_size % patch:
            raise ValueError(f"image size {image_size} not divisible by patch {patch}")
        self.patch = patch
        self.grid = image_size // patch
        self.width = width
        self.embed = nn.Conv2d(in_channels, width, patch, stride=patch)
        self.pos = nn.Parameter(torch.zeros(self.grid * self.grid, width))
        nn.init.normal_(self.pos, std=0.02)
        layer = nn.TransformerEncoderLayer(
            width, heads, dim_feedforward=2 * width, dropout=0.0,
            activation="gelu", batch_first=True, norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(width)

    def tokens(self, x: torch.Tensor) -> torch.Tensor:
        return self.embed(x).flatten(2).transpose(1, 2)

    def encode_tokens(self, tokens: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
        return self.norm(self.encoder(tokens + pos))

    def forward(self, rgb: torch.Tensor, seg: torch.Tensor) -> torch.Tensor:
        if rgb.shape[-2:] != seg.shape[-2:]:
            raise ShapeError(
                f"tile {tuple(rgb.shape[-2:])} and mask {tuple(seg.shape[-2:])} differ"
            )
        x = torch.cat([rgb, seg.to(rgb.dtype)], dim=1)
        out = self.encode_tokens(self.tokens(x), self.pos)
        b = x.shape[0]
        gh, gw = x.shape[-2] // self.patch, x.shape[-1] // self.patch
        return out.transpose(1, 2).reshape(b, self.width, gh, gw)


def encode_morphology(
    encoder: MorphologyEncoder,
    tile: Union[HistologyTile, torch.Tensor],
    seg: Union[SegMask, torch.Tensor],
) -> torch.Tensor:
    """F_m = T(concat(I_m, I_seg)) for a single tile or a batch."""
    if isinstance(tile, HistologyTile):
        tile = torch.from_numpy(tile.rgb)
    if isinstance(seg, SegMask):
        seg = torch.from_numpy(seg.mask.astype(np.float32))
    single = tile.ndim == 3
    if single:
        tile, seg = tile[None], seg[None]
    dtype = next(encoder.parameters()).dtype
    out = encoder(tile.to(dtype), seg.to(dtype))
    return out[0] if single else out


@dataclass
class PromptEmbedding:
    vector: np.ndarray
    source: str
    prompt_text: str


def normalize_prompt(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().lower())


def _seed_from(text: str, salt: str) -> int:
    digest = hashlib.sha256(f"{salt}:{text}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _stub_vector(prompt: str) -> np.ndarray:
    rng = np.random.default_rng(_seed_from(prompt, "prompt"))
    return rng.standard_normal(STUB_RAW_DIM)


def _projection(in_dim: int, out_dim: int) -> np.ndarray:
    rng = np.random.default_rng(_seed_from(f"{in_dim}x{out_dim}", "projection"))
    return rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)


def embed_prompt(
    prompt_text: str, backend: Optional[PromptBackend] = None, dim: int = 64
) -> PromptEmbedding:
    """Embed a tissue/cancer-type prompt as a unit vector of length ``dim``.

    Without a backend the raw vector comes from a hash-seeded generator, which
    is stable across processes. Any backend output goes through the same fixed
    random projection and L2 normalisation.
    """
    text = normalize_prompt(prompt_text or "")
    if not text:
        raise ValueError("prompt must be non-empty")
    source = "stub"
    raw = None
    if backend is not None:
        try:
            raw = np.asarray(backend(prompt_text), dtype=np.float64).ravel()
            if raw.size == 0 or not np.all(np.isfinite(raw)):
                raise ValueError("backend returned an empty or non-finite vector")
            source = "external-model"
        except Exception as exc:  # noqa: BLE001 - any backend failure degrades to the stub
            logger.warning("prompt backend failed (%s); using hashed stub embedding", exc)
            raw = None
    if raw is None:
        raw = _stub_vector(text)
    vec = _projection(raw.size, dim) @ raw
    vec = vec / np.linalg.norm(vec)
    return PromptEmbedding(vector=vec.astype(np.float64), source=source, prompt_text=prompt_text)


class SemanticFiLM(nn.Module):
    """Per-channel scale/shift of F_m predicted from the prompt embedding.

    The head is zero-initialised, so fusion starts as the identity.
    """

    def __init__(self, text_dim: int, channels: int):
        super().__init__()
        self.head = nn.Linear(text_dim, 2 * channels)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, F_m: torch.Tensor, e_text: torch.Tensor) -> torch.Tensor:
        if e_text.ndim == 1:
            e_text = e_text[None].expand(F_m.shape[0], -1)
        scale, shift = self.head(e_text.to(F_m.dtype)).chunk(2, dim=-1)
        return F_m * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]


def fuse_semantics(
    film: SemanticFiLM, F_m: torch.Tensor, e_text: Union[PromptEmbedding, torch.Tensor]
) -> torch.Tensor:
    if isinstance(e_text, PromptEmbedding):
        e_text = torch.from_numpy(e_text.vector)
    single = F_m.ndim == 3
    out = film(F_m[None] if single else F_m, e_text)
    return out[0] if single else out
