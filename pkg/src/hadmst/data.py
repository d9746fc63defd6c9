"""Synthetic corpus, tile geometry, expression normalisation and dataset I/O.

Geometry follows the Xenium setup the model was designed for: HR tiles at
10 um/pixel, LR maps at 100 um/pixel (256 -> 26 in the full configuration).
The desk-scale default corpus uses 64-pixel tiles.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .structures import HistologyTile, HRStMap, LRStMap

logger = logging.getLogger(__name__)

REFERENCE_HR_SIZE = 256
REFERENCE_LR_SIZE = 26
NUM_TYPES = 3
# Beer-Lambert absorbance of each latent cell type in R, G, B
TYPE_ABSORBANCE = np.array([[0.9, 1.6, 0.5], [0.4, 1.2, 1.1], [1.3, 0.6, 0.9]])
BACKGROUND_RGB = np.array([0.96, 0.92, 0.95])


class DatasetError(RuntimeError):
    pass


def default_lr_size(hr_size: int) -> int:
    """LR edge length keeping the 256 -> 26 ratio (64 -> 7)."""
    return max(1, int(math.floor(hr_size * REFERENCE_LR_SIZE / REFERENCE_HR_SIZE + 0.5)))


def area_pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``[n_out, n_in]`` weights averaging each output bin over its exact input span.

    Bin ``i`` covers ``[i * n_in / n_out, (i + 1) * n_in / n_out)``; pixels cut by a
    bin edge contribute in proportion to their overlap.
    """
    if n_out > n_in:
        raise ValueError(f"cannot area-pool {n_in} samples into {n_out} bins")
    scale = n_in / n_out
    edges = np.arange(n_out + 1) * scale
    lo = edges[:-1, None]
    hi = edges[1:, None]
    px = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, px + 1) - np.maximum(lo, px), 0.0, None)
    return overlap / scale


def downsample_st(hr, lr_size: Sequence[int] = (REFERENCE_LR_SIZE, REFERENCE_LR_SIZE)):
    """Area-weighted average pooling of ``[..., H, W]`` onto ``lr_size``.

    Works on numpy arrays, torch tensors and :class:`HRStMap` (returns an
    :class:`LRStMap`).
    """
    if isinstance(lr_size, int):
        lr_size = (lr_size, lr_size)
    if isinstance(hr, HRStMap):
        vals = downsample_st(np.asarray(hr.values, dtype=np.float64), lr_size)
        return LRStMap(vals, list(hr.gene_panel))
    h, w = hr.shape[-2:]
    if lr_size[0] > h or lr_size[1] > w:
        raise ValueError(f"LR size {tuple(lr_size)} exceeds HR size {(h, w)}")
    ph = area_pool_matrix(h, lr_size[0])
    pw = area_pool_matrix(w, lr_size[1])
    if isinstance(hr, torch.Tensor):
        return torch.as_tensor(ph, dtype=hr.dtype) @ hr @ torch.as_tensor(pw, dtype=hr.dtype).T
    return ph @ np.asarray(hr, dtype=np.float64) @ pw.T


# ----------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SyntheticMapping:
    """Corpus-wide fixed maps from latent cell types to expression."""

    type_loadings: np.ndarray  # [C, K]
    density_loadings: np.ndarray  # [C]
    baseline: np.ndarray  # [C]
    scale: float = 8.0


def synthetic_mapping(num_genes: int) -> SyntheticMapping:
    rng = np.random.default_rng(10_000 + num_genes)
    loadings = rng.uniform(0.0, 1.0, (num_genes, NUM_TYPES))
    loadings *= rng.random((num_genes, NUM_TYPES)) < 0.7
    return SyntheticMapping(
        type_loadings=loadings,
        density_loadings=rng.uniform(0.2, 0.8, num_genes),
        baseline=rng.uniform(0.05, 0.3, num_genes),
    )


def gene_panel_names(num_genes: int) -> List[str]:
    return [f"SYN{i:03d}" for i in range(num_genes)]


def generate_synthetic_pair(
    rng: np.random.Generator,
    C: int = 8,
    size: int = 64,
    n_blobs: Optional[int] = None,
) -> Tuple[HistologyTile, HRStMap]:
    """One histology tile and its raw (count-like) HR expression map.

    Gaussian cell clusters carry a latent type mix. The tile is a Beer-Lambert
    rendering of per-type density; each gene is a fixed linear function of the
    per-type densities plus a shared total-density term, which makes genes
    co-expressed and expression recoverable from morphology.
    """
    if C < 2 or size < 64:
        raise ValueError("need C >= 2 genes and size >= 64")
    mapping = synthetic_mapping(C)
    if n_blobs is None:
        n_blobs = int(rng.integers(5, 21))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    density = np.zeros((NUM_TYPES, size, size))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, size, 2)
        sigma = rng.uniform(0.03, 0.09) * size
        amp = rng.uniform(0.6, 1.2)
        mix = rng.dirichlet(np.full(NUM_TYPES, 0.3))
        bump = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        density += mix[:, None, None] * bump[None]
    total = density.sum(axis=0)
    texture = np.tanh(total)

    optical = np.einsum("kc,khw->chw", TYPE_ABSORBANCE, density)
    rgb = BACKGROUND_RGB[:, None, None] * np.exp(-optical)
    rgb = rgb + 0.03 * texture[None] * rng.standard_normal(rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0)

    expr = np.einsum("gk,khw->ghw", mapping.type_loadings, density)
    expr += mapping.density_loadings[:, None, None] * total[None]
    expr = mapping.baseline[:, None, None] + mapping.scale * expr
    expr += 0.05 * texture[None] * rng.standard_normal(expr.shape)
    expr = np.clip(expr, 0.0, None)
    return HistologyTile(rgb.astype(np.float32)), HRStMap(expr.astype(np.float32), gene_panel_names(C))


# ----------------------------------------------------------------------------
# normalisation and gene curation


def fit_normalization(raw: np.ndarray) -> Dict[str, list]:
    """Per-gene (min, max) of log1p expression over ``[N, C, H, W]`` training maps."""
    logv = np.log1p(np.asarray(raw, dtype=np.float64))
    axes = tuple(i for i in range(logv.ndim) if i != logv.ndim - 3)
    return {"min": logv.min(axis=axes).tolist(), "max": logv.max(axis=axes).tolist()}


def degenerate_genes(normalization: Dict[str, list]) -> List[int]:
    lo, hi = np.asarray(normalization["min"]), np.asarray(normalization["max"])
    return [int(i) for i in np.flatnonzero(~(hi > lo))]


def _norm_arrays(norm, ndim: int):
    if hasattr(norm, "normalization"):
        norm = norm.normalization
    lo = np.asarray(norm["min"], dtype=np.float64)
    hi = np.asarray(norm["max"], dtype=np.float64)
    bad = np.flatnonzero(~(hi > lo))
    if len(bad):
        raise ValueError(f"genes {bad.tolist()} have max <= min and must be dropped")
    shape = (-1,) + (1,) * 2 if ndim >= 3 else (-1,)
    return lo.reshape(shape), hi.reshape(shape)


def normalize_expression(raw, manifest) -> np.ndarray:
    """raw counts -> log1p -> per-gene min-max to [0, 1] (clamped) -> [-1, 1].

    ``raw`` has genes on axis -3 (``[..., C, H, W]``).
    """
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0):
        raise ValueError("raw expression must be non-negative")
    lo, hi = _norm_arrays(manifest, raw.ndim)
    unit = np.clip((np.log1p(raw) - lo) / (hi - lo), 0.0, 1.0)
    return 2.0 * unit - 1.0


def denormalize_expression(x, manifest) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lo, hi = _norm_arrays(manifest, x.ndim)
    return np.expm1((x + 1.0) / 2.0 * (hi - lo) + lo)


def to_unit(x):
    """Model space [-1, 1] -> metric space [0, 1]."""
    return (x + 1.0) / 2.0


def select_hvg(
    expression_samples: np.ndarray, k: int, gene_ids: Optional[Sequence[str]] = None
) -> List[int]:
    """Indices of the ``k`` genes with the largest log1p variance.

    Ties are broken by gene identifier (then index).
    """
    x = np.asarray(expression_samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need a [M, G] matrix with M >= 2")
    g = x.shape[1]
    if not 0 < k <= g:
        raise ValueError(f"k={k} outside 1..{g}")
    ids = list(gene_ids) if gene_ids is not None else [f"{i:08d}" for i in range(g)]
    var = np.log1p(np.clip(x, 0, None)).var(axis=0)
    order = sorted(range(g), key=lambda i: (-var[i], ids[i], i))
    return order[:k]


def merge_gene_panels(*panels: Sequence[str]) -> List[str]:
    """Union of several panels in first-seen order, duplicates removed."""
    seen: Dict[str, None] = {}
    for panel in panels:
        for gene in panel:
            seen.setdefault(gene, None)
    return list(seen)


# ----------------------------------------------------------------------------
# on-disk dataset


@dataclass
class DatasetManifest:
    name: str
    num_tiles: int
    gene_panel: List[str]
    hr_size: List[int]
    lr_size: List[int]
    normalization: Dict[str, list]
    split: Dict[str, List[str]]
    seed: int
    pixel_size_um_hr: float = 10.0
    pixel_size_um_lr: float = 100.0
    checksums: Dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        c = len(self.gene_panel)
        for key in ("min", "max"):
            if len(self.normalization.get(key, [])) != c:
                raise DatasetError(
                    f"normalization '{key}' has {len(self.normalization.get(key, []))} "
                    f"entries for {c} genes"
                )
        if degenerate_genes(self.normalization):
            raise DatasetError("normalization has genes with max <= min")
        train, test = set(self.split.get("train", [])), set(self.split.get("test", []))
        if train & test:
            raise DatasetError(f"train/test splits overlap: {sorted(train & test)[:5]}")
        if len(train) + len(test) != self.num_tiles:
            raise DatasetError(
                f"splits cover {len(train) + len(test)} tiles, manifest says {self.num_tiles}"
            )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls(**json.loads(text))


@dataclass
class TileRecord:
    tile_id: str
    he: np.ndarray  # [3, H, W] float32
    seg: np.ndarray  # [1, H, W] uint8
    hr: np.ndarray  # [C, H, W] raw
    lr: np.ndarray  # [C, h, w] raw


KINDS = ("he", "seg", "hr", "lr")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tile_filename(tile_id: str, kind: str) -> str:
    return f"tile_{tile_id}_{kind}.npy"


def write_dataset(directory, tiles: Sequence[TileRecord], manifest: DatasetManifest) -> Path:
    """Write one ``.npy`` per tile and modality plus ``manifest.json`` with checksums."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    checksums = {}
    for rec in tiles:
        for kind in KINDS:
            path = out / tile_filename(rec.tile_id, kind)
            np.save(path, getattr(rec, kind))
            checksums[path.name] = _sha256(path)
    manifest.checksums = checksums
    manifest.num_tiles = len(tiles)
    manifest.validate()
    (out / "manifest.json").write_text(manifest.to_json())
    return out


@dataclass
class STDataset:
    manifest: DatasetManifest
    tile_ids: List[str]
    he: np.ndarray  # [N, 3, H, W]
    seg: np.ndarray  # [N, 1, H, W]
    hr_raw: np.ndarray  # [N, C, H, W]
    lr_raw: np.ndarray  # [N, C, h, w]
    root: Optional[Path] = None

    @property
    def gene_panel(self) -> List[str]:
        return self.manifest.gene_panel

    def indices(self, split: str) -> np.ndarray:
        pos = {t: i for i, t in enumerate(self.tile_ids)}
        return np.array([pos[t] for t in self.manifest.split[split]], dtype=np.int64)

    def hr_model(self, idx=None) -> np.ndarray:
        hr = self.hr_raw if idx is None else self.hr_raw[idx]
        return normalize_expression(hr, self.manifest).astype(np.float32)

    def lr_model(self, idx=None) -> np.ndarray:
        lr = self.lr_raw if idx is None else self.lr_raw[idx]
        return normalize_expression(lr, self.manifest).astype(np.float32)

    def coexpression_samples(self, split: str = "train", max_pixels: int = 20000, seed: int = 0):
        """Pixel-by-gene matrix of normalized HR expression from ``split`` tiles."""
        hr = self.hr_model(self.indices(split))
        flat = hr.transpose(1, 0, 2, 3).reshape(hr.shape[1], -1).T
        if len(flat) > max_pixels:
            rng = np.random.default_rng(seed)
            flat = flat[np.sort(rng.choice(len(flat), max_pixels, replace=False))]
        return flat


def read_dataset(directory) -> STDataset:
    root = Path(directory)
    man_path = root / "manifest.json"
    if not man_path.exists():
        raise DatasetError(f"no manifest.json in {root}")
    try:
        manifest = DatasetManifest.from_json(man_path.read_text())
    except (json.JSONDecodeError, TypeError) as exc:
        raise DatasetError(f"corrupt manifest: {exc}") from exc
    manifest.validate()
    ids = list(manifest.split["train"]) + list(manifest.split["test"])
    c = len(manifest.gene_panel)
    arrays: Dict[str, list] = {k: [] for k in KINDS}
    for tid in ids:
        for kind in KINDS:
            path = root / tile_filename(tid, kind)
            if not path.exists():
                raise DatasetError(f"tile {tid}: missing {path.name}")
            expected = manifest.checksums.get(path.name)
            if expected is None or _sha256(path) != expected:
                raise DatasetError(f"tile {tid}: checksum mismatch for {path.name}")
            try:
                arr = np.load(path)
            except ValueError as exc:
                raise DatasetError(f"tile {tid}: unreadable {path.name}: {exc}") from exc
            arrays[kind].append(arr)
        hr, lr = arrays["hr"][-1], arrays["lr"][-1]
        if hr.shape != (c, *manifest.hr_size) or lr.shape != (c, *manifest.lr_size):
            raise DatasetError(
                f"tile {tid}: arrays {hr.shape}/{lr.shape} disagree with a {c}-gene panel "
                f"at {manifest.hr_size}/{manifest.lr_size}"
            )
    return STDataset(
        manifest=manifest,
        tile_ids=ids,
        he=np.stack(arrays["he"]),
        seg=np.stack(arrays["seg"]),
        hr_raw=np.stack(arrays["hr"]),
        lr_raw=np.stack(arrays["lr"]),
        root=root,
    )


def build_synthetic_dataset(
    directory,
    seed: int = 0,
    num_genes: int = 8,
    hr_size: int = 64,
    lr_size: Optional[int] = None,
    n_train: int = 256,
    n_test: int = 64,
    name: str = "synthetic",
) -> STDataset:
    """Generate, normalise (train statistics only) and persist a synthetic corpus."""
    from .hsd import segment_cells

    lr_size = lr_size or default_lr_size(hr_size)
    n = n_train + n_test
    children = np.random.SeedSequence(seed).spawn(n)
    records = []
    for i, child in enumerate(children):
        tile, hr = generate_synthetic_pair(np.random.default_rng(child), num_genes, hr_size)
        lr = downsample_st(hr.values.astype(np.float64), (lr_size, lr_size))
        seg = segment_cells(tile)
        records.append(
            TileRecord(f"{i:05d}", tile.rgb, seg.mask.astype(np.uint8),
                       hr.values.astype(np.float32), lr.astype(np.float32))
        )
    panel = gene_panel_names(num_genes)
    norm = fit_normalization(np.stack([r.hr for r in records[:n_train]]))
    dropped = degenerate_genes(norm)
    if dropped:
        logger.warning("dropping constant genes %s", [panel[i] for i in dropped])
        keep = [i for i in range(num_genes) if i not in dropped]
        panel = [panel[i] for i in keep]
        norm = {k: [v[i] for i in keep] for k, v in norm.items()}
        for r in records:
            r.hr, r.lr = r.hr[keep], r.lr[keep]
    manifest = DatasetManifest(
        name=name,
        num_tiles=n,
        gene_panel=panel,
        hr_size=[hr_size, hr_size],
        lr_size=[lr_size, lr_size],
        normalization=norm,
        split={"train": [r.tile_id for r in records[:n_train]],
               "test": [r.tile_id for r in records[n_train:]]},
        seed=seed,
    )
    write_dataset(directory, records, manifest)
    return read_dataset(directory)
