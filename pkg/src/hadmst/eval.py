"""Image-quality metrics, local SSIM heatmaps and per-gene reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from scipy.ndimage import sobel, zoom

K1, K2 = 0.01, 0.03
WINDOW = 11
SIGMA = 1.5


def gaussian_window(size: int = WINDOW, sigma: Optional[float] = None) -> np.ndarray:
    """Normalised 2-D Gaussian weights; sigma scales with size (1.5 at 11)."""
    if sigma is None:
        sigma = SIGMA * size / WINDOW
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _valid_filter(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Weighted sum over every fully-contained window (valid correlation)."""
    view = np.lib.stride_tricks.sliding_window_view(img, win.shape)
    return np.einsum("ijkl,kl->ij", view, win)


def ssim_map(
    a: np.ndarray,
    b: np.ndarray,
    window: int = WINDOW,
    K1: float = K1,
    K2: float = K2,
    data_range: float = 1.0,
    sigma: Optional[float] = None,
) -> np.ndarray:
    """SSIM at every window position of a single-channel pair."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    if window > min(a.shape):
        raise ValueError(f"window {window} larger than image {a.shape}")
    w = gaussian_window(window, sigma)
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mu_a, mu_b = _valid_filter(a, w), _valid_filter(b, w)
    var_a = _valid_filter(a * a, w) - mu_a ** 2
    var_b = _valid_filter(b * b, w) - mu_b ** 2
    cov = _valid_filter(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(
    a, b, window: int = WINDOW, K1: float = K1, K2: float = K2, data_range: float = 1.0
) -> float:
    """Mean Gaussian-windowed SSIM; ``[C, H, W]`` inputs average per-channel SSIM."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        return float(ssim_map(a, b, window, K1, K2, data_range).mean())
    flat_a = a.reshape(-1, *a.shape[-2:])
    flat_b = b.reshape(-1, *b.shape[-2:])
    return float(np.mean([ssim(x, y, window, K1, K2, data_range) for x, y in zip(flat_a, flat_b)]))


def rmse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def local_ssim_map(a, b, window: int = WINDOW, stride: int = 1, data_range: float = 1.0) -> np.ndarray:
    """Sliding-window SSIM heatmap, ``floor((n - window) / stride) + 1`` cells per axis."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return ssim_map(a, b, window, data_range=data_range)[::stride, ::stride]


def edge_enhanced_gray(rgb: np.ndarray, gain: float = 1.0) -> np.ndarray:
    """Grayscale of a ``[3, H, W]`` tile with Sobel magnitude added, in [0, 1]."""
    gray = np.asarray(rgb, dtype=np.float64).mean(axis=0)
    mag = np.hypot(sobel(gray, axis=0), sobel(gray, axis=1))
    if mag.max() > 0:
        mag = mag / mag.max()
    return np.clip(gray + gain * mag, 0.0, 1.0)


def render_overlay(
    tile_rgb: np.ndarray,
    heat: np.ndarray,
    alpha: float = 0.5,
    path=None,
    vmin: float = 0.0,
    vmax: float = 1.0,
) -> np.ndarray:
    """Blend an RdYlGn-coloured heatmap over the edge-enhanced tile.

    Returns the ``[H, W, 3]`` uint8 image; writes it as PNG when ``path`` is set.
    """
    from matplotlib import colormaps
    from PIL import Image

    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    tile_rgb = np.asarray(tile_rgb)
    h, w = tile_rgb.shape[-2:]
    heat = np.asarray(heat, dtype=np.float64)
    up = zoom(heat, (h / heat.shape[0], w / heat.shape[1]), order=1, mode="nearest", grid_mode=True)
    up = np.clip((up - vmin) / (vmax - vmin), 0.0, 1.0)
    colour = colormaps["RdYlGn"](up)[..., :3]
    base = np.repeat(edge_enhanced_gray(tile_rgb)[..., None], 3, axis=-1)
    out = (1.0 - alpha) * base + alpha * colour
    img = np.round(out * 255).astype(np.uint8)
    if path is not None:
        Image.fromarray(img).save(path)
    return img


@dataclass
class GeneMetric:
    gene: str
    method: str
    ssim: float
    rmse: float


@dataclass
class MetricsReport:
    rows: List[GeneMetric]
    config: Dict = field(default_factory=dict)
    model_name: str = "ours"

    @property
    def methods(self) -> List[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    def aggregate(self, method: Optional[str] = None) -> Dict[str, float]:
        method = method or self.model_name
        sel = [r for r in self.rows if r.method == method]
        if not sel:
            raise KeyError(method)
        return {"ssim": float(np.mean([r.ssim for r in sel])),
                "rmse": float(np.mean([r.rmse for r in sel]))}

    @property
    def per_gene(self) -> List[GeneMetric]:
        return [r for r in self.rows if r.method == self.model_name]

    def scatter(self) -> List[dict]:
        ours = {r.gene: r.ssim for r in self.per_gene}
        return [
            {"gene": r.gene, "ours_ssim": ours[r.gene], "baseline": r.method, "baseline_ssim": r.ssim}
            for r in self.rows if r.method != self.model_name
        ]

    def write(self, out_dir, stem: str = "metrics") -> Dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out / f"{stem}.csv", "scatter": out / f"{stem}_scatter.json",
                 "summary": out / f"{stem}_summary.json"}
        with open(paths["csv"], "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["gene", "method", "ssim", "rmse"])
            for r in self.rows:
                writer.writerow([r.gene, r.method, repr(r.ssim), repr(r.rmse)])
        paths["scatter"].write_text(json.dumps(self.scatter(), indent=2))
        summary = {m: self.aggregate(m) for m in self.methods}
        paths["summary"].write_text(json.dumps({"aggregate": summary, "config": self.config}, indent=2))
        return paths

    def table(self, title: str = "") -> str:
        """Plain-text ``Approach | RMSE | SSIM`` table, best method last."""
        lines = [title] if title else []
        lines += ["Approach       |   RMSE |   SSIM", "-" * 33]
        others = [m for m in self.methods if m != self.model_name]
        for m in others + [self.model_name]:
            agg = self.aggregate(m)
            lines.append(f"{m:<14} | {agg['rmse']:.4f} | {agg['ssim']:.4f}")
        return "\n".join(lines)


def per_gene_report(
    pred: np.ndarray,
    truth: np.ndarray,
    gene_panel: Sequence[str],
    baselines: Optional[Mapping[str, np.ndarray]] = None,
    model_name: str = "ours",
    config: Optional[dict] = None,
) -> MetricsReport:
    """Per-gene SSIM/RMSE for the model and every baseline.

    Arrays are ``[N, C, H, W]`` (or ``[C, H, W]``) in the [0, 1] metric space.
    SSIM per gene is the mean over tiles; RMSE pools all pixels of the gene.
    """
    truth = np.asarray(truth, dtype=np.float64)
    if truth.ndim == 3:
        truth = truth[None]
    if truth.shape[1] != len(gene_panel):
        raise ValueError(f"{truth.shape[1]} channels but {len(gene_panel)} genes")
    methods = {model_name: pred, **dict(baselines or {})}
    rows = []
    for method, arr in methods.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.shape != truth.shape:
            raise ValueError(f"{method}: shape {arr.shape} != truth {truth.shape}")
        for c, gene in enumerate(gene_panel):
            s = float(np.mean([ssim(arr[n, c], truth[n, c]) for n in range(len(truth))]))
            rows.append(GeneMetric(gene, method, s, rmse(arr[:, c], truth[:, c])))
    return MetricsReport(rows=rows, config=dict(config or {}), model_name=model_name)
