"""Plain containers shared across the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch

HR_PIXEL_UM = 10.0
LR_PIXEL_UM = 100.0


class ShapeError(ValueError):
    """Raised when paired tensors disagree in shape."""


@dataclass
class HistologyTile:
    """RGB morphology raster, channels-first, values in [0, 1]."""

    rgb: np.ndarray
    pixel_size_um: float = HR_PIXEL_UM

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float32)
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise ShapeError(f"histology tile must be [3, H, W], got {self.rgb.shape}")
        if not np.all(np.isfinite(self.rgb)):
            raise ValueError("histology tile contains non-finite values")
        if self.rgb.min() < 0.0 or self.rgb.max() > 1.0:
            raise ValueError("histology tile must lie in [0, 1]")

    @property
    def shape(self):
        return self.rgb.shape[1:]


@dataclass
class SegMask:
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask)
        if self.mask.ndim == 2:
            self.mask = self.mask[None]
        if self.mask.ndim != 3 or self.mask.shape[0] != 1:
            raise ShapeError(f"segmentation mask must be [1, H, W], got {self.mask.shape}")

    @property
    def shape(self):
        return self.mask.shape[1:]


@dataclass
class HRStMap:
    """High-resolution expression raster [C, H, W].

    Values are raw (non-negative) when produced by the synthetic generator and
    in model space [-1, 1] when produced by the sampler.
    """

    values: np.ndarray
    gene_panel: List[str]
    pixel_size_um: float = HR_PIXEL_UM

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise ShapeError(f"ST map must be [C, H, W], got {self.values.shape}")
        if self.values.shape[0] != len(self.gene_panel):
            raise ShapeError(
                f"{self.values.shape[0]} channels but {len(self.gene_panel)} genes in panel"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("ST map contains non-finite values")


@dataclass
class LRStMap(HRStMap):
    pixel_size_um: float = LR_PIXEL_UM


@dataclass
class ConditionBundle:
    """The step-adaptive condition c_t and the pieces it was built from."""

    psi_m: torch.Tensor
    t_embed: torch.Tensor
    fused: torch.Tensor
    phi_s: Optional[torch.Tensor] = None
    extras: dict = field(default_factory=dict)
