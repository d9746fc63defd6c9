"""Histology-conditioned diffusion for super-resolving spatial transcriptomics maps."""

from .config import ConfigError, TrainingConfig, load_config
from .diffusion import DiffusionSchedule, build_linear_schedule, q_sample, sample
from .eval import MetricsReport, rmse, ssim
from .structures import HRStMap, HistologyTile, LRStMap, SegMask

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DiffusionSchedule",
    "HRStMap",
    "HistologyTile",
    "LRStMap",
    "MetricsReport",
    "SegMask",
    "TrainingConfig",
    "build_linear_schedule",
    "load_config",
    "q_sample",
    "rmse",
    "sample",
    "ssim",
]
