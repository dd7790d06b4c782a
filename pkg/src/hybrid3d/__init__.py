"""Hybrid 2D/3D image classification on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .augment import AugSpec, SeedContext, build_volume, default_roster, derive_stream
from .data import Dataset, SplitSpec, SyntheticSpec, generate_synthetic, load_image_dir, split
from .metrics import MetricsReport, metrics_report
from .model import (HybridModel, ThreeDNet, ThreeDNetConfig, TwoDNet, TwoDNetConfig,
                    build_three_d, build_two_d, hybrid_forward)
from .robustness import PerturbationGrid, SweepReport, default_grids, sweep, trend_summary
from .tensor import Tensor, backward, no_grad
from .training import FitReport, TrainConfig, combined_loss, evaluate, fit
from .weights import load_weights, save_weights

__all__ = [
    "AugSpec", "Dataset", "FitReport", "HybridModel", "MetricsReport", "PerturbationGrid",
    "SeedContext", "SplitSpec", "SweepReport", "SyntheticSpec", "Tensor", "ThreeDNet",
    "ThreeDNetConfig", "TrainConfig", "TwoDNet", "TwoDNetConfig", "backward", "build_three_d",
    "build_two_d", "build_volume", "combined_loss", "default_grids", "default_roster",
    "derive_stream", "evaluate", "fit", "generate_synthetic", "hybrid_forward",
    "load_image_dir", "load_weights", "metrics_report", "no_grad", "save_weights", "split",
    "sweep", "trend_summary",
]
