"""Joint-embedding predictive pre-training with noised position embeddings."""
from .config import RunConfig
from .data import Dataset, load_dataset, make_synthetic
from .evaluation import (ProbeConfig, extract_features, linear_probe, low_shot_eval,
                         representation_stats)
from .estimator import NJEPA, LinearProbe
from .trainer import train_loop

__all__ = [
    "NJEPA", "LinearProbe", "RunConfig", "Dataset", "ProbeConfig",
    "load_dataset", "make_synthetic", "train_loop",
    "extract_features", "linear_probe", "low_shot_eval", "representation_stats",
]
__version__ = "0.1.0"
