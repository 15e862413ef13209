"""Joint differentiable superpixels and unfolded-ADMM self-representation
for unsupervised hyperspectral clustering."""
from ._backend import BACKEND
from .data import (HsiCube, LabelMap, SynthSpec, choose_superpixel_count, load_cube, load_labels,
                   make_synthetic, save_cube, save_labels, standardize)
from .errors import ConfigError, NumericalError, ValidationError
from .pipeline import PipelineResult, run_pipeline
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ConfigError", "HsiCube", "LabelMap", "NumericalError", "PipelineResult", "SynthSpec",
    "TrainConfig", "ValidationError", "choose_superpixel_count", "load_cube", "load_labels",
    "make_synthetic", "run_pipeline", "save_cube", "save_labels", "standardize", "train",
]
