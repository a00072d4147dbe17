"""Mixture-of-Adapters monocular depth estimation on a from-scratch autodiff core."""
from .config import ModelConfig, TrainConfig, load_config, preset_config
from .estimator import MoADepthRegressor
from .model import MoADepthModel, count_params

__version__ = "0.1.0"

__all__ = ["ModelConfig", "MoADepthModel", "MoADepthRegressor", "TrainConfig", "count_params",
           "load_config", "preset_config"]
