"""scikit-learn style wrapper around the training loop."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_depth_maps, check_images
from .config import preset_config
from .losses import evaluate_metrics
from .train import fit_arrays


class MoADepthRegressor(RegressorMixin, BaseEstimator):
    """Dense depth regressor: images [n, 3, H, W] -> depth maps [n, H, W] in meters.

    Hyperparameters left as ``None`` take the preset's value.  ``score`` returns
    delta1 accuracy rather than R^2.
    """

    def __init__(self, preset: str = "toy", n_experts: int = 4, bottleneck: Optional[int] = None,
                 temperature: float = 2.0, n_bins: int = 128, depth_range=(0.1, 10.0),
                 spacing: str = "log", fusion_weight: float = 0.5, epochs: int = 1,
                 steps: Optional[int] = None, batch_size: int = 8,
                 learning_rate: Optional[float] = None, weight_decay: float = 1e-4,
                 prompts: Optional[Sequence[str]] = None, random_state: int = 42):
        self.preset = preset
        self.n_experts = n_experts
        self.bottleneck = bottleneck
        self.temperature = temperature
        self.n_bins = n_bins
        self.depth_range = depth_range
        self.spacing = spacing
        self.fusion_weight = fusion_weight
        self.epochs = epochs
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.prompts = prompts
        self.random_state = random_state

    def _build_config(self):
        overrides = {
            "moa.experts": self.n_experts, "moa.temperature": self.temperature,
            "bins.count": self.n_bins, "bins.min": float(self.depth_range[0]),
            "bins.max": float(self.depth_range[1]), "bins.spacing": self.spacing,
            "heads.fusion_weight": self.fusion_weight, "train.epochs": self.epochs,
            "train.batch_size": self.batch_size, "train.weight_decay": self.weight_decay,
            "train.seed": self.random_state,
        }
        if self.bottleneck is not None:
            overrides["moa.bottleneck"] = self.bottleneck
        if self.steps is not None:
            overrides["train.steps"] = self.steps
        if self.learning_rate is not None:
            overrides["train.lr"] = self.learning_rate
        if self.prompts is not None:
            overrides["context.prompts"] = list(self.prompts)
        return preset_config(self.preset, overrides)

    def fit(self, X, y):
        config = self._build_config()
        X = check_images(X, config.model.backbone.image_size)
        y = check_depth_maps(y, X)
        result = fit_arrays(config, X, y)
        self.config_ = config
        self.model_ = result.model
        self.n_steps_ = result.steps
        self.gate_usage_ = result.usage
        self.history_ = result.metrics_rows
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, self.config_.model.backbone.image_size)
        return self.model_.predict(X, batch_size=self.config_.optim.batch_size)

    def score(self, X, y, sample_weight=None) -> float:
        X = check_images(X)
        y = check_depth_maps(y, X)
        return evaluate_metrics(self.predict(X), y, d_min=self.config_.model.bins.d_min).delta1
