"""The full depth model: MoA-adapted encoder, context fusion and dual heads."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Union

import numpy as np

from .autodiff import Tensor, no_grad
from .config import ModelConfig
from .context import ContextVector, build_context, fuse
from .heads import (bin_centers, classify_head, fuse_heads, head_shapes, head_stem, init_heads,
                    regress_head, upsample_prediction)
from .moa import MoAAdapter, MoAStats, init_moa, moa_shapes
from .vit import backbone_shapes, encode, freezing_mask, init_backbone


def moa_prefix(layer: int) -> str:
    return f"moa.{layer}."


@dataclass
class DepthPrediction:
    logits: Tensor  # [B, N, h, w]
    binned: Tensor  # [B, h, w]
    regressed: Tensor  # [B, h, w]
    fused: Tensor  # [B, h, w]

    def full_resolution(self, height: int, width: int) -> Tensor:
        return upsample_prediction(self.fused, height, width)


class MoADepthModel:
    """Parameters plus the forward pass.

    ``params`` maps dotted names to tensors; names not in ``trainable`` have
    ``requires_grad`` off and never receive gradients.
    """

    def __init__(self, config: ModelConfig, seed: int = 0,
                 params: Optional[Mapping[str, Tensor]] = None):
        self.config = config.validate()
        cfg = self.config
        if params is None:
            params = dict(init_backbone(cfg.backbone, seed))
            for layer in cfg.backbone.moa_layers:
                params.update(init_moa(cfg.moa, seed, moa_prefix(layer)))
            in_ch = cfg.backbone.d_model + cfg.context_dim
            params.update(init_heads(in_ch, cfg.head_width, cfg.bins.count, seed))
        self.params: Dict[str, Tensor] = dict(params)
        self.trainable = freezing_mask(cfg.backbone, self.params)
        for name, p in self.params.items():
            p.name = name
            p.requires_grad = name in self.trainable
        self.adapters = {layer: MoAAdapter(cfg.moa, self.params, moa_prefix(layer))
                         for layer in cfg.backbone.moa_layers}
        self.context: ContextVector = build_context(cfg.prompt_set(), cfg.context.seed,
                                                    cfg.context.renormalize)
        self.centers = bin_centers(cfg.bins)

    def trainable_params(self) -> Dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if n in self.trainable}

    def frozen_params(self) -> Dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if n not in self.trainable}

    def forward(self, images, use_moa: bool = True) -> DepthPrediction:
        cfg = self.config
        fmap = encode(images, self.params, cfg.backbone, self.adapters if use_moa else None)
        fused_map = fuse(fmap.features, self.context)
        stem = head_stem(fused_map, self.params)
        logits, binned = classify_head(fused_map, self.params, cfg.bins, stem=stem)
        regressed = regress_head(fused_map, self.params, cfg.bins, stem=stem)
        fused = fuse_heads(binned, regressed, cfg.fusion_weight)
        return DepthPrediction(logits, binned, regressed, fused)

    __call__ = forward

    def predict(self, images, batch_size: int = 8) -> np.ndarray:
        """Full-resolution fused depth [n, H, W] for images [n, 3, H, W]."""
        images = np.asarray(images, dtype=np.float64)
        size = self.config.backbone.image_size
        out = []
        with no_grad():
            for start in range(0, images.shape[0], batch_size):
                pred = self.forward(images[start:start + batch_size])
                out.append(pred.full_resolution(size, size).data)
        return np.concatenate(out) if out else np.zeros((0, size, size))

    def gate_stats(self) -> Dict[int, MoAStats]:
        return {layer: a.stats() for layer, a in self.adapters.items() if a.last_gates is not None}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class ParamCount:
    total: int
    trainable: int
    breakdown: Dict[str, int]
    trainable_breakdown: Dict[str, int]

    @property
    def trainable_fraction(self) -> float:
        return self.trainable / self.total


def param_shapes(config: ModelConfig) -> Dict[str, tuple]:
    shapes = {name: shape for name, (shape, _) in backbone_shapes(config.backbone).items()}
    for layer in config.backbone.moa_layers:
        shapes.update({moa_prefix(layer) + k: shape for k, (shape, _) in moa_shapes(config.moa).items()})
    in_ch = config.backbone.d_model + config.context_dim
    shapes.update({k: shape for k, (shape, _) in head_shapes(in_ch, config.head_width, config.bins.count).items()})
    return shapes


def _component(name: str) -> str:
    return name.split(".", 1)[0]


def count_params(model: Union[MoADepthModel, ModelConfig]) -> ParamCount:
    """Exact parameter counts from shapes; accepts a model or just its config (no allocation)."""
    config = model.config if isinstance(model, MoADepthModel) else model
    shapes = param_shapes(config)
    trainable = freezing_mask(config.backbone, shapes)
    breakdown: Dict[str, int] = {}
    train_breakdown: Dict[str, int] = {}
    for name, shape in shapes.items():
        n = int(np.prod(shape, dtype=np.int64))
        comp = _component(name)
        breakdown[comp] = breakdown.get(comp, 0) + n
        if name in trainable:
            train_breakdown[comp] = train_breakdown.get(comp, 0) + n
    return ParamCount(total=sum(breakdown.values()), trainable=sum(train_breakdown.values()),
                      breakdown=breakdown, trainable_breakdown=train_breakdown)

