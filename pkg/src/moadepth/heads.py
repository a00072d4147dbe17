"""Depth bins and the dual classification/regression head."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .autodiff import Tensor, derive_seed, functional as F, seeded_rng_fill
from .exceptions import ContractError, DimensionError, ParameterError

INIT_STD = 0.02


@dataclass(frozen=True)
class BinSpec:
    count: int = 128
    d_min: float = 0.1
    d_max: float = 10.0
    spacing: str = "log"

    def validate(self) -> "BinSpec":
        if self.count < 2:
            raise ParameterError(f"need at least 2 bins, got {self.count}")
        if self.spacing not in ("linear", "log"):
            raise ParameterError(f"spacing must be 'linear' or 'log', got {self.spacing!r}")
        lower_ok = self.d_min > 0 if self.spacing == "log" else self.d_min >= 0
        if not lower_ok or not self.d_min < self.d_max:
            raise ParameterError(f"invalid depth range [{self.d_min}, {self.d_max}] for {self.spacing} bins")
        return self


def bin_edges(spec: BinSpec) -> np.ndarray:
    spec.validate()
    k = np.arange(spec.count + 1) / spec.count
    if spec.spacing == "linear":
        edges = spec.d_min + (spec.d_max - spec.d_min) * k
    else:
        edges = spec.d_min * (spec.d_max / spec.d_min) ** k
    edges[0], edges[-1] = spec.d_min, spec.d_max
    return edges


def bin_centers(spec: BinSpec) -> np.ndarray:
    """Interval midpoints (linear) or geometric means of adjacent edges (log)."""
    e = bin_edges(spec)
    if spec.spacing == "linear":
        return 0.5 * (e[:-1] + e[1:])
    return np.sqrt(e[:-1] * e[1:])


def depth_to_bin_index(depth, spec: BinSpec) -> np.ndarray:
    """Index of the bin containing the clamped depth; a depth on an edge goes to the lower bin."""
    d = np.asarray(depth, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise ContractError("depth_to_bin_index: depth must be finite")
    d = np.clip(d, spec.d_min, spec.d_max)
    idx = np.searchsorted(bin_edges(spec), d, side="left") - 1
    return np.clip(idx, 0, spec.count - 1)


def head_shapes(in_channels: int, d_head: int, bins: int) -> Dict[str, Tuple[Tuple[int, ...], str]]:
    return {
        "heads.stem.w": ((in_channels, d_head), "normal"), "heads.stem.b": ((d_head,), "zeros"),
        "heads.cls.w": ((d_head, bins), "normal"), "heads.cls.b": ((bins,), "zeros"),
        "heads.reg.w": ((d_head, 1), "normal"), "heads.reg.b": ((1,), "zeros"),
    }


def init_heads(in_channels: int, d_head: int, bins: int, seed: int) -> Dict[str, Tensor]:
    params = {}
    for name, (shape, init) in head_shapes(in_channels, d_head, bins).items():
        # fan-in scaling on the stem keeps its GELU out of the flat region at init
        std = shape[0] ** -0.5 if name == "heads.stem.w" else INIT_STD
        params[name] = seeded_rng_fill(shape, derive_seed(seed, name), init, 0.0, std)
        params[name].name = name
    return params


def _map_to_tokens(fmap: Tensor) -> Tensor:
    b, c, h, w = fmap.shape
    return F.transpose(F.reshape(fmap, (b, c, h * w)), (0, 2, 1))


def _tokens_to_map(tokens: Tensor, h: int, w: int) -> Tensor:
    b, _, c = tokens.shape
    return F.reshape(F.transpose(tokens, (0, 2, 1)), (b, c, h, w))


def head_stem(fused: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Shared 1x1 channel mixing + GELU; [B, C, h, w] -> tokens [B, h*w, d_head]."""
    if fused.ndim != 4:
        raise DimensionError(f"head_stem: expected [B, C, h, w], got {fused.shape}")
    return F.gelu(_map_to_tokens(fused) @ params["heads.stem.w"] + params["heads.stem.b"])


def binned_depth(logits: Tensor, centers: np.ndarray, axis: int = 1) -> Tensor:
    """Softmax-weighted sum of bin centers along ``axis``."""
    shape = [1] * logits.ndim
    shape[axis] = centers.shape[0]
    return F.sum(F.softmax(logits, axis=axis) * Tensor(centers.reshape(shape)), axis=axis)


def classify_head(fused: Tensor, params: Mapping[str, Tensor], spec: BinSpec,
                  stem: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    """Bin logits [B, N, h, w] and their expected depth [B, h, w]."""
    h, w = fused.shape[-2:]
    stem = head_stem(fused, params) if stem is None else stem
    logits_tok = stem @ params["heads.cls.w"] + params["heads.cls.b"]
    probs = F.softmax(logits_tok, axis=-1)
    depth = F.reshape(probs @ Tensor(bin_centers(spec)), (fused.shape[0], h, w))
    return _tokens_to_map(logits_tok, h, w), depth


def regress_head(fused: Tensor, params: Mapping[str, Tensor], spec: BinSpec,
                 stem: Optional[Tensor] = None) -> Tensor:
    """d_min + (d_max - d_min) * sigmoid(raw), shape [B, h, w]."""
    h, w = fused.shape[-2:]
    stem = head_stem(fused, params) if stem is None else stem
    raw = F.reshape(stem @ params["heads.reg.w"] + params["heads.reg.b"], (fused.shape[0], h, w))
    return squash_depth(raw, spec)


def squash_depth(raw, spec: BinSpec) -> Tensor:
    return spec.d_min + (spec.d_max - spec.d_min) * F.sigmoid(raw)


def fuse_heads(d_binned, d_regressed, weight: float):
    if not 0.0 <= weight <= 1.0:
        raise ParameterError(f"fusion weight must lie in [0, 1], got {weight}")
    if weight == 1.0:
        return d_binned
    if weight == 0.0:
        return d_regressed
    return d_binned * weight + d_regressed * (1.0 - weight)


def upsample_prediction(depth, height: int, width: int) -> Tensor:
    """Bilinear resize of [..., h, w] to [..., H, W] (half-pixel centers)."""
    return F.upsample_bilinear2d(depth, (height, width))
