"""Fixed global scene context from prompts, fused into feature maps by concatenation.

The text tower is replaced by a seeded hash-to-Gaussian embedding: each prompt maps to
a fixed random unit vector, which is all the fusion pathway needs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, derive_seed, functional as F
from .exceptions import ParameterError

SCENES = ("kitchen", "classroom", "bedroom", "bathroom", "office", "living room",
          "hallway", "bookstore", "dining room", "study")
DEFAULT_PROMPTS = tuple(f"a photo of a {s}" for s in SCENES)


@dataclass(frozen=True)
class PromptSet:
    prompts: tuple = DEFAULT_PROMPTS
    dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "prompts", tuple(self.prompts))
        if not self.prompts:
            raise ParameterError("prompt set is empty")
        if len(set(self.prompts)) != len(self.prompts):
            raise ParameterError("prompts must be unique")
        if self.dim < 1:
            raise ParameterError(f"context dimension must be >= 1, got {self.dim}")


@dataclass(frozen=True)
class ContextVector:
    vector: np.ndarray

    def __post_init__(self):
        vec = np.array(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(vec)):
            raise ParameterError("context vector has non-finite entries")
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]

    def tensor(self) -> Tensor:
        return Tensor(self.vector)


def pseudo_text_encode(prompt: str, dim: int, global_seed: int = 0) -> np.ndarray:
    if not prompt:
        raise ParameterError("prompt must be a non-empty string")
    if dim < 1:
        raise ParameterError(f"embedding dimension must be >= 1, got {dim}")
    v = np.random.default_rng(derive_seed("prompt", global_seed, prompt)).standard_normal(dim)
    return v / np.linalg.norm(v)


def build_context(prompts: PromptSet, global_seed: int = 0, renormalize: bool = False) -> ContextVector:
    """Average of the unit prompt embeddings (no re-normalization unless asked)."""
    emb = np.stack([pseudo_text_encode(p, prompts.dim, global_seed) for p in prompts.prompts])
    c = emb.mean(axis=0)
    if renormalize:
        norm = np.linalg.norm(c)
        if norm > 0:
            c = c / norm
    return ContextVector(c)


def context_from_embeddings(embeddings: Sequence[np.ndarray]) -> ContextVector:
    return ContextVector(np.mean(np.stack(embeddings), axis=0))


def fuse(features: Tensor, context) -> Tensor:
    """Append the broadcast context to every spatial position: [B, d, h, w] -> [B, d + d_ctx, h, w].

    A single map [d, h, w] is also accepted.
    """
    vec = context.vector if isinstance(context, ContextVector) else np.asarray(
        context.data if isinstance(context, Tensor) else context, dtype=np.float64)
    single = features.ndim == 3
    if single:
        features = F.reshape(features, (1,) + features.shape)
    b, _, h, w = features.shape
    ctx = Tensor(np.broadcast_to(vec.reshape(1, -1, 1, 1), (b, vec.shape[0], h, w)))
    fused = F.concat([features, ctx], axis=1)
    return fused[0] if single else fused
