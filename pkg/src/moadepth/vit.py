"""Vision-transformer encoder with adapter insertion points and a freezing policy."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Dict, Iterable, Mapping, Optional, Set, Tuple

from .autodiff import Tensor, derive_seed, functional as F, seeded_rng_fill
from .exceptions import ConfigurationError, DimensionError

INIT_STD = 0.02

_PRESETS = {
    "toy": dict(image_size=64, patch_size=8, depth=12, d_model=64, n_heads=4, mlp_ratio=4),
    "paper": dict(image_size=224, patch_size=32, depth=12, d_model=768, n_heads=12, mlp_ratio=4),
}


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 12
    d_model: int = 64
    n_heads: int = 4
    mlp_ratio: int = 4
    moa_layers: Tuple[int, ...] = (2, 5, 8, 11)
    trainable_final_blocks: int = 4
    preset: str = "toy"

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "ViTConfig":
        if name not in _PRESETS:
            raise ConfigurationError(f"unknown backbone preset {name!r}; choose from {sorted(_PRESETS)}")
        return cls(preset=name, **{**_PRESETS[name], **overrides})

    def with_overrides(self, **kw) -> "ViTConfig":
        return replace(self, **kw)

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_size ** 2

    def validate(self) -> "ViTConfig":
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if any(not 0 <= i < self.depth for i in self.moa_layers):
            raise ConfigurationError(f"moa_layers {self.moa_layers} out of range for depth {self.depth}")
        if not 0 <= self.trainable_final_blocks <= self.depth:
            raise ConfigurationError(
                f"trainable_final_blocks {self.trainable_final_blocks} exceeds depth {self.depth}")
        return self


def _block_shapes(cfg: ViTConfig) -> Dict[str, Tuple[Tuple[int, ...], str]]:
    d, hidden = cfg.d_model, cfg.d_model * cfg.mlp_ratio
    return {
        "ln1.g": ((d,), "ones"), "ln1.b": ((d,), "zeros"),
        "attn.wq": ((d, d), "normal"), "attn.bq": ((d,), "zeros"),
        "attn.wk": ((d, d), "normal"), "attn.bk": ((d,), "zeros"),
        "attn.wv": ((d, d), "normal"), "attn.bv": ((d,), "zeros"),
        "attn.wo": ((d, d), "normal"), "attn.bo": ((d,), "zeros"),
        "ln2.g": ((d,), "ones"), "ln2.b": ((d,), "zeros"),
        "mlp.w1": ((d, hidden), "normal"), "mlp.b1": ((hidden,), "zeros"),
        "mlp.w2": ((hidden, d), "normal"), "mlp.b2": ((d,), "zeros"),
    }


def backbone_shapes(cfg: ViTConfig) -> Dict[str, Tuple[Tuple[int, ...], str]]:
    """Parameter name -> (shape, init) for the whole backbone."""
    p, d = cfg.patch_size, cfg.d_model
    shapes = {
        "backbone.patch.w": ((3 * p * p, d), "normal"),
        "backbone.patch.b": ((d,), "zeros"),
        "backbone.cls": ((d,), "normal"),
        "backbone.pos": ((cfg.n_patches + 1, d), "normal"),
    }
    for i in range(cfg.depth):
        for key, spec in _block_shapes(cfg).items():
            shapes[f"backbone.blocks.{i}.{key}"] = spec
    return shapes


def init_backbone(cfg: ViTConfig, seed: int) -> Dict[str, Tensor]:
    cfg.validate()
    params = {}
    for name, (shape, init) in backbone_shapes(cfg).items():
        params[name] = seeded_rng_fill(shape, derive_seed(seed, name), init, 0.0, INIT_STD)
        params[name].name = name
    return params


def block_params(params: Mapping[str, Tensor], index: int) -> Dict[str, Tensor]:
    prefix = f"backbone.blocks.{index}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def patchify(images: Tensor, patch_size: int) -> Tensor:
    """[B, 3, H, W] -> [B, (H/P)*(W/P), 3*P*P], patches in row-major grid order."""
    b, c, h, w = images.shape
    gh, gw = h // patch_size, w // patch_size
    x = F.reshape(images, (b, c, gh, patch_size, gw, patch_size))
    x = F.transpose(x, (0, 2, 4, 1, 3, 5))
    return F.reshape(x, (b, gh * gw, c * patch_size * patch_size))


def _as_batch(images) -> Tuple[Tensor, bool]:
    images = images if isinstance(images, Tensor) else Tensor(images)
    if images.ndim == 3:
        return F.reshape(images, (1,) + images.shape), True
    return images, False


def patchify_and_embed(images, params: Mapping[str, Tensor], cfg: ViTConfig) -> Tensor:
    """Embed patches, prepend the class token and add positional embeddings.

    Accepts one image [3, H, W] or a batch [B, 3, H, W]; returns [B, 1 + n, d]
    (or [1 + n, d] for a single image).
    """
    x, single = _as_batch(images)
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
        raise DimensionError(
            f"patchify_and_embed: expected [B, 3, {cfg.image_size}, {cfg.image_size}], got {x.shape}")
    b = x.shape[0]
    tokens = patchify(x, cfg.patch_size) @ params["backbone.patch.w"] + params["backbone.patch.b"]
    cls = F.broadcast_to(F.reshape(params["backbone.cls"], (1, 1, cfg.d_model)), (b, 1, cfg.d_model))
    tokens = F.concat([cls, tokens], axis=1) + params["backbone.pos"]
    return tokens[0] if single else tokens


def _affine_norm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return F.layer_norm(x) * g + b


def attention(x: Tensor, p: Mapping[str, Tensor], n_heads: int,
              weights_out: Optional[list] = None) -> Tensor:
    """Multi-head self-attention over [B, T, d]."""
    bsz, t, d = x.shape
    dh = d // n_heads

    def heads(w, bias):
        y = F.reshape(x @ w + bias, (bsz, t, n_heads, dh))
        return F.transpose(y, (0, 2, 1, 3))

    q, k, v = heads(p["attn.wq"], p["attn.bq"]), heads(p["attn.wk"], p["attn.bk"]), heads(p["attn.wv"], p["attn.bv"])
    scores = (q @ F.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = F.softmax(scores, axis=-1)
    if weights_out is not None:
        weights_out.append(attn.data)
    out = F.reshape(F.transpose(attn @ v, (0, 2, 1, 3)), (bsz, t, d))
    return out @ p["attn.wo"] + p["attn.bo"]


def transformer_block(x: Tensor, p: Mapping[str, Tensor], n_heads: int,
                      weights_out: Optional[list] = None) -> Tensor:
    """Pre-norm block: x + MHSA(LN(x)), then x + MLP(LN(x))."""
    x, single = (F.reshape(x, (1,) + x.shape), True) if x.ndim == 2 else (x, False)
    x = x + attention(_affine_norm(x, p["ln1.g"], p["ln1.b"]), p, n_heads, weights_out)
    h = F.gelu(_affine_norm(x, p["ln2.g"], p["ln2.b"]) @ p["mlp.w1"] + p["mlp.b1"])
    x = x + (h @ p["mlp.w2"] + p["mlp.b2"])
    return x[0] if single else x


@dataclass
class TokenFeatureMap:
    features: Tensor  # [B, d, h, w]
    cls_token: Tensor  # [B, d]


def encode(images, params: Mapping[str, Tensor], cfg: ViTConfig,
           moa_modules: Optional[Mapping[int, Callable[[Tensor], Tensor]]] = None) -> TokenFeatureMap:
    """Run the full encoder; adapters are applied after their block, on every token.

    ``moa_modules=None`` runs the plain backbone.
    """
    if moa_modules is not None:
        missing = [i for i in cfg.moa_layers if i not in moa_modules]
        if missing:
            raise ConfigurationError(f"no MoA module for configured layers {missing}")
    x, _ = _as_batch(images)
    x = patchify_and_embed(x, params, cfg)
    for i in range(cfg.depth):
        x = transformer_block(x, block_params(params, i), cfg.n_heads)
        if moa_modules is not None and i in cfg.moa_layers:
            x = moa_modules[i](x)
    b, g = x.shape[0], cfg.grid_size
    patches = F.transpose(x[:, 1:, :], (0, 2, 1))
    return TokenFeatureMap(features=F.reshape(patches, (b, cfg.d_model, g, g)), cls_token=x[:, 0, :])


def freezing_mask(cfg: ViTConfig, names: Iterable[str]) -> Set[str]:
    """Names of trainable parameters: the last blocks plus everything outside the backbone."""
    first_trainable = cfg.depth - cfg.trainable_final_blocks
    trainable = set()
    for name in names:
        if not name.startswith("backbone."):
            trainable.add(name)
        elif name.startswith("backbone.blocks."):
            if int(name.split(".")[2]) >= first_trainable:
                trainable.add(name)
    return trainable
