"""Typed run configuration and its flat ``key = value`` file format.

Keys are dotted (``bins.count = 128``); ``#`` starts a comment.  Lists are
comma-separated.  ``backbone.preset`` selects a block of defaults that explicit
keys then override.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

from .context import DEFAULT_PROMPTS, PromptSet
from .exceptions import ConfigurationError
from .heads import BinSpec
from .losses import LossWeights
from .moa import MoAConfig
from .vit import ViTConfig

_COMMON = {
    "backbone.moa_layers": "2,5,8,11",
    "backbone.trainable_final_blocks": "4",
    "moa.experts": "4",
    "moa.temperature": "2.0",
    "context.prompts": ",".join(DEFAULT_PROMPTS),
    "context.dim": "0",
    "context.seed": "0",
    "context.renormalize": "false",
    "bins.count": "128",
    "bins.min": "0.1",
    "bins.max": "10.0",
    "bins.spacing": "log",
    "heads.fusion_weight": "0.5",
    "heads.dim": "0",
    "loss.cls": "1.0",
    "loss.reg": "1.0",
    "loss.silog": "0.5",
    "loss.silog_lambda": "0.85",
    "loss.silog_alpha": "10.0",
    "loss.supervise_fused": "false",
    "train.weight_decay": "1e-4",
    "train.batch_size": "8",
    "train.beta1": "0.9",
    "train.beta2": "0.999",
    "train.eps": "1e-8",
    "train.seed": "42",
    "train.shuffle": "false",
    "train.eval_every": "1",
    "data.dir": "data",
    "data.train_count": "0",
    "output.dir": "runs/latest",
}

PRESET_DEFAULTS: Dict[str, Dict[str, str]] = {
    "toy": {
        "backbone.image_size": "64", "backbone.patch_size": "8", "backbone.depth": "12",
        "backbone.d_model": "64", "backbone.n_heads": "4", "backbone.mlp_ratio": "4",
        "moa.bottleneck": "16", "moa.gate_hidden": "32",
        "train.lr": "3e-3", "train.epochs": "1", "train.steps": "500",
    },
    "paper": {
        "backbone.image_size": "224", "backbone.patch_size": "32", "backbone.depth": "12",
        "backbone.d_model": "768", "backbone.n_heads": "12", "backbone.mlp_ratio": "4",
        "moa.bottleneck": "64", "moa.gate_hidden": "128",
        "train.lr": "1e-5", "train.epochs": "30", "train.steps": "0",
    },
}

KNOWN_KEYS = frozenset(_COMMON) | frozenset(PRESET_DEFAULTS["toy"]) | {"backbone.preset"}


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"not a boolean: {text!r}")


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class ContextConfig:
    prompts: Tuple[str, ...] = DEFAULT_PROMPTS
    dim: Optional[int] = None
    seed: int = 0
    renormalize: bool = False


@dataclass(frozen=True)
class ModelConfig:
    backbone: ViTConfig = field(default_factory=lambda: ViTConfig.from_preset("toy"))
    moa: MoAConfig = field(default_factory=MoAConfig)
    bins: BinSpec = field(default_factory=BinSpec)
    context: ContextConfig = field(default_factory=ContextConfig)
    fusion_weight: float = 0.5
    head_dim: Optional[int] = None

    @property
    def context_dim(self) -> int:
        return self.context.dim or self.backbone.d_model

    @property
    def head_width(self) -> int:
        return self.head_dim or self.backbone.d_model

    def prompt_set(self) -> PromptSet:
        return PromptSet(self.context.prompts, self.context_dim)

    def validate(self) -> "ModelConfig":
        self.backbone.validate()
        self.moa.validate()
        self.bins.validate()
        if self.moa.d_model != self.backbone.d_model:
            raise ConfigurationError("MoA width must equal the backbone width")
        if not 0.0 <= self.fusion_weight <= 1.0:
            raise ConfigurationError(f"heads.fusion_weight must lie in [0, 1], got {self.fusion_weight}")
        return self


@dataclass(frozen=True)
class OptimConfig:
    epochs: int = 1
    steps: int = 500
    batch_size: int = 8
    lr: float = 3e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 42
    shuffle: bool = False
    eval_every: int = 1


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    supervise_fused: bool = False
    optim: OptimConfig = field(default_factory=OptimConfig)
    data_dir: str = "data"
    train_count: Optional[int] = None
    output_dir: str = "runs/latest"

    def validate(self) -> "TrainConfig":
        self.model.validate()
        o = self.optim
        if o.epochs < 1 or o.batch_size < 1 or not o.lr > 0 or o.steps < 0:
            raise ConfigurationError(
                f"need epochs >= 1, batch_size >= 1, lr > 0, steps >= 0; got {o.epochs}, {o.batch_size}, {o.lr}, {o.steps}")
        return self

    # ------------------------------------------------------------ flat form

    @classmethod
    def from_flat(cls, flat: Mapping[str, str]) -> "TrainConfig":
        unknown = set(flat) - KNOWN_KEYS
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")
        preset = flat.get("backbone.preset", "toy")
        if preset not in PRESET_DEFAULTS:
            raise ConfigurationError(f"unknown backbone preset {preset!r}")
        kv = {**_COMMON, **PRESET_DEFAULTS[preset], **flat}
        try:
            return cls._build(preset, kv)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"invalid config value: {exc}") from None

    @classmethod
    def _build(cls, preset: str, kv: Mapping[str, str]) -> "TrainConfig":
        d_model = int(kv["backbone.d_model"])
        backbone = ViTConfig(
            image_size=int(kv["backbone.image_size"]), patch_size=int(kv["backbone.patch_size"]),
            depth=int(kv["backbone.depth"]), d_model=d_model, n_heads=int(kv["backbone.n_heads"]),
            mlp_ratio=int(kv["backbone.mlp_ratio"]), moa_layers=_ints(kv["backbone.moa_layers"]),
            trainable_final_blocks=int(kv["backbone.trainable_final_blocks"]), preset=preset)
        moa = MoAConfig(experts=int(kv["moa.experts"]), bottleneck=int(kv["moa.bottleneck"]),
                        temperature=float(kv["moa.temperature"]),
                        gate_hidden=int(kv["moa.gate_hidden"]), d_model=d_model)
        bins = BinSpec(count=int(kv["bins.count"]), d_min=float(kv["bins.min"]),
                       d_max=float(kv["bins.max"]), spacing=kv["bins.spacing"].strip())
        prompts = tuple(p.strip() for p in kv["context.prompts"].split(",") if p.strip())
        context = ContextConfig(prompts=prompts, dim=int(kv["context.dim"]) or None,
                                seed=int(kv["context.seed"]), renormalize=_bool(kv["context.renormalize"]))
        model = ModelConfig(backbone=backbone, moa=moa, bins=bins, context=context,
                            fusion_weight=float(kv["heads.fusion_weight"]),
                            head_dim=int(kv["heads.dim"]) or None)
        loss = LossWeights(cls=float(kv["loss.cls"]), reg=float(kv["loss.reg"]),
                           silog=float(kv["loss.silog"]), silog_lambda=float(kv["loss.silog_lambda"]),
                           silog_alpha=float(kv["loss.silog_alpha"]))
        optim = OptimConfig(
            epochs=int(kv["train.epochs"]), steps=int(kv["train.steps"]),
            batch_size=int(kv["train.batch_size"]), lr=float(kv["train.lr"]),
            weight_decay=float(kv["train.weight_decay"]), beta1=float(kv["train.beta1"]),
            beta2=float(kv["train.beta2"]), eps=float(kv["train.eps"]), seed=int(kv["train.seed"]),
            shuffle=_bool(kv["train.shuffle"]), eval_every=int(kv["train.eval_every"]))
        return cls(model=model, loss=loss, supervise_fused=_bool(kv["loss.supervise_fused"]),
                   optim=optim, data_dir=kv["data.dir"], train_count=int(kv["data.train_count"]) or None,
                   output_dir=kv["output.dir"]).validate()

    def to_flat(self) -> Dict[str, str]:
        m, b = self.model, self.model.backbone
        values = {
            "backbone.preset": b.preset, "backbone.image_size": b.image_size,
            "backbone.patch_size": b.patch_size, "backbone.depth": b.depth,
            "backbone.d_model": b.d_model, "backbone.n_heads": b.n_heads,
            "backbone.mlp_ratio": b.mlp_ratio, "backbone.moa_layers": b.moa_layers,
            "backbone.trainable_final_blocks": b.trainable_final_blocks,
            "moa.experts": m.moa.experts, "moa.bottleneck": m.moa.bottleneck,
            "moa.temperature": m.moa.temperature, "moa.gate_hidden": m.moa.gate_hidden,
            "context.prompts": m.context.prompts, "context.dim": m.context.dim or 0,
            "context.seed": m.context.seed, "context.renormalize": m.context.renormalize,
            "bins.count": m.bins.count, "bins.min": m.bins.d_min, "bins.max": m.bins.d_max,
            "bins.spacing": m.bins.spacing, "heads.fusion_weight": m.fusion_weight,
            "heads.dim": m.head_dim or 0,
            "loss.cls": self.loss.cls, "loss.reg": self.loss.reg, "loss.silog": self.loss.silog,
            "loss.silog_lambda": self.loss.silog_lambda, "loss.silog_alpha": self.loss.silog_alpha,
            "loss.supervise_fused": self.supervise_fused,
            "train.epochs": self.optim.epochs, "train.steps": self.optim.steps,
            "train.batch_size": self.optim.batch_size, "train.lr": self.optim.lr,
            "train.weight_decay": self.optim.weight_decay, "train.beta1": self.optim.beta1,
            "train.beta2": self.optim.beta2, "train.eps": self.optim.eps,
            "train.seed": self.optim.seed, "train.shuffle": self.optim.shuffle,
            "train.eval_every": self.optim.eval_every,
            "data.dir": self.data_dir, "data.train_count": self.train_count or 0,
            "output.dir": self.output_dir,
        }
        return {k: _fmt(v) for k, v in values.items()}

    def with_overrides(self, flat: Optional[Mapping[str, object]] = None) -> "TrainConfig":
        """Copy with dotted keys replaced, e.g. ``cfg.with_overrides({"bins.count": 10})``."""
        merged = self.to_flat()
        merged.update({k: _fmt(v) for k, v in (flat or {}).items()})
        return TrainConfig.from_flat(merged)

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def load_config(path, overrides: Optional[Mapping[str, str]] = None) -> TrainConfig:
    flat = parse_config_text(Path(path).read_text(), str(path)) if path else {}
    flat.update(overrides or {})
    return TrainConfig.from_flat(flat)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_flat().items())


def preset_config(preset: str = "toy", overrides: Optional[Mapping[str, object]] = None) -> TrainConfig:
    flat = {"backbone.preset": preset}
    flat.update({k: _fmt(v) for k, v in (overrides or {}).items()})
    return TrainConfig.from_flat(flat)
