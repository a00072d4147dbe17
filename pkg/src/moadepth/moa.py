"""Mixture-of-Adapters: bottleneck experts mixed by a deterministic softmax gate."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .autodiff import Tensor, derive_seed, functional as F, seeded_rng_fill
from .exceptions import ConfigurationError, ContractError

INIT_STD = 0.02


@dataclass(frozen=True)
class MoAConfig:
    experts: int = 4
    bottleneck: int = 16
    temperature: float = 2.0
    gate_hidden: int = 32
    d_model: int = 64

    def validate(self) -> "MoAConfig":
        if self.experts < 1 or self.bottleneck < 1 or self.gate_hidden < 1:
            raise ConfigurationError(f"MoA sizes must be >= 1: {self}")
        if not self.temperature > 0:
            raise ConfigurationError(f"gate temperature must be > 0, got {self.temperature}")
        return self


@dataclass
class MoAStats:
    mean_entropy: float
    usage: np.ndarray


def moa_shapes(cfg: MoAConfig) -> Dict[str, Tuple[Tuple[int, ...], str]]:
    """Parameter shapes of one adapter.

    With a single expert the gate is constant 1 and carries no parameters.
    """
    d, db, h, k = cfg.d_model, cfg.bottleneck, cfg.gate_hidden, cfg.experts
    shapes = {}
    for e in range(k):
        shapes[f"expert.{e}.w1"] = ((d, db), "normal")
        shapes[f"expert.{e}.w2"] = ((db, d), "zeros")
    if k > 1:
        shapes.update({
            "gate.w1": ((d, h), "normal"), "gate.b1": ((h,), "zeros"),
            "gate.w2": ((h, k), "zeros"), "gate.b2": ((k,), "zeros"),
        })
    return shapes


def init_moa(cfg: MoAConfig, seed: int, prefix: str = "") -> Dict[str, Tensor]:
    cfg.validate()
    params = {}
    for key, (shape, init) in moa_shapes(cfg).items():
        name = prefix + key
        params[name] = seeded_rng_fill(shape, derive_seed(seed, name), init, 0.0, INIT_STD)
        params[name].name = name
    return params


def expert_forward(x, w1: Tensor, w2: Tensor) -> Tensor:
    """W2 . gelu(W1 . x) for row-vector tokens (no biases)."""
    return F.gelu(x @ w1) @ w2


def gate_forward(x, gate: Optional[Mapping[str, Tensor]], temperature: float,
                 experts: int = 1) -> Tensor:
    """Routing probabilities softmax(G(x) / temperature) over the last axis."""
    if not temperature > 0:
        raise ConfigurationError(f"gate temperature must be > 0, got {temperature}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if not gate:
        return Tensor(np.ones(x.shape[:-1] + (experts,)))
    hidden = F.relu(x @ gate["w1"] + gate["b1"])
    return F.softmax(hidden @ gate["w2"] + gate["b2"], axis=-1, temperature=temperature)


def moa_forward(x: Tensor, cfg: MoAConfig, experts: List[Tuple[Tensor, Tensor]],
                gate: Optional[Mapping[str, Tensor]]) -> Tuple[Tensor, Tensor]:
    """x + sum_k g_k * Expert_k(x), per token. Returns the adapted tokens and the gates."""
    if len(experts) != cfg.experts:
        raise ConfigurationError(f"expected {cfg.experts} experts, got {len(experts)}")
    gates = gate_forward(x, gate, cfg.temperature, cfg.experts)
    if cfg.experts == 1:
        w1, w2 = experts[0]
        return x + expert_forward(x, w1, w2), gates
    mix = None
    for k, (w1, w2) in enumerate(experts):
        term = gates[..., k:k + 1] * expert_forward(x, w1, w2)
        mix = term if mix is None else mix + term
    return x + mix, gates


def gate_entropy(gates, atol: float = 1e-6) -> Tuple[float, MoAStats]:
    """Mean per-token gate entropy in nats (0 log 0 := 0) and per-expert mean usage."""
    g = np.asarray(gates.data if isinstance(gates, Tensor) else gates, dtype=np.float64)
    g = g.reshape(-1, g.shape[-1])
    if np.any(np.abs(g.sum(axis=1) - 1.0) > atol):
        raise ContractError("gate rows must sum to 1")
    logs = np.log(np.where(g > 0, g, 1.0))
    entropy = float(np.mean(-(g * logs).sum(axis=1)))
    stats = MoAStats(mean_entropy=entropy, usage=g.mean(axis=0))
    return entropy, stats


class MoAAdapter:
    """One adapter bound to its parameters; remembers the gates of its last call."""

    def __init__(self, cfg: MoAConfig, params: Mapping[str, Tensor], prefix: str = ""):
        self.cfg = cfg
        self.prefix = prefix
        self.experts = [(params[f"{prefix}expert.{k}.w1"], params[f"{prefix}expert.{k}.w2"])
                        for k in range(cfg.experts)]
        self.gate = ({key: params[f"{prefix}gate.{key}"] for key in ("w1", "b1", "w2", "b2")}
                     if cfg.experts > 1 else None)
        self.last_gates: Optional[np.ndarray] = None

    def __call__(self, x: Tensor) -> Tensor:
        out, gates = moa_forward(x, self.cfg, self.experts, self.gate)
        self.last_gates = gates.data
        return out

    def stats(self) -> Optional[MoAStats]:
        if self.last_gates is None:
            return None
        return gate_entropy(self.last_gates)[1]


def max_entropy(experts: int) -> float:
    return math.log(experts)
