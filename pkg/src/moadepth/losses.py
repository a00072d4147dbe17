"""Composite depth objective (CE + L1 + SILog) and the standard depth metrics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
import numpy as np

from .autodiff import Tensor, functional as F
from .exceptions import ContractError, ParameterError

DEPTH_CAP = 10.0


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    reg: float = 1.0
    silog: float = 0.5
    silog_lambda: float = 0.85
    silog_alpha: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ParameterError(f"loss weight {f.name} must be >= 0")


def _mask(mask, shape) -> np.ndarray:
    m = np.ones(shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), shape)
    if not m.any():
        raise ContractError("mask selects no pixels")
    return m


def _masked_mean(values: Tensor, m: np.ndarray) -> Tensor:
    return F.sum(values * Tensor(m.astype(np.float64))) * (1.0 / m.sum())


def ce_loss(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean over valid pixels of -log softmax(logits)[target]; class axis is -3 ([..., N, h, w])."""
    targets = np.asarray(targets)
    n = logits.shape[-3]
    if targets.shape != logits.shape[:-3] + logits.shape[-2:]:
        raise ContractError(f"ce_loss: targets {targets.shape} do not match logits {logits.shape}")
    if targets.min() < 0 or targets.max() >= n:
        raise ContractError(f"ce_loss: targets must lie in [0, {n - 1}]")
    m = _mask(mask, targets.shape)
    onehot = (np.arange(n).reshape(-1, 1, 1) == targets[..., None, :, :]).astype(np.float64)
    nll = -F.sum(F.log_softmax(logits, axis=-3) * Tensor(onehot), axis=-3)
    return _masked_mean(nll, m)


def l1_loss(pred: Tensor, gt, mask=None) -> Tensor:
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ContractError(f"l1_loss: shapes differ, {pred.shape} vs {gt.shape}")
    m = _mask(mask, gt.shape)
    return _masked_mean(F.abs(pred - Tensor(np.where(m, gt, 0.0))), m)


def silog_loss(pred: Tensor, gt, mask=None, lam: float = 0.85, alpha: float = 10.0) -> Tensor:
    """alpha * (Var(g) + lam * Mean(g)^2), g = log pred - log gt, population statistics over the mask."""
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ContractError(f"silog_loss: shapes differ, {pred.shape} vs {gt.shape}")
    m = _mask(mask, gt.shape)
    if np.any(gt[m] <= 0) or np.any(pred.data[m] <= 0):
        raise ContractError("silog_loss: depths under the mask must be positive")
    mf = Tensor(m.astype(np.float64))
    safe_pred = pred * mf + Tensor((~m).astype(np.float64))
    g = (F.log(safe_pred) - Tensor(np.log(np.where(m, gt, 1.0)))) * mf
    count = float(m.sum())
    mu = F.sum(g) * (1.0 / count)
    variance = F.sum(F.square((g - mu) * mf)) * (1.0 / count)
    return (variance + F.square(mu) * lam) * alpha


def total_loss(cls, reg, silog, weights: LossWeights = LossWeights()):
    """lambda_cls * L_cls + lambda_reg * L_reg + lambda_silog * L_silog."""
    return cls * weights.cls + reg * weights.reg + silog * weights.silog


@dataclass
class MetricReport:
    absrel: float
    rmse: float
    log10: float
    delta1: float
    delta2: float
    delta3: float
    n_pixels: int

    def as_dict(self):
        return asdict(self)


def valid_mask(gt, cap: float = DEPTH_CAP) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.float64)
    return (gt > 0) & (gt <= cap)


class MetricAccumulator:
    """Per-pixel running sums so metrics over a split pool every pixel equally."""

    def __init__(self, cap: float = DEPTH_CAP, d_min: float = 0.1):
        self.cap, self.d_min = cap, d_min
        self.n = 0
        self.abs_rel = self.sq = self.log10 = 0.0
        self.hits = np.zeros(3)

    def update(self, pred, gt, mask=None) -> None:
        pred = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
        gt = np.asarray(gt, dtype=np.float64)
        if pred.shape != gt.shape:
            raise ContractError(f"metrics: shapes differ, {pred.shape} vs {gt.shape}")
        m = valid_mask(gt, self.cap) if mask is None else (np.asarray(mask, dtype=bool) & valid_mask(gt, self.cap))
        p = np.clip(pred[m], self.d_min, self.cap)
        d = gt[m]
        ratio = np.maximum(p / d, d / p)
        self.n += d.size
        self.abs_rel += float(np.sum(np.abs(p - d) / d))
        self.sq += float(np.sum((p - d) ** 2))
        self.log10 += float(np.sum(np.abs(np.log10(p) - np.log10(d))))
        self.hits += [np.count_nonzero(ratio < 1.25 ** i) for i in (1, 2, 3)]

    def report(self) -> MetricReport:
        if self.n == 0:
            raise ContractError("metrics: mask selects no pixels")
        n = self.n
        d1, d2, d3 = (self.hits / n).tolist()
        return MetricReport(self.abs_rel / n, math.sqrt(self.sq / n), self.log10 / n, d1, d2, d3, n)


def evaluate_metrics(pred, gt, mask=None, cap: float = DEPTH_CAP,
                     d_min: float = 0.1) -> MetricReport:
    """AbsRel, RMSE, log10 and delta accuracies over valid pixels, predictions clamped to [d_min, cap]."""
    acc = MetricAccumulator(cap=cap, d_min=d_min)
    acc.update(pred, gt, mask)
    return acc.report()
