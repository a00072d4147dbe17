"""Training loop, evaluation, checkpoints and the two-stage ablation grid."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, derive_seed, no_grad
from .config import ModelConfig, TrainConfig, dump_config, load_config
from .data import load_samples, pool_gt, read_manifest, read_tensor, split_indices, write_tensor
from .exceptions import ConfigurationError, FormatError
from .losses import LossWeights, MetricAccumulator, MetricReport, ce_loss, l1_loss, silog_loss, total_loss
from .model import MoADepthModel, count_params, param_shapes
from .moa import gate_entropy
from .optim import OptimizerState, adamw_step

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["step_or_epoch", "split", "loss_total", "loss_cls", "loss_reg", "loss_silog",
                  "absrel", "rmse", "log10", "delta1", "delta2", "delta3"]
ABLATION_COLUMNS = ["stage", "experts", "bins", "absrel", "rmse", "delta1", "trainable_params"]
COLLAPSE_THRESHOLD = 0.95
CHECKPOINT_DIR = "checkpoint"


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


# ---------------------------------------------------------------- targets and losses


@dataclass
class Targets:
    depth: np.ndarray  # full resolution [n, H, W]
    pooled: np.ndarray  # token grid [n, h, w]
    bins: np.ndarray
    cell_mask: np.ndarray

    def take(self, idx) -> "Targets":
        return Targets(self.depth[idx], self.pooled[idx], self.bins[idx], self.cell_mask[idx])


def prepare_targets(depths: np.ndarray, config: ModelConfig) -> Targets:
    g = config.backbone.grid_size
    pooled, bins, cell_mask = pool_gt(depths, (g, g), config.bins)
    return Targets(np.asarray(depths, dtype=np.float64), pooled, bins, cell_mask)


def compute_losses(pred, targets: Targets, weights, supervise_fused: bool = False) -> Dict[str, Tensor]:
    """CE on the bin logits, L1 and SILog on the regression (or fused) depth, at the token grid."""
    m = targets.cell_mask
    depth = pred.fused if supervise_fused else pred.regressed
    l_cls = ce_loss(pred.logits, targets.bins, m)
    l_reg = l1_loss(depth, targets.pooled, m)
    l_silog = silog_loss(depth, targets.pooled, m, weights.silog_lambda, weights.silog_alpha)
    return {"cls": l_cls, "reg": l_reg, "silog": l_silog,
            "total": total_loss(l_cls, l_reg, l_silog, weights)}


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    metrics: MetricReport
    losses: Dict[str, float]


def evaluate(model: MoADepthModel, images: np.ndarray, depths: np.ndarray, weights=None,
             batch_size: int = 8, supervise_fused: bool = False,
             predict_fn: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None) -> EvalResult:
    """Full-resolution fused-depth metrics pooled per pixel over all samples.

    ``predict_fn(images, depths)`` replaces the model's prediction (test hook); losses are
    then not computed.
    """
    weights = weights or LossWeights()
    cfg = model.config
    size = cfg.backbone.image_size
    acc = MetricAccumulator(d_min=cfg.bins.d_min)
    sums = {"total": 0.0, "cls": 0.0, "reg": 0.0, "silog": 0.0}
    targets = prepare_targets(depths, cfg)
    n = images.shape[0]
    with no_grad():
        for start in range(0, n, batch_size):
            sl = slice(start, start + batch_size)
            if predict_fn is not None:
                acc.update(predict_fn(images[sl], depths[sl]), depths[sl])
                continue
            pred = model.forward(images[sl])
            acc.update(pred.full_resolution(size, size).data, depths[sl])
            losses = compute_losses(pred, targets.take(sl), weights, supervise_fused)
            count = images[sl].shape[0]
            for k in sums:
                sums[k] += losses[k].item() * count
    losses = {k: (v / n if predict_fn is None else float("nan")) for k, v in sums.items()}
    return EvalResult(acc.report(), losses)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: MoADepthModel, config: TrainConfig, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, p in model.params.items():
        fname = f"{name}.mdtn"
        write_tensor(out / fname, p.data)
        lines.append(f"{name} {fname} {0 if name in model.trainable else 1}\n")
    (out / "manifest.txt").write_text("".join(lines))
    (out / "config.txt").write_text(dump_config(config))
    return out


def load_checkpoint(directory) -> Tuple[MoADepthModel, TrainConfig]:
    root = Path(directory)
    for required in ("manifest.txt", "config.txt"):
        if not (root / required).is_file():
            raise FormatError(f"checkpoint file missing: {root / required}")
    config = load_config(root / "config.txt")
    params = {}
    for lineno, line in enumerate((root / "manifest.txt").read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"{root / 'manifest.txt'}:{lineno}: expected 'name file frozen'")
        name, fname, _ = parts
        if not (root / fname).is_file():
            raise FormatError(f"checkpoint tensor missing: {root / fname}")
        params[name] = read_tensor(root / fname)
    expected = param_shapes(config.model)
    if set(expected) != set(params):
        raise FormatError("checkpoint parameters do not match its config")
    for name, shape in expected.items():
        if params[name].shape != tuple(shape):
            raise FormatError(f"checkpoint tensor {name} has shape {params[name].shape}, expected {shape}")
    return MoADepthModel(config.model, seed=config.optim.seed, params=params), config


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: MoADepthModel
    metrics_rows: List[Dict[str, str]] = field(default_factory=list)
    gate_rows: List[List[str]] = field(default_factory=list)
    final_eval: Optional[EvalResult] = None
    usage: Dict[int, np.ndarray] = field(default_factory=dict)
    checkpoint: Optional[Path] = None
    steps: int = 0


def _metric_row(step, split, losses: Dict[str, float], report: MetricReport) -> Dict[str, str]:
    vals = [step, split, losses["total"], losses["cls"], losses["reg"], losses["silog"],
            report.absrel, report.rmse, report.log10, report.delta1, report.delta2, report.delta3]
    return {k: _fmt(v) for k, v in zip(METRIC_COLUMNS, vals)}


def fit_arrays(config: TrainConfig, x_train: np.ndarray, y_train: np.ndarray,
               x_eval: Optional[np.ndarray] = None, y_eval: Optional[np.ndarray] = None,
               out_dir=None, model: Optional[MoADepthModel] = None) -> TrainResult:
    """Train on in-memory arrays; writes metrics.csv, gate_stats.csv and a checkpoint if ``out_dir``."""
    config.validate()
    if x_train.shape[0] == 0:
        raise ConfigurationError("training split is empty")
    o = config.optim
    model = model or MoADepthModel(config.model, seed=o.seed)
    size = config.model.backbone.image_size
    targets = prepare_targets(y_train, config.model)
    params = model.trainable_params()
    state = OptimizerState()
    result = TrainResult(model=model)
    usage_sum = {layer: np.zeros(config.model.moa.experts) for layer in model.adapters}

    n = x_train.shape[0]
    per_epoch = math.ceil(n / o.batch_size)
    total_steps = o.steps if o.steps > 0 else o.epochs * per_epoch
    has_eval = x_eval is not None and x_eval.shape[0] > 0
    order = np.arange(n)
    for step in range(total_steps):
        epoch, pos = divmod(step, per_epoch)
        if pos == 0 and o.shuffle:
            order = np.random.default_rng(derive_seed(o.seed, "shuffle", epoch)).permutation(n)
        idx = order[pos * o.batch_size:(pos + 1) * o.batch_size]

        model.zero_grad()
        pred = model.forward(x_train[idx])
        batch_targets = targets.take(idx)
        losses = compute_losses(pred, batch_targets, config.loss, config.supervise_fused)
        losses["total"].backward()
        adamw_step(params, {k: p.grad for k, p in params.items()}, state, o.lr, o.weight_decay,
                   o.beta1, o.beta2, o.eps)

        acc = MetricAccumulator(d_min=config.model.bins.d_min)
        acc.update(pred.full_resolution(size, size).data, batch_targets.depth)
        result.metrics_rows.append(
            _metric_row(step + 1, "train", {k: v.item() for k, v in losses.items()}, acc.report()))
        for layer, adapter in model.adapters.items():
            entropy, stats = gate_entropy(adapter.last_gates)
            usage_sum[layer] += stats.usage
            result.gate_rows.append([str(step + 1), str(layer), _fmt(entropy)] + [_fmt(u) for u in stats.usage])

        end_of_epoch = pos == per_epoch - 1 or step == total_steps - 1
        if has_eval and end_of_epoch and ((epoch + 1) % max(o.eval_every, 1) == 0 or step == total_steps - 1):
            ev = evaluate(model, x_eval, y_eval, config.loss, o.batch_size, config.supervise_fused)
            result.metrics_rows.append(_metric_row(epoch + 1, "eval", ev.losses, ev.metrics))
            result.final_eval = ev
        if (step + 1) % 50 == 0 or step == total_steps - 1:
            logger.info("step %d/%d loss %.4f", step + 1, total_steps, losses["total"].item())

    result.steps = total_steps
    result.usage = {layer: s / total_steps for layer, s in usage_sum.items()}
    for layer, usage in result.usage.items():
        if usage.size > 1 and usage.max() > COLLAPSE_THRESHOLD:
            logger.warning("expert collapse alarm: layer %d routes %.3f of mass to one expert",
                           layer, usage.max())
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out / "metrics.csv", result.metrics_rows)
        write_gate_csv(out / "gate_stats.csv", result.gate_rows, config.model.moa.experts)
        result.checkpoint = save_checkpoint(model, config, out / CHECKPOINT_DIR)
    return result


def write_metrics_csv(path, rows: Sequence[Dict[str, str]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def write_gate_csv(path, rows: Sequence[Sequence[str]], experts: int) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "layer_index", "mean_entropy"] + [f"usage_{k}" for k in range(experts)])
        writer.writerows(rows)


def load_split(config: TrainConfig, split: str = "train") -> Tuple[np.ndarray, np.ndarray]:
    entries = read_manifest(config.data_dir)
    train_idx, eval_idx = split_indices(len(entries), config.train_count)
    if split not in ("train", "eval"):
        raise ConfigurationError(f"unknown split {split!r}")
    return load_samples(config.data_dir, train_idx if split == "train" else eval_idx, entries)


def train(config: TrainConfig) -> TrainResult:
    """Train from ``config.data_dir`` and write all artifacts under ``config.output_dir``."""
    x_train, y_train = load_split(config, "train")
    x_eval, y_eval = load_split(config, "eval")
    return fit_arrays(config, x_train, y_train, x_eval, y_eval, out_dir=config.output_dir)


def evaluate_checkpoint(checkpoint_dir, data_dir=None, split: str = "eval") -> EvalResult:
    model, config = load_checkpoint(checkpoint_dir)
    if data_dir is not None:
        config = config.replace(data_dir=str(data_dir))
    x, y = load_split(config, split)
    if x.shape[0] == 0:
        raise ConfigurationError(f"split {split!r} is empty")
    return evaluate(model, x, y, config.loss, config.optim.batch_size, config.supervise_fused)


# ---------------------------------------------------------------- ablation


@dataclass(frozen=True)
class AblationGrid:
    experts: Tuple[int, ...] = (1, 2, 4, 8)
    bins: Tuple[int, ...] = (10, 40, 128)
    fixed_bins: Optional[int] = None
    fixed_experts: Optional[int] = None

    def __post_init__(self):
        if not self.experts or not self.bins:
            raise ConfigurationError("ablation grid lists must be non-empty")


def ablate(base: TrainConfig, grid: AblationGrid, out_dir=None,
           data: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = None) -> List[Dict[str, str]]:
    """Stage 1 sweeps expert counts at fixed bins, stage 2 sweeps bins at fixed experts.

    Each cell trains from scratch with seed ``base seed + cell index``.
    """
    if data is None:
        data = (*load_split(base, "train"), *load_split(base, "eval"))
    x_train, y_train, x_eval, y_eval = data
    if x_eval.shape[0] == 0:
        x_eval, y_eval = x_train, y_train
    stage1_bins = grid.fixed_bins or base.model.bins.count
    stage2_experts = grid.fixed_experts or base.model.moa.experts
    cells = [(1, k, stage1_bins) for k in grid.experts] + [(2, stage2_experts, b) for b in grid.bins]
    rows = []
    for i, (stage, experts, bins) in enumerate(cells):
        cfg = base.with_overrides({"moa.experts": experts, "bins.count": bins,
                                   "train.seed": base.optim.seed + i})
        cell_dir = None if out_dir is None else Path(out_dir) / f"cell_{i:02d}"
        result = fit_arrays(cfg, x_train, y_train, x_eval, y_eval, out_dir=cell_dir)
        ev = evaluate(result.model, x_eval, y_eval, cfg.loss, cfg.optim.batch_size, cfg.supervise_fused)
        row = [stage, experts, bins, ev.metrics.absrel, ev.metrics.rmse, ev.metrics.delta1,
               count_params(cfg.model).trainable]
        rows.append({k: _fmt(v) for k, v in zip(ABLATION_COLUMNS, row)})
        logger.info("ablation cell %d: stage %d K=%d N=%d delta1=%.3f", i, stage, experts, bins, ev.metrics.delta1)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(out_dir) / "ablation.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    return rows
