"""Finite-difference checks over every primitive, the adapter pieces, the heads and the full loss."""
from __future__ import annotations

import time
from typing import Callable, Dict, Optional

import numpy as np

from .autodiff import GradReport, Tensor, derive_seed, functional as F, grad_check, no_grad
from .config import preset_config
from .data import generate_scene, random_scene_spec
from .heads import bin_centers, binned_depth, classify_head, fuse_heads, init_heads, regress_head
from .model import MoADepthModel
from .moa import MoAConfig, expert_forward, gate_forward, init_moa, moa_forward
from .train import compute_losses, prepare_targets

EPS = 1e-5
REL_TOL = 1e-4


def _leaf(rng: np.random.Generator, shape, low: float = -1.0, high: float = 1.0,
          away_from_zero: bool = False) -> Tensor:
    data = rng.uniform(low, high, size=shape)
    if away_from_zero:
        # keep kinked ops (relu, abs) off their kink by more than eps
        data = np.sign(data) * (0.1 + np.abs(data))
    return Tensor(data, requires_grad=True)


def _weighted_sum(out: Tensor, rng_seed: int) -> Tensor:
    """Contract an output with fixed random weights so every output entry matters."""
    w = np.random.default_rng(rng_seed).normal(size=out.shape)
    return F.sum(out * Tensor(w))


def _primitive_cases(rng: np.random.Generator) -> Dict[str, tuple]:
    """name -> (forward taking the leaves, leaves dict)."""
    x = lambda *s, **kw: _leaf(rng, s, **kw)  # noqa: E731
    pos = lambda *s: _leaf(rng, s, 0.5, 2.0)  # noqa: E731
    cases = {
        "add": (lambda a, b: a + b, {"a": x(3, 4), "b": x(4)}),
        "sub": (lambda a, b: a - b, {"a": x(3, 1), "b": x(3, 4)}),
        "mul": (lambda a, b: a * b, {"a": x(2, 3, 4), "b": x(3, 1)}),
        "div": (lambda a, b: a / b, {"a": x(3, 4), "b": pos(3, 4)}),
        "matmul": (lambda a, b: a @ b, {"a": x(2, 3, 5), "b": x(5, 4)}),
        "matmul_vec": (lambda a, b: a @ b, {"a": x(3, 5), "b": x(5)}),
        "exp": (F.exp, {"x": x(3, 4)}),
        "log": (F.log, {"x": pos(3, 4)}),
        "gelu": (F.gelu, {"x": x(3, 4, low=-3.0, high=3.0)}),
        "relu": (F.relu, {"x": x(3, 4, away_from_zero=True)}),
        "sigmoid": (F.sigmoid, {"x": x(3, 4, low=-4.0, high=4.0)}),
        "abs": (F.abs, {"x": x(3, 4, away_from_zero=True)}),
        "square": (F.square, {"x": x(3, 4)}),
        "softmax": (lambda t: F.softmax(t, axis=-1, temperature=2.0), {"x": x(3, 5)}),
        "softmax_axis0": (lambda t: F.softmax(t, axis=0), {"x": x(4, 3)}),
        "log_softmax": (lambda t: F.log_softmax(t, axis=1), {"x": x(2, 6, 3)}),
        "layer_norm": (F.layer_norm, {"x": x(3, 8)}),
        "sum": (lambda t: F.sum(t, axis=1, keepdims=True), {"x": x(3, 4, 2)}),
        "mean": (lambda t: F.mean(t, axis=(0, 2)), {"x": x(3, 4, 2)}),
        "var": (lambda t: F.var(t, axis=-1), {"x": x(3, 6)}),
        "concat": (lambda a, b: F.concat([a, b], axis=1), {"a": x(2, 3), "b": x(2, 4)}),
        "broadcast": (lambda t: F.broadcast_to(t, (2, 3, 4)), {"x": x(3, 1)}),
        "reshape": (lambda t: F.reshape(t, (4, 6)), {"x": x(2, 3, 4)}),
        "transpose": (lambda t: F.transpose(t, (2, 0, 1)), {"x": x(2, 3, 4)}),
        "getitem": (lambda t: t[1:, ::2], {"x": x(3, 4)}),
        "getitem_fancy": (lambda t: F.getitem(t, (np.array([0, 2, 0]),)), {"x": x(3, 4)}),
        "avg_pool2d": (lambda t: F.avg_pool2d(t, 2), {"x": x(2, 4, 6)}),
        "upsample_bilinear2d": (lambda t: F.upsample_bilinear2d(t, (7, 5)), {"x": x(2, 3, 2)}),
    }
    return cases


def check_primitives(seed: int = 0) -> GradReport:
    rng = np.random.default_rng(derive_seed("gradsuite-primitives", seed))
    report = GradReport(rel_tol=REL_TOL)
    for name, (fn, leaves) in _primitive_cases(rng).items():
        out_seed = derive_seed("gradsuite-weights", seed, name)
        f = lambda fn=fn, leaves=leaves, s=out_seed: _weighted_sum(fn(*leaves.values()), s)  # noqa: E731
        report.merge(grad_check(f, leaves, EPS, REL_TOL), prefix=f"primitive.{name}.")
    return report


def _perturbed_moa(cfg: MoAConfig, seed: int, prefix: str = "") -> Dict[str, Tensor]:
    """Adapter parameters with the zero-initialized matrices moved off zero.

    At init W2 and the gate's output layer are zero, which makes several
    gradients exactly zero and the relative-error test meaningless.
    """
    params = init_moa(cfg, seed, prefix)
    rng = np.random.default_rng(derive_seed("gradsuite-perturb", seed, prefix))
    for name, p in params.items():
        if name.endswith("w2") or name.endswith("b2") or name.endswith("b1"):
            p.data = rng.normal(0.0, 0.3, size=p.shape)
    return params


def check_adapter(seed: int = 0, cfg: Optional[MoAConfig] = None) -> GradReport:
    cfg = cfg or MoAConfig(experts=4, bottleneck=6, gate_hidden=8, d_model=10)
    params = _perturbed_moa(cfg, seed)
    for p in params.values():
        p.requires_grad = True
    rng = np.random.default_rng(derive_seed("gradsuite-adapter", seed))
    x = Tensor(rng.normal(size=(2, 5, cfg.d_model)), requires_grad=True)
    experts = [(params[f"expert.{k}.w1"], params[f"expert.{k}.w2"]) for k in range(cfg.experts)]
    gate = {key: params[f"gate.{key}"] for key in ("w1", "b1", "w2", "b2")}
    ws = derive_seed("gradsuite-adapter-out", seed)

    report = GradReport(rel_tol=REL_TOL)
    w1, w2 = experts[0]
    report.merge(grad_check(lambda: _weighted_sum(expert_forward(x, w1, w2), ws),
                            {"x": x, "w1": w1, "w2": w2}, EPS, REL_TOL), prefix="expert.")
    report.merge(grad_check(lambda: _weighted_sum(gate_forward(x, gate, cfg.temperature, cfg.experts), ws),
                            {"x": x, **gate}, EPS, REL_TOL), prefix="gate.")
    report.merge(grad_check(lambda: _weighted_sum(moa_forward(x, cfg, experts, gate)[0], ws),
                            {"x": x, **params}, EPS, REL_TOL), prefix="moa.")
    return report


def check_heads(seed: int = 0) -> GradReport:
    spec = preset_config("toy").model.bins
    rng = np.random.default_rng(derive_seed("gradsuite-heads", seed))
    channels, width, grid = 6, 5, 2
    params = init_heads(channels, width, spec.count, seed)
    for p in params.values():
        p.data = rng.normal(0.0, 0.5, size=p.shape)
        p.requires_grad = True
    fmap = Tensor(rng.normal(size=(1, channels, grid, grid)), requires_grad=True)
    ws = derive_seed("gradsuite-heads-out", seed)
    cls_params = {k: v for k, v in params.items() if not k.startswith("heads.reg")}
    reg_params = {k: v for k, v in params.items() if not k.startswith("heads.cls")}

    report = GradReport(rel_tol=REL_TOL)
    report.merge(grad_check(lambda: _weighted_sum(classify_head(fmap, params, spec)[1], ws),
                            {"features": fmap, **cls_params}, EPS, REL_TOL), prefix="classify.")
    logits = Tensor(rng.normal(size=(2, spec.count, 3)), requires_grad=True)
    centers = bin_centers(spec)
    report.merge(grad_check(lambda: _weighted_sum(binned_depth(logits, centers, axis=1), ws),
                            {"logits": logits}, EPS, REL_TOL), prefix="binned.")
    report.merge(grad_check(lambda: _weighted_sum(regress_head(fmap, params, spec), ws),
                            {"features": fmap, **reg_params}, EPS, REL_TOL), prefix="regress.")
    report.merge(grad_check(
        lambda: _weighted_sum(fuse_heads(classify_head(fmap, params, spec)[1],
                                         regress_head(fmap, params, spec), 0.5), ws),
        {"features": fmap, **params}, EPS, REL_TOL), prefix="fusion.")
    return report


class _InputRecorder:
    def __init__(self, adapter):
        self.adapter, self.inputs = adapter, None

    def __call__(self, x):
        self.inputs = x.data
        return self.adapter(x)


def _center_gate_kinks(model: MoADepthModel, images: np.ndarray) -> None:
    """Shift each gate hidden bias so zero sits mid-gap among that unit's pre-activations.

    Thousands of ReLU units see this input; without the shift one of them usually lies
    within an eps-sized step of its kink and central differences straddle it.
    """
    for layer, adapter in model.adapters.items():
        if adapter.gate is None:
            continue
        recorder = _InputRecorder(adapter)
        model.adapters[layer] = recorder
        try:
            with no_grad():
                model.forward(images)
        finally:
            model.adapters[layer] = adapter
        w1, b1 = adapter.gate["w1"], adapter.gate["b1"]
        pre = (recorder.inputs @ w1.data + b1.data).reshape(-1, b1.shape[0])
        for j in range(b1.shape[0]):
            pts = np.concatenate([[-np.inf], np.sort(pre[:, j]), [np.inf]])
            k = np.searchsorted(pts, 0.0)
            lo, hi = pts[k - 1], pts[k]
            if np.isinf(lo) or np.isinf(hi):
                continue  # unit is inactive or linear for every token
            b1.data[j] -= 0.5 * (lo + hi)


def check_composite_loss(preset: str = "toy", seed: int = 0, max_entries: int = 3) -> GradReport:
    """Full model, 1-sample batch, total loss against every trainable tensor.

    Only the ``max_entries`` largest-gradient entries of each tensor are probed
    to keep the number of forward passes bounded.
    """
    config = preset_config(preset, {"train.seed": seed})
    model = MoADepthModel(config.model, seed=seed)
    rng = np.random.default_rng(derive_seed("gradsuite-loss", seed))
    # zero-init W2 and a near-silent gate leave gate gradients at roundoff level
    for name, p in model.trainable_params().items():
        if name.startswith("moa.") and ".w" in name:
            p.data = rng.normal(0.0, 0.3, size=p.shape)
    size = config.model.backbone.image_size
    sample = generate_scene(random_scene_spec(seed, size))
    images = sample.rgb[None]
    _center_gate_kinks(model, images)
    targets = prepare_targets(sample.depth[None], config.model)

    def loss() -> Tensor:
        return compute_losses(model.forward(images), targets, config.loss, config.supervise_fused)["total"]

    report = grad_check(loss, model.trainable_params(), EPS, REL_TOL, max_entries=max_entries)
    return GradReport(rel_tol=REL_TOL).merge(report, prefix="loss.")


SUITE: Dict[str, Callable[..., GradReport]] = {
    "primitives": check_primitives,
    "adapter": check_adapter,
    "heads": check_heads,
}


def run_gradcheck_suite(preset: str = "toy", seed: int = 0, max_entries: int = 3,
                        log: Optional[Callable[[str], None]] = None) -> GradReport:
    """Run every group and return one merged report (eps 1e-5, rel_tol 1e-4)."""
    report = GradReport(rel_tol=REL_TOL)
    for group, fn in SUITE.items():
        start = time.perf_counter()
        report.merge(fn(seed=seed))
        if log:
            log(f"{group}: {time.perf_counter() - start:.1f}s")
    start = time.perf_counter()
    report.merge(check_composite_loss(preset, seed, max_entries))
    if log:
        log(f"composite loss: {time.perf_counter() - start:.1f}s")
    return report
