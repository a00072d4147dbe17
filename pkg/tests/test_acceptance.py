"""One test per acceptance criterion; each prints a PASS/FAIL line at the stated tolerance.

The training fixtures (overfit, generalization) take a few minutes in total.
"""
import csv
import math
import time

import numpy as np
import pytest

from moadepth.autodiff import Tensor
from moadepth.config import preset_config
from moadepth.data import decode_tensor, encode_tensor, load_samples, make_dataset, read_tensor, write_tensor
from moadepth.exceptions import FormatError
from moadepth.gradsuite import run_gradcheck_suite
from moadepth.heads import BinSpec, bin_centers, depth_to_bin_index
from moadepth.losses import LossWeights, ce_loss, evaluate_metrics, silog_loss, total_loss
from moadepth.model import MoADepthModel, count_params, param_shapes
from moadepth.moa import MoAConfig, gate_entropy, gate_forward, init_moa
from moadepth.train import (CHECKPOINT_DIR, AblationGrid, ablate, evaluate, fit_arrays, load_checkpoint,
                            save_checkpoint, train)
from moadepth.vit import encode

from oracles import scalar_metric_oracle


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line straight to the terminal, then assert."""
    def _report(criterion: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {criterion:2d}: {detail}")
        assert ok, detail
    return _report


def test_c01_gradient_suite(verdict):
    start = time.perf_counter()
    report = run_gradcheck_suite("toy", seed=0, max_entries=3)
    elapsed = time.perf_counter() - start
    failed = [k for k, ok in report.passed.items() if not ok]
    groups = {name.split(".", 1)[0] for name in report.errors}
    ok = report.ok and elapsed < 60 and {"primitive", "expert", "gate", "moa", "classify", "regress",
                                         "fusion", "loss"} <= groups
    verdict(1, ok, f"{len(report.errors) - len(failed)}/{len(report.errors)} grad checks < 1e-4 "
                   f"(worst {max(report.errors.values()):.2e}) in {elapsed:.1f}s (< 60s); failed={failed}")


def test_c02_identity_at_init(verdict, rng):
    cfg = preset_config("toy").model
    model = MoADepthModel(cfg, seed=0)
    images = rng.uniform(size=(2, 3, 64, 64))
    with_moa = encode(images, model.params, cfg.backbone, model.adapters).features.data
    without = encode(images, model.params, cfg.backbone, None).features.data
    diff = float(np.abs(with_moa - without).max())
    verdict(2, diff == 0.0, f"zero-init W2: max |encode with MoA - without| = {diff}")


def test_c03_gating_contracts(verdict, rng):
    cfg = MoAConfig(experts=4, bottleneck=8, gate_hidden=16, d_model=12)
    params = {k.split("gate.")[1]: v for k, v in init_moa(cfg, 0).items() if k.startswith("gate.")}
    for p in params.values():
        p.data = rng.normal(scale=2.0, size=p.shape)
    gates = gate_forward(Tensor(rng.normal(size=(3, 10, 12))), params, cfg.temperature).data
    row_err = float(np.abs(gates.sum(axis=-1) - 1.0).max())
    entropy, _ = gate_entropy(gates)
    uniform, _ = gate_entropy(np.full((5, 4), 0.25))
    ok = row_err <= 1e-12 and 0.0 <= entropy <= math.log(4) and abs(uniform - 1.38629) < 5e-6 \
        and uniform == pytest.approx(math.log(4), abs=1e-15)
    verdict(3, ok, f"row-sum err {row_err:.1e} (<= 1e-12); entropy {entropy:.4f} in [0, ln 4]; "
                   f"uniform K=4 entropy {uniform:.5f}")


def test_c04_loss_closed_forms(verdict):
    ce = ce_loss(Tensor(np.zeros((1, 128, 3, 3))), np.arange(9).reshape(1, 3, 3) * 14).item()
    gt = np.array([1.0, 2.0, 3.0])
    s1 = silog_loss(Tensor(math.e * gt), gt).item()
    s2 = silog_loss(Tensor(np.array([1.0, 2.0]) * np.exp([0.0, 2.0])), np.array([1.0, 2.0])).item()
    tot = total_loss(2.0, 3.0, 4.0, LossWeights(1.0, 1.0, 0.5))
    ok = abs(ce - math.log(128)) <= 1e-9 and abs(ce - 4.85203) < 5e-6 and abs(s1 - 8.5) <= 1e-12 \
        and abs(s2 - 18.5) <= 1e-12 and tot == 7.0
    verdict(4, ok, f"CE uniform {ce:.9f} (ln 128 {math.log(128):.9f}); SILog {s1!r}, {s2!r}; "
                   f"total(2,3,4) = {tot}")


def test_c05_metric_oracle(verdict, rng):
    worst = 0.0
    for _ in range(50):
        gt = rng.uniform(0.2, 10.0, size=(16, 16))
        gt[rng.uniform(size=gt.shape) < 0.1] = 0.0
        pred = rng.uniform(0.0, 12.0, size=(16, 16))
        m = evaluate_metrics(pred, gt)
        got = (m.absrel, m.rmse, m.log10, m.delta1, m.delta2, m.delta3)
        worst = max(worst, max(abs(g - w) for g, w in zip(got, scalar_metric_oracle(pred, gt))))
    base = rng.uniform(0.5, 7.0, size=(16, 16))
    fix = evaluate_metrics(1.3 * base, base)
    ok = worst <= 1e-10 and fix.delta1 == 0.0 and fix.delta2 == 1.0
    verdict(5, ok, f"max |metric - scalar oracle| over 50 maps = {worst:.1e} (<= 1e-10); "
                   f"pred=1.3*gt gives delta1 {fix.delta1}, delta2 {fix.delta2}")


def test_c06_bin_geometry(verdict):
    bad = []
    for spacing in ("linear", "log"):
        for n in (2, 10, 40, 128):
            spec = BinSpec(n, 0.1, 10.0, spacing)
            if not np.array_equal(depth_to_bin_index(bin_centers(spec), spec), np.arange(n)):
                bad.append(f"{spacing}-{n}")
    mid = bin_centers(BinSpec(3, 0.1, 10.0, "log"))[1]
    verdict(6, not bad and abs(mid - 1.0) <= 1e-10,
            f"round trip failures {bad}; log N=3 middle center {float(mid)!r}")


def _smoothed(values, end, window=10):
    return float(np.mean(values[end - window:end]))


def test_c07_overfit(verdict, tmp_path):
    make_dataset(9, 42, tmp_path)
    x, y = load_samples(tmp_path, range(8))
    cfg = preset_config("toy", {"train.steps": 500, "train.seed": 42, "train.lr": 3e-3})
    start = time.perf_counter()
    result = fit_arrays(cfg, x, y)
    elapsed = time.perf_counter() - start
    m = evaluate(result.model, x, y, cfg.loss).metrics
    losses = [float(r["loss_total"]) for r in result.metrics_rows if r["split"] == "train"]
    early, late = _smoothed(losses, 50), _smoothed(losses, 500)
    ok = m.delta1 >= 0.85 and m.rmse <= 0.5 and late < early and elapsed <= 300
    verdict(7, ok, f"train delta1 {m.delta1:.4f} (>= 0.85), RMSE {m.rmse:.4f} m (<= 0.5); "
                   f"10-step mean loss {early:.3f} @50 -> {late:.3f} @500; {elapsed:.0f}s (<= 300s)")


def test_c08_generalization(verdict, tmp_path):
    make_dataset(220, 7, tmp_path)
    x_tr, y_tr = load_samples(tmp_path, range(200))
    x_ev, y_ev = load_samples(tmp_path, range(200, 220))
    cfg = preset_config("toy", {"train.steps": 0, "train.epochs": 3, "data.train_count": 200})
    untrained = evaluate(MoADepthModel(cfg.model, seed=cfg.optim.seed), x_ev, y_ev, cfg.loss).metrics.delta1
    start = time.perf_counter()
    result = fit_arrays(cfg, x_tr, y_tr, x_ev, y_ev)
    elapsed = time.perf_counter() - start
    trained = result.final_eval.metrics.delta1
    ok = trained >= 0.60 and trained >= 2.0 * untrained and elapsed <= 900
    verdict(8, ok, f"eval delta1 {trained:.4f} (>= 0.60) vs untrained {untrained:.4f} "
                   f"(ratio {trained / untrained:.2f} >= 2); {result.steps} steps in {elapsed:.0f}s (<= 900s)")


def test_c09_freezing_and_determinism(verdict, small_dataset, tmp_path):
    runs, frozen_ok = [], True
    for _ in range(2):  # same output dir both times so config.txt matches too
        cfg = preset_config("toy", {"train.steps": 6, "train.batch_size": 2, "data.dir": str(small_dataset),
                                    "output.dir": str(tmp_path / "run")})
        init = MoADepthModel(cfg.model, seed=cfg.optim.seed)
        result = train(cfg)
        frozen_ok &= all(result.model.params[k].data.tobytes() == p.data.tobytes()
                         for k, p in init.frozen_params().items())
        run = tmp_path / "run"
        files = ["metrics.csv", "gate_stats.csv"] + sorted(
            f"{CHECKPOINT_DIR}/{p.name}" for p in (run / CHECKPOINT_DIR).iterdir())
        runs.append({f: (run / f).read_bytes() for f in files})
    same = runs[0] == runs[1]
    verdict(9, frozen_ok and same, f"frozen params bitwise unchanged: {frozen_ok}; "
                                   f"{len(runs[0])} artifact files bitwise identical across runs: {same}")


def test_c10_ablation(verdict, small_dataset, tmp_path):
    x, y = load_samples(small_dataset, range(4))
    cfg = preset_config("toy", {"train.steps": 1, "train.batch_size": 2})
    ablate(cfg, AblationGrid(experts=(1, 2, 4, 8), bins=(10, 40, 128)), tmp_path, data=(x, y, x[:2], y[:2]))
    with open(tmp_path / "ablation.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    counts = [int(r["trainable_params"]) for r in rows[:4]]
    well_formed = len(rows) == 7 and all(all(v not in ("", None) for v in r.values()) and len(r) == 7
                                         for r in rows)
    increasing = all(a < b for a, b in zip(counts, counts[1:]))
    verdict(10, well_formed and increasing, f"{len(rows)} rows; trainable params over K=1,2,4,8: {counts}")


def test_c11_parameter_accounting(verdict):
    cfg = preset_config("paper").model
    counts = count_params(cfg)
    independent = sum(int(np.prod(shape)) for name, shape in param_shapes(cfg).items()
                      if name.startswith("moa."))
    moa = counts.breakdown["moa"]
    ok = moa == 1_966_608 and moa == independent and counts.trainable_fraction < 1
    verdict(11, ok, f"paper-preset MoA params {moa:,} (required 1,966,608; independent sum {independent:,}); "
                    f"trainable fraction {counts.trainable_fraction:.4f} (< 1)")


def test_c12_file_formats(verdict, rng, tmp_path):
    arrays = [rng.normal(size=s) for s in [(), (5,), (3, 4), (2, 3, 4, 5)]]
    arrays.append(np.array([0.0, -0.0, np.inf, -np.inf, np.nan, 5e-324]))
    round_trip = True
    for i, a in enumerate(arrays):
        write_tensor(tmp_path / f"{i}.mdtn", a)
        round_trip &= read_tensor(tmp_path / f"{i}.mdtn").data.tobytes() == np.asarray(a).tobytes()
    buf = encode_tensor(arrays[3])
    corruptions = [b"XXXX" + buf[4:], buf[:4] + b"\x02" + buf[5:], buf[:5] + b"\x07" + buf[6:], buf[:-1],
                   buf + b"\x00", buf[:10]]
    rejected = 0
    for bad in corruptions:
        try:
            decode_tensor(bad)
        except FormatError:
            rejected += 1
    cfg = preset_config("toy")
    model = MoADepthModel(cfg.model, seed=11)
    save_checkpoint(model, cfg, tmp_path / "ck")
    loaded, _ = load_checkpoint(tmp_path / "ck")
    ck_ok = set(loaded.params) == set(model.params) and all(
        loaded.params[k].data.tobytes() == p.data.tobytes() for k, p in model.params.items())
    ok = round_trip and rejected == len(corruptions) and ck_ok
    verdict(12, ok, f"MDTN round trip bitwise: {round_trip}; corruptions rejected {rejected}/{len(corruptions)}; "
                    f"checkpoint bitwise ({len(model.params)} tensors): {ck_ok}")
