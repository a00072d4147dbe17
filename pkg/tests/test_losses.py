import math

import numpy as np
import pytest

from moadepth.autodiff import Tensor, grad_check
from moadepth.exceptions import ContractError, ParameterError
from moadepth.losses import (LossWeights, MetricAccumulator, ce_loss, evaluate_metrics, l1_loss,
                             silog_loss, total_loss)

from oracles import scalar_metric_oracle


# ---------------------------------------------------------------- cross-entropy


def test_ce_uniform_logits():
    logits = Tensor(np.zeros((1, 128, 4, 4)))
    targets = np.random.default_rng(0).integers(0, 128, size=(1, 4, 4))
    assert abs(ce_loss(logits, targets).item() - math.log(128)) <= 1e-9
    assert abs(ce_loss(logits, targets).item() - 4.85203) <= 1e-5


def test_ce_saturated():
    logits = np.zeros((1, 5, 2, 2))
    logits[0, 3] = 1e3
    assert ce_loss(Tensor(logits), np.full((1, 2, 2), 3)).item() < 1e-6


def test_ce_shift_invariance(rng):
    logits = rng.normal(size=(2, 6, 3, 3))
    targets = rng.integers(0, 6, size=(2, 3, 3))
    shifted = logits + rng.normal(size=(2, 1, 3, 3)) * 50
    assert ce_loss(Tensor(logits), targets).item() == pytest.approx(ce_loss(Tensor(shifted), targets).item(),
                                                                     abs=1e-12)


def test_ce_mask_and_errors(rng):
    logits = rng.normal(size=(1, 4, 2, 2))
    targets = np.array([[[0, 1], [2, 3]]])
    mask = np.array([[[True, False], [False, False]]])
    z = logits[0, :, 0, 0]
    want = -(z[0] - np.log(np.exp(z).sum()))
    assert ce_loss(Tensor(logits), targets, mask).item() == pytest.approx(want, abs=1e-14)
    with pytest.raises(ContractError):
        ce_loss(Tensor(logits), targets, np.zeros_like(mask))
    with pytest.raises(ContractError):
        ce_loss(Tensor(logits), targets + 4)


# ---------------------------------------------------------------- L1 / SILog


def test_l1_fixtures(rng):
    gt = rng.uniform(1, 5, size=(2, 4, 4))
    assert l1_loss(Tensor(gt), gt).item() == 0.0
    assert l1_loss(Tensor(gt + 0.5), gt).item() == pytest.approx(0.5, abs=1e-14)
    pred = gt.copy()
    pred[:, :2] += 3.0
    mask = np.zeros(gt.shape, dtype=bool)
    mask[:, 2:] = True
    assert l1_loss(Tensor(pred), gt, mask).item() == 0.0
    with pytest.raises(ContractError):
        l1_loss(Tensor(gt), gt, np.zeros_like(mask))


def test_silog_fixtures(rng):
    gt = rng.uniform(1, 5, size=(3, 3))
    assert silog_loss(Tensor(gt), gt).item() == 0.0
    assert silog_loss(Tensor(math.e * gt), gt).item() == pytest.approx(8.5, abs=1e-12)
    two = np.array([1.0, 2.0])
    pred = two * np.exp([0.0, 2.0])
    assert silog_loss(Tensor(pred), two).item() == pytest.approx(18.5, abs=1e-12)


def test_silog_scale_properties(rng):
    gt = rng.uniform(0.5, 8, size=(4, 4))
    pred = rng.uniform(0.5, 8, size=(4, 4))
    base = silog_loss(Tensor(pred), gt).item()
    assert silog_loss(Tensor(3.0 * pred), 3.0 * gt).item() == pytest.approx(base, rel=1e-12)
    assert silog_loss(Tensor(2.7 * gt), gt, lam=0.0).item() == pytest.approx(0.0, abs=1e-12)
    assert silog_loss(Tensor(2.7 * gt), gt).item() > 0.0


def test_silog_masked_matches_subset(rng):
    gt = rng.uniform(1, 5, size=(4, 4))
    pred = rng.uniform(1, 5, size=(4, 4))
    mask = rng.uniform(size=(4, 4)) > 0.4
    want = silog_loss(Tensor(pred[mask]), gt[mask]).item()
    assert silog_loss(Tensor(pred), gt, mask).item() == pytest.approx(want, rel=1e-12)


def test_silog_rejects_non_positive():
    with pytest.raises(ContractError):
        silog_loss(Tensor(np.array([1.0, 2.0])), np.array([1.0, 0.0]), np.array([True, True]))
    with pytest.raises(ContractError):
        silog_loss(Tensor(np.array([-1.0, 2.0])), np.array([1.0, 2.0]))


def test_total_loss_arithmetic():
    assert total_loss(2.0, 0.5, 1.0) == 3.0
    assert total_loss(2.0, 0.5, 1.0, LossWeights(0, 0, 0)) == 0.0
    assert total_loss(2.0, 0.5, 1.0, LossWeights(1, 0, 0)) == 2.0
    with pytest.raises(ParameterError):
        LossWeights(cls=-1.0)


def test_loss_grad_checks(rng):
    logits = Tensor(rng.normal(size=(2, 7, 3, 3)), requires_grad=True)
    targets = rng.integers(0, 7, size=(2, 3, 3))
    pred = Tensor(rng.uniform(0.5, 6, size=(2, 3, 3)), requires_grad=True)
    gt = rng.uniform(0.5, 6, size=(2, 3, 3))
    # keep L1 away from its kink
    gt = np.where(np.abs(pred.data - gt) < 0.05, gt + 0.2, gt)
    mask = rng.uniform(size=(2, 3, 3)) > 0.2
    assert grad_check(lambda: ce_loss(logits, targets, mask), [logits]).ok
    assert grad_check(lambda: l1_loss(pred, gt, mask), [pred]).ok
    assert grad_check(lambda: silog_loss(pred, gt, mask), [pred]).ok
    assert grad_check(lambda: total_loss(ce_loss(logits, targets, mask), l1_loss(pred, gt, mask),
                                         silog_loss(pred, gt, mask)), [logits, pred]).ok


# ---------------------------------------------------------------- metrics


def test_metric_perfect(rng):
    gt = rng.uniform(0.5, 9, size=(8, 8))
    m = evaluate_metrics(gt, gt)
    assert (m.absrel, m.rmse, m.log10, m.delta1, m.delta2, m.delta3) == (0, 0, 0, 1, 1, 1)


def test_metric_threshold_fixture(rng):
    gt = rng.uniform(0.5, 7, size=(8, 8))
    m = evaluate_metrics(1.3 * gt, gt)
    assert m.delta1 == 0.0 and m.delta2 == 1.0
    assert m.absrel == pytest.approx(0.3, abs=1e-12)


def test_metric_double(rng):
    gt = rng.uniform(0.5, 4.9, size=(8, 8))
    m = evaluate_metrics(2.0 * gt, gt)
    assert m.absrel == pytest.approx(1.0, abs=1e-12)
    assert m.log10 == pytest.approx(math.log10(2), abs=1e-12)


def test_metric_delta_symmetry(rng):
    gt = rng.uniform(0.5, 6, size=(16, 16))  # keeps both maps inside (d_min, cap]
    pred = gt * rng.uniform(0.6, 1.6, size=gt.shape)
    a, b = evaluate_metrics(pred, gt), evaluate_metrics(gt, pred)
    assert (a.delta1, a.delta2, a.delta3) == (b.delta1, b.delta2, b.delta3)


def test_metric_brute_force_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        gt = rng.uniform(0.2, 10.0, size=(16, 16))
        gt[rng.uniform(size=gt.shape) < 0.1] = 0.0  # holes
        pred = rng.uniform(0.0, 12.0, size=(16, 16))
        m = evaluate_metrics(pred, gt)
        want = scalar_metric_oracle(pred, gt)
        got = (m.absrel, m.rmse, m.log10, m.delta1, m.delta2, m.delta3)
        assert max(abs(g - w) for g, w in zip(got, want)) <= 1e-10
        assert m.delta1 <= m.delta2 <= m.delta3 <= 1.0


def test_metric_clamps_predictions():
    gt = np.array([5.0, 5.0])
    m = evaluate_metrics(np.array([50.0, -3.0]), gt)
    assert m.absrel == pytest.approx(((10 - 5) / 5 + (5 - 0.1) / 5) / 2)


def test_metric_accumulator_is_per_pixel(rng):
    a_p, a_g = rng.uniform(1, 5, size=(4, 4)), rng.uniform(1, 5, size=(4, 4))
    b_p, b_g = rng.uniform(1, 5, size=(2, 2)), rng.uniform(1, 5, size=(2, 2))
    acc = MetricAccumulator()
    acc.update(a_p, a_g)
    acc.update(b_p, b_g)
    joint = evaluate_metrics(np.concatenate([a_p.ravel(), b_p.ravel()]),
                             np.concatenate([a_g.ravel(), b_g.ravel()]))
    assert acc.report().rmse == pytest.approx(joint.rmse, rel=1e-14)
    assert acc.report().n_pixels == 20


def test_metric_empty_mask():
    with pytest.raises(ContractError):
        evaluate_metrics(np.ones(4), np.zeros(4))
