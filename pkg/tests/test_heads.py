import numpy as np
import pytest

from moadepth.autodiff import Tensor, functional as F, grad_check
from moadepth.exceptions import ContractError, ParameterError
from moadepth.gradsuite import check_heads
from moadepth.heads import (BinSpec, bin_centers, bin_edges, binned_depth, classify_head,
                            depth_to_bin_index, fuse_heads, init_heads, regress_head, upsample_prediction)

SPECS = [BinSpec(n, 0.1, 10.0, s) for s in ("linear", "log") for n in (2, 10, 40, 128)]


def test_linear_two_bins():
    np.testing.assert_array_equal(bin_centers(BinSpec(2, 0.0, 10.0, "linear")), [2.5, 7.5])


def test_log_three_bins():
    c = bin_centers(BinSpec(3, 0.1, 10.0, "log"))
    np.testing.assert_allclose(c, [0.21544, 1.0, 4.64159], atol=1e-4)
    assert abs(c[1] - 1.0) <= 1e-10
    # independent oracle: edges 0.1 * 100**(k/3)
    edges = [0.1 * 100 ** (k / 3) for k in range(4)]
    np.testing.assert_allclose(c, [np.sqrt(edges[k] * edges[k + 1]) for k in range(3)], rtol=1e-14)


def test_bin_spec_validation():
    for bad in (BinSpec(1), BinSpec(4, 0.0, 10.0, "log"), BinSpec(4, 5.0, 1.0), BinSpec(4, spacing="cubic")):
        with pytest.raises(ParameterError):
            bin_centers(bad)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.spacing}-{s.count}")
def test_round_trip(spec):
    c = bin_centers(spec)
    assert np.all(np.diff(c) > 0)
    np.testing.assert_array_equal(depth_to_bin_index(c, spec), np.arange(spec.count))


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.spacing}-{s.count}")
def test_boundaries_and_clamping(spec):
    assert depth_to_bin_index(spec.d_min, spec) == 0
    assert depth_to_bin_index(spec.d_max, spec) == spec.count - 1
    assert depth_to_bin_index(1e-6, spec) == 0
    assert depth_to_bin_index(1e6, spec) == spec.count - 1


def test_edge_ties_go_to_lower_bin():
    spec = BinSpec(10, 0.0, 10.0, "linear")
    edges = bin_edges(spec)
    np.testing.assert_array_equal(depth_to_bin_index(edges[1:-1], spec), np.arange(9))


def test_log_middle_index():
    assert depth_to_bin_index(1.0, BinSpec(3, 0.1, 10.0, "log")) == 1


def test_log_centers_constant_ratio():
    c = bin_centers(BinSpec(128))
    ratio = c[1:] / c[:-1]
    assert np.abs(ratio - ratio[0]).max() <= 1e-10


def test_non_finite_depth():
    with pytest.raises(ContractError):
        depth_to_bin_index(np.array([1.0, np.nan]), BinSpec())


def test_saturated_logits_pick_center():
    spec = BinSpec()
    c = bin_centers(spec)
    for k in (0, 17, 127):
        logits = np.zeros((1, spec.count, 1, 1))
        logits[0, k] = 1e3
        assert abs(binned_depth(Tensor(logits), c).data.item() - c[k]) <= 1e-6


def test_uniform_logits_linear_two_bins():
    spec = BinSpec(2, 0.0, 10.0, "linear")
    assert binned_depth(Tensor(np.zeros((1, 2, 1, 1))), bin_centers(spec)).data.item() == 5.0


def _random_heads(rng, channels, spec, scale):
    params = init_heads(channels, 6, spec.count, 0)
    for p in params.values():
        p.data = rng.normal(scale=scale, size=p.shape)
    return params


@pytest.mark.parametrize("scale", [0.1, 10.0, 1000.0])
def test_all_outputs_within_range(rng, scale):
    spec = BinSpec()
    params = _random_heads(rng, 5, spec, scale)
    fmap = Tensor(rng.normal(size=(2, 5, 3, 3)))
    logits, binned = classify_head(fmap, params, spec)
    reg = regress_head(fmap, params, spec).data
    c = bin_centers(spec)
    assert logits.shape == (2, spec.count, 3, 3) and np.all(np.isfinite(logits.data))
    assert np.all((binned.data >= c[0] - 1e-12) & (binned.data <= c[-1] + 1e-12))
    assert np.all((reg >= spec.d_min) & (reg <= spec.d_max))
    fused = fuse_heads(binned, Tensor(reg), 0.5).data
    assert np.all((fused >= spec.d_min) & (fused <= spec.d_max))


def test_classify_head_matches_softmax_sum(rng):
    spec = BinSpec(10)
    params = _random_heads(rng, 4, spec, 1.0)
    fmap = Tensor(rng.normal(size=(1, 4, 2, 2)))
    logits, binned = classify_head(fmap, params, spec)
    z = logits.data[0]
    p = np.exp(z - z.max(axis=0)) / np.exp(z - z.max(axis=0)).sum(axis=0)
    np.testing.assert_allclose(binned.data[0], np.tensordot(bin_centers(spec), p, axes=1), rtol=1e-14)


def test_regress_zero_raw_is_midpoint():
    spec = BinSpec()
    params = init_heads(3, 4, spec.count, 0)
    params["heads.reg.w"].data[:] = 0.0
    params["heads.reg.b"].data[:] = 0.0
    out = regress_head(Tensor(np.ones((1, 3, 2, 2))), params, spec).data
    np.testing.assert_array_equal(out, np.full((1, 2, 2), (spec.d_min + spec.d_max) / 2))


def test_regress_saturates_to_max():
    spec = BinSpec()
    params = init_heads(3, 4, spec.count, 0)
    params["heads.reg.w"].data[:] = 0.0
    params["heads.reg.b"].data[:] = 1e3
    assert regress_head(Tensor(np.ones((1, 3, 1, 1))), params, spec).data.item() == spec.d_max


def test_fuse_heads_rules():
    b, r = Tensor([4.0]), Tensor([6.0])
    assert fuse_heads(b, r, 1.0) is b
    assert fuse_heads(b, r, 0.0) is r
    assert fuse_heads(b, r, 0.5).data.item() == 5.0
    with pytest.raises(ParameterError):
        fuse_heads(b, r, 1.5)


def test_upsample_constant_identity_and_bounds(rng):
    const = upsample_prediction(Tensor(np.full((1, 4, 4), 3.0)), 32, 32).data
    np.testing.assert_allclose(const, 3.0, rtol=0, atol=1e-15)
    x = rng.uniform(1, 5, size=(2, 4, 4))
    np.testing.assert_allclose(upsample_prediction(Tensor(x), 4, 4).data, x, rtol=0, atol=1e-15)
    up = upsample_prediction(Tensor(x), 16, 16).data
    assert up.min() >= x.min() - 1e-12 and up.max() <= x.max() + 1e-12


def test_upsample_half_pixel_oracle():
    # 2 -> 4 with align_corners off: out centers at 0.25, 0.75, 1.25, 1.75 input px, clamped at the borders
    out = upsample_prediction(Tensor(np.array([[0.0, 1.0]])[None]), 1, 4).data[0, 0]
    np.testing.assert_allclose(out, [0.0, 0.25, 0.75, 1.0], atol=1e-15)


def test_binned_depth_grad_check(rng):
    logits = Tensor(rng.normal(size=(2, 12, 2)), requires_grad=True)
    c = bin_centers(BinSpec(12))
    w = Tensor(rng.normal(size=(2, 2)))
    assert grad_check(lambda: F.sum(binned_depth(logits, c, axis=1) * w), [logits]).ok


@pytest.mark.parametrize("seed", [0, 1])
def test_head_suite(seed):
    report = check_heads(seed)
    assert report.ok, report.errors
