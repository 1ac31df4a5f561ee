import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_difference
from structdepth.core import DepthMap, WeightMask
from structdepth.losses import (
    EmptyOverlapError,
    LossBreakdown,
    SamplePoint,
    Stage,
    berhu,
    berhu_batch,
    berhu_penalty,
    berhu_with_grad,
    gfrl,
    gfrl_pair_term,
    gfrl_with_grad,
    normal_loss,
    normal_loss_terms,
    normal_loss_with_grad,
    ordinal_pairs,
    ordinal_relation,
    relative_loss,
    sample_grid_points,
    scale_invariant_gradient,
    scale_invariant_gradient_with_grad,
    total_loss,
)


def pts(gt, pred):
    return [SamplePoint(0, i, float(g), float(p)) for i, (g, p) in enumerate(zip(gt, pred))]


# ------------------------------------------------------------- BerHu


def test_berhu_zero_when_equal():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert berhu(m, m) == 0.0
    value, grad = berhu_with_grad(m, m)
    assert value == 0.0 and not grad.any()


def test_berhu_hand_example():
    # c = 0.2 * 0.5 = 0.1; terms 0.1 and (0.25 + 0.01) / 0.2 = 1.3
    assert berhu([[1.0, 2.0]], [[1.1, 2.5]]) == pytest.approx(0.7, abs=1e-12)


def test_berhu_weighted_hand_example():
    assert berhu([[1.0, 2.0]], [[1.1, 2.5]], WeightMask([[5.0, 1.0]])) == pytest.approx(0.9, abs=1e-12)


def test_berhu_all_ones_weights_is_unweighted():
    rng = np.random.default_rng(1)
    gt = rng.uniform(1, 5, (6, 6))
    pred = gt + rng.normal(0, 0.4, gt.shape)
    assert berhu(pred, gt, WeightMask(np.ones(gt.shape))) == berhu(pred, gt)


def test_berhu_empty_overlap():
    with pytest.raises(EmptyOverlapError, match="empty overlap"):
        berhu([[0.0, 1.0]], [[1.0, 0.0]])


def test_berhu_shape_mismatch():
    with pytest.raises(ValueError):
        berhu(np.ones((2, 2)), np.ones((2, 3)))


@pytest.mark.parametrize("c", [0.01, 0.1, 1.0, 3.7])
def test_berhu_junction_is_c1(c):
    h = 1e-9
    left = float(berhu_penalty(np.array(c - h), c))
    right = float(berhu_penalty(np.array(c + h), c))
    assert left == pytest.approx(c, abs=1e-8)
    assert right == pytest.approx(c, abs=1e-8)
    # one-sided slopes from well inside each branch, extrapolated to the junction
    d = 1e-6
    slope_l1 = (berhu_penalty(np.array(c), c) - berhu_penalty(np.array(c - d), c)) / d
    slope_l2 = (berhu_penalty(np.array(c + d), c) - berhu_penalty(np.array(c), c)) / d
    assert slope_l1 == pytest.approx(1.0, abs=1e-6)
    assert slope_l2 == pytest.approx(1.0, abs=1e-6 + d / c)


def test_berhu_batch_shares_threshold():
    a_pred, a_gt = np.array([[1.0, 2.0]]), np.array([[1.1, 2.5]])
    b_pred, b_gt = np.array([[1.0]]), np.array([[1.05]])
    # c over the batch = 0.1; residual 0.05 is in the L1 branch
    assert berhu_batch([a_pred, b_pred], [a_gt, b_gt]) == pytest.approx((0.1 + 1.3 + 0.05) / 3)
    # alone, the second map gets c = 0.01 and 0.05 falls in the L2 branch
    assert berhu(b_pred, b_gt) == pytest.approx((0.0025 + 0.0001) / 0.02)


def test_berhu_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    gt = rng.uniform(1, 5, (8, 8))
    pred = gt + rng.normal(0, 0.5, gt.shape)
    w = np.where(rng.random(gt.shape) < 0.3, 5.0, 1.0)
    for weights in (None, w):
        _, g = berhu_with_grad(pred, gt, weights)
        num = central_difference(lambda p: berhu(p, gt, weights), pred)
        np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-9)


# ---------------------------------------------------- gradient loss


def test_gradient_loss_zero_when_equal():
    m = np.random.default_rng(0).uniform(1, 3, (9, 9))
    assert scale_invariant_gradient(m, m) == 0.0


def test_gradient_loss_hand_example():
    assert scale_invariant_gradient([[1.0, 3.0, 1.0]], [[1.0, 1.0, 1.0]], [1]) == pytest.approx(0.25, abs=1e-12)


@pytest.mark.parametrize("alpha", [0.5, 2.0, 10.0, 0.013])
def test_gradient_loss_zero_for_scaled_prediction(alpha):
    gt = np.random.default_rng(4).uniform(1, 3, (10, 10))
    assert scale_invariant_gradient(alpha * gt, gt) == pytest.approx(0.0, abs=1e-24)


@pytest.mark.parametrize("alpha", [0.5, 2.0, 10.0])
def test_gradient_loss_joint_scale_invariance(alpha):
    rng = np.random.default_rng(5)
    gt = rng.uniform(1, 3, (12, 12))
    pred = rng.uniform(1, 3, (12, 12))
    base = scale_invariant_gradient(pred, gt)
    assert scale_invariant_gradient(alpha * pred, alpha * gt) == pytest.approx(base, rel=1e-12)


def test_gradient_loss_spacings_default_and_bounds():
    gt = np.ones((4, 4))
    scale_invariant_gradient(gt, gt)  # default spacings trimmed to the image
    with pytest.raises(ValueError):
        scale_invariant_gradient(gt, gt, [4])


def test_gradient_loss_skips_invalid_pixels():
    gt = np.full((1, 3), 1.0)
    pred = np.array([[1.0, 3.0, 0.0]])  # third pixel is a hole
    # only col 0 contributes: (3-1)/4 = 0.5 against 0
    assert scale_invariant_gradient(pred, gt, [1]) == pytest.approx(0.25)


def test_gradient_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    gt = rng.uniform(1, 5, (8, 8))
    pred = gt * rng.uniform(0.7, 1.3, gt.shape)
    w = np.where(rng.random(gt.shape) < 0.3, 5.0, 1.0)
    for weights in (None, w):
        _, g = scale_invariant_gradient_with_grad(pred, gt, None, weights)
        num = central_difference(lambda p: scale_invariant_gradient(p, gt, None, weights), pred)
        np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-10)


# ------------------------------------------------------ normal loss


def test_normal_loss_zero_when_equal():
    m = np.random.default_rng(2).uniform(1, 3, (6, 7))
    assert normal_loss(m, m) == pytest.approx(0.0, abs=1e-15)


def test_normal_loss_ramp_against_plane():
    gt = np.full((5, 6), 2.0)
    pred = np.tile(np.arange(1.0, 7.0), (5, 1))
    terms, mask = normal_loss_terms(pred, gt)
    assert mask.all()
    np.testing.assert_allclose(terms, 1 - 1 / math.sqrt(2), rtol=0, atol=1e-12)
    assert normal_loss(pred, gt) == pytest.approx(1 - 1 / math.sqrt(2), abs=1e-12)


@settings(max_examples=40)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.floats(0.1, 50.0)),
    arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.floats(0.1, 50.0)),
)
def test_normal_terms_in_range(a, b):
    h, w = min(a.shape[0], b.shape[0]), min(a.shape[1], b.shape[1])
    terms, _ = normal_loss_terms(a[:h, :w], b[:h, :w])
    assert np.all(terms >= -1e-15) and np.all(terms <= 2.0)


def test_normal_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(12)
    gt = rng.uniform(1, 5, (8, 8))
    pred = gt * rng.uniform(0.7, 1.3, gt.shape)
    _, g = normal_loss_with_grad(pred, gt)
    num = central_difference(lambda p: normal_loss(p, gt), pred)
    np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-10)


# --------------------------------------------------------- sampling


def test_sample_grid_one_pixel_blocks():
    m = np.random.default_rng(0).uniform(1, 2, (16, 16))
    points = sample_grid_points(m, m, 16, 16, rng=0)
    assert len(points) == 256
    assert {(p.row, p.col) for p in points} == {(r, c) for r in range(16) for c in range(16)}


def test_sample_grid_all_invalid():
    z = np.zeros((16, 16))
    assert sample_grid_points(z, z, 16, 16, rng=0) == []


def test_sample_grid_deterministic_and_one_per_block():
    rng = np.random.default_rng(9)
    gt = rng.uniform(1, 2, (32, 32))
    pred = rng.uniform(1, 2, (32, 32))
    a = sample_grid_points(gt, pred, rng=np.random.default_rng(42))
    b = sample_grid_points(gt, pred, rng=np.random.default_rng(42))
    assert a == b and len(a) == 256
    blocks = {(p.row // 2, p.col // 2) for p in a}
    assert len(blocks) == 256


def test_sample_grid_uneven_blocks_and_holes():
    gt = np.random.default_rng(3).uniform(1, 2, (35, 19))
    gt[:3, :] = 0.0  # first block row partly empty
    points = sample_grid_points(gt, gt, 16, 16, rng=1)
    assert all(gt[p.row, p.col] > 0 for p in points)
    # remainder rows/cols go to the last blocks: rows sizes 2 x 13 then 3 x 3
    assert len(points) == 16 * 16 - 16  # the whole first block row (rows 0-1) is a hole


def test_sample_grid_too_small():
    with pytest.raises(ValueError):
        sample_grid_points(np.ones((8, 8)), np.ones((8, 8)), 16, 16)


# --------------------------------------------------- ordinal + GFRL


@pytest.mark.parametrize(
    "d1,d2,expected",
    [(1.0, 1.0, 0), (2.0, 1.0, 1), (1.0, 2.0, -1), (1.00, 1.015, 0), (1.0, 1.03, -1)],
)
def test_ordinal_relation(d1, d2, expected):
    assert ordinal_relation(d1, d2) == expected


def test_ordinal_relation_rejects_nonpositive():
    with pytest.raises(ValueError):
        ordinal_relation(0.0, 1.0)


def test_ordinal_pairs_are_unordered_and_complete():
    points = pts([1, 2, 3, 4, 5], [1, 1, 1, 1, 1])
    pairs = ordinal_pairs(points)
    assert len(pairs) == 10
    assert all(p.relation == -1 for p in pairs)


def test_gfrl_pair_terms():
    assert gfrl_pair_term(0, 0.5) == pytest.approx(0.25, abs=1e-12)
    assert gfrl_pair_term(-1, 0.0, 0.0) == pytest.approx(math.log(2), abs=1e-12)
    assert gfrl_pair_term(-1, 0.0, 2.0) == pytest.approx(0.25 * math.log(2), abs=1e-12)
    assert gfrl_pair_term(1, 50.0) < 1e-20


def test_gfrl_two_point_sets_match_pair_terms():
    # gt equal -> r = 0
    assert gfrl(pts([2.0, 2.0], [1.5, 1.0])) == pytest.approx(0.25, abs=1e-12)
    # gt first smaller -> r = -1; equal predictions
    assert gfrl(pts([1.0, 2.0], [3.0, 3.0]), gamma=0) == pytest.approx(math.log(2), abs=1e-12)
    assert gfrl(pts([1.0, 2.0], [3.0, 3.0])) == pytest.approx(0.25 * math.log(2), abs=1e-12)
    assert gfrl(pts([2.0, 1.0], [51.0, 1.0])) < 1e-20


def test_gfrl_is_mean_over_pairs():
    p = pts([1.0, 2.0, 2.01], [3.0, 3.0, 2.5])
    rel = [ordinal_relation(a.depth_gt, b.depth_gt) for a, b in [(p[0], p[1]), (p[0], p[2]), (p[1], p[2])]]
    terms = [
        gfrl_pair_term(rel[0], 0.0),
        gfrl_pair_term(rel[1], 0.5),
        gfrl_pair_term(rel[2], 0.5),
    ]
    assert gfrl(p) == pytest.approx(sum(terms) / 3, abs=1e-14)


def test_gfrl_needs_two_points():
    with pytest.raises(ValueError):
        gfrl(pts([1.0], [1.0]))
    with pytest.raises(ValueError):
        gfrl(pts([1.0, 2.0], [1.0, 2.0]), gamma=-1)


def test_relative_loss_is_gfrl_gamma_zero():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(2, 30))
        p = pts(rng.uniform(1, 5, n), rng.uniform(1, 5, n))
        assert relative_loss(p) == gfrl(p, gamma=0)


def test_relative_loss_examples():
    assert relative_loss(pts([1.0, 2.0], [3.0, 3.0])) == pytest.approx(math.log(2))
    assert relative_loss(pts([2.0, 1.0], [51.0, 1.0])) < 1e-20


@given(st.floats(-30, 30), st.sampled_from([-1, 1]), st.floats(0, 5))
def test_focal_weight_in_open_unit_interval(diff, r, gamma):
    z = -r * diff
    w = 1 - 1 / (1 + math.exp(z))
    assert 0 < w < 1
    assert gfrl_pair_term(r, diff, gamma) >= 0


def test_gfrl_term_decreasing_for_positive_relation():
    diffs = np.linspace(-20, 20, 401)
    terms = [gfrl_pair_term(1, d) for d in diffs]
    assert all(a > b for a, b in zip(terms, terms[1:]))


def test_focal_ratio_limits():
    correct = gfrl_pair_term(1, 10.0, 2.0) / gfrl_pair_term(1, 10.0, 0.0)
    wrong = gfrl_pair_term(1, -10.0, 2.0) / gfrl_pair_term(1, -10.0, 0.0)
    assert correct < 1e-6
    assert wrong > 0.99


def test_gfrl_overflow_safe():
    assert math.isfinite(gfrl_pair_term(1, -1e6))
    assert gfrl_pair_term(1, -1e6) == pytest.approx(1e6)


def test_gfrl_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    gt = rng.uniform(1, 5, 10)
    gt[1] = gt[0] * 1.01
    pred = rng.uniform(1, 5, 10)
    for gamma in (0.0, 2.0, 3.5):
        _, g = gfrl_with_grad(pts(gt, pred), gamma)
        num = central_difference(lambda p: gfrl(pts(gt, p), gamma), pred)
        np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-11)


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(0.1, 10), st.floats(0.1, 10)), min_size=2, max_size=12), st.floats(0, 4))
def test_gfrl_non_negative(data, gamma):
    p = pts([a for a, _ in data], [b for _, b in data])
    assert gfrl(p, gamma) >= 0


# ------------------------------------------------------------ total


def test_total_loss_zero_when_equal():
    m = np.full((20, 20), 2.0)
    for stage in Stage:
        lb = total_loss(m, m, stage, rng=0)
        assert (lb.berhu, lb.gradient, lb.normal, lb.gfrl, lb.total) == (0.0, 0.0, 0.0, 0.0, 0.0)


def test_total_loss_equal_textured_maps():
    # correctly ordered pairs keep a small ranking penalty even for a perfect prediction
    m = np.random.default_rng(0).uniform(1, 3, (20, 20))
    for stage in (Stage.I, Stage.II):
        lb = total_loss(m, m, stage, rng=0)
        assert (lb.berhu, lb.gradient) == (0.0, 0.0)
        assert lb.normal == pytest.approx(0.0, abs=1e-15) and lb.total == pytest.approx(0.0, abs=1e-15)
    lb = total_loss(m, m, Stage.III, rng=0)
    assert 0 < lb.gfrl < math.log(2)
    assert lb.total == pytest.approx(0.5 * lb.gfrl, abs=1e-15)


def test_total_loss_stage_masks():
    rng = np.random.default_rng(1)
    gt = rng.uniform(1, 3, (20, 20))
    pred = gt * rng.uniform(0.8, 1.2, gt.shape)
    one = total_loss(pred, gt, Stage.I, rng=3)
    assert one.gradient > 0
    assert one.total == 1.0 * one.berhu
    two = total_loss(pred, gt, Stage.II, rng=3)
    assert two.total == pytest.approx(two.berhu + two.gradient)


def test_total_loss_stage_three_component_sum():
    pred, gt = np.array([[1.0, 2.0]]), np.array([[1.1, 2.5]])
    lb = total_loss(pred, gt, Stage.III, rng=0)
    assert lb.berhu == pytest.approx(0.7)
    assert lb.gradient == pytest.approx(scale_invariant_gradient(pred, gt, [1]))
    assert lb.normal == pytest.approx(normal_loss(pred, gt))
    expected_gfrl = gfrl(pts([1.1, 2.5], [1.0, 2.0]))
    assert lb.gfrl == pytest.approx(expected_gfrl)
    assert lb.total == pytest.approx(lb.berhu + lb.gradient + lb.normal + 0.5 * lb.gfrl, abs=1e-15)

    pred, gt = np.array([[1.0, 3.0, 1.0]]), np.ones((1, 3))
    lb = total_loss(pred, gt, Stage.III, rng=0, spacings=[1])
    assert lb.gradient == pytest.approx(0.25)
    assert lb.total == pytest.approx(lb.berhu + lb.gradient + lb.normal + 0.5 * lb.gfrl, abs=1e-15)


def test_total_loss_edge_weights_only_touch_berhu_by_default():
    rng = np.random.default_rng(2)
    gt = rng.uniform(1, 3, (20, 20))
    pred = gt * rng.uniform(0.8, 1.2, gt.shape)
    w = WeightMask(np.where(rng.random(gt.shape) < 0.2, 5.0, 1.0))
    plain = total_loss(pred, gt, rng=0)
    weighted = total_loss(pred, gt, edge_weights=w, rng=0)
    assert weighted.berhu == berhu(pred, gt, w)
    assert (weighted.gradient, weighted.normal, weighted.gfrl) == (plain.gradient, plain.normal, plain.gfrl)
    everywhere = total_loss(pred, gt, edge_weights=w, rng=0, weight_all_terms=True)
    assert everywhere.gradient > plain.gradient and everywhere.normal > plain.normal


def test_loss_breakdown_dict():
    lb = LossBreakdown(1.0, 2.0, 3.0, 4.0, 8.0, Stage.III)
    assert lb.as_dict()["stage"] == 3
    assert lb.as_dict()["weights"] == [1.0, 1.0, 1.0, 0.5]


def test_losses_accept_depth_maps():
    gt = DepthMap.from_values([[1.1, 2.5]])
    assert berhu(DepthMap.from_values([[1.0, 2.0]]), gt) == pytest.approx(0.7)
