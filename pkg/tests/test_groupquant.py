import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nlquant.groupquant import (
    GroupPlan,
    align_accumulate,
    aligned_codes,
    build_permutation,
    compute_group_scales,
    dequantize_group_tensor,
    equal_bounds,
    fit_plan,
    fuse_inverse,
    fuse_permutation,
    permutation_matrix,
    quantize_group_tensor,
    quantize_per_tensor,
    reconstruction_mse,
)
from nlquant.refmodel import heavy_tailed_activations
from oracles import sort_channels


def plan_with(k, base=0.01, bits=8, sizes=None):
    sizes = sizes or [1] * len(k)
    c = sum(sizes)
    return GroupPlan(np.arange(c), np.concatenate([[0], np.cumsum(sizes)]), bits, base, k)


# -- permutation ---------------------------------------------------------------


def test_permutation_example_groups():
    plan = build_permutation([0.1, 10, 0.2, 9], 2)
    groups = [set(plan.permutation[a:b].tolist())
              for a, b in zip(plan.group_bounds[:-1], plan.group_bounds[1:])]
    assert groups == [{0, 2}, {1, 3}]
    # ascending max-abs order: 0.1, 0.2, 9, 10
    assert plan.permutation.tolist() == sort_channels([0.1, 10, 0.2, 9]) == [0, 2, 3, 1]


def test_permutation_ties_keep_index_order():
    assert build_permutation([1.0] * 6, 3).permutation.tolist() == list(range(6))


@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=40), st.data())
def test_permutation_matches_sort_oracle(max_abs, data):
    n = data.draw(st.integers(1, len(max_abs)))
    plan = build_permutation(max_abs, n)
    assert plan.permutation.tolist() == sort_channels(max_abs)
    sizes = np.diff(plan.group_bounds)
    assert np.all(sizes[:-1] == len(max_abs) // n)


def test_equal_bounds_last_group_absorbs_remainder():
    assert equal_bounds(10, 3).tolist() == [0, 3, 6, 10]
    with pytest.raises(ValueError):
        equal_bounds(3, 4)


def test_plan_validation():
    with pytest.raises(ValueError):
        GroupPlan([0, 0, 1], [0, 3])
    with pytest.raises(ValueError):
        GroupPlan([0, 1, 2], [0, 2, 2, 3])
    with pytest.raises(ValueError):
        GroupPlan([0, 1], [0, 1, 2], 8, 0.1, [0, -1])


def test_plan_round_trips_through_dict():
    plan = plan_with([0, 3, 1], base=0.125, sizes=[2, 1, 3])
    back = GroupPlan.from_dict(plan.to_dict())
    np.testing.assert_array_equal(back.k, plan.k)
    np.testing.assert_array_equal(back.group_bounds, plan.group_bounds)
    assert back.base_scale == plan.base_scale
    np.testing.assert_array_equal(back.thresholds, plan.thresholds)


# -- fusion --------------------------------------------------------------------


def test_identity_permutation_fusion_is_a_no_op():
    rng = np.random.default_rng(0)
    w, b = rng.standard_normal((5, 6)), rng.standard_normal(6)
    wf, bf = fuse_permutation(w, b, np.arange(6))
    np.testing.assert_array_equal(wf, w)
    np.testing.assert_array_equal(bf, b)


def test_fusion_matches_explicit_permutation_matrix():
    rng = np.random.default_rng(1)
    x, w, w2 = rng.standard_normal((4, 8)), rng.standard_normal((8, 8)), rng.standard_normal((8, 3))
    perm = rng.permutation(8)
    r = permutation_matrix(perm)
    wf, _ = fuse_permutation(w, None, perm)
    np.testing.assert_array_equal(wf, w @ r)
    np.testing.assert_array_equal(fuse_inverse(w2, perm), r.T @ w2)
    assert np.max(np.abs((x @ wf) @ fuse_inverse(w2, perm) - (x @ w) @ w2)) <= 1e-10


def test_attention_value_output_fusion():
    rng = np.random.default_rng(2)
    x, wv, wo = rng.standard_normal((6, 8)), rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
    attn = rng.random((6, 6))
    perm = rng.permutation(8)
    wv_f, _ = fuse_permutation(wv, None, perm)
    y_ref = attn @ (x @ wv) @ wo
    y_fused = attn @ (x @ wv_f) @ fuse_inverse(wo, perm)
    assert np.max(np.abs(y_fused - y_ref)) <= 1e-10


def test_fusion_dimension_checks():
    with pytest.raises(ValueError):
        fuse_permutation(np.ones((3, 4)), None, np.arange(3))
    with pytest.raises(ValueError):
        fuse_inverse(np.ones((3, 4)), np.arange(4))


# -- quantizer -----------------------------------------------------------------


def test_quantizer_examples():
    plan = plan_with([0], base=0.01)
    codes = quantize_group_tensor(np.array([[0.0]]), plan).codes
    assert codes[0, 0] == 0
    t = plan.thresholds[0]
    assert quantize_group_tensor(np.array([[t]]), plan).codes[0, 0] == 127
    assert quantize_group_tensor(np.array([[5.0]]), plan).codes[0, 0] == 127
    assert quantize_group_tensor(np.array([[-5.0]]), plan).codes[0, 0] == -127


def test_quantizer_rejects_non_finite():
    with pytest.raises(ValueError):
        quantize_group_tensor(np.array([[np.inf]]), plan_with([0]))


def test_dequantize_examples_and_round_trip_bound():
    rng = np.random.default_rng(4)
    plan = plan_with([0, 2, 5], base=0.003, sizes=[3, 2, 4])
    x = rng.uniform(-1, 1, (50, 9)) * plan.thresholds[plan.channel_group] * 1.2
    q = quantize_group_tensor(x, plan)
    y = dequantize_group_tensor(q)
    assert np.all(np.abs(q.codes) <= plan.q_max)
    step = plan.scales[plan.channel_group]
    inside = np.abs(x) <= plan.thresholds[plan.channel_group]
    assert np.all(np.abs(y - x)[inside] <= (step / 2 + 1e-15)[np.nonzero(inside)[1]])
    clipped = ~inside
    assert np.all(np.abs(q.codes[clipped]) == plan.q_max)
    # the top code maps back onto the threshold
    top = quantize_group_tensor(plan.thresholds[plan.channel_group][None], plan)
    np.testing.assert_allclose(dequantize_group_tensor(top), plan.thresholds[plan.channel_group][None])


def test_single_group_equals_per_tensor_quantizer():
    x = heavy_tailed_activations(seed=5, tokens=64, channels=16)
    plan = fit_plan(x, 1, bits=8)
    q = quantize_group_tensor(x, plan).codes
    baseline = quantize_per_tensor(x, plan.thresholds[0], 8)[..., plan.permutation]
    np.testing.assert_array_equal(q, baseline)


# -- scales ------------------------------------------------------------------


@pytest.mark.parametrize("mags, k", [([2.0, 2.0, 2.0], [0, 0, 0]), ([1.0, 4.0], [0, 2]), ([1.0, 3.0], [0, 2])])
def test_group_scale_examples(mags, k):
    base, got = compute_group_scales(mags, 8)
    assert got.tolist() == k
    assert base == pytest.approx(min(mags) / 127)


def test_nearest_snap_ties_go_coarser():
    _, k = compute_group_scales([1.0, 2 ** 1.5], 8)
    assert k.tolist() == [0, 2]


def test_zero_magnitude_uses_floor():
    base, k = compute_group_scales([0.0, 1.0], 8)
    assert base > 0 and k[0] == 0 and k[1] > 0


def test_ceil_snap_never_shrinks_a_range():
    mags = np.array([0.3, 1.7, 5.0, 11.0, 90.0])
    base, k = compute_group_scales(mags, 8, snap="ceil")
    assert np.all(base * 2.0 ** k * 127 >= mags * (1 - 1e-12))


@pytest.mark.parametrize("snap", ["mse", "nearest", "ceil"])
def test_fit_plan_invariants(snap):
    x = heavy_tailed_activations(seed=9, tokens=128, channels=32)
    plan = fit_plan(x, 8, bits=6, snap=snap)
    assert plan.k.min() == 0 and np.all(plan.k >= 0)
    np.testing.assert_allclose(plan.scales, plan.base_scale * 2.0 ** plan.k)
    np.testing.assert_allclose(plan.thresholds, plan.scales * 31)


def test_grouping_beats_per_tensor_on_spread_channels():
    x = heavy_tailed_activations()
    span = np.abs(x).max(axis=0)
    assert span.max() / span.min() >= 100
    for bits in (4, 8):
        assert reconstruction_mse(x, fit_plan(x, 8, bits)) < reconstruction_mse(x, fit_plan(x, 1, bits))


# -- alignment ---------------------------------------------------------------


def test_alignment_examples():
    plan = plan_with([0, 2], base=0.5)
    assert align_accumulate([(3, 0), (5, 1)], plan) == (23, 0.5)
    single = plan_with([0], base=0.25)
    assert align_accumulate([(-9, 0)], single) == (-9, 0.25)


def test_alignment_overflow_is_reported():
    plan = plan_with([0, 60], base=1.0)
    with pytest.raises(OverflowError):
        align_accumulate([(127, 1), (127, 1)], plan)


@settings(max_examples=200)
@given(st.lists(st.tuples(st.integers(-127, 127), st.integers(0, 3)), min_size=1, max_size=30),
       st.lists(st.integers(0, 12), min_size=4, max_size=4))
def test_alignment_equals_sum_of_dequantized_values(pairs, ks):
    plan = plan_with(ks, base=2.0 ** -7)
    total, base = align_accumulate(pairs, plan)
    assert total * base == sum(c * plan.scales[g] for c, g in pairs)


def test_aligned_codes_are_in_base_units():
    plan = plan_with([0, 1, 3], base=0.01, sizes=[2, 2, 2])
    rng = np.random.default_rng(6)
    q = quantize_group_tensor(rng.uniform(-0.5, 0.5, (10, 6)), plan)
    np.testing.assert_allclose(aligned_codes(q) * plan.base_scale,
                               dequantize_group_tensor(q, original_order=False))
