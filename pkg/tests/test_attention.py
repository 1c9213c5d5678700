import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mltsim.attention import (
    AttentionInputs,
    TileSpan,
    attention_reference,
    attention_tiled,
    check_partition,
    random_inputs,
)
from mltsim.planner import TilePlan
from mltsim.tensor import ElementType, Tensor

from conftest import fp32


def oracle(q, k, v, scale):
    s = scale * (q.astype(np.float64) @ k.astype(np.float64).T)
    p = np.exp(s - s.max(axis=1, keepdims=True))
    return (p / p.sum(axis=1, keepdims=True)) @ v.astype(np.float64)


def plan_for(counts, inputs):
    return TilePlan.from_row_counts(counts, inputs.n_k, inputs.d, ElementType.FP32)


def test_single_key_returns_value_row():
    inp = AttentionInputs(fp32([[3.0, -1.0]]), fp32([[0.5, 2.0]]), fp32([[7.0, -4.0]]))
    assert attention_reference(inp).data.tolist() == [[7.0, -4.0]]


def test_saturates_onto_matching_key():
    inp = AttentionInputs(fp32([[1.0, 0.0]]), fp32(np.eye(2)), fp32([[10.0, 0.0], [0.0, 20.0]]), scale=100.0)
    out = attention_reference(inp).data[0]
    # weights are 1/(1+e^-100) and e^-100/(1+e^-100)
    assert out[0] == pytest.approx(10.0, abs=1e-6)
    assert out[1] == pytest.approx(20.0 * math.exp(-100.0), abs=1e-6)


def test_default_scale_is_inverse_sqrt_d(rng):
    inp = random_inputs(rng, 2, 3, 16)
    assert inp.scale == pytest.approx(0.25)


def test_matches_hand_coded_oracle(rng):
    inp = random_inputs(rng, 8, 5, 4)
    got = attention_reference(inp).data
    want = oracle(inp.q.data, inp.k.data, inp.v.data, inp.scale)
    assert np.max(np.abs(got - want)) <= 1e-6


@pytest.mark.parametrize(
    "q_shape, k_shape, v_shape",
    [((2, 3), (4, 2), (4, 3)), ((2, 3), (4, 3), (5, 3))],
)
def test_dimension_mismatch(q_shape, k_shape, v_shape):
    with pytest.raises(ValueError):
        AttentionInputs(fp32(np.ones(q_shape)), fp32(np.ones(k_shape)), fp32(np.ones(v_shape)))


def test_mixed_dtypes_rejected():
    q = fp32(np.ones((2, 2)))
    with pytest.raises((TypeError, ValueError)):
        AttentionInputs(q, q, Tensor.from_array(np.ones((2, 2)), "fp16"))


def test_single_tile_is_bitwise_reference(rng):
    inp = random_inputs(rng, 12, 7, 5)
    assert attention_tiled(inp, plan_for([12], inp)) == attention_reference(inp)


def test_uneven_tiles_close_to_reference(rng):
    inp = random_inputs(rng, 8, 6, 4)
    got = attention_tiled(inp, plan_for([3, 3, 2], inp)).data
    ref = attention_reference(inp).data
    assert np.max(np.abs(got - ref)) < 1e-5


def test_tile_order_and_threads_do_not_change_output(rng):
    inp = random_inputs(rng, 20, 9, 6)
    plan = plan_for([6, 5, 5, 4], inp)
    base = attention_tiled(inp, plan)
    assert attention_tiled(inp, plan, order=[3, 2, 1, 0]) == base
    assert attention_tiled(inp, plan, max_workers=4) == base


def test_order_must_be_a_permutation(rng):
    inp = random_inputs(rng, 4, 2, 2)
    with pytest.raises(ValueError):
        attention_tiled(inp, plan_for([2, 2], inp), order=[0, 0])


def test_plan_shape_mismatch(rng):
    inp = random_inputs(rng, 6, 3, 2)
    with pytest.raises(ValueError):
        attention_tiled(inp, plan_for([3, 2], inp))
    other = TilePlan.from_row_counts([3, 3], 4, 2, ElementType.FP32)
    with pytest.raises(ValueError):
        attention_tiled(inp, other)


def test_each_tile_sees_normalised_score_rows(rng):
    inp = random_inputs(rng, 10, 5, 3)
    seen = []

    def record(span, s_out):
        seen.append(span)
        assert s_out.shape == (span.row_count, inp.n_k)
        assert np.all(np.abs(s_out.data.astype(np.float64).sum(axis=1) - 1) <= 1e-6)

    attention_tiled(inp, plan_for([4, 3, 3], inp), on_tile=record)
    assert [s.row_count for s in seen] == [4, 3, 3]


def test_partition_checks():
    check_partition([TileSpan(0, 2), TileSpan(2, 3)], 5)
    with pytest.raises(ValueError):
        check_partition([TileSpan(0, 2), TileSpan(3, 2)], 5)
    with pytest.raises(ValueError):
        check_partition([TileSpan(0, 3), TileSpan(2, 3)], 5)
    with pytest.raises(ValueError):
        check_partition([TileSpan(0, 2)], 5)
    with pytest.raises(ValueError):
        TileSpan(0, 0)


def test_fp16_inputs_give_fp16_output(rng):
    inp = random_inputs(rng, 4, 3, 8, ElementType.FP16)
    out = attention_reference(inp)
    assert out.dtype is ElementType.FP16
    want = oracle(inp.q.data, inp.k.data, inp.v.data, inp.scale)
    assert np.max(np.abs(out.data.astype(np.float64) - want)) < 5e-3


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 24),
    st.integers(1, 12),
    st.integers(1, 8),
    st.integers(0, 2 ** 31 - 1),
    st.data(),
)
def test_tiled_equals_reference_bitwise(n_q, n_k, d, seed, data):
    rng = np.random.default_rng(seed)
    inp = random_inputs(rng, n_q, n_k, d)
    cuts = data.draw(st.sets(st.integers(1, n_q - 1), max_size=6)) if n_q > 1 else set()
    bounds = [0, *sorted(cuts), n_q]
    counts = [b - a for a, b in zip(bounds, bounds[1:])]
    assert attention_tiled(inp, plan_for(counts, inp)) == attention_reference(inp)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31 - 1))
def test_output_is_convex_combination_of_values(n_q, n_k, d, seed):
    inp = random_inputs(np.random.default_rng(seed), n_q, n_k, d)
    out = attention_reference(inp).data
    v = inp.v.data
    assert np.all(out <= v.max(axis=0) + 1e-5)
    assert np.all(out >= v.min(axis=0) - 1e-5)
