import io
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mltsim.tensor import (
    FP16_MAX,
    AccumulatorOverflow,
    ElementType,
    Tensor,
    cast,
    concat_rows,
    matmul,
    read_tensor,
    softmax_rows,
    write_tensor,
)

from conftest import fp32


def brute_matmul(a, b):
    """Exact Python-int/float product, one element at a time."""
    return [[sum(a[i][t] * b[t][j] for t in range(len(b))) for j in range(len(b[0]))] for i in range(len(a))]


def half_oracle(x: float) -> float:
    """binary16 round-to-nearest-even via the struct 'e' codec."""
    return struct.unpack("<e", struct.pack("<e", x))[0]


# -- element types -------------------------------------------------------------


@pytest.mark.parametrize(
    "name, width",
    [("fp32", 4), ("fp16", 2), ("int8", 1), ("int16", 2), ("int32", 4)],
)
def test_byte_widths(name, width):
    assert ElementType.parse(name).byte_width == width


def test_parse_rejects_unknown_type():
    with pytest.raises(ValueError):
        ElementType.parse("bf16")


# -- matmul -------------------------------------------------------------------


def test_identity_times_b_is_b():
    b = fp32([[1.5, -2.0, 3.25], [0.1, 7.0, -0.3]])
    assert matmul(fp32(np.eye(2)), b) == b


def test_two_by_two_hand_product():
    a, b = [[1, 2], [3, 4]], [[5, 6], [7, 8]]
    assert brute_matmul(a, b) == [[19, 22], [43, 50]]
    c = matmul(fp32(a), fp32(b))
    assert c.data.tolist() == [[19.0, 22.0], [43.0, 50.0]]
    ci = matmul(Tensor.from_array(a, "int16"), Tensor.from_array(b, "int16"))
    assert ci.dtype is ElementType.INT32
    assert ci.data.tolist() == [[19, 22], [43, 50]]


def test_zero_annihilates():
    assert matmul(fp32([[0.0]]), fp32([[9.0]])).data.tolist() == [[0.0]]


def test_inner_dimension_mismatch():
    with pytest.raises(ValueError):
        matmul(fp32(np.ones((2, 3))), fp32(np.ones((2, 3))))


def test_mixed_kinds_rejected():
    with pytest.raises(TypeError):
        matmul(fp32([[1.0]]), Tensor.from_array([[1]], "int8"))


def test_integer_matmul_matches_python_ints(rng):
    a = rng.integers(-128, 128, size=(5, 7))
    b = rng.integers(-32768, 32768, size=(7, 4))
    c = matmul(Tensor.from_array(a, "int8"), Tensor.from_array(b, "int16"))
    assert c.data.tolist() == brute_matmul(a.tolist(), b.tolist())


def test_int32_accumulator_overflow_is_detected():
    a = Tensor.from_array([[32767, 32767, 32767]], "int16")
    b = Tensor.from_array([[32767], [32767], [32767]], "int16")
    # 3 * 32767^2 > 2^31 - 1; a wrapping accumulator would silently go negative
    assert 3 * 32767 ** 2 > 2 ** 31 - 1
    with pytest.raises(AccumulatorOverflow):
        matmul(a, b)


def test_overflow_in_a_partial_sum_is_detected():
    # final sum fits, the running sum does not
    a = Tensor.from_array([[2 ** 30, 2 ** 30, -(2 ** 30)]], "int32")
    b = Tensor.from_array([[1], [1], [1]], "int32")
    with pytest.raises(AccumulatorOverflow):
        matmul(a, b)


def test_fp32_matmul_close_to_float64(rng):
    a = rng.standard_normal((6, 9)).astype(np.float32)
    b = rng.standard_normal((9, 5)).astype(np.float32)
    c = matmul(fp32(a), fp32(b)).data
    ref = a.astype(np.float64) @ b.astype(np.float64)
    assert np.max(np.abs(c - ref)) < 1e-5


def test_row_slice_is_bitwise_consistent(rng):
    a = fp32(rng.standard_normal((10, 13)))
    b = fp32(rng.standard_normal((13, 6)))
    full = matmul(a, b)
    part = matmul(a.rows(3, 4), b)
    assert part == full.rows(3, 4)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31 - 1))
def test_identity_left_bitwise_property(n, m, seed):
    b = fp32(np.random.default_rng(seed).standard_normal((n, m)) * 1e3)
    assert matmul(fp32(np.eye(n)), b) == b


# -- softmax --------------------------------------------------------------------


def test_softmax_constant_row_is_uniform():
    assert softmax_rows(fp32([[0, 0, 0, 0]])).data.tolist() == [[0.25] * 4]


def test_softmax_ln2_row():
    y = softmax_rows(fp32([[0.0, math.log(2.0)]])).data[0]
    assert y[0] == pytest.approx(1 / 3, abs=1e-7)
    assert y[1] == pytest.approx(2 / 3, abs=1e-7)


def test_softmax_random_rows_sum_to_one(rng):
    y = softmax_rows(fp32(rng.standard_normal((3, 5)) * 4)).data.astype(np.float64)
    assert np.all(np.abs(y.sum(axis=1) - 1.0) <= 1e-6)


def test_softmax_rejects_integer_input():
    with pytest.raises(TypeError):
        softmax_rows(Tensor.from_array([[1, 2]], "int16"))


def test_softmax_large_inputs_do_not_overflow():
    y = softmax_rows(fp32([[1e30, 1e30, -1e30]])).data[0]
    assert np.allclose(y, [0.5, 0.5, 0.0])
    assert np.all(np.isfinite(y))


rows_strategy = st.lists(
    st.lists(st.floats(-30, 30, allow_nan=False, width=32), min_size=1, max_size=8),
    min_size=1,
    max_size=4,
).filter(lambda rows: len({len(r) for r in rows}) == 1)


@settings(max_examples=100, deadline=None)
@given(rows_strategy)
def test_softmax_range_and_normalisation(rows):
    y = softmax_rows(fp32(rows)).data.astype(np.float64)
    assert np.all(y > 0) and np.all(y <= 1)
    assert np.all(np.abs(y.sum(axis=1) - 1.0) <= 1e-6)


@settings(max_examples=100, deadline=None)
@given(rows_strategy, st.floats(-50, 50, allow_nan=False, width=32))
def test_softmax_shift_invariance(rows, c):
    x = np.asarray(rows, dtype=np.float32)
    shifted = (x + np.float32(c)).astype(np.float32)
    a = softmax_rows(fp32(x)).data
    b = softmax_rows(fp32(shifted)).data
    # shifting in FP32 itself rounds the inputs by up to half an ulp of |x + c| <= 80
    assert np.max(np.abs(a - b)) <= 1e-5


def test_softmax_shift_invariance_exact_shift():
    x = np.array([[0.5, -1.25, 3.0], [2.0, 2.0, -4.0]], dtype=np.float32)
    a = softmax_rows(fp32(x)).data
    b = softmax_rows(fp32(x + 8.0)).data  # exact in FP32
    assert np.max(np.abs(a - b)) <= 1e-6


# -- cast -----------------------------------------------------------------------


def test_one_roundtrips_through_fp16():
    t = cast(cast(fp32([1.0]), "fp16"), "fp32")
    assert t.data.tolist() == [1.0]


def test_fp16_saturates_to_max_finite():
    assert FP16_MAX == 65504.0
    assert cast(fp32([65520.0, -65520.0, 1e9]), "fp16").data.tolist() == [65504.0, -65504.0, 65504.0]


@pytest.mark.parametrize("to", ["fp32", "fp16"])
def test_zero_stays_zero(to):
    assert cast(fp32([0.0]), to).data.tolist() == [0.0]


def test_fp16_subnormals_round_half_even():
    tiny = 2.0 ** -24  # smallest binary16 subnormal
    vals = [tiny, tiny / 2, 3 * tiny / 2, 5 * tiny / 2]
    got = cast(fp32(vals), "fp16").data.astype(np.float64).tolist()
    # 0.5 ulp ties to 0 (even), 1.5 ulp ties to 2 ulp, 2.5 ulp ties to 2 ulp
    assert got == [tiny, 0.0, 2 * tiny, 2 * tiny]
    assert got == [half_oracle(v) for v in vals]


@settings(max_examples=300, deadline=None)
@given(st.floats(-65504, 65504, allow_nan=False, width=32))
def test_fp16_cast_matches_ieee_codec(x):
    assert float(cast(fp32([x]), "fp16").data[0]) == half_oracle(float(np.float32(x)))


@settings(max_examples=200, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False, width=32))
def test_fp16_roundtrip_is_idempotent(x):
    once = cast(cast(fp32([x]), "fp16"), "fp32")
    twice = cast(cast(once, "fp16"), "fp32")
    assert once == twice


def test_cast_non_integral_to_int_rejected():
    with pytest.raises(ValueError):
        cast(fp32([1.5]), "int8")


def test_cast_integral_float_to_int_accepted():
    assert cast(fp32([-3.0, 127.0]), "int8").data.tolist() == [-3, 127]


def test_cast_out_of_range_int_rejected():
    with pytest.raises(ValueError):
        cast(fp32([128.0]), "int8")
    with pytest.raises(ValueError):
        cast(Tensor.from_array([40000], "int32"), "int16")


# -- tensor object ---------------------------------------------------------------


def test_buffer_is_read_only():
    t = fp32([[1.0, 2.0]])
    with pytest.raises(ValueError):
        t.data[0, 0] = 5.0


def test_concat_rows_restores_split(rng):
    t = fp32(rng.standard_normal((7, 3)))
    assert concat_rows([t.rows(0, 2), t.rows(2, 5)]) == t


# -- TNSR1 -------------------------------------------------------------------------


def test_tnsr1_header_layout():
    t = Tensor.from_array([[1, -2, 3]], "int16")
    buf = io.BytesIO()
    write_tensor(t, buf)
    expected = b"TNSR1" + bytes([3, 2]) + struct.pack("<QQ", 1, 3) + struct.pack("<3h", 1, -2, 3)
    assert buf.getvalue() == expected


@pytest.mark.parametrize("dtype", list(ElementType))
def test_tnsr1_roundtrip(tmp_path, rng, dtype):
    if dtype.is_float:
        t = Tensor.from_array(rng.standard_normal((3, 4, 2)), dtype)
    else:
        lo, hi = dtype.int_range
        t = Tensor.from_array(rng.integers(lo, hi, size=(5, 2), endpoint=True), dtype)
    path = tmp_path / "t.tnsr"
    write_tensor(t, path)
    assert read_tensor(path) == t


@pytest.mark.parametrize(
    "raw",
    [b"NOPE", b"TNSR1" + bytes([9, 1]) + struct.pack("<Q", 1) + b"\0" * 4,
     b"TNSR1" + bytes([0, 1]) + struct.pack("<Q", 2) + b"\0" * 4],
)
def test_tnsr1_rejects_bad_files(raw):
    with pytest.raises(ValueError):
        read_tensor(raw)
