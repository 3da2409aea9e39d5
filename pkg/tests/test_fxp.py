import numpy as np
import pytest
from hypothesis import given, strategies as st

from nlquant.fxp import (
    FxError,
    FxFormat,
    FxValue,
    Q16_16,
    bit_length_raw,
    fx_add,
    fx_ceil_int,
    fx_from_real,
    fx_msb_pos,
    fx_mul,
    fx_shl,
    fx_shr,
    fx_sub,
    msb_pos_raw,
    to_raw,
)

raw32 = st.integers(Q16_16.min_raw, Q16_16.max_raw)


@pytest.mark.parametrize("v, raw", [(1.0, 65536), (0.998, 65405), (-1.4375, -94208)])
def test_from_real_examples(v, raw):
    assert fx_from_real(v).raw == raw


def test_from_real_rounds_half_away_from_zero():
    half = 0.5 / 65536
    assert fx_from_real(half).raw == 1
    assert fx_from_real(-half).raw == -1


def test_from_real_saturates_with_sticky_flag():
    big = fx_from_real(1e6)
    assert big.raw == Q16_16.max_raw and big.overflow
    small = fx_from_real(-1e6)
    assert small.raw == Q16_16.min_raw and small.overflow
    # the flag survives later arithmetic
    assert fx_add(big, fx_from_real(-1.0)).overflow


def test_from_real_rejects_non_finite():
    with pytest.raises(FxError):
        fx_from_real(float("nan"))


def test_format_str_and_limits():
    assert str(Q16_16) == "Q16.16"
    assert Q16_16.ulp == 2.0 ** -16
    with pytest.raises(FxError):
        FxFormat(16, 16)


def test_shr_is_arithmetic():
    assert fx_shr(FxValue(-1), 1).raw == -1
    assert fx_shr(fx_from_real(-1.0), 4).value == -0.0625


def test_mul_and_shl():
    assert fx_mul(fx_from_real(1.5), fx_from_real(2.0)).value == 3.0
    assert fx_shl(fx_from_real(3.0), 2).value == 12.0
    assert fx_shl(fx_from_real(20000.0), 2).overflow


def test_format_mismatch_is_an_error():
    with pytest.raises(FxError):
        fx_add(fx_from_real(1.0), fx_from_real(1.0, FxFormat(32, 8)))


@pytest.mark.parametrize("v, expect", [(-1.4375, -1), (0.0, 0), (-0.0001, 0), (2.25, 3), (-3.0, -3)])
def test_ceil_int(v, expect):
    assert fx_ceil_int(fx_from_real(v)) == expect


@pytest.mark.parametrize("v, expect", [(1.0, 0), (8.0, 3), (1.5, 0), (0.5, -1), (2.0 ** -16, -16)])
def test_msb_pos(v, expect):
    assert fx_msb_pos(fx_from_real(v)) == expect


def test_msb_pos_domain():
    with pytest.raises(FxError):
        fx_msb_pos(fx_from_real(0.0))
    with pytest.raises(FxError):
        msb_pos_raw(np.array([-3]), Q16_16)


@given(raw32, raw32)
def test_add_matches_saturated_integer_sum(a, b):
    r = fx_add(FxValue(a), FxValue(b))
    exact = a + b
    assert r.raw == min(max(exact, Q16_16.min_raw), Q16_16.max_raw)
    assert r.overflow == (exact != r.raw)


@given(raw32, raw32)
def test_sub_is_add_of_negation_when_in_range(a, b):
    if -b <= Q16_16.max_raw:
        assert fx_sub(FxValue(a), FxValue(b)).raw == fx_add(FxValue(a), FxValue(-b)).raw


@given(raw32, st.integers(0, 40))
def test_shr_is_floor_division(a, n):
    assert fx_shr(FxValue(a), n).raw == a // (1 << n)


@given(raw32, raw32)
def test_mul_truncates_towards_minus_infinity(a, b):
    r = fx_mul(FxValue(a), FxValue(b))
    exact = (a * b) // 65536
    assert r.raw == min(max(exact, Q16_16.min_raw), Q16_16.max_raw)


@given(st.integers(0, 2 ** 62))
def test_bit_length_raw_matches_python(v):
    assert int(bit_length_raw(np.array([v]))[0]) == v.bit_length()


@given(st.floats(-30000, 30000, allow_nan=False))
def test_vector_encoder_matches_scalar(v):
    raw, nsat = to_raw(np.array([v]))
    assert int(raw[0]) == fx_from_real(v).raw and nsat == 0


@given(raw32)
def test_real_round_trip(a):
    assert fx_from_real(FxValue(a).value).raw == a
