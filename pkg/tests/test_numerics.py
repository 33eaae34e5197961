"""Format emulation: enumeration oracles, rounding semantics, widening dots."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmsim import numerics as nu
from fmsim.numerics import (
    BF16,
    FP16,
    FP32,
    FP64,
    FP8E4M3,
    FP8E5M2,
    decode_bits,
    encode_value,
    format_table,
    parse_format,
    quantize,
    quantize_array,
    widening_dot,
)

ALL_FORMATS = format_table()
SMALL_FORMATS = [FP8E4M3, FP8E5M2]


def enumerate_finite(fmt):
    vals = [decode_bits(b, fmt) for b in range(1 << fmt.bit_width)]
    return sorted(v for v in vals if math.isfinite(v))


def nearest_even_oracle(x, fmt):
    """Brute-force nearest-representable with ties-to-even over the full table."""
    table = enumerate_finite(fmt)
    arr = np.array(table)
    if fmt.has_infinity:
        midpoint = (fmt.max_finite + 2.0 ** (fmt.max_exp + 1)) / 2.0
        if abs(x) >= midpoint:
            return math.copysign(math.inf, x)
    d = np.abs(arr - x)
    i = int(np.argmin(d))
    candidates = [j for j in range(len(arr)) if d[j] == d[i]]
    if len(candidates) == 1:
        return float(arr[i])
    # tie: pick the candidate with an even mantissa encoding
    for j in candidates:
        if encode_value(float(arr[j]), fmt) % 2 == 0:
            return float(arr[j])
    return float(arr[candidates[0]])


class TestFormatTable:
    def test_widths_and_lanes(self):
        for fmt in ALL_FORMATS:
            assert fmt.exponent_bits + fmt.mantissa_bits + 1 == fmt.bit_width
            assert fmt.simd_lanes * fmt.bit_width == 64

    def test_lanes_from_peak_ladder(self):
        assert parse_format("fp64").simd_lanes == 1
        assert parse_format("fp8e4m3").simd_lanes == 8
        assert parse_format("bf16").mantissa_bits == 7

    def test_fp8_field_layout(self):
        assert (FP8E4M3.exponent_bits, FP8E4M3.mantissa_bits) == (4, 3)
        assert (FP8E5M2.exponent_bits, FP8E5M2.mantissa_bits) == (5, 2)

    def test_serialized_names(self):
        assert [f.name for f in ALL_FORMATS] == [
            "fp64", "fp32", "fp16", "bf16", "fp8e4m3", "fp8e5m2"]

    def test_fp8_alias(self):
        assert parse_format("fp8") is FP8E4M3

    def test_unknown_format(self):
        with pytest.raises(ValueError, match="fp64"):
            parse_format("fp7")


class TestQuantizeExamples:
    def test_exact_value_passthrough(self):
        assert quantize(1.0, FP8E4M3) == 1.0

    def test_fp16_subnormal_tie_rounds_even(self):
        # halfway between 0 and the smallest fp16 subnormal 2**-24
        assert quantize(2.0**-25, FP16) == 0.0

    def test_e4m3_saturates(self):
        assert quantize(10000.0, FP8E4M3) == 448.0
        assert quantize(math.inf, FP8E4M3) == 448.0
        assert quantize(-1e300, FP8E4M3) == -448.0

    def test_e5m2_overflows_to_inf(self):
        assert quantize(57344.0, FP8E5M2) == 57344.0
        assert quantize(60000.0, FP8E5M2) == 57344.0   # below the midpoint 61440
        assert quantize(61440.0, FP8E5M2) == math.inf  # tie resolves to the even (inf)

    def test_nan_passthrough(self):
        for fmt in ALL_FORMATS:
            assert math.isnan(quantize(math.nan, fmt))

    def test_fp16_matches_ieee_casts(self):
        rng = np.random.default_rng(0)
        xs = np.concatenate([
            rng.uniform(-1e5, 1e5, 5000),
            rng.uniform(-1e-4, 1e-4, 5000),
            [65504.0, 65519.0, 65520.0, 2.0**-24, -(2.0**-25)],
        ])
        with np.errstate(over="ignore"):
            ref = xs.astype(np.float16).astype(np.float64)
        assert np.array_equal(quantize_array(xs, FP16), ref)


class TestEnumerationOracle:
    @pytest.mark.parametrize("fmt", SMALL_FORMATS, ids=lambda f: f.name)
    def test_roundtrip_all_patterns(self, fmt):
        finite = enumerate_finite(fmt)
        for v in finite:
            assert quantize(v, fmt) == v
        # encode/decode are inverses on finite values
        for b in range(1 << fmt.bit_width):
            v = decode_bits(b, fmt)
            if math.isfinite(v) and v != 0.0:
                assert decode_bits(encode_value(v, fmt), fmt) == v

    @pytest.mark.parametrize("fmt", SMALL_FORMATS, ids=lambda f: f.name)
    def test_max_finite(self, fmt):
        expected = {"fp8e4m3": 448.0, "fp8e5m2": 57344.0}[fmt.name]
        assert max(enumerate_finite(fmt)) == expected
        assert fmt.max_finite == expected

    @pytest.mark.parametrize("fmt", SMALL_FORMATS, ids=lambda f: f.name)
    def test_quantize_agrees_with_bruteforce(self, fmt):
        rng = np.random.default_rng(7)
        probes = np.concatenate([
            rng.uniform(-500, 500, 300),
            rng.uniform(-1, 1, 300),
            rng.uniform(-2.0**-6, 2.0**-6, 300),
        ])
        finite = enumerate_finite(fmt)
        # midpoints between adjacent representables are the hard cases
        mids = (np.array(finite[:-1]) + np.array(finite[1:])) / 2.0
        for x in np.concatenate([probes, mids]):
            assert quantize(float(x), fmt) == nearest_even_oracle(float(x), fmt), x

    def test_materialize_neighbour_example(self):
        # nearest e4m3 neighbour of 0.3 per the enumeration table
        assert quantize(0.3, FP8E4M3) == 0.3125


class TestQuantizeProperties:
    @given(st.floats(allow_nan=False, allow_infinity=False, width=64))
    @settings(max_examples=300, deadline=None)
    def test_idempotent(self, x):
        for fmt in ALL_FORMATS:
            q = quantize(x, fmt)
            assert quantize(q, fmt) == q or (math.isnan(q) and math.isnan(quantize(q, fmt)))

    @given(st.floats(allow_nan=False, allow_infinity=False, min_value=-1e6, max_value=1e6),
           st.floats(allow_nan=False, allow_infinity=False, min_value=-1e6, max_value=1e6))
    @settings(max_examples=300, deadline=None)
    def test_monotone(self, x, y):
        lo, hi = sorted((x, y))
        for fmt in ALL_FORMATS:
            assert quantize(lo, fmt) <= quantize(hi, fmt)

    @given(st.floats(allow_nan=False, width=64))
    @settings(max_examples=300, deadline=None)
    def test_sign_symmetry(self, x):
        for fmt in ALL_FORMATS:
            assert quantize(-x, fmt) == -quantize(x, fmt)

    def test_narrow_embeds_exactly_in_wide(self):
        for narrow, wides in [
            (FP8E4M3, (FP16, FP32, FP64)),
            (FP8E5M2, (FP16, FP32, FP64)),
            (FP16, (FP32, FP64)),
            (BF16, (FP32, FP64)),
        ]:
            for v in enumerate_finite(narrow):
                for wide in wides:
                    assert quantize(v, wide) == v


class TestWideningDot:
    def test_small_integers(self):
        assert widening_dot([1, 1, 1, 1], [1, 1, 1, 1], FP8E4M3, FP16) == 4.0

    def test_empty(self):
        assert widening_dot([], [], FP16, FP32) == 0.0

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(3)
        a = quantize_array(rng.uniform(-1, 1, 16), FP8E5M2)
        b = quantize_array(rng.uniform(-1, 1, 16), FP8E5M2)
        acc = 0.0
        for x, y in zip(a, b):  # independent scalar chain
            acc = float(np.float32(np.float64(acc) + x * y))
        assert widening_dot(a, b, FP8E5M2, FP32) == acc

    def test_fp64_is_plain_left_fold(self):
        rng = np.random.default_rng(4)
        a, b = rng.uniform(-1, 1, 32), rng.uniform(-1, 1, 32)
        acc = 0.0
        for x, y in zip(a, b):
            acc += x * y
        assert widening_dot(a, b, FP64, FP64) == acc

    def test_rejects_bad_pairs(self):
        with pytest.raises(ValueError, match="widening pair"):
            widening_dot([1.0], [1.0], FP32, FP16)
        with pytest.raises(ValueError, match="widening pair"):
            widening_dot([1.0], [1.0], FP64, FP32)

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            widening_dot([1.0, 2.0], [1.0], FP16, FP32)
