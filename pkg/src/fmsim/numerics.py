"""Software emulation of the FPU number formats and widening dot products.

Values are carried as ordinary Python/NumPy doubles that are *exactly
representable* in their nominal format (write-time rounding). ``quantize``
is the single rounding authority: round-to-nearest-even onto the target
format's grid, including subnormals.

Overflow behaviour differs per format:

* ``fp8e4m3`` has no infinities (the all-ones exponent is a valid binade,
  only S.1111.111 is NaN). Anything beyond the max finite 448 saturates.
* Every other format keeps IEEE-style infinities; values at or past the
  rounding midpoint between the max finite and the next power of two
  overflow to infinity, as IEEE round-to-nearest-even prescribes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class FloatFormat:
    """Static description of one storage format.

    ``simd_lanes`` is the number of elements a 64-bit FPU datapath processes
    per cycle, i.e. ``64 // bit_width``.
    """

    name: str
    exponent_bits: int
    mantissa_bits: int
    bias: int
    simd_lanes: int
    saturating: bool = False  # overflow clamps to max finite instead of inf

    @property
    def bit_width(self) -> int:
        return self.exponent_bits + self.mantissa_bits + 1

    @property
    def byte_width(self) -> int:
        return self.bit_width // 8

    @property
    def has_infinity(self) -> bool:
        return not self.saturating

    @property
    def min_normal_exp(self) -> int:
        return 1 - self.bias

    @property
    def max_exp(self) -> int:
        """Exponent of the largest finite binade."""
        if self.saturating:
            # all-ones exponent field is a normal binade (only mantissa 111 is NaN)
            return (1 << self.exponent_bits) - 1 - self.bias
        return (1 << self.exponent_bits) - 2 - self.bias

    @property
    def max_finite(self) -> float:
        frac = (1 << self.mantissa_bits) - (2 if self.saturating else 1)
        return (1.0 + frac / (1 << self.mantissa_bits)) * 2.0 ** self.max_exp

    @property
    def min_subnormal(self) -> float:
        return 2.0 ** (self.min_normal_exp - self.mantissa_bits)

    def __str__(self) -> str:
        return self.name


FP64 = FloatFormat("fp64", 11, 52, 1023, 1)
FP32 = FloatFormat("fp32", 8, 23, 127, 2)
FP16 = FloatFormat("fp16", 5, 10, 15, 4)
BF16 = FloatFormat("bf16", 8, 7, 127, 4)
FP8E4M3 = FloatFormat("fp8e4m3", 4, 3, 7, 8, saturating=True)
FP8E5M2 = FloatFormat("fp8e5m2", 5, 2, 15, 8)

FORMATS = {f.name: f for f in (FP64, FP32, FP16, BF16, FP8E4M3, FP8E5M2)}

# "fp8" on its own means the E4M3 variant everywhere in this package.
_ALIASES = {"fp8": "fp8e4m3"}


def format_table() -> list[FloatFormat]:
    """The six supported formats, widest first."""
    return [FP64, FP32, FP16, BF16, FP8E4M3, FP8E5M2]


def parse_format(name: str | FloatFormat) -> FloatFormat:
    if isinstance(name, FloatFormat):
        return name
    key = name.strip().lower()
    key = _ALIASES.get(key, key)
    try:
        return FORMATS[key]
    except KeyError:
        valid = ", ".join(FORMATS)
        raise ValueError(f"unknown float format {name!r}; valid formats: {valid}") from None


def quantize_array(x: np.ndarray | Sequence[float], fmt: FloatFormat) -> np.ndarray:
    """Round every element of ``x`` to the nearest value representable in ``fmt``.

    Round-to-nearest-even on the format's grid (subnormals included). NaN
    passes through; infinities and overflowing magnitudes follow the
    format's overflow rule. Always returns a fresh float64 array.
    """
    x = np.asarray(x, dtype=np.float64)
    if fmt is FP64:
        return x.copy()

    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        mag = np.abs(x)
        _, e = np.frexp(mag)  # mag = m * 2**e with m in [0.5, 1)
        ulp_exp = np.maximum(e - 1, fmt.min_normal_exp) - fmt.mantissa_bits
        scaled = np.ldexp(mag, -ulp_exp)
        y = np.ldexp(np.rint(scaled), ulp_exp)  # rint: ties to even

        if fmt.saturating:
            y = np.minimum(y, fmt.max_finite)
        else:
            midpoint = (fmt.max_finite + 2.0 ** (fmt.max_exp + 1)) / 2.0
            y = np.where((mag >= midpoint) | (y > fmt.max_finite), np.inf, y)
        return np.copysign(y, x)


def quantize(x: float, fmt: FloatFormat) -> float:
    """Scalar form of :func:`quantize_array`."""
    return float(quantize_array(np.array([x]), fmt)[0])


def decode_bits(bits: int, fmt: FloatFormat) -> float:
    """Interpret an integer bit pattern as a value of ``fmt``.

    Used by the enumeration oracles in the test suite; formats up to 16 bits
    are practical to enumerate exhaustively.
    """
    if not 0 <= bits < (1 << fmt.bit_width):
        raise ValueError(f"bit pattern {bits:#x} out of range for {fmt.name}")
    mant_mask = (1 << fmt.mantissa_bits) - 1
    exp_mask = (1 << fmt.exponent_bits) - 1
    mant = bits & mant_mask
    exp_field = (bits >> fmt.mantissa_bits) & exp_mask
    sign = -1.0 if bits >> (fmt.bit_width - 1) else 1.0

    if fmt.saturating:
        if exp_field == exp_mask and mant == mant_mask:
            return math.nan
    elif exp_field == exp_mask:
        return sign * math.inf if mant == 0 else math.nan

    if exp_field == 0:
        return sign * mant * 2.0 ** (fmt.min_normal_exp - fmt.mantissa_bits)
    return sign * (1.0 + mant / (1 << fmt.mantissa_bits)) * 2.0 ** (exp_field - fmt.bias)


def encode_value(x: float, fmt: FloatFormat) -> int:
    """Inverse of :func:`decode_bits` for values already representable in ``fmt``."""
    mant_mask = (1 << fmt.mantissa_bits) - 1
    exp_mask = (1 << fmt.exponent_bits) - 1
    if math.isnan(x):
        if fmt.saturating:
            return (exp_mask << fmt.mantissa_bits) | mant_mask
        return (exp_mask << fmt.mantissa_bits) | (1 << (fmt.mantissa_bits - 1))
    sign_bit = 1 if math.copysign(1.0, x) < 0 else 0
    mag = abs(x)
    if math.isinf(mag):
        if fmt.saturating:
            raise ValueError(f"{fmt.name} has no infinity encoding")
        return (sign_bit << (fmt.bit_width - 1)) | (exp_mask << fmt.mantissa_bits)
    if mag == 0.0:
        return sign_bit << (fmt.bit_width - 1)

    m, e = math.frexp(mag)  # mag = m * 2**e, m in [0.5, 1)
    exp = e - 1
    if exp < fmt.min_normal_exp:  # subnormal
        mant = mag / 2.0 ** (fmt.min_normal_exp - fmt.mantissa_bits)
        exp_field = 0
    else:
        mant = (mag / 2.0**exp - 1.0) * (1 << fmt.mantissa_bits)
        exp_field = exp + fmt.bias
    mant_int = int(round(mant))
    if mant != mant_int or not 0 <= exp_field <= exp_mask:
        raise ValueError(f"{x!r} is not representable in {fmt.name}")
    return (sign_bit << (fmt.bit_width - 1)) | (exp_field << fmt.mantissa_bits) | mant_int


# Accumulator formats for the FPU's widening dot products: 8-bit inputs may
# accumulate in 16 or 32 bits, 16-bit inputs in 32 bits. Same-width
# accumulation is the plain (non-widening) dot product for fp32/fp64.
WIDENING_PAIRS = frozenset(
    {
        (FP8E4M3.name, FP16.name),
        (FP8E4M3.name, FP32.name),
        (FP8E5M2.name, FP16.name),
        (FP8E5M2.name, FP32.name),
        (FP16.name, FP32.name),
        (BF16.name, FP32.name),
        (FP32.name, FP32.name),
        (FP64.name, FP64.name),
    }
)

# Default accumulator per input format.
ACCUMULATORS = {
    FP64.name: FP64,
    FP32.name: FP32,
    FP16.name: FP32,
    BF16.name: FP32,
    FP8E4M3.name: FP16,
    FP8E5M2.name: FP16,
}


def default_accumulator(fmt: FloatFormat) -> FloatFormat:
    return ACCUMULATORS[parse_format(fmt).name]


def widening_dot(
    a: Iterable[float],
    b: Iterable[float],
    in_fmt: FloatFormat,
    acc_fmt: FloatFormat,
) -> float:
    """Dot product with the FPU's widening semantics.

    Each product is formed exactly, then folded left-to-right into the
    accumulator with a rounding to ``acc_fmt`` after every addition. Callers
    must pass elements already representable in ``in_fmt``.
    """
    in_fmt = parse_format(in_fmt)
    acc_fmt = parse_format(acc_fmt)
    if (in_fmt.name, acc_fmt.name) not in WIDENING_PAIRS:
        raise ValueError(f"unsupported widening pair {in_fmt.name} -> {acc_fmt.name}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"operand length mismatch: {a.shape} vs {b.shape}")
    acc = 0.0
    for x, y in zip(a, b):
        acc = quantize(acc + x * y, acc_fmt)
    return acc
