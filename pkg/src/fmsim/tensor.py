"""Row-major 2-D matrix container with format-aware storage.

Every element of a :class:`Matrix` is exactly representable in the matrix's
format (the constructor re-checks this), so kernels can freely mix formats
without tracking rounding state.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .numerics import FloatFormat, format_table, parse_format, quantize_array

_MAGIC = b"TFM1"
_FMT_CODES = {f.name: i for i, f in enumerate(format_table())}
_CODE_FMTS = {i: name for name, i in _FMT_CODES.items()}


@dataclass(frozen=True)
class TileSpec:
    row_offset: int
    col_offset: int
    tile_rows: int
    tile_cols: int


class Matrix:
    """Immutable-by-convention 2-D tensor of format-quantized doubles.

    The only sanctioned mutation is :meth:`accumulate_`, used by the tree
    reduction kernel; concurrent readers are safe, writers need exclusivity.
    """

    __slots__ = ("rows", "cols", "fmt", "data")

    def __init__(self, data: np.ndarray, fmt: FloatFormat | str, *, _trusted: bool = False):
        fmt = parse_format(fmt)
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if arr.ndim != 2:
            raise ValueError(f"Matrix requires a 2-D array, got shape {arr.shape}")
        if not _trusted:
            q = quantize_array(arr, fmt)
            if not np.array_equal(q, arr, equal_nan=True):
                raise ValueError(f"matrix data contains values not representable in {fmt.name}")
        self.rows, self.cols = arr.shape
        self.fmt = fmt
        self.data = arr

    # -- construction -------------------------------------------------------

    @classmethod
    def zeros(cls, rows: int, cols: int, fmt: FloatFormat | str) -> "Matrix":
        return cls(np.zeros((rows, cols)), fmt, _trusted=True)

    @classmethod
    def from_quantized(cls, data: np.ndarray, fmt: FloatFormat | str) -> "Matrix":
        """Wrap an array produced by ``quantize_array`` without re-checking."""
        return cls(data, fmt, _trusted=True)

    # -- basics --------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def byte_size(self) -> int:
        return self.rows * self.cols * self.fmt.byte_width

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols}, {self.fmt.name})"

    def allclose(self, other: "Matrix", atol: float = 0.0, rtol: float = 0.0) -> bool:
        return self.shape == other.shape and np.allclose(
            self.data, other.data, atol=atol, rtol=rtol
        )

    def max_abs_diff(self, other: "Matrix") -> float:
        return float(np.max(np.abs(self.data - other.data))) if self.data.size else 0.0

    # -- views and copies ----------------------------------------------------

    def tile(self, spec: TileSpec) -> "Matrix":
        """Copy of the sub-block described by ``spec`` (same format)."""
        r0, c0 = spec.row_offset, spec.col_offset
        r1, c1 = r0 + spec.tile_rows, c0 + spec.tile_cols
        if not (0 <= r0 and 0 <= c0 and r1 <= self.rows and c1 <= self.cols
                and spec.tile_rows > 0 and spec.tile_cols > 0):
            raise IndexError(f"tile {spec} out of bounds for {self.rows}x{self.cols}")
        return Matrix(self.data[r0:r1, c0:c1].copy(), self.fmt, _trusted=True)

    def transpose(self) -> "Matrix":
        # explicit copy, never a view: keeps byte accounting unambiguous
        return Matrix(self.data.T.copy(), self.fmt, _trusted=True)

    def accumulate_(self, other: "Matrix") -> None:
        """In-place ``self += other``, re-quantized to this matrix's format."""
        if self.shape != other.shape:
            raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")
        self.data[...] = quantize_array(self.data + other.data, self.fmt)

    # -- serialization -------------------------------------------------------

    def to_bytes(self) -> bytes:
        header = _MAGIC + struct.pack("<IIB3x", self.rows, self.cols, _FMT_CODES[self.fmt.name])
        return header + self.data.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Matrix":
        if blob[:4] != _MAGIC:
            raise ValueError("bad magic, not a TFM1 container")
        rows, cols, code = struct.unpack("<IIB3x", blob[4:16])
        data = np.frombuffer(blob[16:], dtype="<f8", count=rows * cols).reshape(rows, cols)
        return cls(data.copy(), _CODE_FMTS[code])


def materialize(rows: int, cols: int, fmt: FloatFormat | str, values) -> Matrix:
    """Build a matrix from a flat row-major value sequence, quantizing on write."""
    fmt = parse_format(fmt)
    vals = np.asarray(list(values) if not isinstance(values, np.ndarray) else values,
                      dtype=np.float64).ravel()
    if vals.size != rows * cols:
        raise ValueError(f"expected {rows * cols} values, got {vals.size}")
    return Matrix.from_quantized(quantize_array(vals.reshape(rows, cols), fmt), fmt)


def seeded_random(rows: int, cols: int, fmt: FloatFormat | str, seed: int,
                  value_range: tuple[float, float] = (-1.0, 1.0)) -> Matrix:
    """Deterministic uniform random matrix, quantized to ``fmt``."""
    lo, hi = value_range
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ValueError("value range must be finite")
    rng = np.random.default_rng(seed)
    return materialize(rows, cols, fmt, rng.uniform(lo, hi, size=rows * cols))
