"""Software emulation of low-precision floating-point formats and scaled quantization.

All values stay in float64 carriers; "rounding to a format" means snapping to the
nearest member of that format's value set (round-to-nearest-even).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numba
import numpy as np

__all__ = [
    "FloatFormat",
    "FP64",
    "FP32",
    "FP16",
    "BF16",
    "FP8_E4M3",
    "FORMATS",
    "get_format",
    "round_to",
    "round_array",
    "finite_values",
    "QuantizedTensor",
    "quantize_per_tensor",
    "quantize_per_block",
    "dequantize",
    "fma_accumulate",
    "emulated_matmul",
]


@dataclass(frozen=True)
class FloatFormat:
    """Binary floating-point format with an implicit leading bit.

    ``ieee=True`` reserves the all-ones exponent for inf/NaN; ``ieee=False`` is the
    "fn" convention of e4m3 where only the all-ones pattern is NaN. ``saturate``
    clamps overflow to +-max_finite instead of producing inf/NaN.
    """

    name: str
    exponent_bits: int
    mantissa_bits: int
    ieee: bool = True
    saturate: bool = True

    @property
    def bias(self) -> int:
        return 2 ** (self.exponent_bits - 1) - 1

    @property
    def emin(self) -> int:
        return 1 - self.bias

    @property
    def precision(self) -> int:
        return self.mantissa_bits + 1

    @property
    def max_finite(self) -> float:
        m = self.mantissa_bits
        if self.ieee:
            return float((2.0 - 2.0 ** -m) * 2.0**self.bias)
        emax = 2**self.exponent_bits - 1 - self.bias
        return float((2.0 - 2.0 ** (1 - m)) * 2.0**emax)

    @property
    def min_subnormal(self) -> float:
        return float(2.0 ** (self.emin - self.mantissa_bits))

    def with_saturation(self, saturate: bool) -> "FloatFormat":
        return replace(self, saturate=saturate)


FP64 = FloatFormat("fp64", 11, 52)
FP32 = FloatFormat("fp32", 8, 23)
FP16 = FloatFormat("fp16", 5, 10)
BF16 = FloatFormat("bf16", 8, 7)
FP8_E4M3 = FloatFormat("fp8e4m3", 4, 3, ieee=False)

FORMATS = {f.name: f for f in (FP64, FP32, FP16, BF16, FP8_E4M3)}


def get_format(name: str) -> FloatFormat:
    try:
        return FORMATS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown format {name!r}; expected one of {sorted(FORMATS)}") from None


_POW2_OFFSET = 1023
_POW2 = np.ldexp(1.0, np.arange(-_POW2_OFFSET, _POW2_OFFSET + 1))
_MAGIC = 2.0**52  # x + 2^52 - 2^52 rounds 0 <= x < 2^52 to an integer, ties to even


@numba.njit(cache=True)
def _round_kernel(x, bits, out, pow2, mant_bits, emin, max_finite, ieee, saturate):
    for n in range(x.size):
        v = x[n]
        if np.isnan(v):
            out[n] = v
            continue
        if np.isinf(v):
            if ieee:
                out[n] = v
            elif saturate:
                out[n] = math.copysign(max_finite, v)
            else:
                out[n] = np.nan
            continue
        e = np.int64((bits[n] >> np.uint64(52)) & np.uint64(0x7FF)) - 1023
        qe = max(e, emin) - mant_bits
        # |v| / quantum < 2^(mant_bits + 1) and both scalings are exact
        t = abs(v) * pow2[_POW2_OFFSET - qe]
        r = (t + _MAGIC) - _MAGIC
        y = r * pow2[_POW2_OFFSET + qe]
        if y > max_finite:
            if saturate:
                y = max_finite
            elif ieee:
                y = np.inf
            else:
                y = np.nan
        out[n] = math.copysign(y, v)


def round_array(x, fmt: FloatFormat) -> np.ndarray:
    """Round every entry of ``x`` to ``fmt`` (RNE, subnormals kept, NaN propagates).

    Overflow past max_finite saturates or becomes inf (NaN for formats without inf).
    Infinite inputs stay infinite in IEEE formats.
    """
    x = np.asarray(x, dtype=np.float64)
    if fmt.name == "fp64":
        return x.copy()
    flat = np.ascontiguousarray(x).ravel()
    out = np.empty_like(flat)
    _round_kernel(flat, flat.view(np.uint64), out, _POW2, fmt.mantissa_bits, fmt.emin, fmt.max_finite, fmt.ieee, fmt.saturate)
    return out.reshape(x.shape)


def round_to(x: float, fmt: FloatFormat) -> float:
    return float(round_array(np.float64(x), fmt))


def finite_values(fmt: FloatFormat) -> np.ndarray:
    """Sorted distinct finite values of a format of at most 16 bits (by decoding codes)."""
    nbits = 1 + fmt.exponent_bits + fmt.mantissa_bits
    if nbits > 16:
        raise ValueError(f"{fmt.name} has too many codes to enumerate")
    codes = np.arange(2**nbits)
    mant = codes & ((1 << fmt.mantissa_bits) - 1)
    expf = (codes >> fmt.mantissa_bits) & ((1 << fmt.exponent_bits) - 1)
    sign = np.where(codes >> (nbits - 1), -1.0, 1.0)
    frac = mant / 2.0**fmt.mantissa_bits
    vals = np.where(
        expf == 0,
        frac * 2.0**fmt.emin,
        (1.0 + frac) * np.ldexp(1.0, expf - fmt.bias),
    ) * sign
    top = (1 << fmt.exponent_bits) - 1
    if fmt.ieee:
        special = expf == top
    else:
        special = (expf == top) & (mant == (1 << fmt.mantissa_bits) - 1)
    return np.unique(vals[~special])


@dataclass(frozen=True)
class QuantizedTensor:
    """Codes already rounded into ``fmt`` plus one scale per tensor or per row block."""

    codes: np.ndarray
    fmt: FloatFormat
    scales: np.ndarray
    block_rows: int | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    @property
    def per_tensor(self) -> bool:
        return self.block_rows is None

    def row_scales(self) -> np.ndarray:
        rows = self.codes.shape[0]
        if self.block_rows is None:
            return np.full(rows, self.scales[0])
        return np.repeat(self.scales, self.block_rows)[:rows]

    def dequantize(self) -> np.ndarray:
        return self.codes * self.row_scales()[:, None]


def _check_finite(m: np.ndarray) -> None:
    if m.size == 0:
        raise ValueError("cannot quantize an empty matrix")
    if not np.all(np.isfinite(m)):
        raise ValueError("cannot quantize non-finite entries")


def _amax_scale(block: np.ndarray, fmt: FloatFormat) -> float:
    amax = float(np.max(np.abs(block)))
    return amax / fmt.max_finite if amax > 0 else 1.0


def quantize_per_tensor(m, fmt: FloatFormat) -> QuantizedTensor:
    m = np.asarray(m, dtype=np.float64)
    _check_finite(m)
    scale = _amax_scale(m, fmt)
    return QuantizedTensor(round_array(m / scale, fmt), fmt, np.array([scale]))


def quantize_per_block(m, block_rows: int, fmt: FloatFormat) -> QuantizedTensor:
    m = np.asarray(m, dtype=np.float64)
    if block_rows < 1:
        raise ValueError(f"block_rows must be >= 1, got {block_rows}")
    _check_finite(m)
    starts = range(0, m.shape[0], block_rows)
    scales = np.array([_amax_scale(m[s : s + block_rows], fmt) for s in starts])
    row_scale = np.repeat(scales, block_rows)[: m.shape[0]]
    codes = round_array(m / row_scale[:, None], fmt)
    return QuantizedTensor(codes, fmt, scales, block_rows)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q.dequantize()


@numba.njit(cache=True)
def _acc_f32(a, b, out):
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        acc = out[i]
        for p in range(k):
            x = a[i, p]
            brow = b[p]
            for j in range(n):
                acc[j] = acc[j] + x * brow[j]


@numba.njit(cache=True)
def _acc_f64(a, b, out):
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        acc = out[i]
        for p in range(k):
            x = a[i, p]
            brow = b[p]
            for j in range(n):
                acc[j] = acc[j] + x * brow[j]


_ACC_DTYPES = {"fp32": np.float32, "fp64": np.float64}


def fma_accumulate(acc: np.ndarray, a, b) -> np.ndarray:
    """In-place ``acc += a @ b`` with one rounding per multiply-add, k ascending.

    ``acc`` must be float32 or float64 and fixes the accumulator precision. The
    caller guarantees every ``a[i,p] * b[p,j]`` is exact in that precision (true
    for fp16/bf16/e4m3 operands into fp32), which makes the separate multiply and
    add equal to a fused multiply-add.
    """
    a = np.ascontiguousarray(a, dtype=acc.dtype)
    b = np.ascontiguousarray(b, dtype=acc.dtype)
    if a.shape[1] != b.shape[0] or acc.shape != (a.shape[0], b.shape[1]):
        raise ValueError(f"shape mismatch: {a.shape} x {b.shape} -> {acc.shape}")
    if acc.dtype == np.float32:
        _acc_f32(a, b, acc)
    elif acc.dtype == np.float64:
        _acc_f64(a, b, acc)
    else:
        raise TypeError(f"unsupported accumulator dtype {acc.dtype}")
    return acc


def emulated_matmul(
    a: QuantizedTensor,
    b: QuantizedTensor,
    acc_format: FloatFormat = FP32,
    transpose_b: bool = False,
) -> np.ndarray:
    """Low-precision GEMM on codes with an ``acc_format`` accumulator, then descale.

    Row scales of ``a`` map to output rows. With ``transpose_b`` the row scales of
    ``b`` map to output columns; otherwise they run along the contraction, and each
    of ``b``'s row blocks is accumulated separately before being descaled and added.
    """
    dtype = _ACC_DTYPES.get(acc_format.name)
    if dtype is None:
        raise ValueError(f"accumulator must be fp32 or fp64, got {acc_format.name}")
    if a.fmt.precision + b.fmt.precision > acc_format.precision:
        raise ValueError(
            f"{a.fmt.name} x {b.fmt.name} products are not exact in {acc_format.name}"
        )
    bc = b.codes.T if transpose_b else b.codes
    if a.codes.shape[1] != bc.shape[0]:
        raise ValueError(f"inner dimensions disagree: {a.codes.shape} x {bc.shape}")
    m, n = a.codes.shape[0], bc.shape[1]
    sa = a.row_scales()

    def descale(acc, col_scale):
        s = round_array(sa[:, None] * col_scale, acc_format).astype(dtype)
        return (acc * s).astype(np.float64)

    if transpose_b or b.per_tensor:
        acc = fma_accumulate(np.zeros((m, n), dtype), a.codes, bc)
        col_scale = b.row_scales()[None, :] if transpose_b else np.full((1, n), b.scales[0])
        return descale(acc, col_scale)

    out = np.zeros((m, n), dtype)
    for blk, start in enumerate(range(0, bc.shape[0], b.block_rows)):
        stop = start + b.block_rows
        part = fma_accumulate(np.zeros((m, n), dtype), a.codes[:, start:stop], bc[start:stop])
        out = (out + descale(part, np.full((1, n), b.scales[blk])).astype(dtype)).astype(dtype)
    return out.astype(np.float64)
