"""Bit-exact software mini-float codecs (FP8 E4M3/E5M2, plus FP16/BF16 reuse).

Codes are plain unsigned integers (uint8 for 8-bit formats, uint16 for the
16-bit ones). Rounding is always round-to-nearest-even.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import Enum
from functools import cached_property, lru_cache

import numpy as np

__all__ = [
    "FloatFormat",
    "Fp8Format",
    "Regime",
    "E4M3",
    "E5M2",
    "FP16",
    "BF16",
    "FORMATS",
    "get_format",
    "encode",
    "decode",
    "encode_array",
    "decode_array",
    "classify",
    "max_relative_error",
    "rounding_error_bound",
    "code_table",
]


class Regime(str, Enum):
    NORMAL = "normal"
    SUBNORMAL = "subnormal"


@dataclass(frozen=True)
class FloatFormat:
    """Static description of a sign/exponent/mantissa float encoding.

    ``finite_top`` selects the E4M3 ("fn") convention: the all-ones exponent
    still holds finite values and only the all-ones mantissa there is NaN, so
    there is no infinity. Otherwise the IEEE layout is used.
    """

    name: str
    exponent_bits: int
    mantissa_bits: int
    bias: int
    finite_top: bool = False

    @cached_property
    def total_bits(self) -> int:
        return 1 + self.exponent_bits + self.mantissa_bits

    @cached_property
    def has_infinity(self) -> bool:
        return not self.finite_top

    @cached_property
    def code_dtype(self):
        if self.total_bits <= 8:
            return np.uint8
        return np.uint16 if self.total_bits <= 16 else np.uint32

    @cached_property
    def min_exponent(self) -> int:
        return 1 - self.bias

    @cached_property
    def max_exponent(self) -> int:
        top = (1 << self.exponent_bits) - 1
        return top - self.bias if self.finite_top else top - 1 - self.bias

    @cached_property
    def max_significand(self) -> float:
        ulp = 2.0 ** -self.mantissa_bits
        # fn layout loses the all-ones mantissa of the top binade to NaN
        return 2.0 - (2 * ulp if self.finite_top else ulp)

    @cached_property
    def max_normal(self) -> float:
        return math.ldexp(self.max_significand, self.max_exponent)

    @cached_property
    def min_normal(self) -> float:
        return math.ldexp(1.0, self.min_exponent)

    @cached_property
    def min_subnormal(self) -> float:
        return math.ldexp(1.0, self.min_exponent - self.mantissa_bits)

    @cached_property
    def max_code(self) -> int:
        """Positive code of ``max_normal``."""
        mant_mask = (1 << self.mantissa_bits) - 1
        mant = mant_mask - 1 if self.finite_top else mant_mask
        return ((self.max_exponent + self.bias) << self.mantissa_bits) | mant

    @cached_property
    def nan_code(self) -> int:
        exp_all = (1 << self.exponent_bits) - 1
        mant = (1 << self.mantissa_bits) - 1 if self.finite_top else 1 << (self.mantissa_bits - 1)
        return (exp_all << self.mantissa_bits) | mant

    @cached_property
    def inf_code(self) -> int | None:
        if self.finite_top:
            return None
        return ((1 << self.exponent_bits) - 1) << self.mantissa_bits

    def __str__(self) -> str:
        return self.name


Fp8Format = FloatFormat

E4M3 = FloatFormat("E4M3", 4, 3, 7, finite_top=True)
E5M2 = FloatFormat("E5M2", 5, 2, 15)
FP16 = FloatFormat("FP16", 5, 10, 15)
BF16 = FloatFormat("BF16", 8, 7, 127)

FORMATS = {f.name.lower(): f for f in (E4M3, E5M2, FP16, BF16)}


def get_format(name: str | FloatFormat) -> FloatFormat:
    if isinstance(name, FloatFormat):
        return name
    try:
        return FORMATS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown float format {name!r}; expected one of {sorted(FORMATS)}") from None


def _is_nan_code(code: int, fmt: FloatFormat) -> bool:
    exp_all = (1 << fmt.exponent_bits) - 1
    mant_mask = (1 << fmt.mantissa_bits) - 1
    e = (code >> fmt.mantissa_bits) & exp_all
    m = code & mant_mask
    if fmt.finite_top:
        return e == exp_all and m == mant_mask
    return e == exp_all and m != 0


def _nan_with_payload(sign: int, mantissa: int, fmt: FloatFormat) -> float:
    # keep sign and mantissa bits in the float64 NaN so encode can restore the code
    bits = (sign << 63) | (0x7FF << 52) | (mantissa << (52 - fmt.mantissa_bits))
    return struct.unpack("<d", struct.pack("<Q", bits))[0]


def decode(code: int, fmt: FloatFormat) -> float:
    """Decode a single code to a Python float.

    NaN codes decode to a float64 NaN carrying the code's sign and mantissa
    bits, the way hardware widening conversions do.
    """
    code = int(code)
    if not 0 <= code < (1 << fmt.total_bits):
        raise ValueError(f"code {code:#x} out of range for {fmt}")
    sign_bit = code >> (fmt.total_bits - 1)
    sign = -1.0 if sign_bit else 1.0
    exp_all = (1 << fmt.exponent_bits) - 1
    e = (code >> fmt.mantissa_bits) & exp_all
    m = code & ((1 << fmt.mantissa_bits) - 1)
    if _is_nan_code(code, fmt):
        return _nan_with_payload(sign_bit, m, fmt)
    if e == exp_all and not fmt.finite_top:
        return sign * math.inf
    if e == 0:
        return sign * math.ldexp(m, fmt.min_exponent - fmt.mantissa_bits)
    return sign * math.ldexp((1 << fmt.mantissa_bits) | m, e - fmt.bias - fmt.mantissa_bits)


@lru_cache(maxsize=None)
def _decode_lut(fmt: FloatFormat) -> np.ndarray:
    lut = np.array([decode(c, fmt) for c in range(1 << fmt.total_bits)], dtype=np.float64)
    lut.flags.writeable = False
    return lut


def _decode_arith(codes: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    m_bits = fmt.mantissa_bits
    exp_all = (1 << fmt.exponent_bits) - 1
    sign = (codes >> (fmt.total_bits - 1)) & 1
    e = (codes >> m_bits) & exp_all
    m = codes & ((1 << m_bits) - 1)
    sig = np.where(e == 0, m, m | (1 << m_bits)).astype(np.float64)
    out = np.ldexp(sig, np.maximum(e, 1) - fmt.bias - m_bits)
    top = e == exp_all
    if fmt.finite_top:
        nan = top & (m == (1 << m_bits) - 1)
    else:
        out[top] = np.inf
        nan = top & (m != 0)
    out = np.where(sign == 1, -out, out)
    if nan.any():
        out[nan] = [_nan_with_payload(int(s), int(mm), fmt) for s, mm in zip(sign[nan], m[nan])]
    return out


def decode_array(codes, fmt: FloatFormat) -> np.ndarray:
    """Vectorised decode; lookup table for formats up to 16 bits."""
    codes = np.asarray(codes, dtype=np.int64)
    if fmt.total_bits <= 16:
        return _decode_lut(fmt)[codes]
    return _decode_arith(codes, fmt)


def _magnitude_codes(a: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    """Round finite non-negative magnitudes to codes; ``max_code + 1`` means overflow.

    Non-negative codes are monotone in value: code = (binade - min_exponent)
    * 2^m + integer significand. Rounding the significand with ``rint`` (ties
    to even) and letting a carry spill into the next binade gives the exact
    round-to-nearest-even code.
    """
    m = fmt.mantissa_bits
    binade = (a.view(np.uint64) >> np.uint64(52)).astype(np.int64) - 1023
    np.maximum(binade, fmt.min_exponent, out=binade)
    inv_ulp = ((1023 + m - binade) << 52).view(np.float64)
    significand = np.rint(a * inv_ulp).astype(np.int64)
    codes = ((binade - fmt.min_exponent) << m) + significand
    return np.minimum(codes, fmt.max_code + 1, out=codes)


def _nan_codes(x: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    """NaN magnitude codes, keeping the top mantissa bits of the float64 payload."""
    m = fmt.mantissa_bits
    payload = (x.view(np.uint64) >> np.uint64(52 - m)).astype(np.int64) & ((1 << m) - 1)
    exp_field = ((1 << fmt.exponent_bits) - 1) << m
    if fmt.finite_top:
        return np.full(x.shape, fmt.nan_code, dtype=np.int64)
    # a zero payload would spell infinity; fall back to the canonical quiet NaN
    return np.where(payload == 0, fmt.nan_code, exp_field | payload)


def _encode(values, fmt: FloatFormat, saturate: bool | None):
    if saturate is None:
        saturate = not fmt.has_infinity
    x = np.asarray(values, dtype=np.float64)
    shape = x.shape
    x = x.reshape(-1)
    neg = np.signbit(x)
    finite = np.isfinite(x)
    all_finite = bool(finite.all())
    a = np.abs(x) if all_finite else np.where(finite, np.abs(x), 0.0)
    bits = _magnitude_codes(a, fmt)
    over = bits > fmt.max_code
    if over.any():
        bits[over] = fmt.inf_code if fmt.has_infinity and not saturate else fmt.max_code
    if not all_finite:
        inf = np.isinf(x)
        if fmt.has_infinity:
            bits[inf] = fmt.inf_code
        else:
            # no infinity encoding: +-inf maps to NaN unless saturating
            bits[inf] = fmt.max_code if saturate else fmt.nan_code
        nan = np.isnan(x)
        if nan.any():
            bits[nan] = _nan_codes(x[nan], fmt)
    bits |= neg.astype(np.int64) << (fmt.total_bits - 1)
    return bits.astype(fmt.code_dtype).reshape(shape), over.reshape(shape)


def encode_array(values, fmt: FloatFormat, saturate: bool | None = None) -> np.ndarray:
    """Encode real values to codes with round-to-nearest-even.

    ``saturate`` defaults to ``not fmt.has_infinity``: E4M3 clamps finite
    overflow to +-max_normal, IEEE-style formats round it to +-inf. Passing
    ``saturate=True`` for an IEEE-style format gives a "satfinite" cast.
    """
    return _encode(values, fmt, saturate)[0]


def encode(value: float, fmt: FloatFormat, saturate: bool | None = None) -> int:
    return int(encode_array(np.float64(value), fmt, saturate))


def classify(code: int, fmt: FloatFormat) -> str:
    """One of ``zero``, ``subnormal``, ``normal``, ``inf``, ``nan``."""
    v = decode(code, fmt)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf"
    if v == 0.0:
        return "zero"
    exp_field = (code >> fmt.mantissa_bits) & ((1 << fmt.exponent_bits) - 1)
    return "subnormal" if exp_field == 0 else "normal"


def rounding_error_bound(fmt: FloatFormat) -> float:
    """Worst-case relative error of round-to-nearest-even in the normal range."""
    half = 2.0 ** -(fmt.mantissa_bits + 1)
    return half / (1.0 + half)


def max_relative_error(fmt: FloatFormat, regime: Regime | str = Regime.NORMAL) -> tuple[float, float]:
    """Relative spacing interval ``(low, high)`` for a regime.

    Within a regime the representable magnitudes form a grid v1 < v2 < ...
    < vK with constant step. The relative error of confusing a value with
    its neighbour is step/v, which is largest at v2 and smallest at v(K-1);
    the normal regime is evaluated on the top binade, so the E4M3 truncated
    top significand (1.75) is honoured. This reproduces the usual published
    range table, e.g. E4M3 normal (1/13, 1/9), E5M2 subnormal (1/2, 1/2).
    """
    regime = Regime(regime)
    ulp = 2.0 ** -fmt.mantissa_bits
    if regime is Regime.NORMAL:
        high = ulp / (1.0 + ulp)
        low = ulp / (fmt.max_significand - ulp)
        return low, high
    # subnormal grid in units of min_subnormal: 1, 2, ..., 2^m - 1
    top = (1 << fmt.mantissa_bits) - 1
    high = 1.0 / 2.0
    low = 1.0 / (top - 1) if top > 1 else high
    return low, high


def code_table(fmt: FloatFormat) -> list[tuple[int, float, str]]:
    """All codes of ``fmt`` with their decoded value and class."""
    return [(c, decode(c, fmt), classify(c, fmt)) for c in range(1 << fmt.total_bits)]
