"""Per-tensor scaled low-precision containers and scaling recipes.

Convention: the stored scale multiplies real values before encoding, so the
logical value of an element is ``decode(code) / scale``.
"""

from __future__ import annotations

import math
import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .formats import FloatFormat, _encode, decode_array, get_format

__all__ = [
    "QuantStats",
    "ScaledTensor",
    "AmaxHistory",
    "jit_scale",
    "quantize",
    "quantize_jit",
    "quantize_delayed",
    "dequantize",
    "rescale",
]


@dataclass
class QuantStats:
    """Event counts gathered at quantization points."""

    events: int = 0
    underflow: int = 0  # nonzero real -> zero code
    overflow: int = 0  # rounded magnitude beyond max_normal (saturated or inf)
    at_max: int = 0  # codes equal to +-max_normal, saturated ones included
    nonzero: int | None = None  # nonzero inputs; defaults to events

    def __post_init__(self):
        if self.nonzero is None:
            self.nonzero = self.events

    def __iadd__(self, other: "QuantStats") -> "QuantStats":
        self.events += other.events
        self.nonzero += other.nonzero
        self.underflow += other.underflow
        self.overflow += other.overflow
        self.at_max += other.at_max
        return self

    def __add__(self, other: "QuantStats") -> "QuantStats":
        out = QuantStats(self.events, self.underflow, self.overflow, self.at_max, self.nonzero)
        out += other
        return out

    @property
    def underflow_rate(self) -> float:
        # only a nonzero input can underflow, so exact zeros are not counted
        return self.underflow / self.nonzero if self.nonzero else 0.0

    @property
    def overflow_rate(self) -> float:
        return self.overflow / self.events if self.events else 0.0

    @property
    def max_ratio(self) -> float:
        return self.at_max / self.events if self.events else 0.0


def encode_counted(x: np.ndarray, fmt: FloatFormat, saturate: bool | None = None):
    """Encode ``x`` (already scaled) and count underflow/overflow events."""
    codes, over = _encode(x, fmt, saturate)
    mag = codes & ((1 << (fmt.total_bits - 1)) - 1)
    stats = QuantStats(
        events=int(x.size),
        underflow=int(np.count_nonzero((mag == 0) & (x != 0))),
        overflow=int(np.count_nonzero(over)),
        at_max=int(np.count_nonzero(mag == fmt.max_code)),
        nonzero=int(np.count_nonzero(x)),
    )
    if fmt.has_infinity:
        stats.at_max += int(np.count_nonzero(np.isfinite(x) & (mag == fmt.inf_code)))
    return codes, stats


@dataclass(frozen=True, eq=False)
class ScaledTensor:
    """Encoded payload plus one positive per-tensor scale."""

    payload: np.ndarray
    scale: float
    format: FloatFormat
    stats: QuantStats = field(default_factory=QuantStats, compare=False)

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale!r}")
        payload = np.asarray(self.payload, dtype=self.format.code_dtype)
        payload.flags.writeable = False
        object.__setattr__(self, "payload", payload)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.payload.shape

    @property
    def size(self) -> int:
        return self.payload.size

    @property
    def nbytes(self) -> int:
        return self.payload.nbytes

    def decoded(self) -> np.ndarray:
        return decode_array(self.payload, self.format)

    def to_bytes(self) -> bytes:
        """Binary blob: format tag, shape, 8-byte scale, raw payload bytes."""
        tag = self.format.name.encode("ascii")
        header = struct.pack("<B", len(tag)) + tag
        header += struct.pack("<B", self.payload.ndim) + struct.pack(f"<{self.payload.ndim}Q", *self.shape)
        header += struct.pack("<d", self.scale)
        return header + self.payload.astype(self.payload.dtype.newbyteorder("<")).tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ScaledTensor":
        (n,) = struct.unpack_from("<B", blob, 0)
        off = 1
        fmt = get_format(blob[off : off + n].decode("ascii"))
        off += n
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", blob, off)
        off += 8 * ndim
        (scale,) = struct.unpack_from("<d", blob, off)
        off += 8
        dtype = np.dtype(fmt.code_dtype).newbyteorder("<")
        count = int(np.prod(shape)) if shape else 1
        payload = np.frombuffer(blob, dtype=dtype, count=count, offset=off).reshape(shape)
        return cls(payload.astype(fmt.code_dtype), scale, fmt)


class AmaxHistory:
    """Fixed-capacity window of recent per-step amax values."""

    def __init__(self, capacity: int = 16, values=()):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.window: deque[float] = deque(maxlen=capacity)
        for v in values:
            self.append(v)

    def append(self, amax: float) -> None:
        if not amax >= 0:
            raise ValueError(f"amax must be non-negative, got {amax!r}")
        self.window.append(float(amax))

    def max(self) -> float:
        return max(self.window) if self.window else 0.0

    def copy(self) -> "AmaxHistory":
        return AmaxHistory(self.capacity, self.window)

    def __len__(self) -> int:
        return len(self.window)

    def __repr__(self) -> str:
        return f"AmaxHistory(capacity={self.capacity}, window={list(self.window)})"


def jit_scale(amax: float, fmt: FloatFormat, margin: int = 0) -> float:
    """Scale that maps ``amax`` to ``max_normal / 2**margin``; 1 for zero tensors."""
    if amax <= 0:
        return 1.0
    s = fmt.max_normal / (amax * 2.0**margin)
    if not math.isfinite(s):
        raise ValueError(f"amax {amax!r} too small to scale into {fmt}")
    return s


def _check_finite(values: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot quantize non-finite values; sanitize the input first")


def quantize(values, fmt: FloatFormat, scale: float, saturate: bool | None = None) -> ScaledTensor:
    """Quantize at a caller-chosen scale, recording event statistics."""
    x = np.asarray(values, dtype=np.float64)
    codes, stats = encode_counted(x * scale, fmt, saturate)
    return ScaledTensor(codes, scale, fmt, stats)


def quantize_jit(values, fmt: FloatFormat, margin: int = 0) -> ScaledTensor:
    """Just-in-time scaling from the tensor's own amax."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    x = np.asarray(values, dtype=np.float64)
    _check_finite(x)
    amax = float(np.max(np.abs(x))) if x.size else 0.0
    return quantize(x, fmt, jit_scale(amax, fmt, margin))


def quantize_delayed(values, fmt: FloatFormat, history: AmaxHistory, margin: int = 0):
    """Delayed scaling from the amax window of preceding steps.

    Returns ``(tensor, updated_history)``; the input history is not mutated.
    Values above the implied range saturate and show up in ``tensor.stats``.
    """
    x = np.asarray(values, dtype=np.float64)
    _check_finite(x)
    amax = float(np.max(np.abs(x))) if x.size else 0.0
    if len(history):
        t = quantize(x, fmt, jit_scale(history.max(), fmt, margin), saturate=True)
    else:
        t = quantize_jit(x, fmt, margin)
    updated = history.copy()
    updated.append(amax)
    return t, updated


def dequantize(t: ScaledTensor) -> np.ndarray:
    return t.decoded() / t.scale


def rescale(t: ScaledTensor, new_scale: float, saturate: bool = True) -> ScaledTensor:
    """Requantize a payload to a different scale.

    Same-scale rescale is the identity on the payload. Out-of-range results
    saturate (counted in ``stats``) rather than raise.
    """
    if not (new_scale > 0 and math.isfinite(new_scale)):
        raise ValueError(f"new_scale must be positive and finite, got {new_scale!r}")
    if new_scale == t.scale:
        return ScaledTensor(t.payload, t.scale, t.format, QuantStats(events=t.size))
    x = t.decoded() * (new_scale / t.scale)
    codes, stats = encode_counted(x, t.format, saturate)
    return ScaledTensor(codes, new_scale, t.format, stats)
