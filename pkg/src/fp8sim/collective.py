"""Simulated N-worker gradient all-reduce in low precision.

Every strategy first agrees on one shared per-tensor scale (the minimum of
the workers' just-in-time scales), quantizes each worker's contribution at
that scale, and then folds the payloads left to right in ascending worker
order, requantizing after every pairwise addition. Folding saturates
instead of producing infinities, so overflow shows up as a rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .formats import FloatFormat, decode_array
from .scaling import QuantStats, ScaledTensor, dequantize, encode_counted, jit_scale, rescale

__all__ = [
    "WorkerSet",
    "AutoScaleController",
    "CommStats",
    "autoscale_update",
    "allreduce_prescale",
    "allreduce_postscale",
    "allreduce_autoscale",
    "allreduce_sharedscale",
    "allreduce_full",
    "comm_stats",
    "shared_scale",
    "fp8_bytes",
    "fp32_bytes",
    "SCALAR_BYTES",
]

SCALAR_BYTES = 8
MAX_SCALE_SPREAD = 2.0**60


@dataclass(frozen=True)
class WorkerSet:
    """Per-worker full-precision gradients of one tensor."""

    gradients: tuple[np.ndarray, ...]

    def __init__(self, gradients: Sequence[np.ndarray]):
        grads = tuple(np.asarray(g, dtype=np.float64) for g in gradients)
        if not grads:
            raise ValueError("WorkerSet needs at least one worker")
        shape = grads[0].shape
        if any(g.shape != shape for g in grads):
            raise ValueError("all workers must hold tensors of identical shape")
        object.__setattr__(self, "gradients", grads)

    @property
    def n_workers(self) -> int:
        return len(self.gradients)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.gradients[0].shape

    @property
    def size(self) -> int:
        return self.gradients[0].size

    def oracle_mean(self) -> np.ndarray:
        return np.mean(np.stack(self.gradients), axis=0)


@dataclass(frozen=True)
class AutoScaleController:
    """State of the auto-scaling factor mu.

    ``mode="halve"`` divides mu by two on overflow; ``mode="assign"`` sets it
    to the constant 1/2 instead.
    """

    mu: float = 1.0
    threshold: float = 1e-5
    growth_steps: int = 1000
    consecutive_below: int = 0
    mode: str = "halve"
    max_mu: float = 2.0

    def __post_init__(self):
        if not 0 < self.mu <= self.max_mu:
            raise ValueError(f"mu must lie in (0, {self.max_mu}], got {self.mu!r}")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.mode not in ("halve", "assign"):
            raise ValueError(f"unknown controller mode {self.mode!r}")

    @property
    def growth_factor(self) -> float:
        return 2.0 ** (1.0 / self.growth_steps)


@dataclass(frozen=True)
class CommStats:
    snr_db: float
    underflow_rate: float
    overflow_rate: float
    bytes_transferred: int
    max_ratio: float = 0.0


def autoscale_update(ctrl: AutoScaleController, max_ratio_observed: float) -> AutoScaleController:
    """Advance the controller by one step given the observed max-value ratio."""
    if not 0.0 <= max_ratio_observed <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {max_ratio_observed!r}")
    if max_ratio_observed > ctrl.threshold:
        mu = ctrl.mu / 2 if ctrl.mode == "halve" else 0.5
        return replace(ctrl, mu=max(mu, 2.0**-126), consecutive_below=0)
    mu = min(ctrl.max_mu, ctrl.mu * ctrl.growth_factor)
    return replace(ctrl, mu=mu, consecutive_below=ctrl.consecutive_below + 1)


def fp8_bytes(n_workers: int, size: int) -> int:
    return n_workers * size + SCALAR_BYTES


def fp32_bytes(n_workers: int, size: int) -> int:
    return n_workers * size * 4


def shared_scale(ws: WorkerSet, fmt: FloatFormat, margin: int = 0) -> float:
    """Global minimum of the workers' just-in-time scales."""
    return min(jit_scale(float(np.max(np.abs(g))) if g.size else 0.0, fmt, margin) for g in ws.gradients)


def _fold(payloads: list[np.ndarray], fmt: FloatFormat, stats: QuantStats) -> np.ndarray:
    acc = payloads[0]
    for q in payloads[1:]:
        acc, st = encode_counted(decode_array(acc, fmt) + decode_array(q, fmt), fmt, saturate=True)
        stats += st
    return acc


def _reduce_scaled(ws: WorkerSet, fmt: FloatFormat, factor: float, scale: float):
    stats = QuantStats()
    payloads = []
    for g in ws.gradients:
        codes, st = encode_counted(g * (factor * scale), fmt, saturate=True)
        stats += st
        payloads.append(codes)
    return _fold(payloads, fmt, stats), stats


def comm_stats(result: ScaledTensor, oracle_mean: np.ndarray, quantization_events: QuantStats,
               bytes_transferred: int = 0) -> CommStats:
    """SNR of the reduced tensor against its full-precision oracle, plus event rates."""
    oracle = np.asarray(oracle_mean, dtype=np.float64)
    err = dequantize(result) - oracle
    signal = float(np.sum(oracle * oracle))
    noise = float(np.sum(err * err))
    if noise == 0.0:
        snr = math.inf
    elif signal == 0.0:
        snr = -math.inf
    else:
        snr = 10.0 * math.log10(signal / noise)
    return CommStats(
        snr_db=snr,
        underflow_rate=quantization_events.underflow_rate,
        overflow_rate=quantization_events.overflow_rate,
        bytes_transferred=bytes_transferred,
        max_ratio=quantization_events.max_ratio,
    )


def allreduce_prescale(ws: WorkerSet, fmt: FloatFormat):
    """Divide by N before quantizing, then sum."""
    n = ws.n_workers
    s = shared_scale(ws, fmt)
    acc, stats = _reduce_scaled(ws, fmt, 1.0 / n, s)
    out = ScaledTensor(acc, s, fmt, stats)
    return out, comm_stats(out, ws.oracle_mean(), stats, fp8_bytes(n, ws.size))


def allreduce_postscale(ws: WorkerSet, fmt: FloatFormat):
    """Sum quantized gradients first; the division by N goes into the scale."""
    n = ws.n_workers
    s = shared_scale(ws, fmt)
    acc, stats = _reduce_scaled(ws, fmt, 1.0, s)
    out = ScaledTensor(acc, n * s, fmt, stats)
    return out, comm_stats(out, ws.oracle_mean(), stats, fp8_bytes(n, ws.size))


def allreduce_autoscale(ws: WorkerSet, fmt: FloatFormat, ctrl: AutoScaleController):
    """Post-scaling on mu-multiplied gradients; returns the advanced controller too."""
    n = ws.n_workers
    s = shared_scale(ws, fmt)
    acc, stats = _reduce_scaled(ws, fmt, ctrl.mu, s)
    out = ScaledTensor(acc, n * ctrl.mu * s, fmt, stats)
    cs = comm_stats(out, ws.oracle_mean(), stats, fp8_bytes(n, ws.size))
    return out, cs, autoscale_update(ctrl, stats.max_ratio)


def allreduce_sharedscale(tensors: Sequence[ScaledTensor]) -> ScaledTensor:
    """Reduce already-scaled worker tensors through one shared scale.

    All payloads are requantized to the minimum scale, summed directly, and
    the result carries scale ``N * min_scale`` so it decodes to the mean.
    """
    if not tensors:
        raise ValueError("need at least one worker tensor")
    fmt = tensors[0].format
    shape = tensors[0].shape
    if any(t.format != fmt or t.shape != shape for t in tensors):
        raise ValueError("all worker tensors must share shape and format")
    scales = [t.scale for t in tensors]
    s_g = min(scales)
    if max(scales) / s_g > MAX_SCALE_SPREAD:
        raise ValueError("worker scales differ by more than 2**60; upstream scaling is broken")
    stats = QuantStats()
    payloads = []
    for t in tensors:
        r = rescale(t, s_g)
        stats += r.stats
        payloads.append(r.payload)
    acc = _fold(payloads, fmt, stats)
    n = len(tensors)
    return ScaledTensor(acc, n * s_g, fmt, stats)


def allreduce_full(ws: WorkerSet):
    """Full-precision reference reduction (FP32 wire accounting)."""
    mean = ws.oracle_mean()
    return mean, CommStats(math.inf, 0.0, 0.0, fp32_bytes(ws.n_workers, ws.size))
