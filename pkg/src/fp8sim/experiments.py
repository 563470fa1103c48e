"""Canned experiment runners shared by the CLI and the acceptance suite."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .collective import (
    AutoScaleController,
    CommStats,
    WorkerSet,
    allreduce_autoscale,
    allreduce_postscale,
    allreduce_prescale,
    allreduce_sharedscale,
    comm_stats,
    fp8_bytes,
)
from .formats import E4M3, FloatFormat, get_format
from .scaling import quantize_jit

__all__ = [
    "BENCH_COLUMNS",
    "gradient_ensemble",
    "allreduce_bench",
    "SweepPoint",
    "ordering_holds",
    "scale_sweep",
    "DEFAULT_SWEEP",
]

BENCH_COLUMNS = ("step", "snr_db", "underflow_rate", "overflow_rate", "mu", "bytes")
STRATEGIES = ("pre", "post", "auto", "shared")
DEFAULT_SWEEP = tuple(float(s) for s in np.logspace(-5, 1, 13))


def gradient_ensemble(rng: np.random.Generator, n_workers: int, size: int, dist: str = "lognormal",
                      sigma: float = 1e-4, spread: float = 1.0) -> WorkerSet:
    """Per-worker synthetic gradients.

    ``normal`` draws N(0, sigma^2). ``lognormal`` draws magnitudes
    sigma * exp(spread * Z) with random signs, so ``sigma`` is the median
    magnitude and ``spread`` the log-scale width.
    """
    if dist == "normal":
        g = rng.normal(0.0, sigma, size=(n_workers, size))
    elif dist == "lognormal":
        mag = sigma * np.exp(spread * rng.normal(size=(n_workers, size)))
        g = np.where(rng.random((n_workers, size)) < 0.5, -mag, mag)
    else:
        raise ValueError(f"unknown gradient distribution {dist!r}")
    return WorkerSet(list(g))


def _shared(ws: WorkerSet, fmt: FloatFormat) -> CommStats:
    # leave log2(N) binades of headroom so the direct sum cannot saturate
    n = ws.n_workers
    margin = math.ceil(math.log2(n)) if n > 1 else 0
    out = allreduce_sharedscale([quantize_jit(g, fmt, margin) for g in ws.gradients])
    return comm_stats(out, ws.oracle_mean(), out.stats, fp8_bytes(n, ws.size))


def allreduce_bench(workers: int, strategy: str, dist: str = "lognormal", sigma: float = 1e-4,
                    steps: int = 10, fmt: FloatFormat | str = E4M3, size: int = 4096, seed: int = 0,
                    spread: float = 1.0) -> list[dict]:
    """One row of communication metrics per step, fresh gradients every step."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    fmt = get_format(fmt)
    rng = np.random.default_rng([seed, 0xA11])
    ctrl = AutoScaleController()
    rows = []
    for step in range(steps):
        ws = gradient_ensemble(rng, workers, size, dist, sigma, spread)
        mu = ctrl.mu
        if strategy == "pre":
            _, cs = allreduce_prescale(ws, fmt)
        elif strategy == "post":
            _, cs = allreduce_postscale(ws, fmt)
        elif strategy == "auto":
            _, cs, ctrl = allreduce_autoscale(ws, fmt, ctrl)
        else:
            cs = _shared(ws, fmt)
        rows.append({
            "step": step,
            "snr_db": cs.snr_db,
            "underflow_rate": cs.underflow_rate,
            "overflow_rate": cs.overflow_rate,
            "mu": mu if strategy == "auto" else 1.0,
            "bytes": cs.bytes_transferred,
        })
    return rows


@dataclass(frozen=True)
class SweepPoint:
    sigma: float
    pre: CommStats
    post: CommStats
    auto: CommStats
    mu: float

    @property
    def ordered(self) -> bool:
        return ordering_holds(self.pre, self.post, self.auto)


def ordering_holds(pre: CommStats, post: CommStats, auto: CommStats, tol_db: float = 0.5) -> bool:
    """Auto-scaling underflows no more than pre, overflows no more than post,
    and loses at most ``tol_db`` of SNR against the better of the two."""
    return (
        auto.underflow_rate <= pre.underflow_rate
        and auto.overflow_rate <= post.overflow_rate
        and auto.snr_db >= max(pre.snr_db, post.snr_db) - tol_db
    )


def scale_sweep(sigmas=DEFAULT_SWEEP, workers: int = 128, size: int = 4096, fmt: FloatFormat | str = E4M3,
                warmup: int = 30, seed: int = 0, spread: float = 1.0) -> list[SweepPoint]:
    """Compare pre-, post- and auto-scaling across gradient magnitudes.

    The auto-scaling controller first runs ``warmup`` steps on fresh
    ensembles so mu has settled; all three strategies are then measured on
    the same final ensemble.
    """
    fmt = get_format(fmt)
    points = []
    for i, sigma in enumerate(sigmas):
        rng = np.random.default_rng([seed, 0xF16, i])
        ctrl = AutoScaleController()
        for _ in range(warmup):
            _, _, ctrl = allreduce_autoscale(gradient_ensemble(rng, workers, size, "lognormal", sigma, spread),
                                             fmt, ctrl)
        ws = gradient_ensemble(rng, workers, size, "lognormal", sigma, spread)
        mu = ctrl.mu
        _, auto, ctrl = allreduce_autoscale(ws, fmt, ctrl)
        _, pre = allreduce_prescale(ws, fmt)
        _, post = allreduce_postscale(ws, fmt)
        points.append(SweepPoint(float(sigma), pre, post, auto, mu))
    return points
