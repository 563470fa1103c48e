"""Precision-decoupled AdamW.

Update arithmetic runs in float64 on dequantized state; each state variable
is requantized to its own storage precision only when written back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .formats import BF16, E4M3, E5M2, FP16, FloatFormat
from .scaling import QuantStats, ScaledTensor, dequantize, quantize, quantize_jit

__all__ = [
    "Precision",
    "PrecisionSpec",
    "DecouplingSetting",
    "SETTINGS",
    "AdamWHyper",
    "OptimizerState",
    "init_state",
    "adamw_update",
    "adamw_step",
    "bytes_per_param",
    "store",
    "load",
    "decoupling_ablation",
]


class Precision(str, Enum):
    FP32 = "FP32"
    FP16_SCALED = "FP16_scaled"
    BF16 = "BF16"
    FP8_SCALED = "FP8_scaled"


WIDTH = {Precision.FP32: 4, Precision.FP16_SCALED: 2, Precision.BF16: 2, Precision.FP8_SCALED: 1}

_ALLOWED = {
    "master_weight": {Precision.FP32, Precision.FP16_SCALED, Precision.BF16, Precision.FP8_SCALED},
    "gradient": {Precision.FP32, Precision.BF16, Precision.FP8_SCALED},
    "moment1": {Precision.FP32, Precision.FP8_SCALED},
    "moment2": {Precision.FP32, Precision.FP16_SCALED, Precision.FP8_SCALED},
}


@dataclass(frozen=True)
class PrecisionSpec:
    master_weight: Precision = Precision.FP32
    gradient: Precision = Precision.FP32
    moment1: Precision = Precision.FP32
    moment2: Precision = Precision.FP32

    def __post_init__(self):
        for name, allowed in _ALLOWED.items():
            p = Precision(getattr(self, name))
            if p not in allowed:
                raise ValueError(f"{name} cannot be stored as {p.value}")
            object.__setattr__(self, name, p)


@dataclass(frozen=True)
class DecouplingSetting:
    """One row of the precision-decoupling ablation table."""

    name: str
    gemm: str
    comm: str
    spec: PrecisionSpec


P = Precision
SETTINGS: dict[str, DecouplingSetting] = {
    "0": DecouplingSetting("0", "FP32", "FP32", PrecisionSpec(P.FP32, P.FP32, P.FP32, P.FP32)),
    "1": DecouplingSetting("1", "BF16", "FP32", PrecisionSpec(P.FP32, P.FP32, P.FP32, P.FP32)),
    "2a": DecouplingSetting("2a", "FP8", "FP8", PrecisionSpec(P.FP16_SCALED, P.FP8_SCALED, P.FP8_SCALED, P.FP16_SCALED)),
    "2b": DecouplingSetting("2b", "FP8", "FP8", PrecisionSpec(P.BF16, P.FP8_SCALED, P.FP8_SCALED, P.FP16_SCALED)),
    "3": DecouplingSetting("3", "FP8", "FP8", PrecisionSpec(P.FP8_SCALED, P.FP8_SCALED, P.FP8_SCALED, P.FP16_SCALED)),
    "4": DecouplingSetting("4", "FP8", "FP8", PrecisionSpec(P.FP16_SCALED, P.FP8_SCALED, P.FP8_SCALED, P.FP8_SCALED)),
}
del P


def bytes_per_param(spec: PrecisionSpec) -> int:
    """Master weight + gradient + both moments, in bytes per parameter."""
    return sum(WIDTH[getattr(spec, k)] for k in ("master_weight", "gradient", "moment1", "moment2"))


@dataclass(frozen=True)
class AdamWHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    eps: float = 1e-8


STATE_SCALING = ("jit", "unit")


def store(values, precision: Precision, fp8_format: FloatFormat = E4M3, scaling: str = "jit"):
    """Write ``values`` at a storage precision.

    Returns ``(stored, stats)`` where ``stored`` is a float32 array for FP32
    and a ScaledTensor otherwise. ``scaling="unit"`` stores the scaled
    precisions at scale 1, which exposes their absolute range limits.
    """
    if scaling not in STATE_SCALING:
        raise ValueError(f"unknown state scaling {scaling!r}")
    x = np.asarray(values, dtype=np.float64)
    precision = Precision(precision)
    if precision is Precision.FP32:
        out = x.astype(np.float32)
        stats = QuantStats(events=x.size, underflow=int(np.count_nonzero((out == 0) & (x != 0))),
                           nonzero=int(np.count_nonzero(x)))
        return out, stats
    if precision is Precision.BF16:
        t = quantize(x, BF16, 1.0)
    else:
        fmt = FP16 if precision is Precision.FP16_SCALED else fp8_format
        t = quantize(x, fmt, 1.0, saturate=True) if scaling == "unit" else quantize_jit(x, fmt)
    return t, t.stats


def load(stored) -> np.ndarray:
    if isinstance(stored, ScaledTensor):
        return dequantize(stored)
    return np.asarray(stored, dtype=np.float64)


@dataclass(frozen=True)
class OptimizerState:
    master_weights: object
    m1: object
    m2: object
    step: int
    hyper: AdamWHyper
    spec: PrecisionSpec
    fp8_format: FloatFormat = E4M3
    grad_format: FloatFormat = E5M2
    state_scaling: str = "jit"
    last_stats: dict = field(default_factory=dict, compare=False)

    @property
    def weights(self) -> np.ndarray:
        return load(self.master_weights)


def init_state(params, spec: PrecisionSpec, hyper: AdamWHyper | None = None,
               fp8_format: FloatFormat = E4M3, grad_format: FloatFormat = E5M2,
               state_scaling: str = "jit") -> OptimizerState:
    hyper = hyper or AdamWHyper()
    w = np.asarray(params, dtype=np.float64)
    zeros = np.zeros_like(w)
    master, _ = store(w, spec.master_weight, fp8_format, state_scaling)
    m1, _ = store(zeros, spec.moment1, fp8_format, state_scaling)
    m2, _ = store(zeros, spec.moment2, fp8_format, state_scaling)
    return OptimizerState(master, m1, m2, 0, hyper, spec, fp8_format, grad_format, state_scaling)


def adamw_update(w, m, v, g, step: int, hyper: AdamWHyper, lr: float | None = None):
    """One AdamW update in float64; ``step`` is the 1-based step number."""
    lr = hyper.lr if lr is None else lr
    w = w - lr * hyper.weight_decay * w
    m = hyper.beta1 * m + (1 - hyper.beta1) * g
    v = hyper.beta2 * v + (1 - hyper.beta2) * g * g
    m_hat = m / (1 - hyper.beta1**step)
    v_hat = v / (1 - hyper.beta2**step)
    w = w - lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return w, m, v


def adamw_step(state: OptimizerState, grad, spec: PrecisionSpec | None = None,
               lr: float | None = None) -> OptimizerState:
    """Advance one AdamW step and requantize every state variable.

    ``grad`` is a ScaledTensor (already low precision) or a real array, which
    is first stored at the gradient precision of ``spec``.
    """
    spec = spec or state.spec
    w, m, v = load(state.master_weights), load(state.m1), load(state.m2)
    if np.any(v < 0):
        raise ValueError("second moment dequantizes negative; optimizer state is corrupted")
    stats: dict[str, QuantStats] = {}
    if isinstance(grad, ScaledTensor):
        g = dequantize(grad)
    else:
        g_arr = np.asarray(grad, dtype=np.float64)
        if g_arr.shape != w.shape:
            raise ValueError(f"gradient shape {g_arr.shape} does not match parameters {w.shape}")
        g_stored, stats["gradient"] = store(g_arr, spec.gradient, state.grad_format)
        g = load(g_stored)
    if g.shape != w.shape:
        raise ValueError(f"gradient shape {g.shape} does not match parameters {w.shape}")

    t = state.step + 1
    w, m, v = adamw_update(w, m, v, g, t, state.hyper, lr)
    mode = state.state_scaling
    master, stats["master_weight"] = store(w, spec.master_weight, state.fp8_format, mode)
    m1, stats["moment1"] = store(m, spec.moment1, state.fp8_format, mode)
    m2, stats["moment2"] = store(v, spec.moment2, state.fp8_format, mode)
    return replace(state, master_weights=master, m1=m1, m2=m2, step=t, spec=spec, last_stats=stats)


def decoupling_ablation(specs=("0", "1", "2a", "2b", "3", "4"), steps: int = 2000, seed: int = 0,
                        workers: int = 1, **train_kwargs) -> dict:
    """Train the tiny model once per decoupling setting on identical data.

    Returns ``{name: RunRecord}``; divergence (NaN or loss above ten times
    the initial loss) is flagged on each record, never raised.
    """
    from .training import policy_for_setting, train  # avoid an import cycle

    runs = {}
    for name in specs:
        setting = SETTINGS[name] if isinstance(name, str) else name
        policy = policy_for_setting(setting)
        runs[setting.name] = train(policy=policy, workers=workers, steps=steps, seed=seed, **train_kwargs)
    return runs


def cosine_lr(step: int, total: int, peak: float, warmup: int = 0, final_ratio: float = 0.1) -> float:
    """Linear warmup then cosine decay to ``final_ratio * peak``."""
    if warmup and step < warmup:
        return peak * (step + 1) / warmup
    progress = min(1.0, (step - warmup) / max(1, total - warmup))
    return peak * (final_ratio + (1 - final_ratio) * 0.5 * (1 + math.cos(math.pi * progress)))
