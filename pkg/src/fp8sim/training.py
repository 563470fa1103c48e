"""Desk-scale mixed-precision training of the tiny model.

A step runs forward/backward per worker shard with the policy's GEMM
precision, all-reduces each parameter gradient with the policy's
communication strategy, then applies precision-decoupled AdamW.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .collective import (
    AutoScaleController,
    WorkerSet,
    allreduce_autoscale,
    allreduce_full,
    allreduce_postscale,
    allreduce_prescale,
    allreduce_sharedscale,
    fp8_bytes,
    fp32_bytes,
)
from .formats import E4M3, E5M2, FloatFormat
from .model import Gemm, TinyModel, make_task
from .optimizer import (
    SETTINGS,
    AdamWHyper,
    DecouplingSetting,
    Precision,
    PrecisionSpec,
    adamw_step,
    bytes_per_param,
    cosine_lr,
    init_state,
)
from .scaling import QuantStats, dequantize, quantize_jit
from .zero import TensorDescriptor, greedy_distribute

__all__ = [
    "MixedPrecisionPolicy",
    "POLICIES",
    "policy_for_setting",
    "StepRecord",
    "RunRecord",
    "train",
    "comm_reduction_report",
]

COMM_STRATEGIES = ("full", "pre", "post", "auto", "shared")


@dataclass(frozen=True)
class MixedPrecisionPolicy:
    name: str
    gemm: str = "fp32"
    comm: str = "full"
    optimizer_spec: PrecisionSpec = field(default_factory=PrecisionSpec)
    zero: bool = False
    comm_format: FloatFormat = E5M2
    forward_format: FloatFormat = E4M3
    grad_format: FloatFormat = E5M2
    loss_scaling: float | None = None

    def __post_init__(self):
        if self.comm not in COMM_STRATEGIES:
            raise ValueError(f"unknown comm strategy {self.comm!r}")
        if self.zero and self.comm == "full":
            raise ValueError("ZeRO distribution applies to FP8 levels only")

    @property
    def level(self) -> int:
        """0 for high precision, else the FP8 optimization level (1-3)."""
        if self.comm == "full":
            return 0
        if self.zero:
            return 3
        s = self.optimizer_spec
        return 2 if (s.moment1, s.master_weight) != (Precision.FP32, Precision.FP32) else 1


_L1 = PrecisionSpec(Precision.FP32, Precision.FP8_SCALED, Precision.FP32, Precision.FP32)
POLICIES = {
    "fp32": MixedPrecisionPolicy("fp32", "fp32", "full", SETTINGS["0"].spec),
    "bf16": MixedPrecisionPolicy("bf16", "bf16", "full", SETTINGS["1"].spec),
    "fp8-l1": MixedPrecisionPolicy("fp8-l1", "fp8", "auto", _L1),
    "fp8-l2": MixedPrecisionPolicy("fp8-l2", "fp8", "auto", SETTINGS["2a"].spec),
    "fp8-l3": MixedPrecisionPolicy("fp8-l3", "fp8", "auto", SETTINGS["2a"].spec, zero=True),
}


def policy_for_setting(setting: DecouplingSetting) -> MixedPrecisionPolicy:
    comm = "auto" if setting.comm == "FP8" else "full"
    return MixedPrecisionPolicy(f"#{setting.name}", setting.gemm.lower(), comm, setting.spec)


@dataclass
class StepRecord:
    step: int
    loss: float
    snr_db: float
    underflow: float
    overflow: float
    mu: float
    grad_bytes: int
    fp32_grad_bytes: int


@dataclass
class RunRecord:
    policy: str
    workers: int
    seed: int
    steps: list[StepRecord]
    initial_loss: float
    final_loss: float
    diverged: bool
    m2_underflow_rate: float
    zero_loads: list[int] | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def losses(self) -> np.ndarray:
        return np.array([s.loss for s in self.steps])

    @property
    def fp8_bytes(self) -> int:
        return sum(s.grad_bytes for s in self.steps)

    @property
    def fp32_bytes(self) -> int:
        return sum(s.fp32_grad_bytes for s in self.steps)


def _state_descriptors(states, spec: PrecisionSpec) -> list[TensorDescriptor]:
    per_param = bytes_per_param(spec)
    n_scaled = sum(1 for k in ("master_weight", "moment1", "moment2") if getattr(spec, k) is not Precision.FP32)
    return [
        TensorDescriptor(name, st.weights.size * per_param + 8 * n_scaled)
        for name, st in states.items()
    ]


def _reduce(policy: MixedPrecisionPolicy, shards: list[np.ndarray], ctrl: AutoScaleController):
    ws = WorkerSet(shards)
    n = ws.n_workers
    fmt = policy.comm_format
    if policy.comm == "full":
        mean, cs = allreduce_full(ws)
        return mean, mean, QuantStats(), cs.bytes_transferred, ctrl
    if policy.comm == "pre":
        out, cs = allreduce_prescale(ws, fmt)
    elif policy.comm == "post":
        out, cs = allreduce_postscale(ws, fmt)
    elif policy.comm == "auto":
        out, cs, ctrl = allreduce_autoscale(ws, fmt, ctrl)
    else:
        margin = math.ceil(math.log2(n)) if n > 1 else 0
        out = allreduce_sharedscale([quantize_jit(g, fmt, margin) for g in ws.gradients])
    return out, dequantize(out), out.stats, fp8_bytes(n, ws.size), ctrl


def train(model: TinyModel | None = None, policy: MixedPrecisionPolicy | str = "fp32", workers: int = 1,
          steps: int = 2000, seed: int = 0, batch_size: int = 256, lr: float = 3e-3,
          warmup: int = 50, separation: float = 0.8, noise: float = 1.0,
          eval_samples: int = 2048) -> RunRecord:
    """Train and record per-step loss and communication statistics.

    Every step draws a fresh batch from the cluster task; the task, initial
    weights, batch stream and held-out evaluation set depend only on
    ``seed``, so runs under different policies or worker counts see
    identical data.
    """
    if isinstance(policy, str):
        policy = POLICIES[policy]
    if workers < 1 or batch_size % workers:
        raise ValueError("batch_size must split evenly across workers")
    task = make_task(seed, separation=separation, noise=noise)
    held_out = task.sample(np.random.default_rng([seed, 0xE7A1]), eval_samples)
    model = model or TinyModel(sizes=(task.dim, 64, 64, task.n_classes), seed=seed)
    gemm = Gemm(policy.gemm, policy.forward_format, policy.grad_format)
    spec = policy.optimizer_spec
    hyper = AdamWHyper(lr=lr)
    states = {k: init_state(v, spec, hyper, grad_format=policy.grad_format) for k, v in model.params.items()}
    ctrls = {k: AutoScaleController() for k in states}

    zero_loads = None
    if policy.zero:
        zero_loads = greedy_distribute(_state_descriptors(states, spec), workers).loads

    def eval_loss():
        return model.loss(held_out.x, held_out.y, {k: st.weights for k, st in states.items()})

    initial = eval_loss()
    batch_rng = np.random.default_rng([seed, 0xBA7C])
    records: list[StepRecord] = []
    m2_stats = QuantStats()
    diverged = False
    shard = batch_size // workers
    loss_scale = policy.loss_scaling or 1.0

    for step in range(steps):
        batch = task.sample(batch_rng, batch_size)
        params = {k: st.weights for k, st in states.items()}

        losses, worker_grads = [], []
        for w in range(workers):
            sl = slice(w * shard, (w + 1) * shard)
            loss, grads = model.loss_and_grads(batch.x[sl], batch.y[sl], params, gemm, loss_scale)
            losses.append(loss)
            worker_grads.append(grads)
        loss = float(np.mean(losses))
        if not math.isfinite(loss) or loss > 10 * initial or not all(
            np.all(np.isfinite(g)) for grads in worker_grads for g in grads.values()
        ):
            diverged = True
            records.append(StepRecord(step, loss, math.nan, math.nan, math.nan, math.nan, 0, 0))
            break

        lr_t = cosine_lr(step, steps, lr, warmup)
        qstats = QuantStats()
        signal = noise = 0.0
        sent = baseline = 0
        for k in states:
            shards = [grads[k] / loss_scale for grads in worker_grads]
            grad, reduced, st, nbytes, ctrls[k] = _reduce(policy, shards, ctrls[k])
            oracle = np.mean(shards, axis=0)
            signal += float(np.sum(oracle**2))
            noise += float(np.sum((reduced - oracle) ** 2))
            qstats += st
            sent += nbytes
            baseline += fp32_bytes(workers, oracle.size)
            states[k] = adamw_step(states[k], grad, lr=lr_t)
            m2_stats += states[k].last_stats["moment2"]
        if noise == 0.0:
            snr = math.inf
        else:
            snr = 10 * math.log10(signal / noise) if signal else -math.inf
        mu = min(c.mu for c in ctrls.values()) if policy.comm == "auto" else 1.0
        records.append(StepRecord(step, loss, snr, qstats.underflow_rate, qstats.overflow_rate, mu, sent, baseline))

    final = eval_loss() if not diverged else math.nan
    if not diverged and (not math.isfinite(final) or final > 10 * initial):
        diverged = True
    return RunRecord(
        policy=policy.name,
        workers=workers,
        seed=seed,
        steps=records,
        initial_loss=initial,
        final_loss=final,
        diverged=diverged,
        m2_underflow_rate=m2_stats.underflow_rate,
        zero_loads=zero_loads,
        metadata={
            "gemm": policy.gemm,
            "comm": policy.comm,
            "comm_format": policy.comm_format.name,
            "forward_format": policy.forward_format.name,
            "grad_format": policy.grad_format.name,
            "level": policy.level,
            "bytes_per_param": bytes_per_param(spec),
        },
    )


def comm_reduction_report(run: RunRecord) -> dict:
    """Gradient traffic actually sent versus the same traffic in FP32."""
    fp8, fp32 = run.fp8_bytes, run.fp32_bytes
    return {"fp8_bytes": fp8, "fp32_bytes": fp32, "reduction_fraction": 1 - fp8 / fp32 if fp32 else 0.0}
