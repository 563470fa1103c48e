"""FP8 mixed-precision training simulator.

Software FP8 codecs, per-tensor scaling, simulated low-precision all-reduce,
precision-decoupled AdamW, whole-tensor ZeRO placement and a desk-scale
training harness, all in NumPy.
"""

from .collective import (
    AutoScaleController,
    CommStats,
    WorkerSet,
    allreduce_autoscale,
    allreduce_full,
    allreduce_postscale,
    allreduce_prescale,
    allreduce_sharedscale,
    autoscale_update,
)
from .formats import BF16, E4M3, E5M2, FP16, FloatFormat, Fp8Format, decode, encode, get_format, max_relative_error
from .optimizer import SETTINGS, AdamWHyper, OptimizerState, Precision, PrecisionSpec, adamw_step, bytes_per_param
from .scaling import AmaxHistory, QuantStats, ScaledTensor, dequantize, quantize, quantize_delayed, quantize_jit
from .training import POLICIES, MixedPrecisionPolicy, comm_reduction_report, train
from .zero import TensorDescriptor, greedy_distribute, plan_stats

__version__ = "0.1.0"

__all__ = [
    "AutoScaleController",
    "CommStats",
    "WorkerSet",
    "allreduce_autoscale",
    "allreduce_full",
    "allreduce_postscale",
    "allreduce_prescale",
    "allreduce_sharedscale",
    "autoscale_update",
    "BF16",
    "E4M3",
    "E5M2",
    "FP16",
    "FloatFormat",
    "Fp8Format",
    "decode",
    "encode",
    "get_format",
    "max_relative_error",
    "SETTINGS",
    "AdamWHyper",
    "OptimizerState",
    "Precision",
    "PrecisionSpec",
    "adamw_step",
    "bytes_per_param",
    "AmaxHistory",
    "QuantStats",
    "ScaledTensor",
    "dequantize",
    "quantize",
    "quantize_delayed",
    "quantize_jit",
    "POLICIES",
    "MixedPrecisionPolicy",
    "comm_reduction_report",
    "train",
    "TensorDescriptor",
    "greedy_distribute",
    "plan_stats",
]
