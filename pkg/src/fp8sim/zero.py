"""Greedy whole-tensor ZeRO distribution.

Each scaled tensor is assigned in its entirety, scale included, to one
device. Tensors go largest first to the currently least-loaded device.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

from .collective import SCALAR_BYTES
from .scaling import ScaledTensor

__all__ = [
    "TensorDescriptor",
    "ZeroPlan",
    "PlanStats",
    "greedy_distribute",
    "plan_stats",
    "describe",
    "split_loads",
]


@dataclass(frozen=True)
class TensorDescriptor:
    id: Hashable
    size_bytes: int
    scale: float = 1.0

    def __post_init__(self):
        if self.size_bytes <= 0:
            raise ValueError(f"tensor {self.id!r}: size_bytes must be positive")


@dataclass
class ZeroPlan:
    partitions: list[list[TensorDescriptor]]
    loads: list[int] = field(default_factory=list)

    @property
    def n_devices(self) -> int:
        return len(self.partitions)

    def device_of(self, tensor_id) -> int:
        for j, part in enumerate(self.partitions):
            if any(t.id == tensor_id for t in part):
                return j
        raise KeyError(tensor_id)


@dataclass(frozen=True)
class PlanStats:
    min_load: int
    max_load: int
    imbalance_ratio: float


def greedy_distribute(tensors: Sequence[TensorDescriptor], n_devices: int) -> ZeroPlan:
    if n_devices < 1:
        raise ValueError("need at least one device")
    # stable sort: equal sizes keep their input order
    order = sorted(range(len(tensors)), key=lambda i: -tensors[i].size_bytes)
    partitions: list[list[TensorDescriptor]] = [[] for _ in range(n_devices)]
    loads = [0] * n_devices
    heap = [(0, j) for j in range(n_devices)]  # (load, device); ties go to the lowest index
    for i in order:
        load, j = heapq.heappop(heap)
        partitions[j].append(tensors[i])
        loads[j] = load + tensors[i].size_bytes
        heapq.heappush(heap, (loads[j], j))
    return ZeroPlan(partitions, loads)


def plan_stats(plan: ZeroPlan) -> PlanStats:
    lo, hi = min(plan.loads), max(plan.loads)
    return PlanStats(lo, hi, (hi - lo) / hi if hi else 0.0)


def describe(tensors: Iterable[tuple[Hashable, ScaledTensor]]) -> list[TensorDescriptor]:
    """Descriptors for named scaled tensors: payload bytes plus the scale."""
    return [TensorDescriptor(name, t.nbytes + SCALAR_BYTES, t.scale) for name, t in tensors]


def split_loads(tensors: Sequence[TensorDescriptor], n_devices: int) -> list[int]:
    """Per-device bytes when every tensor is flattened and sliced evenly.

    This is the baseline sub-tensor partitioning, which balances perfectly
    but separates scales from most of their payload.
    """
    if n_devices < 1:
        raise ValueError("need at least one device")
    total = sum(t.size_bytes for t in tensors)
    base, extra = divmod(total, n_devices)
    return [base + (1 if j < extra else 0) for j in range(n_devices)]
