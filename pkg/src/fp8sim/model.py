"""A tiny MLP classifier with hand-written backprop and pluggable GEMM precision."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .formats import BF16, E4M3, E5M2, FloatFormat, decode_array, encode_array
from .scaling import quantize_jit

__all__ = ["Dataset", "ClusterTask", "make_task", "make_dataset", "Gemm", "fp8_gemm", "TinyModel", "gelu", "gelu_grad"]


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    n_classes: int

    def __len__(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class ClusterTask:
    """Gaussian clusters, one per class, that can be sampled without end."""

    centers: np.ndarray
    noise: float

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def n_classes(self) -> int:
        return self.centers.shape[0]

    def sample(self, rng: np.random.Generator, n: int) -> Dataset:
        y = rng.integers(0, self.n_classes, size=n)
        x = self.centers[y] + rng.normal(0.0, self.noise, size=(n, self.dim))
        return Dataset(x, y, self.n_classes)


def make_task(seed: int, dim: int = 32, n_classes: int = 16, separation: float = 0.8,
              noise: float = 1.0) -> ClusterTask:
    """Cluster centres with coordinates ~ N(0, separation^2)."""
    rng = np.random.default_rng([seed, 0xDA7A])
    return ClusterTask(rng.normal(0.0, separation, size=(n_classes, dim)), noise)


def make_dataset(seed: int, n_samples: int = 4096, dim: int = 32, n_classes: int = 16,
                 separation: float = 0.8, noise: float = 1.0) -> Dataset:
    """A fixed finite sample of :func:`make_task`."""
    task = make_task(seed, dim, n_classes, separation, noise)
    return task.sample(np.random.default_rng([seed, 0xDA7A, 1]), n_samples)


def fp8_gemm(a, b, forward_format: FloatFormat = E4M3, b_format: FloatFormat | None = None) -> np.ndarray:
    """Matrix product of per-tensor scaled FP8 operands, accumulated in float64."""
    qa = quantize_jit(a, forward_format)
    qb = quantize_jit(b, b_format or forward_format)
    return (qa.decoded() @ qb.decoded()) / (qa.scale * qb.scale)


def _bf16(x: np.ndarray) -> np.ndarray:
    return decode_array(encode_array(x, BF16), BF16)


class Gemm:
    """GEMM precision mode: ``fp32``, ``bf16`` or ``fp8``.

    For ``fp8`` the forward operands use ``forward_format`` and any operand
    that is a gradient uses ``grad_format``.
    """

    def __init__(self, mode: str = "fp32", forward_format: FloatFormat = E4M3,
                 grad_format: FloatFormat = E5M2):
        if mode not in ("fp32", "bf16", "fp8"):
            raise ValueError(f"unknown GEMM mode {mode!r}")
        self.mode = mode
        self.forward_format = forward_format
        self.grad_format = grad_format

    def __call__(self, a, b, a_is_grad: bool = False, b_is_grad: bool = False) -> np.ndarray:
        if self.mode == "fp32":
            return a @ b
        if self.mode == "bf16":
            return _bf16(a) @ _bf16(b)
        fa = self.grad_format if a_is_grad else self.forward_format
        fb = self.grad_format if b_is_grad else self.forward_format
        return fp8_gemm(a, b, fa, fb)

    def __repr__(self) -> str:
        return f"Gemm({self.mode!r})"


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh approximation of GELU."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x)))


def gelu_grad(x):
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)


class TinyModel:
    """Affine-GELU stack ending in a softmax cross-entropy head.

    Parameters live in a plain dict (``W0, b0, W1, b1, ...``) so optimizers
    and the all-reduce can treat each one as an independent tensor.
    """

    def __init__(self, sizes=(32, 64, 64, 16), seed: int = 0):
        self.sizes = tuple(sizes)
        rng = np.random.default_rng([seed, 0x5EED])
        self.params: dict[str, np.ndarray] = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            self.params[f"W{i}"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.params[f"b{i}"] = np.zeros(fan_out)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def forward(self, x, params=None, gemm: Gemm | None = None):
        params = self.params if params is None else params
        gemm = gemm or Gemm()
        cache = []
        h = x
        for i in range(self.n_layers):
            z = gemm(h, params[f"W{i}"]) + params[f"b{i}"]
            cache.append((h, z))
            h = gelu(z) if i < self.n_layers - 1 else z
        return h, cache

    def loss(self, x, y, params=None, gemm: Gemm | None = None) -> float:
        logits, _ = self.forward(x, params, gemm)
        return float(_cross_entropy(logits, y)[0])

    def loss_and_grads(self, x, y, params=None, gemm: Gemm | None = None, loss_scale: float = 1.0):
        """Mean cross-entropy over the batch and its gradient for every parameter.

        Gradients come back multiplied by ``loss_scale``.
        """
        params = self.params if params is None else params
        gemm = gemm or Gemm()
        logits, cache = self.forward(x, params, gemm)
        loss, dz = _cross_entropy(logits, y)
        if loss_scale != 1.0:
            dz = dz * loss_scale
        grads = {}
        for i in reversed(range(self.n_layers)):
            h, z = cache[i]
            if i < self.n_layers - 1:
                dz = dz * gelu_grad(z)
            grads[f"W{i}"] = gemm(h.T, dz, b_is_grad=True)
            grads[f"b{i}"] = dz.sum(axis=0)
            if i:
                dz = gemm(dz, params[f"W{i}"].T, a_is_grad=True)
        return loss, {k: grads[k] for k in params}


def _cross_entropy(logits, y):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = len(y)
    loss = -logp[np.arange(n), y].mean()
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    return loss, d / n
