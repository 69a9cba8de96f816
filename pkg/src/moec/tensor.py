"""Dense float32 array primitives and a replayable counter-based RNG.

Tensors are plain numpy arrays in row-major order. Public operations
validate shapes and reject non-finite results so NaNs never propagate
silently into the pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import DimensionError, NumericError

Tensor = np.ndarray

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with inner-dimension validation."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else -1]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul result")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the erf-based normal CDF."""
    x = np.asarray(x)
    return x * 0.5 * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x: Tensor) -> Tensor:
    """Derivative of exact GELU: Phi(x) + x * phi(x)."""
    x = np.asarray(x)
    phi = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * phi


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise DimensionError("layer_norm requires eps > 0")
    x = np.asarray(x)
    mu = x.mean(axis=-1, keepdims=True)
    var = np.square(x - mu).mean(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return check_finite(xhat * gamma + beta, "layer_norm result")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = np.asarray(x)
    z = x - x.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=axis, keepdims=True)


@dataclass
class RngState:
    """Deterministic counter-based randomness.

    Every draw derives a fresh Philox stream from (seed, counter), so a
    given seed replays bit-identically regardless of platform and the
    state is trivially serializable.
    """

    seed: int
    counter: int = 0

    def _next_gen(self) -> np.random.Generator:
        gen = np.random.Generator(np.random.Philox(key=(self.seed & (2**64 - 1), self.counter)))
        self.counter += 1
        return gen

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> Tensor:
        return (self._next_gen().standard_normal(size=shape) * std).astype(dtype)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0, dtype=np.float32) -> Tensor:
        return self._next_gen().uniform(low, high, size=shape).astype(dtype)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._next_gen().integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._next_gen().permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._next_gen().choice(n, size=size, replace=replace)

    def child(self, tag: int) -> "RngState":
        """Independent substream; tag offsets the key so children never collide."""
        return RngState(seed=(self.seed * 0x9E3779B97F4A7C15 + tag + 1) & (2**64 - 1))
