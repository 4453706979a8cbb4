"""Dense float64 primitives used throughout the package.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Randomness comes
from ``numpy.random.Generator`` backed by PCG64, which produces identical
streams for identical seeds on every platform numpy supports.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .errors import DegenerateInputError, DimensionError, NumericError

Tensor = np.ndarray


LN2 = math.log(2.0)


def as_tensor(x, *, finite: bool = True) -> Tensor:
    t = np.asarray(x, dtype=np.float64)
    if finite and not np.all(np.isfinite(t)):
        raise NumericError("tensor contains non-finite values")
    return t


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic PCG64 generator seeded with an unsigned 64-bit integer."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFF_FFFF_FFFF_FFFF))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def sigmoid(x: Tensor) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: Tensor) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def squared_relu(x: Tensor) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    return np.square(np.maximum(x, 0.0))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax of an empty vector")
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0 or x.shape[axis] == 0:
        raise DimensionError("log_softmax of an empty vector")
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def log2_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Base-2 log-probabilities; uniform rows give exact powers of two."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0 or x.shape[axis] == 0:
        raise DimensionError("log2_softmax of an empty vector")
    z = x - np.max(x, axis=axis, keepdims=True)
    return z / LN2 - np.log2(np.sum(np.exp(z), axis=axis, keepdims=True))


def cosine_similarity(u: Tensor, v: Tensor) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise DimensionError(f"length mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine similarity of a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step size must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value near coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return grad
