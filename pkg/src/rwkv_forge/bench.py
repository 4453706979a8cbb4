"""Scaling measurements: linear WKV against quadratic softmax attention."""

from __future__ import annotations

import csv
import gc
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, TextIO

import numpy as np

from .errors import DegenerateDecayError, DimensionError, ParameterError
from .model import Model, fresh_state
from .numerics import Tensor, make_rng
from .wkv import wkv_parallel, wkv_sequential

CSV_HEADER = ("op", "n", "d", "median_seconds", "est_bytes")
ATTENTION_ROW_BLOCK = 256


def reference_attention(Q: Tensor, K: Tensor, V: Tensor, row_block: int = ATTENTION_ROW_BLOCK) -> Tensor:
    """Unmasked ``softmax(Q K^T / sqrt(d)) V``.

    Rows are processed in blocks to cap transient memory; the arithmetic is
    still quadratic in sequence length.
    """
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    if Q.ndim != 2 or Q.shape != K.shape or K.shape[0] != V.shape[0]:
        raise DimensionError(f"attention shapes disagree: Q{Q.shape} K{K.shape} V{V.shape}")
    scale = 1.0 / math.sqrt(Q.shape[1])
    out = np.empty((Q.shape[0], V.shape[1]))
    for s in range(0, Q.shape[0], row_block):
        scores = (Q[s : s + row_block] @ K.T) * scale
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=1, keepdims=True)
        out[s : s + row_block] = scores @ V
    return out


def estimated_bytes(op: str, n: int, d: int) -> int:
    """Analytic transient-memory estimate from array shapes (float64)."""
    if op == "wkv_parallel":
        # K, V, output plus seven scan temporaries of n x d.
        return 10 * n * d * 8
    if op == "wkv_sequential":
        # K, V, output plus the three-vector running state.
        return (3 * n * d + 3 * d) * 8
    if op == "reference_attention":
        # Q, K, V, output plus one block of scores.
        return (4 * n * d + min(n, ATTENTION_ROW_BLOCK) * n) * 8
    raise ParameterError(f"unknown op {op!r}")


@dataclass
class ScalingRow:
    op: str
    n: int
    d: int
    median_seconds: float
    est_bytes: int


@dataclass
class ScalingReport:
    rows: list[ScalingRow] = field(default_factory=list)

    def for_op(self, op: str) -> list[ScalingRow]:
        return [r for r in self.rows if r.op == op]

    def slope(self, op: str) -> float:
        """Least-squares slope of log(time) against log(n)."""
        rows = self.for_op(op)
        return float(np.polyfit(np.log([r.n for r in rows]), np.log([r.median_seconds for r in rows]), 1)[0])

    def doubling_ratios(self, op: str) -> list[float]:
        rows = self.for_op(op)
        return [b.median_seconds / a.median_seconds for a, b in zip(rows, rows[1:])]

    def write_csv(self, out: str | Path | TextIO) -> None:
        if isinstance(out, (str, Path)):
            with open(out, "w", encoding="utf-8", newline="") as fh:
                self.write_csv(fh)
            return
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.rows:
            writer.writerow([r.op, r.n, r.d, f"{r.median_seconds:.9g}", r.est_bytes])


def _median_time(fn: Callable[[], object], repetitions: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repetitions):
            t0 = time.perf_counter()
            fn()
            samples.append(time.perf_counter() - t0)
    finally:
        if gc_was_enabled:
            gc.enable()
    return float(np.median(samples))


def measure_scaling(
    lengths,
    d: int = 64,
    repetitions: int = 3,
    *,
    warmup: int = 1,
    ops: tuple[str, ...] = ("wkv_parallel", "wkv_sequential", "reference_attention"),
    seed: int = 0,
    out: str | Path | TextIO | None = None,
) -> ScalingReport:
    """Median wall time of each operation at each sequence length.

    Inputs are seeded normal draws; keys are scaled to [-5, 5]-ish range and
    decays use the model's default 0.1..2.0 ramp.
    """
    lengths = [int(n) for n in lengths]
    if len(lengths) < 2:
        raise ParameterError("need at least two lengths")
    if any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ParameterError("lengths must be strictly increasing")
    if repetitions < 3:
        raise ParameterError("need at least three repetitions")
    rng = make_rng(seed)
    w = np.linspace(0.1, 2.0, d)
    report = ScalingReport()
    for op in ops:
        for n in lengths:
            K = rng.normal(0.0, 2.0, (n, d))
            V = rng.normal(size=(n, d))
            if op == "wkv_parallel":
                fn = lambda: wkv_parallel(K, V, w)  # noqa: E731
            elif op == "wkv_sequential":
                fn = lambda: wkv_sequential(K, V, w)  # noqa: E731
            elif op == "reference_attention":
                Q = rng.normal(size=(n, d))
                fn = lambda: reference_attention(Q, K, V)  # noqa: E731
            else:
                raise ParameterError(f"unknown op {op!r}")
            secs = _median_time(fn, repetitions, warmup)
            report.rows.append(ScalingRow(op, n, d, secs, estimated_bytes(op, n, d)))
    if out is not None:
        report.write_csv(out)
    return report


def effective_context(w: Tensor, epsilon: float, n: int) -> float:
    """``min(n, -ln(epsilon) / min(w))``: horizon where weights fall below epsilon."""
    w_min = float(np.min(np.asarray(w, dtype=np.float64)))
    if not 0.0 < epsilon < 1.0:
        raise ParameterError("epsilon must lie in (0, 1)")
    if n < 1:
        raise ParameterError("n must be positive")
    if w_min <= 0.0:
        raise DegenerateDecayError(f"min decay {w_min} <= 0 gives an unbounded context")
    return min(float(n), -math.log(epsilon) / w_min)


def state_size(model: Model) -> int:
    """Bytes held by a fresh inference state; constant over the stream."""
    return fresh_state(model).nbytes


def vector_state_bytes(n_layers: int, d: int) -> int:
    """Closed form for the vector-state configuration.

    Per layer: three accumulators (a, b, p) plus two shift caches of d floats,
    and one 8-byte position counter overall.
    """
    return n_layers * (3 * d + 2 * d) * 8 + 8
