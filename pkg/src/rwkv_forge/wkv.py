"""Weighted key-value (WKV) operators.

Every causal form computes, per channel,

    wkv_t = sum_{i<=t} exp(k_i - (t-i) w) v_i / sum_{i<=t} exp(k_i - (t-i) w)

with ``w >= 0`` acting as a decay rate. The sequential recurrence multiplies
the accumulators by ``exp(-w)`` so that both forms agree exactly.

Arrays carry time on axis 0 and channels on the last axis; any axes between
them are treated as batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, EmptySequenceError, NumericError, ParameterError
from .numerics import Tensor, sigmoid, softplus

_NEG_INF = -np.inf


def _check_kv(K, V, w=None):
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if K.ndim < 1 or K.shape[0] == 0:
        raise EmptySequenceError("WKV needs at least one position")
    if K.shape != V.shape:
        raise DimensionError(f"K and V shapes differ: {K.shape} vs {V.shape}")
    if K.ndim == 1:
        K = K[:, None]
        V = V[:, None]
    if w is not None:
        w = np.asarray(w, dtype=np.float64)
        if w.ndim > 1 or (w.ndim == 1 and w.shape[0] not in (1, K.shape[-1])):
            raise DimensionError(f"decay shape {w.shape} does not match {K.shape[-1]} channels")
    return K, V, w


def _positions(T: int, ndim: int) -> Tensor:
    return np.arange(T, dtype=np.float64).reshape((T,) + (1,) * (ndim - 1))


def _signed_logs(V):
    with np.errstate(divide="ignore"):
        return np.log(np.maximum(V, 0.0)), np.log(np.maximum(-V, 0.0))


def _prefix_logs(K, V, C):
    """Log prefix sums relative to the decay offset ``C``.

    Returns ``(log_a, log_bp, log_bn)`` with
    ``log_a[t] = log sum_{i<=t} exp(k_i + C_i)`` and the numerator split into
    its positive and negative value parts.
    """
    z = K + C
    lp, ln = _signed_logs(V)
    log_a = np.logaddexp.accumulate(z, axis=0)
    log_bp = np.logaddexp.accumulate(z + lp, axis=0)
    log_bn = np.logaddexp.accumulate(z + ln, axis=0)
    return z, log_a, log_bp, log_bn


def _ratio(log_bp, log_bn, log_a):
    # Rows with log_a == -inf only arise from an empty carried state and are discarded.
    with np.errstate(invalid="ignore"):
        return np.exp(log_bp - log_a) - np.exp(log_bn - log_a)


def wkv_parallel(K: Tensor, V: Tensor, w: Tensor) -> Tensor:
    """Causal WKV for every prefix, evaluated as a stable log-domain scan.

    Cost is O(T d): each output row is a prefix sum of decayed terms, and the
    shared factor ``exp(-t w)`` cancels between numerator and denominator.
    """
    K, V, w = _check_kv(K, V, w)
    C = _positions(K.shape[0], K.ndim) * w
    _, log_a, log_bp, log_bn = _prefix_logs(K, V, C)
    return _ratio(log_bp, log_bn, log_a)


def wkv_parallel_dynamic(K: Tensor, V: Tensor, W: Tensor) -> Tensor:
    """Causal WKV with a per-step decay ``W[t]`` applied when stepping into ``t``.

    Weight of position ``i`` at ``t`` is ``exp(k_i - sum_{i<j<=t} W[j])``.
    """
    K, V, _ = _check_kv(K, V)
    W = np.asarray(W, dtype=np.float64).reshape(K.shape)
    C = np.cumsum(W, axis=0)
    _, log_a, log_bp, log_bn = _prefix_logs(K, V, C)
    return _ratio(log_bp, log_bn, log_a)


def wkv_parallel_backward(K: Tensor, V: Tensor, w: Tensor, upstream_grad: Tensor):
    """Exact gradients of :func:`wkv_parallel` with respect to ``K``, ``V`` and ``w``.

    Returns ``(gK, gV, gw)``; ``gw`` has the shape of ``w`` and sums over time
    and any batch axes.
    """
    w_in = np.asarray(w, dtype=np.float64)
    K, V, w = _check_kv(K, V, w)
    G = np.asarray(upstream_grad, dtype=np.float64).reshape(K.shape)
    T = K.shape[0]
    pos = _positions(T, K.ndim)
    C = pos * w
    z, log_a, log_bp, log_bn = _prefix_logs(K, V, C)
    Y = _ratio(log_bp, log_bn, log_a)

    def suffix_weighted(S):
        # sum_{t>=i} S_t * alpha_{t,i}, where alpha_{t,i} = exp(z_i - log_a[t]).
        sp, sn = _signed_logs(S)
        rp = np.logaddexp.accumulate((sp - log_a)[::-1], axis=0)[::-1]
        rn = np.logaddexp.accumulate((sn - log_a)[::-1], axis=0)[::-1]
        return np.exp(z + rp) - np.exp(z + rn)

    gV = suffix_weighted(G)
    gK = V * gV - suffix_weighted(G * Y)
    # Each attention row sums to one, so the row-index term of d(logit)/dw cancels.
    gw_full = np.sum(pos * gK, axis=tuple(range(K.ndim - 1)))
    if w_in.ndim == 0 or w_in.shape == (1,):
        gw = np.asarray(np.sum(gw_full)).reshape(w_in.shape)
    else:
        gw = gw_full
    return gK.reshape(np.shape(upstream_grad)), gV.reshape(np.shape(upstream_grad)), gw


@dataclass
class WkvState:
    """Stable accumulators: true values are ``a * exp(p)`` and ``b * exp(p)``."""

    a: Tensor
    b: Tensor
    p: Tensor

    @classmethod
    def fresh(cls, shape) -> "WkvState":
        return cls(np.zeros(shape), np.zeros(shape), np.full(shape, _NEG_INF))

    def copy(self) -> "WkvState":
        return WkvState(self.a.copy(), self.b.copy(), self.p.copy())

    @property
    def nbytes(self) -> int:
        return self.a.nbytes + self.b.nbytes + self.p.nbytes


def wkv_sequential_step(state: WkvState, k_t: Tensor, v_t: Tensor, w: Tensor):
    """Advance the recurrence by one token and return ``(new_state, wkv_t)``.

    Implements ``a_t = exp(-w) a_{t-1} + exp(k_t)``,
    ``b_t = exp(-w) b_{t-1} + exp(k_t) v_t`` with both stored relative to the
    running maximum exponent ``p``.
    """
    k_t = np.asarray(k_t, dtype=np.float64)
    v_t = np.asarray(v_t, dtype=np.float64)
    if k_t.shape != v_t.shape or k_t.shape != state.a.shape:
        raise DimensionError(f"step shapes disagree: k{k_t.shape} v{v_t.shape} state{state.a.shape}")
    if not (np.all(np.isfinite(k_t)) and np.all(np.isfinite(v_t))):
        raise NumericError("non-finite key or value fed to WKV step")
    decayed = state.p - w
    q = np.maximum(decayed, k_t)
    e_old = np.exp(decayed - q)
    e_new = np.exp(k_t - q)
    a = e_old * state.a + e_new
    b = e_old * state.b + e_new * v_t
    return WkvState(a, b, q), b / a


def wkv_sequential(K: Tensor, V: Tensor, w: Tensor, state: WkvState | None = None):
    """Run :func:`wkv_sequential_step` over a whole sequence.

    Returns ``(outputs, final_state)``.
    """
    K, V, w = _check_kv(K, V, w)
    if state is None:
        state = WkvState.fresh(K.shape[1:])
    out = np.empty_like(V)
    for t in range(K.shape[0]):
        state, out[t] = wkv_sequential_step(state, K[t], V[t], w)
    return out, state


def wkv_parallel_from(state: WkvState, K: Tensor, V: Tensor, w: Tensor):
    """Parallel scan continuing from a recurrent state; returns ``(outputs, final_state)``.

    The carried accumulators enter as a virtual position -1 whose key is
    ``p + log a`` and whose value is ``b / a``.
    """
    K, V, w = _check_kv(K, V, w)
    T = K.shape[0]
    live = state.a > 0
    with np.errstate(divide="ignore"):
        k0 = np.where(live, state.p + np.log(np.where(live, state.a, 1.0)), _NEG_INF)
    v0 = np.where(live, state.b / np.where(live, state.a, 1.0), 0.0)
    K1 = np.concatenate([k0[None], K])
    V1 = np.concatenate([v0[None], V])
    C = (_positions(T + 1, K1.ndim) - 1.0) * w
    _, log_a, log_bp, log_bn = _prefix_logs(K1, V1, C)
    out = _ratio(log_bp, log_bn, log_a)[1:]
    final = WkvState(np.ones_like(out[-1]), out[-1].copy(), log_a[-1] - C[-1])
    return out, final


def literal_recurrence(K: Tensor, V: Tensor, w: Tensor) -> Tensor:
    """Unscaled accumulator recurrence, kept only to demonstrate overflow."""
    K, V, w = _check_kv(K, V, w)
    a = np.zeros(K.shape[1:])
    b = np.zeros(K.shape[1:])
    out = np.empty_like(V)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(K.shape[0]):
            a = np.exp(-w) * a + np.exp(K[t])
            b = np.exp(-w) * b + np.exp(K[t]) * V[t]
            out[t] = b / a
    return out


def wkv_bidirectional(K: Tensor, V: Tensor, w: Tensor) -> Tensor:
    """Non-causal WKV with symmetric decay ``exp(-|t-i| w)``.

    The forward prefix covers ``i <= t``; the strict suffix ``i > t`` is the
    reversed prefix shifted by one step and decayed once more.
    """
    K, V, w = _check_kv(K, V, w)
    T = K.shape[0]
    C = _positions(T, K.ndim) * w
    _, fa, fbp, fbn = _prefix_logs(K, V, C)
    fa, fbp, fbn = (x - C for x in (fa, fbp, fbn))
    _, ra, rbp, rbn = _prefix_logs(K[::-1], V[::-1], C)
    ra, rbp, rbn = ((x - C)[::-1] for x in (ra, rbp, rbn))

    def strict_suffix(x):
        out = np.full_like(x, _NEG_INF)
        out[:-1] = x[1:] - w
        return out

    log_a = np.logaddexp(fa, strict_suffix(ra))
    log_bp = np.logaddexp(fbp, strict_suffix(rbp))
    log_bn = np.logaddexp(fbn, strict_suffix(rbn))
    return _ratio(log_bp, log_bn, log_a)


def re_wkv(K: Tensor, V: Tensor, w: Tensor, m: int) -> Tensor:
    """Apply :func:`wkv_bidirectional` ``m`` times, feeding each output back as values."""
    if int(m) != m or m < 1:
        raise ParameterError(f"recurrence count must be a positive integer, got {m}")
    out = np.asarray(V, dtype=np.float64)
    for _ in range(int(m)):
        out = wkv_bidirectional(K, out, w)
    return out


def multi_directional_wkv(K: Tensor, V: Tensor, w: Tensor, direction_weights: Tensor) -> Tensor:
    """Weighted sum of forward and time-reversed causal WKV."""
    dw = np.asarray(direction_weights, dtype=np.float64).ravel()
    if dw.shape != (2,):
        raise DimensionError(f"1-D input has 2 directions, got {dw.size} weights")
    K, V, w = _check_kv(K, V, w)
    forward = wkv_parallel(K, V, w)
    backward = wkv_parallel(K[::-1], V[::-1], w)[::-1]
    return dw[0] * forward + dw[1] * backward


@dataclass
class MatrixState:
    """Outer-product state ``S`` (..., d_k, d_v) and the last decay gate applied."""

    S: Tensor
    alpha: Tensor

    @classmethod
    def fresh(cls, d_k: int, d_v: int, batch: tuple = ()) -> "MatrixState":
        return cls(np.zeros(batch + (d_k, d_v)), np.ones(batch + (d_k,)))

    def copy(self) -> "MatrixState":
        return MatrixState(self.S.copy(), self.alpha.copy())

    @property
    def nbytes(self) -> int:
        return self.S.nbytes + self.alpha.nbytes


def matrix_state_step(state: MatrixState, k_t: Tensor, v_t: Tensor, r_t: Tensor, alpha_t: Tensor):
    """``S_t = alpha_t * S_{t-1} + outer(k_t, v_t)``; output ``r_t * (S_t @ v_t)``.

    ``alpha_t`` is either a full (d_k, d_v) gate or a per-row (d_k,) gate.
    """
    S = state.S
    k_t = np.asarray(k_t, dtype=np.float64)
    v_t = np.asarray(v_t, dtype=np.float64)
    r_t = np.asarray(r_t, dtype=np.float64)
    alpha_t = np.asarray(alpha_t, dtype=np.float64)
    d_k, d_v = S.shape[-2:]
    if k_t.shape[-1] != d_k or r_t.shape != k_t.shape or v_t.shape[-1] != d_v:
        raise DimensionError(
            f"matrix step shapes disagree: S{S.shape} k{k_t.shape} v{v_t.shape} r{r_t.shape}"
        )
    if alpha_t.shape == S.shape:
        gate = alpha_t
    elif alpha_t.ndim == 0 or alpha_t.shape[-1] == d_k:
        gate = alpha_t[..., None]
    else:
        raise DimensionError(f"decay gate shape {alpha_t.shape} fits neither S nor rows")
    S_new = gate * S + k_t[..., :, None] * v_t[..., None, :]
    out = r_t * np.einsum("...kv,...v->...k", S_new, v_t)
    return MatrixState(S_new, alpha_t), out


@dataclass
class DynamicDecayParams:
    """Affine maps feeding the input-dependent decay and gate.

    ``w_t = softplus(A_w x + u_w * w_prev + b_w)`` and
    ``alpha_t = sigmoid(A_g x + u_g * alpha_prev + b_g)``.
    """

    A_w: Tensor
    u_w: Tensor
    b_w: Tensor
    A_g: Tensor
    u_g: Tensor
    b_g: Tensor

    @classmethod
    def zeros(cls, d: int) -> "DynamicDecayParams":
        return cls(np.zeros((d, d)), np.zeros(d), np.zeros(d), np.zeros((d, d)), np.zeros(d), np.zeros(d))


def dynamic_decay_update(x_t: Tensor, w_prev: Tensor, alpha_prev: Tensor, params: DynamicDecayParams):
    x_t = np.asarray(x_t, dtype=np.float64)
    d = params.b_w.shape[0]
    if x_t.shape[-1] != d or np.shape(w_prev)[-1:] != (d,) or np.shape(alpha_prev)[-1:] != (d,):
        raise DimensionError(f"dynamic decay expects {d} channels")
    w_t = softplus(x_t @ params.A_w.T + params.u_w * w_prev + params.b_w)
    alpha_t = sigmoid(x_t @ params.A_g.T + params.u_g * alpha_prev + params.b_g)
    return w_t, alpha_t
