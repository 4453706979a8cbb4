"""Token shifts, channel mixing, time mixing and block assembly.

Sequence tensors are laid out ``(T, ..., d)``; axes between time and channels
are batch axes. All shifts pad out-of-range neighbours with zeros.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .errors import DimensionError, EmptySequenceError
from .numerics import Tensor, sigmoid, squared_relu
from .wkv import (
    DynamicDecayParams,
    MatrixState,
    WkvState,
    dynamic_decay_update,
    matrix_state_step,
    wkv_parallel,
    wkv_parallel_dynamic,
    wkv_sequential_step,
)

LN_EPS = 1e-5


# -- shifts -----------------------------------------------------------------


def token_shift_1d(x_t: Tensor, x_prev: Tensor, mu: Tensor) -> Tensor:
    x_t = np.asarray(x_t, dtype=np.float64)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    if x_t.shape != x_prev.shape or np.shape(mu)[-1:] not in ((), x_t.shape[-1:]):
        raise DimensionError(f"shift shapes disagree: {x_t.shape}, {x_prev.shape}, mu {np.shape(mu)}")
    return mu * x_t + (1.0 - mu) * x_prev


def token_shift(X: Tensor, mu: Tensor, x_prev: Tensor | None = None) -> Tensor:
    """Apply the 1-D shift along axis 0; position 0 mixes with ``x_prev`` (zeros by default)."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise EmptySequenceError("cannot shift an empty sequence")
    prev = np.empty_like(X)
    prev[0] = 0.0 if x_prev is None else x_prev
    prev[1:] = X[:-1]
    return mu * X + (1.0 - mu) * prev


def _shifted(X: Tensor, axis: int) -> Tensor:
    """``out[..., i, ...] = X[..., i-1, ...]`` with zero fill at index 0."""
    out = np.zeros_like(X)
    src = [slice(None)] * X.ndim
    dst = [slice(None)] * X.ndim
    src[axis] = slice(None, -1)
    dst[axis] = slice(1, None)
    out[tuple(dst)] = X[tuple(src)]
    return out


def _check_channels(X, C, *mus):
    for mu in mus:
        if np.shape(mu) not in ((), (C,)):
            raise DimensionError(f"mixing coefficient shape {np.shape(mu)} does not match {C} channels")


def token_shift_2d(X: Tensor, mu_h: Tensor, mu_v: Tensor) -> Tensor:
    """Horizontal pass along the first spatial axis, then vertical along the second."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise DimensionError(f"expected H x W x C, got {X.shape}")
    _check_channels(X, X.shape[-1], mu_h, mu_v)
    xh = mu_h * X + (1.0 - mu_h) * _shifted(X, 0)
    return mu_v * xh + (1.0 - mu_v) * _shifted(xh, 1)


def token_shift_quad(X: Tensor, mu_x: Tensor, mu_y: Tensor, mu_z: Tensor, mu_w: Tensor) -> Tensor:
    """Centre term plus one backward neighbour along each of three grid axes.

    Coefficients are used as given; nothing forces them to sum to one.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise DimensionError(f"expected I x J x K x C, got {X.shape}")
    _check_channels(X, X.shape[-1], mu_x, mu_y, mu_z, mu_w)
    return mu_x * X + mu_y * _shifted(X, 0) + mu_z * _shifted(X, 1) + mu_w * _shifted(X, 2)


@dataclass
class ShiftKernel:
    """Per-channel 3x3 weights; ``weights[p+1, q+1, c]`` scales the neighbour at offset (p, q)."""

    weights: Tensor

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 3 or self.weights.shape[:2] != (3, 3):
            raise DimensionError(f"shift kernel must be 3 x 3 x C, got {self.weights.shape}")

    @classmethod
    def identity(cls, channels: int) -> "ShiftKernel":
        w = np.zeros((3, 3, channels))
        w[1, 1] = 1.0
        return cls(w)

    @classmethod
    def from_2d_shift(cls, mu_h: Tensor, mu_v: Tensor, channels: int) -> "ShiftKernel":
        """Kernel equal to :func:`token_shift_2d` (the two passes compose to four taps)."""
        mu_h = np.broadcast_to(np.asarray(mu_h, dtype=np.float64), (channels,))
        mu_v = np.broadcast_to(np.asarray(mu_v, dtype=np.float64), (channels,))
        w = np.zeros((3, 3, channels))
        w[1, 1] = mu_h * mu_v
        w[0, 1] = (1 - mu_h) * mu_v
        w[1, 0] = mu_h * (1 - mu_v)
        w[0, 0] = (1 - mu_h) * (1 - mu_v)
        return cls(w)


def omni_shift(X: Tensor, kernel: ShiftKernel) -> Tensor:
    """Depthwise 3x3 neighbourhood sum with zero padding."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[-1] != kernel.weights.shape[-1]:
        raise DimensionError(f"image {X.shape} does not match kernel {kernel.weights.shape}")
    H, W, _ = X.shape
    padded = np.pad(X, ((1, 1), (1, 1), (0, 0)))
    out = np.zeros_like(X)
    for p in (-1, 0, 1):
        for q in (-1, 0, 1):
            out += kernel.weights[p + 1, q + 1] * padded[1 + p : 1 + p + H, 1 + q : 1 + q + W]
    return out


# -- normalisation ------------------------------------------------------------


def layer_norm(x: Tensor) -> Tensor:
    """Per-position mean/variance normalisation without learnable scale."""
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    return xc / np.sqrt(var + LN_EPS)


def layer_norm_backward(x: Tensor, g: Tensor) -> Tensor:
    d = x.shape[-1]
    xc = x - x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return inv * (g - g.mean(axis=-1, keepdims=True) - xhat * np.sum(g * xhat, axis=-1, keepdims=True) / d)


# -- parameters ---------------------------------------------------------------


@dataclass
class BlockParams:
    """Learnable tensors of one block.

    ``Wk_c`` maps d -> hidden and ``Wv_c`` hidden -> d; hidden defaults to d.
    ``dynamic`` switches on input-dependent decay; ``matrix_state`` swaps the
    per-channel accumulators for an outer-product state.
    """

    mu_time: Tensor
    mu_chan: Tensor
    w: Tensor
    Wr_t: Tensor
    Wk_t: Tensor
    Wv_t: Tensor
    Wr_c: Tensor
    Wk_c: Tensor
    Wv_c: Tensor
    dynamic: DynamicDecayParams | None = None
    matrix_state: bool = field(default=False, metadata={"structural": True})

    @property
    def dim(self) -> int:
        return self.w.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("dynamic", "matrix_state")}
        if self.dynamic is not None:
            out.update({f"dyn_{f.name}": getattr(self.dynamic, f.name) for f in fields(self.dynamic)})
        return out

    @classmethod
    def zeros(cls, d: int, hidden: int | None = None, mu: float = 0.5) -> "BlockParams":
        h = d if hidden is None else hidden
        return cls(
            mu_time=np.full(d, mu), mu_chan=np.full(d, mu), w=np.zeros(d),
            Wr_t=np.zeros((d, d)), Wk_t=np.zeros((d, d)), Wv_t=np.zeros((d, d)),
            Wr_c=np.zeros((d, d)), Wk_c=np.zeros((h, d)), Wv_c=np.zeros((d, h)),
        )


# -- channel mixing -----------------------------------------------------------


def channel_mix(x: Tensor, Wr: Tensor, Wk: Tensor, Wv: Tensor) -> Tensor:
    """``sigmoid(Wr x) * (Wv relu(Wk x)^2)`` for every position in ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if Wr.shape[1] != x.shape[-1] or Wk.shape[1] != x.shape[-1] or Wv.shape[1] != Wk.shape[0]:
        raise DimensionError(f"channel-mix weights {Wr.shape}, {Wk.shape}, {Wv.shape} vs input {x.shape}")
    return sigmoid(x @ Wr.T) * (squared_relu(x @ Wk.T) @ Wv.T)


# -- time mixing ----------------------------------------------------------------


@dataclass
class TimeMixState:
    """Recurrent memory of one time-mix layer."""

    wkv: WkvState | MatrixState
    w_prev: Tensor | None = None
    alpha_prev: Tensor | None = None

    def copy(self) -> "TimeMixState":
        return TimeMixState(
            self.wkv.copy(),
            None if self.w_prev is None else self.w_prev.copy(),
            None if self.alpha_prev is None else self.alpha_prev.copy(),
        )

    @property
    def nbytes(self) -> int:
        extra = sum(x.nbytes for x in (self.w_prev, self.alpha_prev) if x is not None)
        return self.wkv.nbytes + extra


def fresh_time_mix_state(params: BlockParams, batch: tuple = ()) -> TimeMixState:
    d = params.dim
    if params.matrix_state:
        wkv = MatrixState.fresh(d, d, batch)
    else:
        wkv = WkvState.fresh(batch + (d,))
    if params.dynamic is None:
        return TimeMixState(wkv)
    w0 = np.broadcast_to(params.w, batch + (d,)).copy()
    return TimeMixState(wkv, w0, np.exp(-w0))


def _rkv(x, params):
    return sigmoid(x @ params.Wr_t.T), x @ params.Wk_t.T, x @ params.Wv_t.T


def time_mix_step(x_t: Tensor, params: BlockParams, state: TimeMixState):
    """One token through the time-mix path; returns ``(new_state, output)``."""
    r, k, v = _rkv(np.asarray(x_t, dtype=np.float64), params)
    w_t, alpha_t = params.w, np.exp(-params.w)
    w_prev, alpha_prev = state.w_prev, state.alpha_prev
    if params.dynamic is not None:
        w_t, alpha_t = dynamic_decay_update(x_t, w_prev, alpha_prev, params.dynamic)
        w_prev, alpha_prev = w_t, alpha_t
    if params.matrix_state:
        wkv, out = matrix_state_step(state.wkv, k, v, r, alpha_t)
    else:
        wkv, y = wkv_sequential_step(state.wkv, k, v, w_t)
        out = r * y
    return TimeMixState(wkv, w_prev, alpha_prev), out


def time_mix(x_shifted: Tensor, params: BlockParams, state: TimeMixState | WkvState | None = None) -> Tensor:
    """Receptance-gated WKV over a whole sequence of already shifted inputs.

    Without ``state`` the static-decay vector path uses the parallel scan.
    Passing a state (or using matrix / dynamic modes) walks the recurrence
    position by position starting from that state, which is left untouched.
    """
    x = np.asarray(x_shifted, dtype=np.float64)
    if x.shape[0] == 0:
        raise EmptySequenceError("time mixing needs at least one position")
    if x.shape[-1] != params.dim:
        raise DimensionError(f"input has {x.shape[-1]} channels, block expects {params.dim}")
    if isinstance(state, WkvState):
        state = TimeMixState(state)
    if state is None and not params.matrix_state:
        r, k, v = _rkv(x, params)
        if params.dynamic is None:
            return r * wkv_parallel(k, v, params.w)
        W = np.empty_like(k)
        st = fresh_time_mix_state(params, x.shape[1:-1])
        w_prev, alpha_prev = st.w_prev, st.alpha_prev
        for t in range(x.shape[0]):
            w_prev, alpha_prev = dynamic_decay_update(x[t], w_prev, alpha_prev, params.dynamic)
            W[t] = w_prev
        return r * wkv_parallel_dynamic(k, v, W)
    st = fresh_time_mix_state(params, x.shape[1:-1]) if state is None else state.copy()
    out = np.empty_like(x)
    for t in range(x.shape[0]):
        st, out[t] = time_mix_step(x[t], params, st)
    return out


# -- block ----------------------------------------------------------------------


@dataclass
class BlockState:
    """Per-layer inference memory: recurrence plus the two shift caches."""

    time: TimeMixState
    prev_x: Tensor
    prev_tm: Tensor

    def copy(self) -> "BlockState":
        return BlockState(self.time.copy(), self.prev_x.copy(), self.prev_tm.copy())

    @property
    def nbytes(self) -> int:
        return self.time.nbytes + self.prev_x.nbytes + self.prev_tm.nbytes


def fresh_block_state(params: BlockParams, batch: tuple = ()) -> BlockState:
    d = params.dim
    return BlockState(fresh_time_mix_state(params, batch), np.zeros(batch + (d,)), np.zeros(batch + (d,)))


def _norm(x, normalize):
    return layer_norm(x) if normalize else x


def rwkv_block(x: Tensor, params: BlockParams, normalize: bool = False) -> Tensor:
    """Shift, time-mix, channel-mix, and add the shifted input back.

    The time-mix output is itself token-shifted with ``mu_chan`` before the
    channel mix. With ``normalize`` each sub-block sees a normalised input.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise EmptySequenceError("block input is empty")
    shifted = token_shift(x, params.mu_time)
    tm = time_mix(_norm(shifted, normalize), params)
    cm = channel_mix(_norm(token_shift(tm, params.mu_chan), normalize), params.Wr_c, params.Wk_c, params.Wv_c)
    return shifted + cm


def rwkv_block_step(x_t: Tensor, params: BlockParams, state: BlockState, normalize: bool = False):
    """Single-token form of :func:`rwkv_block`; returns ``(new_state, output)``."""
    x_t = np.asarray(x_t, dtype=np.float64)
    shifted = token_shift_1d(x_t, state.prev_x, params.mu_time)
    time_state, tm = time_mix_step(_norm(shifted, normalize), params, state.time)
    c_in = token_shift_1d(tm, state.prev_tm, params.mu_chan)
    cm = channel_mix(_norm(c_in, normalize), params.Wr_c, params.Wk_c, params.Wv_c)
    return BlockState(time_state, x_t, tm), shifted + cm


__all__ = [
    "BlockParams",
    "BlockState",
    "ShiftKernel",
    "TimeMixState",
    "channel_mix",
    "fresh_block_state",
    "fresh_time_mix_state",
    "layer_norm",
    "layer_norm_backward",
    "omni_shift",
    "rwkv_block",
    "rwkv_block_step",
    "time_mix",
    "time_mix_step",
    "token_shift",
    "token_shift_1d",
    "token_shift_2d",
    "token_shift_quad",
]
