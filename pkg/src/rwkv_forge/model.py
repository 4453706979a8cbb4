"""Byte-level RWKV language model with parallel and recurrent execution paths."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import DimensionError, EmptySequenceError, ParameterError, VocabularyError
from .mixing import (
    BlockParams,
    BlockState,
    TimeMixState,
    channel_mix,
    fresh_block_state,
    layer_norm,
    rwkv_block,
    rwkv_block_step,
    token_shift,
)
from .numerics import Tensor, make_rng, sigmoid
from .wkv import DynamicDecayParams, wkv_parallel_from

INIT_STD = 0.02
DECAY_RAMP = (0.1, 2.0)
MU_INIT = 0.5


@dataclass
class ModelConfig:
    vocab_size: int = 256
    dim: int = 32
    n_layers: int = 2
    use_matrix_state: bool = False
    use_dynamic_decay: bool = False
    normalize: bool = True
    tie_embeddings: bool = False
    ffn_expansion: int = 1
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.vocab_size < 2:
            raise ParameterError("vocab_size must be at least 2")
        if self.dim < 1 or self.n_layers < 1 or self.ffn_expansion < 1:
            raise ParameterError("dim, n_layers and ffn_expansion must be positive")
        return self

    @property
    def hidden(self) -> int:
        return self.dim * self.ffn_expansion

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data).validate()


@dataclass
class Model:
    config: ModelConfig
    embedding: Tensor
    blocks: list[BlockParams]
    head: Tensor | None = None

    @property
    def head_matrix(self) -> Tensor:
        return self.embedding.T if self.config.tie_embeddings else self.head

    @property
    def is_plain(self) -> bool:
        """Vector state with static decay: the configuration that supports training."""
        return not (self.config.use_matrix_state or self.config.use_dynamic_decay)

    def named_parameters(self) -> dict[str, Tensor]:
        """Live references to every learnable tensor, in checkpoint order."""
        out = {"embedding": self.embedding}
        for i, blk in enumerate(self.blocks):
            for name, t in blk.tensors().items():
                out[f"blocks.{i}.{name}"] = t
        if not self.config.tie_embeddings:
            out["head"] = self.head
        return out

    def num_parameters(self) -> int:
        return sum(t.size for t in self.named_parameters().values())


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count, summed from the tensor shapes."""
    V, d, h, L = config.vocab_size, config.dim, config.hidden, config.n_layers
    per_block = 3 * d + 4 * d * d + 2 * h * d
    if config.use_dynamic_decay:
        per_block += 2 * d * d + 4 * d
    head = 0 if config.tie_embeddings else d * V
    return V * d + L * per_block + head


def decay_ramp(d: int) -> Tensor:
    return np.linspace(DECAY_RAMP[0], DECAY_RAMP[1], d) if d > 1 else np.array([DECAY_RAMP[0]])


def init_model(config: ModelConfig, rng: np.random.Generator | None = None) -> Model:
    """Draw a fresh model.

    Embedding and head entries are N(0, 0.02^2). Projections in block ``l``
    (0-based) use standard deviation ``0.02 / sqrt(l + 1)``. Decay rates
    ramp linearly from 0.1 to 2.0 across channels and every shift mix starts
    at 0.5. With dynamic decay, the affine biases are chosen so the first
    step reproduces the static ramp.
    """
    config.validate()
    rng = make_rng(config.seed) if rng is None else rng
    V, d, h = config.vocab_size, config.dim, config.hidden
    embedding = rng.normal(0.0, INIT_STD, (V, d))
    blocks = []
    for layer in range(config.n_layers):
        std = INIT_STD / np.sqrt(layer + 1)

        def draw(*shape):
            return rng.normal(0.0, std, shape)

        w = decay_ramp(d)
        dynamic = None
        if config.use_dynamic_decay:
            alpha0 = np.exp(-w)
            dynamic = DynamicDecayParams(
                A_w=draw(d, d), u_w=np.zeros(d), b_w=np.log(np.expm1(w)),
                A_g=draw(d, d), u_g=np.zeros(d), b_g=np.log(alpha0 / (1.0 - alpha0)),
            )
        blocks.append(
            BlockParams(
                mu_time=np.full(d, MU_INIT), mu_chan=np.full(d, MU_INIT), w=w,
                Wr_t=draw(d, d), Wk_t=draw(d, d), Wv_t=draw(d, d),
                Wr_c=draw(d, d), Wk_c=draw(h, d), Wv_c=draw(d, h),
                dynamic=dynamic, matrix_state=config.use_matrix_state,
            )
        )
    head = None if config.tie_embeddings else rng.normal(0.0, INIT_STD, (d, V))
    return Model(config, embedding, blocks, head)


def _check_tokens(model: Model, tokens) -> np.ndarray:
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.size == 0:
        raise EmptySequenceError("token sequence is empty")
    if toks.min() < 0 or toks.max() >= model.config.vocab_size:
        raise VocabularyError(f"token outside [0, {model.config.vocab_size})")
    return toks


def _logits(model: Model, x: Tensor) -> Tensor:
    if model.config.normalize:
        x = layer_norm(x)
    return x @ model.head_matrix


def forward_parallel(model: Model, tokens) -> Tensor:
    """Logits for every position of ``tokens`` (shape ``(T,)`` or ``(T, B)``)."""
    toks = _check_tokens(model, tokens)
    x = model.embedding[toks]
    for blk in model.blocks:
        x = rwkv_block(x, blk, model.config.normalize)
    return _logits(model, x)


@dataclass
class InferenceState:
    """Everything the recurrent path needs to continue a stream."""

    layers: list[BlockState]
    position: int = 0

    def copy(self) -> "InferenceState":
        return InferenceState([s.copy() for s in self.layers], self.position)

    @property
    def nbytes(self) -> int:
        # 8 bytes for the position counter.
        return sum(s.nbytes for s in self.layers) + 8


def fresh_state(model: Model, batch: tuple = ()) -> InferenceState:
    return InferenceState([fresh_block_state(b, batch) for b in model.blocks])


def forward_step(model: Model, state: InferenceState, token) -> tuple[InferenceState, Tensor]:
    """Consume one token; returns the new state and next-token logits.

    Work per call is O(L d^2), independent of ``state.position``.
    """
    tok = int(token)
    if not 0 <= tok < model.config.vocab_size:
        raise VocabularyError(f"token {tok} outside [0, {model.config.vocab_size})")
    x = model.embedding[tok]
    layers = []
    for blk, st in zip(model.blocks, state.layers):
        st, x = rwkv_block_step(x, blk, st, model.config.normalize)
        layers.append(st)
    return InferenceState(layers, state.position + 1), _logits(model, x)


def forward_chunk(model: Model, state: InferenceState, tokens) -> tuple[InferenceState, Tensor]:
    """Logits for a chunk that continues ``state``; returns the state after the chunk.

    Plain models run the parallel scan seeded with the carried state; matrix
    or dynamic-decay models step through the chunk.
    """
    toks = _check_tokens(model, tokens)
    if not model.is_plain:
        rows = []
        for t in toks:
            state, lg = forward_step(model, state, t)
            rows.append(lg)
        return state, np.stack(rows)
    norm = model.config.normalize
    x = model.embedding[toks]
    layers = []
    for blk, st in zip(model.blocks, state.layers):
        shifted = token_shift(x, blk.mu_time, st.prev_x)
        n1 = layer_norm(shifted) if norm else shifted
        r = sigmoid(n1 @ blk.Wr_t.T)
        y, wkv_state = wkv_parallel_from(st.time.wkv, n1 @ blk.Wk_t.T, n1 @ blk.Wv_t.T, blk.w)
        tm = r * y
        c_in = token_shift(tm, blk.mu_chan, st.prev_tm)
        cm = channel_mix(layer_norm(c_in) if norm else c_in, blk.Wr_c, blk.Wk_c, blk.Wv_c)
        layers.append(BlockState(TimeMixState(wkv_state), x[-1].copy(), tm[-1].copy()))
        x = shifted + cm
    return InferenceState(layers, state.position + len(toks)), _logits(model, x)


def predict_class(feature: Tensor, W: Tensor, b: Tensor) -> int:
    """``argmax(W^T feature + b)`` with ties going to the lowest index."""
    feature = np.asarray(feature, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != feature.shape[-1] or W.shape[1] != b.shape[-1]:
        raise DimensionError(f"classifier shapes disagree: feature {feature.shape}, W {W.shape}, b {b.shape}")
    return int(np.argmax(feature @ W + b))


__all__ = [
    "InferenceState",
    "Model",
    "ModelConfig",
    "expected_parameter_count",
    "forward_chunk",
    "forward_parallel",
    "forward_step",
    "fresh_state",
    "init_model",
    "predict_class",
]
