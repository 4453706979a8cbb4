"""Corpus handling, objectives, optimiser and the training loop."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, TextIO

import numpy as np

from .errors import NumericError, ParameterError, VocabularyError
from .gradients import loss_and_grads
from .model import Model, forward_chunk, fresh_state
from .numerics import LN2, Tensor, log2_softmax, log_softmax, make_rng

log = logging.getLogger(__name__)

def byte_tokenize(text: bytes | bytearray | str) -> np.ndarray:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def byte_detokenize(tokens) -> bytes:
    return bytes(np.asarray(tokens, dtype=np.int64).astype(np.uint8).tolist())


def read_corpus(path: str | Path) -> np.ndarray:
    return byte_tokenize(Path(path).read_bytes())


def cross_entropy(logits: Tensor, targets) -> float:
    """Mean negative log-likelihood in nats per position."""
    logits = np.asarray(logits, dtype=np.float64)
    tgt = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if tgt.shape != logits.shape[:-1]:
        raise ParameterError(f"targets {tgt.shape} do not match logits {logits.shape}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= V):
        raise VocabularyError(f"target outside [0, {V})")
    lp = log_softmax(logits)
    return float(-np.take_along_axis(lp, tgt[..., None], axis=-1).mean())


def perplexity(model: Model, corpus_tokens, chunk_length: int = 256) -> float:
    """Perplexity of the next-token predictions over the whole corpus.

    The corpus is processed in chunks; the recurrent state carries across
    chunk boundaries, so every prediction sees its full history. Computed as
    ``2 ** bits`` so a uniform model scores exactly its vocabulary size.
    """
    return 2.0 ** mean_bits(model, corpus_tokens, chunk_length)


def mean_bits(model: Model, corpus_tokens, chunk_length: int = 256) -> float:
    """Mean next-token negative log2-likelihood."""
    toks = np.asarray(corpus_tokens, dtype=np.int64)
    if toks.size < 2:
        raise ParameterError("need at least two tokens to score")
    inputs, targets = toks[:-1], toks[1:]
    state = fresh_state(model)
    total = 0.0
    for start in range(0, inputs.size, chunk_length):
        stop = start + chunk_length
        state, logits = forward_chunk(model, state, inputs[start:stop])
        lp = log2_softmax(logits)
        total -= float(np.take_along_axis(lp, targets[start:stop, None], axis=-1).sum())
    return total / inputs.size


def mean_nll(model: Model, corpus_tokens, chunk_length: int = 256) -> float:
    """Mean next-token negative log-likelihood in nats."""
    return mean_bits(model, corpus_tokens, chunk_length) * LN2


def bits_per_char(model: Model, corpus_tokens, chunk_length: int = 256) -> float:
    return mean_bits(model, corpus_tokens, chunk_length)


def unigram_baseline(corpus, heldout=None) -> float:
    """Add-one smoothed byte unigram model, in bits.

    With only ``corpus`` this is the entropy of the smoothed distribution;
    given ``heldout`` it is the cross-entropy of the held-out bytes under the
    distribution fitted on ``corpus``.
    """
    toks = np.asarray(corpus, dtype=np.int64)
    counts = np.bincount(toks, minlength=256).astype(np.float64) + 1.0
    p = counts / counts.sum()
    if heldout is None:
        return float(-np.sum(p * np.log2(p)))
    held = np.asarray(heldout, dtype=np.int64)
    return float(-np.mean(np.log2(p[held])))


@dataclass
class TrainConfig:
    chunk_length: int = 128
    batch_size: int = 8
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_steps: int = 1000
    eval_interval: int = 100
    gradient_clip_norm: float = 1.0
    seed: int = 0

    def validate(self) -> "TrainConfig":
        for f in fields(self):
            if f.name != "seed" and not getattr(self, f.name) > 0:
                raise ParameterError(f"train.{f.name} must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ParameterError("beta1 and beta2 must lie in (0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamMoments:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamMoments":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def adam_step(params: dict, grads: dict, moments: AdamMoments, t: int, config: TrainConfig):
    """Clip, then apply one bias-corrected Adam update in place.

    Returns ``(params, moments)`` for convenience; both are updated in place.
    """
    if t < 1:
        raise ParameterError("Adam step counter starts at 1")
    if params.keys() != grads.keys():
        raise ParameterError("parameter and gradient names differ")
    clip_by_global_norm(grads, config.gradient_clip_norm)
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ParameterError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = moments.m[name]
        v = moments.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
    return params, moments


@dataclass
class MetricRow:
    step: int
    loss_nats: float
    bpc: float
    tokens_per_sec: float

    def line(self) -> str:
        return f"{self.step},{self.loss_nats:.6f},{self.bpc:.6f},{self.tokens_per_sec:.1f}"


METRICS_HEADER = "step,loss_nats,bpc,tokens_per_sec"


def sample_batch(tokens: np.ndarray, T: int, B: int, rng: np.random.Generator):
    starts = rng.integers(0, tokens.size - T, size=B)
    idx = starts[None, :] + np.arange(T + 1)[:, None]
    chunk = tokens[idx]
    return chunk[:-1], chunk[1:]


def train(
    model: Model,
    corpus,
    config: TrainConfig,
    *,
    metrics_out: TextIO | None = None,
    checkpoint_path: str | Path | None = None,
    on_eval: Callable[[MetricRow], None] | None = None,
) -> tuple[Model, list[MetricRow]]:
    """Chunked next-token training with Adam; updates ``model`` in place.

    Each step draws ``batch_size`` windows of ``chunk_length + 1`` bytes at
    seeded random offsets. Every ``eval_interval`` steps the mean training
    loss since the previous report is logged. A non-finite loss restores the
    last good parameters, writes them to ``checkpoint_path`` if given, and
    raises :class:`NumericError`.
    """
    config.validate()
    toks = np.asarray(corpus, dtype=np.int64)
    if toks.size < config.chunk_length + 1:
        raise ParameterError(f"corpus has {toks.size} tokens, need at least chunk_length + 1")
    rng = make_rng(config.seed)
    params = model.named_parameters()
    moments = AdamMoments.zeros_like(params)
    history: list[MetricRow] = []
    if metrics_out is not None:
        print(METRICS_HEADER, file=metrics_out, flush=True)

    last_good = copy.deepcopy(params)
    window_loss, window_steps, window_tokens = 0.0, 0, 0
    t0 = time.perf_counter()
    for step in range(1, config.max_steps + 1):
        inputs, targets = sample_batch(toks, config.chunk_length, config.batch_size, rng)
        loss, grads = loss_and_grads(model, inputs, targets)
        try:
            if not math.isfinite(loss):
                raise NumericError(f"loss became non-finite at step {step}")
            adam_step(params, grads, moments, step, config)
        except NumericError:
            for name, p in params.items():
                p[...] = last_good[name]
            if checkpoint_path is not None:
                from .checkpoint import save_checkpoint

                save_checkpoint(model, checkpoint_path)
            log.error("training diverged at step %d; restored last good parameters", step)
            raise
        window_loss += loss
        window_steps += 1
        window_tokens += inputs.size
        if step % config.eval_interval == 0 or step == config.max_steps:
            elapsed = max(time.perf_counter() - t0, 1e-12)
            mean = window_loss / window_steps
            row = MetricRow(step, mean, mean / LN2, window_tokens / elapsed)
            history.append(row)
            if metrics_out is not None:
                print(row.line(), file=metrics_out, flush=True)
            if on_eval is not None:
                on_eval(row)
            log.info("step %d loss %.4f bpc %.4f", step, mean, mean / LN2)
            for name, p in params.items():
                last_good[name][...] = p
            window_loss, window_steps, window_tokens = 0.0, 0, 0
            t0 = time.perf_counter()
    return model, history
