"""Autoregressive sampling on the recurrent path."""

from __future__ import annotations

import gc
import time
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .model import InferenceState, Model, forward_step, fresh_state
from .numerics import Tensor, make_rng, softmax

MODES = ("greedy", "temperature", "top_k")

# Fed when the prompt is empty so the first distribution has an input.
EMPTY_PROMPT_TOKEN = 0


@dataclass
class SamplerConfig:
    mode: str = "greedy"
    temperature: float = 1.0
    k: int = 40
    seed: int = 0

    def validate(self) -> "SamplerConfig":
        if self.mode not in MODES:
            raise ParameterError(f"sampler mode must be one of {MODES}, got {self.mode!r}")
        if not self.temperature > 0:
            raise ParameterError("temperature must be positive")
        if self.k < 1:
            raise ParameterError("top-k needs k >= 1")
        return self


def sample_token(logits: Tensor, sampler: SamplerConfig, rng: np.random.Generator) -> int:
    logits = np.asarray(logits, dtype=np.float64)
    if sampler.mode == "greedy":
        return int(np.argmax(logits))
    scaled = logits / sampler.temperature
    if sampler.mode == "top_k" and sampler.k < scaled.size:
        # Stable sort keeps lower indices first among equal logits.
        keep = np.argsort(-scaled, kind="stable")[: sampler.k]
        probs = softmax(scaled[keep])
        return int(keep[rng.choice(keep.size, p=probs)])
    return int(rng.choice(scaled.size, p=softmax(scaled)))


def prime(model: Model, prompt_tokens, state: InferenceState | None = None) -> tuple[InferenceState, Tensor]:
    """Step through the prompt; returns the state and the logits after its last token."""
    state = fresh_state(model) if state is None else state
    toks = list(prompt_tokens) or [EMPTY_PROMPT_TOKEN]
    logits = None
    for tok in toks:
        state, logits = forward_step(model, state, tok)
    return state, logits


def generate(model: Model, prompt_tokens, length: int, sampler: SamplerConfig | None = None) -> list[int]:
    """Prime on the prompt, then emit exactly ``length`` tokens."""
    if length < 0:
        raise ParameterError("length must be non-negative")
    sampler = (sampler or SamplerConfig()).validate()
    rng = make_rng(sampler.seed)
    state, logits = prime(model, prompt_tokens)
    out: list[int] = []
    for i in range(length):
        tok = sample_token(logits, sampler, rng)
        out.append(tok)
        if i + 1 < length:
            state, logits = forward_step(model, state, tok)
    return out


@dataclass
class LatencyProfile:
    seconds: np.ndarray
    tokens: list[int]
    head_mean: float
    tail_mean: float
    window: int

    @property
    def ratio(self) -> float:
        return self.tail_mean / self.head_mean


def latency_profile(
    model: Model,
    length: int,
    sampler: SamplerConfig | None = None,
    prompt_tokens=(10,),
    window: int = 100,
    head_start: int = 10,
) -> LatencyProfile:
    """Time each generated token (one ``forward_step`` plus sampling).

    The head window starts at position ``head_start``; the tail window is the
    last ``window`` tokens. Garbage collection is paused while timing.
    """
    if window < 1 or length < head_start + window:
        raise ParameterError(f"need length >= head_start + window = {head_start + window}, got {length}")
    sampler = (sampler or SamplerConfig()).validate()
    rng = make_rng(sampler.seed)
    state, logits = prime(model, prompt_tokens)
    times = np.empty(length)
    tokens = []
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for i in range(length):
            t0 = time.perf_counter()
            tok = sample_token(logits, sampler, rng)
            state, logits = forward_step(model, state, tok)
            times[i] = time.perf_counter() - t0
            tokens.append(tok)
    finally:
        if gc_was_enabled:
            gc.enable()
    head = times[head_start : head_start + window]
    tail = times[length - window :]
    return LatencyProfile(times, tokens, float(head.mean()), float(tail.mean()), window)
