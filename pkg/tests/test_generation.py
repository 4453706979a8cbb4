import math

import numpy as np
import pytest

from rwkv_forge.errors import ParameterError, VocabularyError
from rwkv_forge.generation import EMPTY_PROMPT_TOKEN, SamplerConfig, generate, latency_profile, prime, sample_token
from rwkv_forge.model import ModelConfig, forward_parallel, forward_step, fresh_state, init_model
from rwkv_forge.numerics import make_rng, softmax


def noisy_model(rng, **cfg):
    model = init_model(ModelConfig(dim=8, n_layers=2, seed=int(rng.integers(1 << 30)), **cfg))
    for t in model.named_parameters().values():
        t += rng.normal(0, 0.5, t.shape)
    return model


def parallel_greedy(model, prompt, length):
    seq = list(prompt)
    for _ in range(length):
        seq.append(int(np.argmax(forward_parallel(model, seq)[-1])))
    return seq[len(prompt):]


def within_3_sigma(counts, p):
    n = counts.sum()
    return np.all(np.abs(counts - n * p) <= 3 * np.sqrt(n * p * (1 - p)))


class TestSampleToken:
    def test_greedy(self, rng):
        lg = rng.normal(size=20)
        lg[13] = 50.0
        assert sample_token(lg, SamplerConfig(), rng) == 13

    def test_greedy_tie_lowest(self, rng):
        assert sample_token(np.array([0.0, 2.0, 2.0]), SamplerConfig(), rng) == 1

    def test_cold_temperature_is_greedy(self, rng):
        lg = rng.normal(size=30)
        cold = SamplerConfig(mode="temperature", temperature=1e-4)
        assert {sample_token(lg, cold, rng) for _ in range(200)} == {int(np.argmax(lg))}

    def test_full_top_k_matches_softmax(self):
        lg = np.array([1.0, 0.2, -0.5, 2.0, 0.0, -1.5, 0.7, 1.1])
        gen = make_rng(7)
        draws = [sample_token(lg, SamplerConfig(mode="top_k", k=8), gen) for _ in range(100_000)]
        assert within_3_sigma(np.bincount(draws, minlength=8), softmax(lg))

    def test_truncated_top_k(self):
        lg = np.array([1.0, 0.2, -0.5, 2.0, 0.0, -1.5, 0.7, 1.1])
        gen = make_rng(8)
        draws = np.bincount([sample_token(lg, SamplerConfig(mode="top_k", k=3), gen) for _ in range(30_000)], minlength=8)
        top = [3, 7, 0]
        assert draws.sum() == draws[top].sum()
        assert within_3_sigma(draws[top], softmax(lg[top]))

    def test_temperature_scales(self):
        lg = np.array([0.0, 1.0, 2.0])
        gen = make_rng(9)
        draws = [sample_token(lg, SamplerConfig(mode="temperature", temperature=2.0), gen) for _ in range(30_000)]
        assert within_3_sigma(np.bincount(draws, minlength=3), softmax(lg / 2.0))

    def test_validation(self):
        for bad in (dict(mode="nucleus"), dict(temperature=0.0), dict(k=0)):
            with pytest.raises(ParameterError):
                SamplerConfig(**bad).validate()


class TestGenerate:
    def test_length_zero(self, rng):
        model = noisy_model(rng)
        assert generate(model, [1, 2, 3], 0) == []
        state, logits = prime(model, [1, 2, 3])
        assert state.position == 3 and logits.shape == (256,)

    def test_empty_prompt_feeds_placeholder(self, rng):
        model = noisy_model(rng)
        assert generate(model, [], 5) == generate(model, [EMPTY_PROMPT_TOKEN], 5)

    def test_matches_parallel_recompute(self, rng):
        for extra in (dict(), dict(use_matrix_state=True), dict(use_dynamic_decay=True)):
            model = noisy_model(rng, **extra)
            prompt = rng.integers(0, 256, 4).tolist()
            assert generate(model, prompt, 40) == parallel_greedy(model, prompt, 40)

    def test_greedy_is_pure(self, rng):
        model = noisy_model(rng)
        assert generate(model, [5, 6], 30) == generate(model, [5, 6], 30)

    def test_seeded_sampling(self, rng):
        model = noisy_model(rng)
        a = generate(model, [5], 30, SamplerConfig(mode="temperature", seed=4))
        b = generate(model, [5], 30, SamplerConfig(mode="temperature", seed=4))
        c = generate(model, [5], 30, SamplerConfig(mode="temperature", seed=5))
        assert a == b and a != c

    def test_prime_continues_state(self, rng):
        model = noisy_model(rng)
        s, _ = prime(model, [1, 2])
        s, lg = prime(model, [3], s)
        ref = fresh_state(model)
        for t in (1, 2, 3):
            ref, ref_lg = forward_step(model, ref, t)
        assert np.array_equal(lg, ref_lg)

    def test_errors(self, rng):
        model = noisy_model(rng)
        with pytest.raises(VocabularyError):
            generate(model, [999], 3)
        with pytest.raises(ParameterError):
            generate(model, [1], -1)


class TestLatency:
    def test_profile_shape_and_tokens(self, rng):
        model = noisy_model(rng)
        a = latency_profile(model, 150)
        b = latency_profile(model, 150)
        assert a.seconds.shape == (150,) and np.all(a.seconds > 0)
        assert a.tokens == b.tokens == generate(model, [10], 150)
        assert a.window == 100 and math.isfinite(a.ratio)

    def test_too_short(self, rng):
        with pytest.raises(ParameterError):
            latency_profile(noisy_model(rng), 105)
