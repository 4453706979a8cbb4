import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rwkv_forge.errors import DimensionError, EmptySequenceError, NumericError, ParameterError
from rwkv_forge.numerics import finite_diff_grad, make_rng, softplus
from rwkv_forge.wkv import (
    DynamicDecayParams,
    MatrixState,
    WkvState,
    dynamic_decay_update,
    literal_recurrence,
    matrix_state_step,
    multi_directional_wkv,
    re_wkv,
    wkv_bidirectional,
    wkv_parallel,
    wkv_parallel_backward,
    wkv_parallel_dynamic,
    wkv_parallel_from,
    wkv_sequential,
    wkv_sequential_step,
)


def mp_wkv(K, V, w, causal=True):
    """Direct summation at 40 digits."""
    T, d = K.shape
    out = np.empty((T, d))
    with mpmath.workdps(40):
        for t in range(T):
            for c in range(d):
                idx = range(t + 1) if causal else range(T)
                wts = [mpmath.exp(mpmath.mpf(K[i, c]) - abs(t - i) * mpmath.mpf(w[c])) for i in idx]
                num = mpmath.fsum(wt * mpmath.mpf(V[i, c]) for wt, i in zip(wts, idx))
                out[t, c] = float(num / mpmath.fsum(wts))
    return out


def case(rng, T=None, d=None, k=5.0):
    T = T or int(rng.integers(1, 65))
    d = d or int(rng.integers(1, 9))
    return rng.uniform(-k, k, (T, d)), rng.normal(size=(T, d)), rng.uniform(0, 3, d)


class TestParallel:
    def test_single_position(self, rng):
        K, V = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
        assert np.allclose(wkv_parallel(K, V, np.ones(3)), V, atol=1e-15)

    def test_unweighted_mean(self):
        assert abs(wkv_parallel([[0.0], [0.0]], [[1.0], [3.0]], [0.0])[1, 0] - 2.0) <= 1e-15

    def test_ln2_decay(self):
        ref = float((Fraction(1, 2) * 1 + 1 * 3) / Fraction(3, 2))
        assert ref == pytest.approx(7 / 3, abs=0)
        assert abs(wkv_parallel([[0.0], [0.0]], [[1.0], [3.0]], [math.log(2)])[1, 0] - ref) <= 1e-15

    def test_extended_precision_oracle(self, rng):
        for _ in range(5):
            K, V, w = case(rng, T=12, d=3)
            assert np.max(np.abs(wkv_parallel(K, V, w) - mp_wkv(K, V, w))) <= 1e-12

    def test_scalar_decay_broadcasts(self, rng):
        K, V, _ = case(rng, T=10, d=4)
        assert np.array_equal(wkv_parallel(K, V, 0.7), wkv_parallel(K, V, np.full(4, 0.7)))

    def test_batch_axes(self, rng):
        K, V = rng.normal(size=(9, 2, 4)), rng.normal(size=(9, 2, 4))
        w = rng.random(4)
        got = wkv_parallel(K, V, w)
        for b in range(2):
            assert np.allclose(got[:, b], wkv_parallel(K[:, b], V[:, b], w), atol=1e-15)

    def test_errors(self):
        with pytest.raises(EmptySequenceError):
            wkv_parallel(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(2))
        with pytest.raises(DimensionError):
            wkv_parallel(np.zeros((3, 2)), np.zeros((3, 3)), np.zeros(2))
        with pytest.raises(DimensionError):
            wkv_parallel(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(3))

    def test_large_decay_returns_current_value(self, rng):
        K, V, _ = case(rng, T=20, d=4)
        assert np.max(np.abs(wkv_parallel(K, V, np.full(4, 50.0)) - V)) <= 1e-10

    def test_decay_monotonicity(self):
        # weight on the first of two equal-key tokens is 1 / (1 + e^w)
        K, V = np.zeros((2, 1)), np.array([[1.0], [0.0]])
        weights = [wkv_parallel(K, V, [w])[1, 0] for w in (0.0, 0.5, 1.0, 2.0, 4.0)]
        assert all(a > b for a, b in zip(weights, weights[1:]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32))
    def test_convexity(self, seed):
        K, V, w = case(make_rng(seed))
        out = wkv_parallel(K, V, w)
        lo = np.minimum.accumulate(V, axis=0)
        hi = np.maximum.accumulate(V, axis=0)
        assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


class TestSequential:
    def test_first_step(self):
        _, out = wkv_sequential_step(WkvState.fresh(1), [0.0], [5.0], 0.3)
        assert out[0] == 5.0

    def test_mean(self):
        s, _ = wkv_sequential_step(WkvState.fresh(1), [0.0], [1.0], 0.0)
        _, out = wkv_sequential_step(s, [0.0], [3.0], 0.0)
        assert out[0] == 2.0

    def test_stream_matches_parallel(self, rng):
        K, V, w = case(rng, T=32, d=5)
        seq, _ = wkv_sequential(K, V, w)
        assert np.max(np.abs(seq - wkv_parallel(K, V, w))) <= 1e-10

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32))
    def test_equivalence_property(self, seed):
        K, V, w = case(make_rng(seed))
        seq, _ = wkv_sequential(K, V, w)
        assert np.max(np.abs(seq - wkv_parallel(K, V, w))) <= 1e-10

    def test_non_finite_input(self):
        with pytest.raises(NumericError):
            wkv_sequential_step(WkvState.fresh(1), [math.inf], [1.0], 0.0)
        with pytest.raises(NumericError):
            wkv_sequential_step(WkvState.fresh(1), [0.0], [math.nan], 0.0)

    def test_state_shape_mismatch(self):
        with pytest.raises(DimensionError):
            wkv_sequential_step(WkvState.fresh(2), [0.0], [1.0], 0.0)

    def test_state_is_constant_size(self, rng):
        K, V, w = case(rng, T=64, d=4)
        _, s = wkv_sequential(K[:1], V[:1], w)
        _, s2 = wkv_sequential(K, V, w)
        assert s.nbytes == s2.nbytes == 3 * 4 * 8


class TestStability:
    def test_extreme_keys(self, rng):
        for _ in range(20):
            K = rng.choice([-500.0, 500.0], size=(30, 4))
            V, w = rng.normal(size=(30, 4)), rng.uniform(0, 3, 4)
            par = wkv_parallel(K, V, w)
            seq, _ = wkv_sequential(K, V, w)
            assert np.all(np.isfinite(par)) and np.all(np.isfinite(seq))
            assert np.max(np.abs(par - seq)) <= 1e-10

    def test_literal_form_overflows(self):
        K, V = np.array([[710.0], [711.0]]), np.ones((2, 1))
        assert not np.all(np.isfinite(literal_recurrence(K, V, [0.1])))
        assert np.allclose(wkv_parallel(K, V, [0.1]), 1.0, atol=1e-15)

    def test_keys_past_exp_range_against_mpmath(self, rng):
        K = rng.uniform(-1000, 1000, (10, 2))
        V, w = rng.normal(size=(10, 2)), rng.uniform(0, 2, 2)
        assert np.max(np.abs(wkv_parallel(K, V, w) - mp_wkv(K, V, w))) <= 1e-12


class TestCarry:
    def test_parallel_from_matches_sequential(self, rng):
        K, V, w = case(rng, T=40, d=3)
        full, _ = wkv_sequential(K, V, w)
        _, s = wkv_sequential(K[:15], V[:15], w)
        tail, s_par = wkv_parallel_from(s, K[15:], V[15:], w)
        assert np.max(np.abs(tail - full[15:])) <= 1e-10
        # the carried state keeps producing identical outputs
        _, out_a = wkv_sequential_step(s_par, K[0], V[0], w)
        _, s_seq = wkv_sequential(K, V, w)
        _, out_b = wkv_sequential_step(s_seq, K[0], V[0], w)
        assert np.max(np.abs(out_a - out_b)) <= 1e-10

    def test_parallel_from_fresh(self, rng):
        K, V, w = case(rng, T=10, d=2)
        out, _ = wkv_parallel_from(WkvState.fresh(2), K, V, w)
        assert np.max(np.abs(out - wkv_parallel(K, V, w))) <= 1e-14


class TestBackward:
    def test_zero_upstream(self, rng):
        K, V, w = case(rng, T=6, d=3)
        for g in wkv_parallel_backward(K, V, w, np.zeros_like(K)):
            assert not np.any(g)

    def test_single_position(self, rng):
        K, V, G = rng.normal(size=(1, 3)), rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
        gK, gV, gw = wkv_parallel_backward(K, V, rng.random(3), G)
        assert np.allclose(gV, G, atol=1e-15)
        assert np.allclose(gK, 0, atol=1e-15) and np.allclose(gw, 0, atol=1e-15)

    def test_against_finite_differences(self, rng):
        for _ in range(20):
            T, d = int(rng.integers(1, 9)), int(rng.integers(1, 5))
            K, V, w = rng.uniform(-2, 2, (T, d)), rng.normal(size=(T, d)), rng.uniform(0.05, 2, d)
            G = rng.normal(size=(T, d))
            got = wkv_parallel_backward(K, V, w, G)
            refs = (
                finite_diff_grad(lambda x: float(np.sum(wkv_parallel(x, V, w) * G)), K),
                finite_diff_grad(lambda x: float(np.sum(wkv_parallel(K, x, w) * G)), V),
                finite_diff_grad(lambda x: float(np.sum(wkv_parallel(K, V, x) * G)), w),
            )
            for g, ref in zip(got, refs):
                if np.linalg.norm(ref) > 1e-8:
                    assert np.linalg.norm(g - ref) / np.linalg.norm(ref) <= 1e-6

    def test_scalar_decay_gradient(self, rng):
        K, V, G = rng.normal(size=(6, 3)), rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        _, _, gw = wkv_parallel_backward(K, V, 0.4, G)
        ref = finite_diff_grad(lambda x: float(np.sum(wkv_parallel(K, V, x) * G)), np.array(0.4))
        assert np.shape(gw) == () and abs(gw - ref) <= 1e-6 * abs(ref)


class TestDynamic:
    def test_constant_schedule_matches_static(self, rng):
        K, V, w = case(rng, T=16, d=3)
        W = np.broadcast_to(w, K.shape)
        assert np.max(np.abs(wkv_parallel_dynamic(K, V, W) - wkv_parallel(K, V, w))) <= 1e-12

    def test_zero_params(self):
        w, a = dynamic_decay_update(np.ones(3), np.ones(3), np.ones(3), DynamicDecayParams.zeros(3))
        assert np.allclose(w, math.log(2), atol=1e-15) and np.allclose(a, 0.5, atol=0)

    def test_affine_form(self, rng):
        d = 3
        p = DynamicDecayParams(*(rng.normal(size=s) for s in [(d, d), d, d, (d, d), d, d]))
        x, wp, ap = rng.normal(size=d), rng.random(d), rng.random(d)
        w, a = dynamic_decay_update(x, wp, ap, p)
        assert np.allclose(w, softplus(p.A_w @ x + p.u_w * wp + p.b_w), atol=1e-15)
        assert np.allclose(a, 1 / (1 + np.exp(-(p.A_g @ x + p.u_g * ap + p.b_g))), atol=1e-15)
        assert np.all(w > 0) and np.all((a > 0) & (a < 1))


class TestBidirectional:
    def test_single_position(self, rng):
        V = rng.normal(size=(1, 2))
        assert np.allclose(wkv_bidirectional(rng.normal(size=(1, 2)), V, np.ones(2)), V)

    def test_uniform_keys_no_decay(self, rng):
        V = rng.normal(size=(7, 3))
        out = wkv_bidirectional(np.full((7, 3), 0.3), V, np.zeros(3))
        assert np.allclose(out, V.mean(axis=0), atol=1e-14)

    def test_reversal(self, rng):
        K, V, w = case(rng, T=20, d=3)
        diff = wkv_bidirectional(K[::-1], V[::-1], w) - wkv_bidirectional(K, V, w)[::-1]
        assert np.max(np.abs(diff)) <= 1e-12

    def test_extended_precision_oracle(self, rng):
        K, V, w = case(rng, T=10, d=2)
        assert np.max(np.abs(wkv_bidirectional(K, V, w) - mp_wkv(K, V, w, causal=False))) <= 1e-12

    def test_re_wkv(self, rng):
        K, V, w = case(rng, T=12, d=3)
        assert np.array_equal(re_wkv(K, V, w, 1), wkv_bidirectional(K, V, w))
        twice = wkv_bidirectional(K, wkv_bidirectional(K, V, w), w)
        assert np.max(np.abs(re_wkv(K, V, w, 2) - twice)) <= 1e-15
        const = np.full_like(V, 1.7)
        for m in (1, 3):
            assert np.allclose(re_wkv(K, const, w, m), 1.7, atol=1e-14)
        with pytest.raises(ParameterError):
            re_wkv(K, V, w, 0)

    def test_multi_directional(self, rng):
        K, V, w = case(rng, T=9, d=2)
        assert np.array_equal(multi_directional_wkv(K, V, w, [1, 0]), wkv_parallel(K, V, w))
        Kp = np.concatenate([K, K[-2::-1]])
        Vp = np.concatenate([V, V[-2::-1]])
        assert np.allclose(multi_directional_wkv(Kp, Vp, w, [0, 1]), wkv_parallel(Kp, Vp, w)[::-1], atol=1e-14)
        fwd = wkv_parallel(K, V, w)
        bwd = wkv_parallel(K[::-1], V[::-1], w)[::-1]
        assert np.allclose(multi_directional_wkv(K, V, w, [0.5, 0.5]), (fwd + bwd) / 2, atol=1e-15)
        with pytest.raises(DimensionError):
            multi_directional_wkv(K, V, w, [1, 0, 0])


class TestMatrixState:
    def test_no_memory(self, rng):
        k, v, r = rng.normal(size=3), rng.normal(size=3), np.ones(3)
        s, _ = matrix_state_step(MatrixState.fresh(3, 3), k, v, r, 0.0)
        assert np.array_equal(s.S, np.outer(k, v))

    def test_alpha_zero_forgets(self, rng):
        k, v, r = rng.normal(size=2), rng.normal(size=2), rng.random(2)
        _, o1 = matrix_state_step(MatrixState(rng.normal(size=(2, 2)), np.ones(2)), k, v, r, np.zeros(2))
        _, o2 = matrix_state_step(MatrixState.fresh(2, 2), k, v, r, np.zeros(2))
        assert np.array_equal(o1, o2)

    def test_pure_retention(self, rng):
        S = rng.normal(size=(2, 3))
        s, _ = matrix_state_step(MatrixState(S, np.ones(2)), np.zeros(2), rng.normal(size=3), np.ones(2), 1.0)
        assert np.array_equal(s.S, S)

    def test_two_by_two_hand_expansion(self, rng):
        S = rng.normal(size=(2, 2))
        k, v, r, al = rng.normal(size=2), rng.normal(size=2), rng.random(2), rng.random((2, 2))
        s, o = matrix_state_step(MatrixState(S, np.ones(2)), k, v, r, al)
        S00 = al[0, 0] * S[0, 0] + k[0] * v[0]
        S01 = al[0, 1] * S[0, 1] + k[0] * v[1]
        S10 = al[1, 0] * S[1, 0] + k[1] * v[0]
        S11 = al[1, 1] * S[1, 1] + k[1] * v[1]
        ref = [r[0] * (S00 * v[0] + S01 * v[1]), r[1] * (S10 * v[0] + S11 * v[1])]
        assert np.max(np.abs(o - ref)) <= 1e-12
        assert np.max(np.abs(s.S - [[S00, S01], [S10, S11]])) <= 1e-12

    def test_shape_errors(self):
        with pytest.raises(DimensionError):
            matrix_state_step(MatrixState.fresh(2, 2), np.ones(3), np.ones(2), np.ones(3), 1.0)
        with pytest.raises(DimensionError):
            matrix_state_step(MatrixState.fresh(2, 2), np.ones(2), np.ones(2), np.ones(2), np.ones(5))
