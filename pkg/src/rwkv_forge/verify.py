"""Self-check suite run by ``rwkv-forge verify``.

Each check compares a library path against an independent evaluation
(scalar loops, finite differences, or the other execution path).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bench import effective_context
from .checkpoint import dumps, loads
from .gradients import loss_and_grads
from .mixing import ShiftKernel, omni_shift, token_shift_2d, token_shift_quad
from .model import ModelConfig, forward_parallel, forward_step, fresh_state, init_model
from .numerics import finite_diff_grad, log_softmax, make_rng
from .training import perplexity
from .wkv import (
    MatrixState,
    literal_recurrence,
    matrix_state_step,
    multi_directional_wkv,
    re_wkv,
    wkv_bidirectional,
    wkv_parallel,
    wkv_parallel_backward,
    wkv_sequential,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def rel_err(a, b) -> float:
    denom = max(float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b))) / denom


def random_wkv_case(rng, max_T=64, max_d=8, k_range=5.0):
    T = int(rng.integers(1, max_T + 1))
    d = int(rng.integers(1, max_d + 1))
    K = rng.uniform(-k_range, k_range, (T, d))
    V = rng.normal(size=(T, d))
    w = rng.uniform(0.0, 3.0, d)
    return K, V, w


def adversarial_cases(rng, count=20):
    """Keys pinned at +-500 with occasional spikes past the float64 exp range."""
    cases = []
    for i in range(count):
        T = int(rng.integers(8, 65))
        d = int(rng.integers(1, 9))
        K = rng.choice([-500.0, 500.0], size=(T, d)) + rng.uniform(-1, 1, (T, d))
        if i % 2 == 1:
            spikes = rng.random((T, d)) < 0.2
            K[spikes] = rng.choice([-1000.0, 750.0, 1000.0], size=int(spikes.sum()))
        V = rng.normal(size=(T, d))
        w = rng.uniform(0.0, 3.0, d)
        cases.append((K, V, w))
    return cases


# -- scalar-loop oracles ------------------------------------------------------


def loop_shift_2d(X, mu_h, mu_v):
    H, W, C = X.shape
    xh = np.zeros_like(X)
    for i in range(H):
        for j in range(W):
            for c in range(C):
                up = X[i - 1, j, c] if i > 0 else 0.0
                xh[i, j, c] = mu_h[c] * X[i, j, c] + (1 - mu_h[c]) * up
    out = np.zeros_like(X)
    for i in range(H):
        for j in range(W):
            for c in range(C):
                left = xh[i, j - 1, c] if j > 0 else 0.0
                out[i, j, c] = mu_v[c] * xh[i, j, c] + (1 - mu_v[c]) * left
    return out


def loop_shift_quad(X, mx, my, mz, mw):
    I, J, K, C = X.shape
    out = np.zeros_like(X)
    for i in range(I):
        for j in range(J):
            for k in range(K):
                for c in range(C):
                    v = mx[c] * X[i, j, k, c]
                    v += my[c] * X[i - 1, j, k, c] if i > 0 else 0.0
                    v += mz[c] * X[i, j - 1, k, c] if j > 0 else 0.0
                    v += mw[c] * X[i, j, k - 1, c] if k > 0 else 0.0
                    out[i, j, k, c] = v
    return out


def loop_matrix_step(S, k, v, r, alpha):
    dk, dv = S.shape
    S_new = [[alpha[a] * S[a][b] + k[a] * v[b] for b in range(dv)] for a in range(dk)]
    out = [r[a] * sum(S_new[a][b] * v[b] for b in range(dv)) for a in range(dk)]
    return np.array(S_new), np.array(out)


# -- checks -------------------------------------------------------------------


def check_equivalence(rng, cases=100, tol=1e-10) -> CheckResult:
    worst = 0.0
    for _ in range(cases):
        K, V, w = random_wkv_case(rng)
        seq, _ = wkv_sequential(K, V, w)
        worst = max(worst, float(np.max(np.abs(seq - wkv_parallel(K, V, w)))))
    return CheckResult("parallel/sequential equivalence", worst <= tol, f"max abs diff {worst:.2e} over {cases} cases")


def check_stability(rng) -> CheckResult:
    finite = 0
    literal_broken = 0
    cases = adversarial_cases(rng)
    for K, V, w in cases:
        par = wkv_parallel(K, V, w)
        seq, _ = wkv_sequential(K, V, w)
        finite += bool(np.all(np.isfinite(par)) and np.all(np.isfinite(seq)))
        literal_broken += not np.all(np.isfinite(literal_recurrence(K, V, w)))
    ok = finite == len(cases) and literal_broken > 0
    return CheckResult(
        "numerical stability", ok, f"{finite}/{len(cases)} finite; unscaled recurrence broke on {literal_broken}"
    )


def check_kernel_gradients(rng, cases=20, tol=1e-6) -> CheckResult:
    worst = 0.0
    for _ in range(cases):
        T, d = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        K, V, w = rng.uniform(-2, 2, (T, d)), rng.normal(size=(T, d)), rng.uniform(0.05, 2, d)
        G = rng.normal(size=(T, d))
        gK, gV, gw = wkv_parallel_backward(K, V, w, G)
        fK = finite_diff_grad(lambda x: np.sum(wkv_parallel(x, V, w) * G), K)
        fV = finite_diff_grad(lambda x: np.sum(wkv_parallel(K, x, w) * G), V)
        fw = finite_diff_grad(lambda x: np.sum(wkv_parallel(K, V, x) * G), w)
        for got, ref in ((gK, fK), (gV, fV), (gw, fw)):
            if np.linalg.norm(ref) > 1e-8:
                worst = max(worst, rel_err(got, ref))
    return CheckResult("WKV kernel gradients", worst <= tol, f"max rel err {worst:.2e} over {cases} cases")


def model_loss(model, inputs, targets) -> float:
    lp = log_softmax(forward_parallel(model, inputs))
    return float(-np.take_along_axis(lp, targets[..., None], axis=-1).mean())


def check_model_gradient(rng, tol=1e-5) -> CheckResult:
    model = init_model(ModelConfig(vocab_size=16, dim=4, n_layers=2, seed=int(rng.integers(1 << 30))))
    for t in model.named_parameters().values():
        t += rng.normal(0, 0.3, t.shape)
    toks = rng.integers(0, 16, 7)
    inputs, targets = toks[:-1], toks[1:]
    _, grads = loss_and_grads(model, inputs, targets)
    worst, worst_name = 0.0, ""
    for name, p in model.named_parameters().items():
        def f(x, p=p):
            saved = p.copy()
            p[...] = x
            val = model_loss(model, inputs, targets)
            p[...] = saved
            return val

        err = rel_err(grads[name], finite_diff_grad(f, p.copy(), 1e-5))
        if err > worst:
            worst, worst_name = err, name
    return CheckResult("full-model gradient", worst <= tol, f"max rel err {worst:.2e} ({worst_name})")


def step_logits(model, tokens):
    state = fresh_state(model)
    rows = []
    for t in tokens:
        state, lg = forward_step(model, state, t)
        rows.append(lg)
    return np.stack(rows)


def random_model(rng, max_dim=16, max_layers=3, scale=0.3):
    """Random small model with every non-decay tensor pushed well away from init."""
    cfg = ModelConfig(
        dim=int(rng.integers(1, max_dim + 1)), n_layers=int(rng.integers(1, max_layers + 1)),
        seed=int(rng.integers(1 << 30)), use_matrix_state=bool(rng.random() < 0.25),
        use_dynamic_decay=bool(rng.random() < 0.25), normalize=bool(rng.random() < 0.75),
    )
    model = init_model(cfg)
    for name, t in model.named_parameters().items():
        if not name.endswith((".w", "mu_time", "mu_chan")):
            t += rng.normal(0.0, scale, t.shape)
    return model


def check_dual_path(rng, models=10, tol=1e-10) -> CheckResult:
    worst = 0.0
    for _ in range(models):
        model = random_model(rng)
        toks = rng.integers(0, 256, int(rng.integers(1, 65)))
        worst = max(worst, float(np.max(np.abs(forward_parallel(model, toks) - step_logits(model, toks)))))
    return CheckResult("model parallel/step equivalence", worst <= tol, f"max abs diff {worst:.2e} over {models} models")


def check_shifts(rng) -> CheckResult:
    X = rng.normal(size=(3, 3, 2))
    mu_h, mu_v = rng.random(2), rng.random(2)
    e2 = float(np.max(np.abs(token_shift_2d(X, mu_h, mu_v) - loop_shift_2d(X, mu_h, mu_v))))
    X4 = rng.normal(size=(2, 2, 2, 1))
    mus = [rng.random(1) for _ in range(4)]
    e4 = float(np.max(np.abs(token_shift_quad(X4, *mus) - loop_shift_quad(X4, *mus))))
    img = rng.normal(size=(5, 5, 3))
    e_id = float(np.max(np.abs(omni_shift(img, ShiftKernel.identity(3)) - img)))
    mh, mv = rng.random(3), rng.random(3)
    e_k = float(np.max(np.abs(token_shift_2d(img, mh, mv) - omni_shift(img, ShiftKernel.from_2d_shift(mh, mv, 3)))))
    worst = max(e2, e4, e_k)
    ok = worst <= 1e-12 and e_id == 0.0
    return CheckResult("token shifts", ok, f"2d {e2:.1e}, quad {e4:.1e}, omni-identity {e_id:.1e}, 2d-as-kernel {e_k:.1e}")


def check_variants(rng) -> CheckResult:
    K, V, w = random_wkv_case(rng, 32, 6)
    rev = float(np.max(np.abs(wkv_bidirectional(K[::-1], V[::-1], w) - wkv_bidirectional(K, V, w)[::-1])))
    re1 = float(np.max(np.abs(re_wkv(K, V, w, 1) - wkv_bidirectional(K, V, w))))
    md = float(np.max(np.abs(multi_directional_wkv(K, V, w, [1.0, 0.0]) - wkv_parallel(K, V, w))))
    S = rng.normal(size=(3, 4))
    k, v, r, alpha = rng.normal(size=3), rng.normal(size=4), rng.random(3), rng.random(3)
    new, out = matrix_state_step(MatrixState(S, np.ones(3)), k, v, r, alpha)
    S_ref, out_ref = loop_matrix_step(S, k, v, r, alpha)
    ms = max(float(np.max(np.abs(new.S - S_ref))), float(np.max(np.abs(out - out_ref))))
    ok = rev <= 1e-12 and re1 == 0.0 and md == 0.0 and ms <= 1e-12
    return CheckResult(
        "WKV variants", ok, f"reversal {rev:.1e}, re-wkv(1) {re1:.1e}, directions[1,0] {md:.1e}, matrix step {ms:.1e}"
    )


def check_formulas(rng) -> CheckResult:
    model = init_model(ModelConfig(dim=8, n_layers=2, seed=int(rng.integers(1 << 30))))
    model.head[...] = 0.0
    ppl = perplexity(model, rng.integers(0, 256, 300))
    ctx = effective_context(np.full(4, 0.1), math.exp(-10.0), 1000)
    ok = ppl == 256.0 and abs(ctx - 100.0) <= 1e-12
    return CheckResult("formula spot-checks", ok, f"zero-head perplexity {ppl:.6f}, effective context {ctx:.6f}")


def check_checkpoint(rng) -> CheckResult:
    model = init_model(ModelConfig(dim=8, n_layers=2, seed=int(rng.integers(1 << 30))))
    restored = loads(dumps(model))
    exact = all(
        np.array_equal(a.view(np.uint64), b.view(np.uint64))
        for a, b in zip(model.named_parameters().values(), restored.named_parameters().values())
    )
    return CheckResult("checkpoint round trip", exact, "bit-exact" if exact else "parameters differ")


CHECKS: list[Callable[[np.random.Generator], CheckResult]] = [
    check_equivalence,
    check_stability,
    check_kernel_gradients,
    check_model_gradient,
    check_dual_path,
    check_shifts,
    check_variants,
    check_formulas,
    check_checkpoint,
]


def run_checks(seed: int = 0) -> list[CheckResult]:
    rng = make_rng(seed)
    return [check(rng) for check in CHECKS]
