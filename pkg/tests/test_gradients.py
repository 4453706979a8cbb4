import numpy as np
import pytest

from rwkv_forge.errors import ParameterError
from rwkv_forge.gradients import loss_and_grads
from rwkv_forge.model import ModelConfig, init_model
from rwkv_forge.numerics import finite_diff_grad
from rwkv_forge.verify import model_loss, rel_err


def tiny(rng, **cfg):
    model = init_model(ModelConfig(dim=4, n_layers=2, seed=int(rng.integers(1 << 30)), **cfg))
    for t in model.named_parameters().values():
        t += rng.normal(0, 0.3, t.shape)
    return model


def fd_check(model, inputs, targets, tol):
    loss, grads = loss_and_grads(model, inputs, targets)
    assert loss == pytest.approx(model_loss(model, inputs, targets), abs=1e-12)
    assert list(grads) == list(model.named_parameters())
    for name, p in model.named_parameters().items():
        def f(x, p=p):
            saved = p.copy()
            p[...] = x
            val = model_loss(model, inputs, targets)
            p[...] = saved
            return val

        err = rel_err(grads[name], finite_diff_grad(f, p.copy(), 1e-5))
        assert err <= tol, name


@pytest.mark.parametrize(
    "cfg", [dict(), dict(normalize=False), dict(tie_embeddings=True), dict(ffn_expansion=2), dict(vocab_size=11)]
)
def test_full_model_gradient(rng, cfg):
    model = tiny(rng, **cfg)
    toks = rng.integers(0, model.config.vocab_size, 7)
    fd_check(model, toks[:-1], toks[1:], 1e-5)


def test_batched_gradient(rng):
    model = tiny(rng, vocab_size=13)
    toks = rng.integers(0, 13, (6, 3))
    tgt = rng.integers(0, 13, (6, 3))
    fd_check(model, toks, tgt, 1e-5)


def test_gradient_is_mean_over_batch(rng):
    model = tiny(rng, vocab_size=9)
    a, b = rng.integers(0, 9, (5, 2)), rng.integers(0, 9, (5, 2))
    _, g = loss_and_grads(model, a, b)
    _, g0 = loss_and_grads(model, a[:, 0], b[:, 0])
    _, g1 = loss_and_grads(model, a[:, 1], b[:, 1])
    for name in g:
        assert np.allclose(g[name], (g0[name] + g1[name]) / 2, atol=1e-13)


def test_rejects_non_plain_models(rng):
    for cfg in (dict(use_matrix_state=True), dict(use_dynamic_decay=True)):
        with pytest.raises(ParameterError):
            loss_and_grads(tiny(rng, **cfg), [1, 2], [2, 3])


def test_shape_mismatch(rng):
    with pytest.raises(ParameterError):
        loss_and_grads(tiny(rng), [1, 2, 3], [2, 3])
