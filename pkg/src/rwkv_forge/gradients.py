"""Analytic gradients of the next-token cross-entropy for plain models.

Only the vector-state, static-decay configuration has a backward pass; the
matrix-state and dynamic-decay variants are inference-only.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError
from .mixing import layer_norm, layer_norm_backward
from .model import Model, _check_tokens
from .numerics import log_softmax, sigmoid
from .wkv import wkv_parallel, wkv_parallel_backward


def _prev(x):
    out = np.zeros_like(x)
    out[1:] = x[:-1]
    return out


def _shift_backward(g, mu):
    """Gradient w.r.t. the unshifted input of ``mu*x + (1-mu)*prev(x)``."""
    gx = mu * g
    gx[:-1] += (1.0 - mu) * g[1:]
    return gx


def _outer(g, x):
    """Sum over all positions of ``g^T x`` for weights used as ``x @ W.T``."""
    return g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1])


def loss_and_grads(model: Model, inputs, targets) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy (nats/token) and its gradient for every named parameter.

    ``inputs`` and ``targets`` share a shape of ``(T,)`` or ``(T, B)``.
    """
    if not model.is_plain:
        raise ParameterError("gradients are implemented for vector-state, static-decay models only")
    toks = _check_tokens(model, inputs)
    tgt = _check_tokens(model, targets)
    if toks.shape != tgt.shape:
        raise ParameterError(f"inputs {toks.shape} and targets {tgt.shape} differ")
    norm = model.config.normalize

    x = model.embedding[toks]
    caches = []
    for blk in model.blocks:
        s = blk.mu_time * x + (1.0 - blk.mu_time) * _prev(x)
        n1 = layer_norm(s) if norm else s
        r = sigmoid(n1 @ blk.Wr_t.T)
        k = n1 @ blk.Wk_t.T
        v = n1 @ blk.Wv_t.T
        y = wkv_parallel(k, v, blk.w)
        tm = r * y
        c = blk.mu_chan * tm + (1.0 - blk.mu_chan) * _prev(tm)
        n2 = layer_norm(c) if norm else c
        rc = sigmoid(n2 @ blk.Wr_c.T)
        kc = n2 @ blk.Wk_c.T
        h = np.square(np.maximum(kc, 0.0))
        vc = h @ blk.Wv_c.T
        caches.append((x, s, n1, r, k, v, y, tm, c, n2, rc, kc, h, vc))
        x = s + rc * vc
    xf = layer_norm(x) if norm else x
    head = model.head_matrix
    logp = log_softmax(xf @ head)
    n_tok = tgt.size
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    loss = float(-picked.mean())

    grads: dict[str, np.ndarray] = {}
    g_logits = np.exp(logp)
    np.put_along_axis(g_logits, tgt[..., None], np.take_along_axis(g_logits, tgt[..., None], -1) - 1.0, -1)
    g_logits /= n_tok
    g_head = _outer(xf, g_logits)  # (d, V)
    g = g_logits @ head.T
    if norm:
        g = layer_norm_backward(x, g)

    for i in reversed(range(len(model.blocks))):
        blk = model.blocks[i]
        x_in, s, n1, r, k, v, y, tm, c, n2, rc, kc, h, vc = caches[i]
        p = f"blocks.{i}."
        g_s = g.copy()
        g_rc = g * vc
        g_vc = g * rc
        grads[p + "Wv_c"] = _outer(g_vc, h)
        g_kc = (g_vc @ blk.Wv_c) * 2.0 * np.maximum(kc, 0.0)
        grads[p + "Wk_c"] = _outer(g_kc, n2)
        g_prc = g_rc * rc * (1.0 - rc)
        grads[p + "Wr_c"] = _outer(g_prc, n2)
        g_n2 = g_kc @ blk.Wk_c + g_prc @ blk.Wr_c
        g_c = layer_norm_backward(c, g_n2) if norm else g_n2
        grads[p + "mu_chan"] = np.sum((g_c * (tm - _prev(tm))).reshape(-1, tm.shape[-1]), axis=0)
        g_tm = _shift_backward(g_c, blk.mu_chan)
        g_r = g_tm * y
        g_y = g_tm * r
        g_k, g_v, g_w = wkv_parallel_backward(k, v, blk.w, g_y)
        grads[p + "w"] = g_w
        g_pr = g_r * r * (1.0 - r)
        grads[p + "Wr_t"] = _outer(g_pr, n1)
        grads[p + "Wk_t"] = _outer(g_k, n1)
        grads[p + "Wv_t"] = _outer(g_v, n1)
        g_n1 = g_pr @ blk.Wr_t + g_k @ blk.Wk_t + g_v @ blk.Wv_t
        g_s += layer_norm_backward(s, g_n1) if norm else g_n1
        grads[p + "mu_time"] = np.sum((g_s * (x_in - _prev(x_in))).reshape(-1, x_in.shape[-1]), axis=0)
        g = _shift_backward(g_s, blk.mu_time)

    g_emb = np.zeros_like(model.embedding)
    np.add.at(g_emb, toks.reshape(-1), g.reshape(-1, g.shape[-1]))
    if model.config.tie_embeddings:
        g_emb += g_head.T
    else:
        grads["head"] = g_head
    grads["embedding"] = g_emb
    return loss, {name: grads[name] for name in model.named_parameters()}
