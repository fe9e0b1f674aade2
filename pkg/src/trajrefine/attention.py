"""Gated multi-head cross-attention.

For a query feature ``f`` and context rows ``C``::

    Q, K, V  = f Wq, C Wk, C Wv                  (split into heads of width d/heads)
    A        = softmax(Q K^T / sqrt(d_k)) V      (dropout on the attention weights)
    gate     = sigmoid(f W_in + b_in + A W_hidden)
    fused    = gate * (f W_self + b_self) + (1 - gate) * A
    out      = f + dropout(mlp(layer_norm(fused)))

An empty context leaves the query unchanged.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParameterStore


def init_attention(store: ParameterStore, prefix: str, d: int, ffn_hidden: int | None = None) -> None:
    hidden = ffn_hidden or 2 * d
    for name in ("q", "k", "v"):
        store.linear(f"{prefix}.{name}", d, d, bias=False)
    store.linear(f"{prefix}.gate_in", d, d)
    store.linear(f"{prefix}.gate_hidden", d, d, bias=False)
    store.linear(f"{prefix}.gate_self", d, d)
    store.add(f"{prefix}.norm.gain", np.ones(d))
    store.add(f"{prefix}.norm.bias", np.zeros(d))
    store.linear(f"{prefix}.ffn.0", d, hidden)
    store.linear(f"{prefix}.ffn.1", hidden, d)


def attention_block(store: ParameterStore, prefix: str, query: Tensor, context: Tensor,
                    mask: np.ndarray, heads: int, dropout: float = 0.0,
                    training: bool = False, rng: np.random.Generator | None = None,
                    return_weights: bool = False):
    """Batched gated cross-attention.

    query ``(R, Q, d)``, context ``(R, K, d)``, mask ``(R, Q, K)`` boolean.
    Returns ``(R, Q, d)``; rows whose mask is all False pass the query through.
    """
    R, Qn, d = query.shape
    K = context.shape[1]
    if context.shape[0] != R or (K and context.shape[2] != d):
        raise ValueError(f"context shape {context.shape} does not match query {query.shape}")
    if d % heads:
        raise ValueError(f"embedding size {d} is not divisible by {heads} heads")
    mask = np.asarray(mask, dtype=bool).reshape(R, Qn, K)
    has_ctx = mask.any(axis=-1)
    if K == 0 or not has_ctx.any():
        return (query, None) if return_weights else query
    dk = d // heads
    p = lambda name: store[f"{prefix}.{name}"]

    q = ad.matmul(query, p("q.weight")).reshape(R, Qn, heads, dk).transpose(0, 2, 1, 3)
    k = ad.matmul(context, p("k.weight")).reshape(R, K, heads, dk).transpose(0, 2, 3, 1)
    v = ad.matmul(context, p("v.weight")).reshape(R, K, heads, dk).transpose(0, 2, 1, 3)
    scores = ad.matmul(q, k) * (1.0 / math.sqrt(dk))           # (R, h, Q, K)
    weights = ad.softmax(scores, axis=-1, mask=mask[:, None, :, :])
    attn_w = ad.dropout(weights, dropout, training, rng)
    attended = ad.matmul(attn_w, v).transpose(0, 2, 1, 3).reshape(R, Qn, d)

    gate = ad.sigmoid(ad.linear(query, p("gate_in.weight"), p("gate_in.bias"))
                      + ad.matmul(attended, p("gate_hidden.weight")))
    fused = gate * ad.linear(query, p("gate_self.weight"), p("gate_self.bias")) \
        + (1.0 - gate) * attended
    normed = ad.layer_norm(fused, p("norm.gain"), p("norm.bias"))
    update = ad.mlp_forward(normed, store.layers(f"{prefix}.ffn", 2))
    out = query + ad.dropout(update, dropout, training, rng)
    out = ad.where(has_ctx[..., None], out, query)
    if return_weights:
        return out, (weights, gate)
    return out


def gated_cross_attention(query_feature, context, store: ParameterStore, prefix: str,
                          heads: int, training: bool = False, dropout: float = 0.0,
                          rng: np.random.Generator | None = None) -> Tensor:
    """Single-query form: ``query_feature`` is ``(d,)``, ``context`` is ``(K, d)``."""
    q = ad.as_tensor(query_feature)
    c = ad.as_tensor(context)
    d = q.shape[-1]
    if c.data.size == 0:
        c = ad.Tensor(np.zeros((0, d)))
    if c.shape[-1] != d:
        raise ValueError(f"context width {c.shape[-1]} does not match query width {d}")
    K = c.shape[0]
    out = attention_block(store, prefix, q.reshape(1, 1, d), c.reshape(1, K, d),
                          np.ones((1, 1, K), dtype=bool), heads, dropout, training, rng)
    return out.reshape(d)
