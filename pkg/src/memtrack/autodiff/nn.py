"""Parameter initialisers and the attention layers built from the primitives."""

from __future__ import annotations

import numpy as np

from . import ops
from .graph import Graph, ShapeError, Tensor


def init_linear(params: dict, name: str, d_in: int, d_out: int, rng: np.random.Generator,
                gain: float = 1.0) -> None:
    bound = gain * np.sqrt(6.0 / (d_in + d_out))
    params[f"{name}.w"] = rng.uniform(-bound, bound, size=(d_in, d_out))
    params[f"{name}.b"] = np.zeros(d_out)


def init_layer_norm(params: dict, name: str, d: int) -> None:
    params[f"{name}.g"] = np.ones(d)
    params[f"{name}.b"] = np.zeros(d)


def init_attention(params: dict, name: str, d: int, rng) -> None:
    for proj in ("q", "k", "v", "o"):
        init_linear(params, f"{name}.{proj}", d, d, rng)


def init_transformer_layer(params: dict, name: str, d: int, rng, mlp_ratio: int = 2) -> None:
    init_layer_norm(params, f"{name}.ln_q", d)
    init_layer_norm(params, f"{name}.ln_kv", d)
    init_attention(params, f"{name}.cross", d, rng)
    init_layer_norm(params, f"{name}.ln_self", d)
    init_attention(params, f"{name}.self", d, rng)
    init_layer_norm(params, f"{name}.ln_mlp", d)
    init_linear(params, f"{name}.mlp1", d, mlp_ratio * d, rng)
    init_linear(params, f"{name}.mlp2", mlp_ratio * d, d, rng)


def dense(g: Graph, name: str, x: Tensor) -> Tensor:
    return ops.linear(x, g.param(f"{name}.w"), g.param(f"{name}.b"))


def norm(g: Graph, name: str, x: Tensor) -> Tensor:
    return ops.layer_norm(x, g.param(f"{name}.g"), g.param(f"{name}.b"))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return ops.transpose(ops.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def attention(g: Graph, name: str, queries: Tensor, keys_values: Tensor, heads: int,
              return_weights: bool = False):
    """Multi-head scaled dot-product attention of queries over keys_values.

    Returns ``out`` (n x D) or ``(out, weights)`` with weights heads x n x m.
    """
    n, d = queries.shape
    m = keys_values.shape[0]
    if m == 0:
        raise ShapeError(f"attention[{name}]", queries.shape, keys_values.shape,
                         detail="empty key/value set")
    if keys_values.shape[1] != d or d % heads:
        raise ShapeError(f"attention[{name}]", queries.shape, keys_values.shape)
    q = _split_heads(dense(g, f"{name}.q", queries), heads)
    k = _split_heads(dense(g, f"{name}.k", keys_values), heads)
    v = _split_heads(dense(g, f"{name}.v", keys_values), heads)
    scores = ops.matmul(q, ops.transpose(k, (0, 2, 1)))
    weights = ops.softmax(scores, axis=-1, temperature=float(np.sqrt(d // heads)))
    mixed = ops.matmul(weights, v)
    out = dense(g, f"{name}.o", ops.reshape(ops.transpose(mixed, (1, 0, 2)), (n, d)))
    return (out, weights) if return_weights else out


def transformer_layer(g: Graph, name: str, queries: Tensor, keys_values: Tensor, heads: int,
                      return_weights: bool = False):
    """Pre-norm block: cross-attention, then self-attention, then MLP.

    Each sub-block is wrapped in a residual connection.
    """
    if keys_values.shape[0] == 0:
        raise ShapeError(f"transformer_layer[{name}]", queries.shape, keys_values.shape,
                         detail="keys_values must have at least one row")
    cross, w = attention(g, f"{name}.cross", norm(g, f"{name}.ln_q", queries),
                         norm(g, f"{name}.ln_kv", keys_values), heads, return_weights=True)
    x = queries + cross
    h = norm(g, f"{name}.ln_self", x)
    x = x + attention(g, f"{name}.self", h, h, heads)
    h = norm(g, f"{name}.ln_mlp", x)
    x = x + dense(g, f"{name}.mlp2", ops.relu(dense(g, f"{name}.mlp1", h)))
    return (x, w) if return_weights else x
