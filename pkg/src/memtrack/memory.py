"""Long-term foreground token memory and short-term background memory."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Tensor, ops
from .autodiff.graph import AutodiffError
from .autodiff.nn import dense, init_linear, init_transformer_layer, transformer_layer
from .config import TrackerConfig
from .perception import FeatureMap


class MemoryInitError(AutodiffError):
    pass


@dataclass
class MemoryState:
    fg_tokens: Tensor      # K x D
    bg_features: Tensor    # m x D, m may be 0
    frame: int

    @property
    def element_count(self) -> int:
        """Stored foreground feature elements (constant K*D)."""
        return int(self.fg_tokens.data.size)

    def detached(self) -> "MemoryState":
        return MemoryState(Tensor(self.fg_tokens.data), Tensor(self.bg_features.data), self.frame)


def init_memory_params(params: dict, cfg: TrackerConfig, rng: np.random.Generator) -> None:
    d = cfg.d_model
    params["mem.tokens"] = rng.normal(0.0, 1.0, size=(cfg.k_tokens, d))
    for i in range(cfg.l_mu):
        init_transformer_layer(params, f"mu.{i}", d, rng, cfg.mlp_ratio)
    init_linear(params, "mfr.in", d + 3, d, rng)
    for i in range(cfg.l_mfr):
        init_transformer_layer(params, f"mfr.{i}", d, rng, cfg.mlp_ratio)


def memory_updater(g: Graph, tokens: Tensor, keys_values: Tensor, cfg: TrackerConfig) -> Tensor:
    x = tokens
    for i in range(cfg.l_mu):
        x = transformer_layer(g, f"mu.{i}", x, keys_values, cfg.n_heads)
    return x


def init_memory(g: Graph, first: FeatureMap, gt_mask: np.ndarray, cfg: TrackerConfig) -> MemoryState:
    mask = np.asarray(gt_mask, bool)
    fg = np.flatnonzero(mask)
    if fg.size == 0:
        raise MemoryInitError("init_memory: no foreground seeds in the annotated frame")
    fg_feats = ops.take(first.features, fg)
    tokens = memory_updater(g, g.param("mem.tokens"), fg_feats, cfg)
    bg = ops.take(first.features, np.flatnonzero(~mask))
    return MemoryState(tokens, bg, 1)


def refine(g: Graph, current: FeatureMap, memory: MemoryState, cfg: TrackerConfig) -> Tensor:
    """Target-aware features: current seeds attend to [fg tokens, bg features]."""
    if memory.bg_features.shape[0]:
        kv = ops.concat([memory.fg_tokens, memory.bg_features], axis=0)
    else:
        kv = memory.fg_tokens
    x = dense(g, "mfr.in", ops.concat([current.features, g.constant(current.seeds)], axis=1))
    for i in range(cfg.l_mfr):
        x = transformer_layer(g, f"mfr.{i}", x, kv, cfg.n_heads)
    return x


def update_memory(g: Graph, memory: MemoryState, current: FeatureMap, targetness: np.ndarray,
                  cfg: TrackerConfig) -> MemoryState:
    score = np.asarray(targetness, dtype=np.float64)
    sel = score >= cfg.tau_mask
    prev = memory.fg_tokens
    if sel.any():
        kv = ops.concat([prev, ops.take(current.features, np.flatnonzero(sel))], axis=0)
    else:
        kv = prev
    tokens = memory_updater(g, prev, kv, cfg)
    bg = ops.take(current.features, np.flatnonzero(~sel))
    return MemoryState(tokens, bg, memory.frame + 1)
