"""Parameter store construction and the per-frame forward pass shared by
training, tracking and analysis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph
from .config import TrackerConfig
from .geometry import Box3D, canonicalize, points_in_box
from .memory import MemoryState, init_memory, init_memory_params, refine, update_memory
from .perception import FeatureMap, Prediction, decode, encode, init_perception_params


def init_params(cfg: TrackerConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    init_perception_params(params, cfg, rng)
    init_memory_params(params, cfg, rng)
    return params


def param_count(params: dict) -> int:
    return int(sum(v.size for v in params.values()))


@dataclass
class FrameResult:
    fmap: FeatureMap          # seeds in the reference-box frame
    seeds_world: np.ndarray
    prediction: Prediction | None
    memory: MemoryState


def encode_in_frame(g: Graph, points_world: np.ndarray, ref_box: Box3D, cfg: TrackerConfig):
    """Encode points expressed in ``ref_box``'s canonical frame.

    Returns the feature map and the seed coordinates in world frame.
    """
    fmap = encode(g, canonicalize(points_world, ref_box), cfg)
    return fmap, np.asarray(points_world)[fmap.index]


def first_frame(g: Graph, points_world: np.ndarray, gt_box: Box3D, cfg: TrackerConfig) -> FrameResult:
    fmap, seeds_world = encode_in_frame(g, points_world, gt_box, cfg)
    mask = points_in_box(seeds_world, gt_box)
    return FrameResult(fmap, seeds_world, None, init_memory(g, fmap, mask, cfg))


def next_frame(g: Graph, memory: MemoryState, points_world: np.ndarray, ref_box: Box3D,
               cfg: TrackerConfig, update: bool = True) -> FrameResult:
    fmap, seeds_world = encode_in_frame(g, points_world, ref_box, cfg)
    z = refine(g, fmap, memory, cfg)
    pred = decode(g, z, fmap.seeds, ref_box)
    new_mem = update_memory(g, memory, fmap, pred.targetness.data, cfg) if update else memory
    return FrameResult(fmap, seeds_world, pred, new_mem)
