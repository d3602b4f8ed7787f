"""Point encoder (three edge-convolution stages with 2x farthest-point
downsampling each) and the proposal-free voting decode head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Tensor, ops
from .autodiff.graph import AutodiffError
from .autodiff.nn import dense, init_linear
from .config import TrackerConfig
from .geometry import Box3D, heading_rotation
from .kernels import farthest_point_sample, knn_graph

WEIGHT_EPS = 1e-12


class EncoderError(AutodiffError):
    pass


@dataclass
class FeatureMap:
    seeds: np.ndarray        # N' x 3, coordinates in the frame the points were given in
    features: Tensor         # N' x D
    index: np.ndarray        # N' indices into the encoder's input points


@dataclass
class Prediction:
    targetness: Tensor       # N' scores in [0, 1]
    weights: Tensor          # N' normalised targetness, sums to 1
    votes: Tensor            # N' x 4 (dx, dy, dz, dtheta) in the reference-box frame
    offset: Tensor           # 4, weighted mean vote
    centroid: Tensor         # 3, targetness-weighted seed centroid
    box: Box3D


def init_perception_params(params: dict, cfg: TrackerConfig, rng: np.random.Generator) -> None:
    c_in = 3
    for s, c_out in enumerate(cfg.encoder_widths):
        init_linear(params, f"enc.{s}", 2 * c_in, c_out, rng)
        c_in = c_out
    d = cfg.d_model
    init_linear(params, "head.mask", d + 3, 1, rng)
    init_linear(params, "head.vote1", d + 3, d, rng)
    init_linear(params, "head.vote2", d, 4, rng, gain=0.1)


def edge_conv(g: Graph, name: str, x: Tensor, neighbors: np.ndarray) -> Tensor:
    """``out_i = max_j relu(W [x_i ; x_j - x_i] + b)`` over the neighbours j of i.

    Evaluated as ``relu(x_i (W_c - W_n) + b + max_j x_j W_n)`` with W split into
    center/neighbour halves; relu is monotone, so this is the same function.
    """
    c = x.shape[1]
    w = g.param(f"{name}.w")
    w_center = ops.take(w, np.arange(c))
    w_nbr = ops.take(w, np.arange(c, 2 * c))
    self_part = ops.linear(x, w_center - w_nbr, g.param(f"{name}.b"))
    return ops.relu(self_part + ops.gather_max(ops.matmul(x, w_nbr), neighbors))


def _check_points(pts: np.ndarray, cfg: TrackerConfig, stage: int | None = None) -> None:
    if pts.shape[0] < cfg.knn_k + 1:
        where = "encode" if stage is None else f"encode stage {stage}"
        raise EncoderError(f"{where}: need at least {cfg.knn_k + 1} points, got {pts.shape[0]}")


def seed_indices(points: np.ndarray, cfg: TrackerConfig) -> np.ndarray:
    """Indices of the points that survive the three sampling stages.

    Depends only on coordinates, so it can be computed without running the network.
    """
    xyz = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    index = np.arange(xyz.shape[0])
    for s in range(3):
        _check_points(xyz, cfg, s)
        keep = farthest_point_sample(xyz, math.ceil(xyz.shape[0] / 2))
        xyz, index = xyz[keep], index[keep]
    return index


def encode(g: Graph, points: np.ndarray, cfg: TrackerConfig) -> FeatureMap:
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    _check_points(pts, cfg)
    xyz, index = pts, np.arange(pts.shape[0])
    x = g.constant(pts)
    for s in range(3):
        _check_points(xyz, cfg, s)
        x = edge_conv(g, f"enc.{s}", x, knn_graph(xyz, cfg.knn_k))
        keep = farthest_point_sample(xyz, math.ceil(xyz.shape[0] / 2))
        x = ops.take(x, keep)
        xyz, index = xyz[keep], index[keep]
    return FeatureMap(xyz, x, index)


def compose_box(ref: Box3D, offset: np.ndarray) -> Box3D:
    """Apply a (dx, dy, dz, dtheta) offset expressed in ``ref``'s frame."""
    d = np.asarray(offset, dtype=np.float64)
    center = d[:3] @ heading_rotation(ref.heading).T + ref.center_array()
    return Box3D(tuple(center), ref.heading + d[3], ref.size)


def decode(g: Graph, refined: Tensor, seeds: np.ndarray, ref_box: Box3D) -> Prediction:
    """Targetness, per-seed votes and the composed box for one frame.

    ``seeds`` must be expressed in ``ref_box``'s canonical frame.
    """
    n = refined.shape[0]
    inp = ops.concat([refined, g.constant(seeds)], axis=1)
    targetness = ops.sigmoid(ops.reshape(dense(g, "head.mask", inp), (n,)))
    votes = dense(g, "head.vote2", ops.relu(dense(g, "head.vote1", inp)))
    total = float(targetness.data.sum())
    if total < WEIGHT_EPS:
        weights = g.constant(np.full(n, 1.0 / n))
    else:
        weights = targetness / ops.sum(targetness)
    col = ops.reshape(weights, (n, 1))
    offset = ops.sum(col * votes, axis=0)
    centroid = ops.sum(col * g.constant(seeds), axis=0)
    return Prediction(targetness, weights, votes, offset, centroid, compose_box(ref_box, offset.data))
