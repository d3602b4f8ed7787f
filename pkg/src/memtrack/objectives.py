"""Training losses: temporal consistency, memory cycle consistency, decoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Graph, ShapeError, Tensor, ops
from .geometry import Box3D, CorrespondenceSet, canonicalize, wrap_angle
from .perception import Prediction

NORM_EPS = 1e-8


@dataclass
class TransitionMatrices:
    token_to_point: Tensor   # K x N
    point_to_token: Tensor   # N x K
    cycle: Tensor            # K x K


@dataclass
class LossBreakdown:
    tc: Tensor
    cycle: Tensor
    fg: Tensor
    mcc: Tensor
    m: Tensor
    c: Tensor
    bbox: Tensor
    dec: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in
                ("tc", "cycle", "fg", "mcc", "m", "c", "bbox", "dec", "total")}


def _zero(g: Graph) -> Tensor:
    return g.constant(0.0)


def temporal_consistency_loss(g: Graph, features: Sequence[Tensor], pairs: CorrespondenceSet) -> Tensor:
    """Smooth-L1 distance (summed over channels) between matched point features, averaged over pairs."""
    if len(pairs) == 0:
        return _zero(g)
    sizes = np.array([f.shape[0] for f in features])
    top = int(max(pairs.t.max(), pairs.t2.max()))
    if top >= len(features) or min(pairs.t.min(), pairs.t2.min()) < 0:
        raise ShapeError("temporal_consistency_loss", (len(features),), (top + 1,),
                         detail="frame index out of range")
    if (np.any(pairs.i >= sizes[pairs.t]) or np.any(pairs.j >= sizes[pairs.t2])
            or pairs.i.min() < 0 or pairs.j.min() < 0):
        raise ShapeError("temporal_consistency_loss", tuple(sizes), detail="point index out of range")
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    stacked = ops.concat(list(features), axis=0)
    a = ops.take(stacked, offsets[pairs.t] + pairs.i)
    b = ops.take(stacked, offsets[pairs.t2] + pairs.j)
    return ops.scale(ops.sum(ops.smooth_l1(a - b)), 1.0 / len(pairs))


def build_transitions(tokens: Tensor, features: Tensor, tau_cycle: float) -> TransitionMatrices:
    if tau_cycle <= 0:
        raise ValueError("tau_cycle must be positive")
    sim = ops.cosine_similarity_matrix(tokens, features, eps=NORM_EPS)
    x2f = ops.softmax(sim, axis=1, temperature=tau_cycle)
    f2x = ops.softmax(ops.transpose(sim), axis=1, temperature=tau_cycle)
    return TransitionMatrices(x2f, f2x, ops.matmul(x2f, f2x))


def mcc_loss(g: Graph, matrices: Sequence[TransitionMatrices],
             fg_sets: Sequence[np.ndarray]) -> tuple[Tensor, Tensor, Tensor]:
    """(L_cycle, L_fg, L_MCC) averaged over the frames of a window.

    Frames without ground-truth foreground are left out of L_fg.
    """
    if len(matrices) != len(fg_sets):
        raise ValueError("one foreground index set per frame is required")
    if not matrices:
        z = _zero(g)
        return z, z, z
    cyc = [ops.nll(m.cycle, np.arange(m.cycle.shape[0])) for m in matrices]
    l_cycle = ops.scale(_sum(cyc), 1.0 / len(cyc))
    fg_terms = []
    for m, idx in zip(matrices, fg_sets):
        idx = np.asarray(idx, dtype=np.intp)
        if idx.size == 0:
            continue
        mass = ops.sum(ops.take(m.token_to_point, idx, axis=1), axis=1)
        fg_terms.append(ops.mean(ops.log(mass)))
    l_fg = ops.scale(_sum(fg_terms), -1.0 / len(fg_terms)) if fg_terms else _zero(g)
    return l_cycle, l_fg, l_cycle + l_fg


def _sum(terms: Sequence[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def box_residual_target(gt: Box3D, ref: Box3D) -> np.ndarray:
    """Ground-truth (dx, dy, dz, dtheta) of ``gt`` in ``ref``'s frame."""
    c = canonicalize(gt.center_array()[None], ref)[0]
    return np.array([c[0], c[1], c[2], wrap_angle(gt.heading - ref.heading)])


def decoder_loss(g: Graph, pred: Prediction, gt_box: Box3D, ref_box: Box3D, gt_mask: np.ndarray,
                 lambda_m: float = 1.0, lambda_c: float = 1.0) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """(L_m, L_c, L_bbox, L_dec) for one frame, everything in ``ref_box``'s frame."""
    target = box_residual_target(gt_box, ref_box)
    l_m = ops.binary_cross_entropy(pred.targetness, np.asarray(gt_mask, dtype=np.float64))
    l_c = ops.sum(ops.squared_error(pred.centroid, g.constant(target[:3])))
    l_bbox = ops.sum(ops.smooth_l1(pred.offset - g.constant(target)))
    l_dec = ops.scale(l_m, lambda_m) + ops.scale(l_c, lambda_c) + l_bbox
    return l_m, l_c, l_bbox, l_dec


def total_loss(dec: Tensor, tc: Tensor, mcc: Tensor) -> Tensor:
    return dec + tc + mcc
