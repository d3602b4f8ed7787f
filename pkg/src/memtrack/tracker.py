"""Per-sequence inference: crop, resample, encode, refine, decode, update."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph
from .config import TrackerConfig
from .geometry import Box3D, canonicalize
from .memory import MemoryInitError, MemoryState
from .model import first_frame, next_frame
from .synth import Sequence


class TrackInitError(MemoryInitError):
    pass


@dataclass
class TrackerState:
    memory: MemoryState
    previous_box: Box3D
    previous_max_targetness: float
    frame: int
    sequence_id: int = 0
    freeze_memory: bool = False

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.memory.fg_tokens.data.tobytes())
        h.update(self.memory.bg_features.data.tobytes())
        h.update(np.array([*self.previous_box.center, self.previous_box.heading,
                           self.previous_max_targetness, self.frame]).tobytes())
        return h.hexdigest()


def frame_seed(sequence_id: int, frame: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([sequence_id & 0xFFFFFFFF, frame])


def search_mask(points: np.ndarray, box: Box3D, cfg: TrackerConfig) -> np.ndarray:
    c = canonicalize(points, box)
    w, l, h = box.size
    m, mz = cfg.search_margin_xy, cfg.search_margin_z
    return (np.abs(c[:, 0]) <= l / 2 + m) & (np.abs(c[:, 1]) <= w / 2 + m) & (np.abs(c[:, 2]) <= h / 2 + mz)


def crop_and_resample(points: np.ndarray, box: Box3D, cfg: TrackerConfig,
                      seed) -> tuple[np.ndarray, bool]:
    """Exactly ``cfg.n_points`` world points from the search region around ``box``.

    Returns ``(points, degenerate)``; a frame with nothing in the region yields
    copies of the box center and ``degenerate=True``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    region = pts[search_mask(pts, box, cfg)] if len(pts) else pts
    n = cfg.n_points
    if len(region) == 0:
        return np.tile(box.center_array(), (n, 1)), True
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(region), size=n, replace=len(region) < n)
    return region[idx], False


def init_track(points: np.ndarray, gt_box: Box3D, params: dict, cfg: TrackerConfig,
               sequence_id: int = 0, freeze_memory: bool = False) -> TrackerState:
    pts, degenerate = crop_and_resample(points, gt_box, cfg, frame_seed(sequence_id, 1))
    if degenerate:
        raise TrackInitError("init_track: no points in the search region of the first box")
    g = Graph(params)
    try:
        res = first_frame(g, pts, gt_box, cfg)
    except MemoryInitError as e:
        raise TrackInitError(f"init_track: {e}") from None
    return TrackerState(res.memory.detached(), gt_box, 1.0, 1, sequence_id, freeze_memory)


def step(state: TrackerState, points: np.ndarray, params: dict,
         cfg: TrackerConfig) -> tuple[Box3D, TrackerState, dict]:
    """Track one frame. Returns the emitted box, the new state and diagnostics."""
    frame = state.frame + 1
    pts, degenerate = crop_and_resample(points, state.previous_box, cfg,
                                        frame_seed(state.sequence_id, frame))
    g = Graph(params)
    res = next_frame(g, state.memory, pts, state.previous_box, cfg, update=not state.freeze_memory)
    score = res.prediction.targetness.data
    top = float(score.max())
    confident = top >= cfg.confidence_floor and not degenerate
    box = res.prediction.box if confident else state.previous_box
    memory = res.memory if state.freeze_memory else res.memory.detached()
    new_state = TrackerState(memory, box, top, frame, state.sequence_id, state.freeze_memory)
    return box, new_state, {"max_targetness": top, "degenerate": degenerate, "confident": confident}


def track_sequence(seq: Sequence, params: dict, cfg: TrackerConfig,
                   freeze_memory: bool = False) -> list[Box3D]:
    """One-pass tracking; returns one box per frame after the first."""
    if len(seq.frames) < 2:
        return []
    sid = seq.identity()
    state = init_track(seq.frames[0].points, seq.frames[0].gt_box, params, cfg, sid, freeze_memory)
    out = []
    for fr in seq.frames[1:]:
        box, state, _ = step(state, fr.points, params, cfg)
        out.append(box)
    return out
