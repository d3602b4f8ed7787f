"""Oriented 3D boxes: canonical frames, containment, rotated IoU, correspondences."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .kernels import nearest_neighbors

AREA_EPS = 1e-12


def wrap_angle(theta: float) -> float:
    """Map an angle to (-pi, pi]."""
    r = math.remainder(float(theta), 2 * math.pi)
    return math.pi if r == -math.pi else r


@dataclass(frozen=True)
class Box3D:
    """Box with center (x, y, z), heading about +z, and size (w, l, h).

    ``l`` runs along the heading direction, ``w`` across it.
    """

    center: tuple[float, float, float]
    heading: float
    size: tuple[float, float, float]

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        s = tuple(float(v) for v in self.size)
        if len(c) != 3 or len(s) != 3:
            raise ValueError("center and size need three components")
        if min(s) <= 0:
            raise ValueError(f"box size must be positive, got {s}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def w(self) -> float:
        return self.size[0]

    @property
    def l(self) -> float:  # noqa: E743
        return self.size[1]

    @property
    def h(self) -> float:
        return self.size[2]

    @property
    def volume(self) -> float:
        return self.size[0] * self.size[1] * self.size[2]

    def center_array(self) -> np.ndarray:
        return np.array(self.center)

    def with_pose(self, center, heading) -> "Box3D":
        return Box3D(tuple(center), heading, self.size)


def heading_rotation(theta: float) -> np.ndarray:
    """Rotation about the up axis whose columns are the box axes in world frame.

    With points as rows, ``(p - c) @ R`` gives box-frame coordinates.
    """
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def canonicalize(points: np.ndarray, box: Box3D) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return (pts - box.center_array()) @ heading_rotation(box.heading)


def decanonicalize(points: np.ndarray, box: Box3D) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return pts @ heading_rotation(box.heading).T + box.center_array()


def points_in_box(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Boolean mask of points inside the box, faces included."""
    c = canonicalize(points, box)
    w, l, h = box.size
    return (np.abs(c[:, 0]) <= l / 2) & (np.abs(c[:, 1]) <= w / 2) & (np.abs(c[:, 2]) <= h / 2)


def center_distance(a: Box3D, b: Box3D) -> float:
    return float(np.linalg.norm(a.center_array() - b.center_array()))


def rigid_motion(yaw: float, translation) -> tuple[np.ndarray, np.ndarray]:
    """(R, t) for a rotation about +z followed by a translation, acting on rows."""
    return heading_rotation(yaw).T, np.asarray(translation, dtype=np.float64)


def move_points(points: np.ndarray, yaw: float, translation) -> np.ndarray:
    rot, t = rigid_motion(yaw, translation)
    return np.asarray(points, dtype=np.float64).reshape(-1, 3) @ rot + t


def move_box(box: Box3D, yaw: float, translation) -> Box3D:
    center = move_points(box.center_array()[None], yaw, translation)[0]
    return Box3D(tuple(center), box.heading + yaw, box.size)


# rotated IoU -----------------------------------------------------------------

def bev_corners(box: Box3D) -> np.ndarray:
    """Four ground-plane corners, counter-clockwise."""
    w, l, _ = box.size
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
    c, s = math.cos(box.heading), math.sin(box.heading)
    rot = np.array([[c, s], [-s, c]])
    return local @ rot + np.array(box.center[:2])


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by convex CCW polygon ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for e in range(n):
        if not out:
            break
        ax, ay = clip[e]
        bx, by = clip[(e + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        src, out = out, []
        prev = src[-1]
        sp = side(prev)
        for cur in src:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_cross_point(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_cross_point(prev, cur, sp, sc))
            prev, sp = cur, sc
    return np.array(out).reshape(-1, 2)


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    area = polygon_area(clip_convex(bev_corners(a), bev_corners(b)))
    return 0.0 if area < AREA_EPS else area


def iou3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU of two boxes rotated about the up axis."""
    lo = max(a.center[2] - a.h / 2, b.center[2] - b.h / 2)
    hi = min(a.center[2] + a.h / 2, b.center[2] + b.h / 2)
    dz = hi - lo
    if dz <= 0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    if inter <= 0:
        return 0.0
    union = a.volume + b.volume - inter
    return float(min(max(inter / union, 0.0), 1.0))


# correspondences -------------------------------------------------------------

@dataclass
class CorrespondenceSet:
    """Matched foreground point pairs across a window.

    Row ``r`` says point ``i[r]`` of frame ``t[r]`` matches point ``j[r]`` of
    the later frame ``t2[r]``; indices address each frame's full point array.
    """

    t: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    i: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    t2: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    j: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    dist: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __len__(self) -> int:
        return int(self.t.size)

    def triples(self) -> list[tuple[int, int, int, int]]:
        return list(zip(self.t.tolist(), self.i.tolist(), self.t2.tolist(), self.j.tolist()))


def build_correspondences(points: Sequence[np.ndarray], boxes: Sequence[Box3D],
                          masks: Sequence[np.ndarray], tau_dist: float,
                          pairs: Sequence[tuple[int, int]] | None = None) -> CorrespondenceSet:
    """Nearest canonical foreground match for every ordered frame pair t < t'.

    Only matches strictly closer than ``tau_dist`` are kept. ``pairs``
    restricts the frame pairs considered (default: all t < t').
    """
    if len(points) != len(boxes) or len(points) != len(masks):
        raise ValueError("points, boxes and masks must have one entry per frame")
    T = len(points)
    canon, fg_idx = [], []
    for pts, box, m in zip(points, boxes, masks):
        idx = np.flatnonzero(np.asarray(m, bool))
        fg_idx.append(idx)
        canon.append(canonicalize(np.asarray(pts)[idx], box))
    if pairs is None:
        pairs = [(a, b) for a in range(T) for b in range(a + 1, T)]
    cols: list[list[np.ndarray]] = [[], [], [], [], []]
    for a, b in pairs:
        if not a < b:
            raise ValueError(f"frame pair ({a}, {b}) is not ordered")
        if fg_idx[a].size == 0 or fg_idx[b].size == 0:
            continue
        nn, d = nearest_neighbors(canon[a], canon[b])
        keep = d < tau_dist
        k = int(keep.sum())
        if k == 0:
            continue
        cols[0].append(np.full(k, a, np.int64))
        cols[1].append(fg_idx[a][keep])
        cols[2].append(np.full(k, b, np.int64))
        cols[3].append(fg_idx[b][nn[keep]])
        cols[4].append(d[keep])
    if not cols[0]:
        return CorrespondenceSet()
    return CorrespondenceSet(*(np.concatenate(c) for c in cols))
