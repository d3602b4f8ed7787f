"""Synthetic LiDAR-style tracking sequences and the text sequence format.

Targets are point-sampled parametric surfaces (no mesh assets). Each frame
resamples the target surface, keeps the sensor-facing side, hides a
contiguous angular sector according to the occlusion schedule and adds
distractors, static clutter, ground returns and Gaussian jitter.
"""

from __future__ import annotations

import math
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence as Seq

import numpy as np

from .geometry import Box3D, points_in_box

CATEGORY_SIZES = {
    "car": (1.8, 4.2, 1.6),
    "pedestrian": (0.7, 0.9, 1.8),
    "cyclist": (0.8, 1.9, 1.7),
}
ARCHETYPES = {"car": "car-shell", "pedestrian": "pedestrian-cylinders", "cyclist": "cyclist-composite"}
SENSOR = np.array([0.0, 0.0, 1.7])
INSET = 0.08  # archetype surfaces stay this far inside the box faces


class SequenceFormatError(ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class GeneratorSpecError(ValueError):
    pass


@dataclass
class Frame:
    points: np.ndarray
    gt_box: Box3D
    gt_mask: np.ndarray


@dataclass
class Sequence:
    category: str
    size: tuple[float, float, float]
    frames: list[Frame]
    name: str = ""

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def boxes(self) -> list[Box3D]:
        return [f.gt_box for f in self.frames]

    def identity(self) -> int:
        """Stable integer id derived from the content of the first frame."""
        f = self.frames[0]
        key = f"{self.category} {len(self.frames)} {self.size!r} {f.gt_box.center!r} {f.gt_box.heading!r}"
        return zlib.crc32(key.encode())


@dataclass
class GeneratorSpec:
    category: str
    path: np.ndarray                     # T x 4 rows (x, y, z, heading) of box poses
    seed: int = 0
    target_points: int = 400             # surface samples at 10 m before visibility culling
    occlusion: np.ndarray | None = None  # T fractions in [0, 1)
    occlusion_angle: np.ndarray | None = None  # T sector start azimuths (radians)
    distractors: int = 0
    distractor_offset: float = 3.0
    clutter_density: float = 0.0         # static clutter points per m^2 of ground
    ground_density: float = 0.0          # ground returns per m^2 near the target
    scene_margin: float = 8.0
    noise: float = 0.0
    self_occlusion: bool = True

    def __post_init__(self):
        self.path = np.asarray(self.path, dtype=np.float64).reshape(-1, 4)
        T = self.path.shape[0]
        if self.category not in CATEGORY_SIZES:
            raise GeneratorSpecError(f"unknown category {self.category!r}")
        if T < 2:
            raise GeneratorSpecError("a sequence needs at least two frames")
        self.occlusion = np.zeros(T) if self.occlusion is None else np.asarray(self.occlusion, float)
        if self.occlusion_angle is None:
            self.occlusion_angle = np.zeros(T)
        self.occlusion_angle = np.asarray(self.occlusion_angle, float)
        if self.occlusion.shape != (T,) or self.occlusion_angle.shape != (T,):
            raise GeneratorSpecError("occlusion schedule must have one entry per frame")
        if np.any(self.occlusion < 0) or np.any(self.occlusion >= 1):
            raise GeneratorSpecError("occlusion fractions must lie in [0, 1)")
        if min(self.target_points, self.distractors, self.clutter_density, self.ground_density,
               self.noise) < 0:
            raise GeneratorSpecError("densities, counts and noise must be non-negative")

    @property
    def frames(self) -> int:
        return self.path.shape[0]


# archetype surfaces ------------------------------------------------------------

def _box_faces(lo, hi, n, rng, skip_bottom=True):
    """Uniform samples on the faces of an axis-aligned box with outward normals."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    ext = hi - lo
    faces = []
    for axis in range(3):
        for sgn in (-1, 1):
            if skip_bottom and axis == 2 and sgn == -1:
                continue
            other = [a for a in range(3) if a != axis]
            faces.append((axis, sgn, ext[other[0]] * ext[other[1]]))
    areas = np.array([f[2] for f in faces])
    counts = rng.multinomial(n, areas / areas.sum())
    pts, nrm = [], []
    for (axis, sgn, _), c in zip(faces, counts):
        p = lo + rng.random((c, 3)) * ext
        p[:, axis] = hi[axis] if sgn > 0 else lo[axis]
        q = np.zeros((c, 3))
        q[:, axis] = sgn
        pts.append(p)
        nrm.append(q)
    return np.concatenate(pts), np.concatenate(nrm)


def _cylinder(center_xy, radius, z0, z1, n, rng):
    phi = rng.random(n) * 2 * math.pi
    z = z0 + rng.random(n) * (z1 - z0)
    nrm = np.stack([np.cos(phi), np.sin(phi), np.zeros(n)], axis=1)
    pts = np.stack([center_xy[0] + radius * nrm[:, 0], center_xy[1] + radius * nrm[:, 1], z], axis=1)
    return pts, nrm


def _sphere(center, radius, n, rng):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(center) + radius * v, v


def _ring(center_xz, radius, y, n, rng):
    phi = rng.random(n) * 2 * math.pi
    nrm = np.stack([np.cos(phi), np.zeros(n), np.sin(phi)], axis=1)
    pts = np.stack([center_xz[0] + radius * nrm[:, 0], np.full(n, y), center_xz[1] + radius * nrm[:, 2]],
                   axis=1)
    return pts, nrm


def _split(n, weights, rng):
    w = np.asarray(weights, float)
    return rng.multinomial(n, w / w.sum())


def sample_archetype(category: str, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Surface samples (points, outward normals) in the canonical box frame."""
    w, l, h = CATEGORY_SIZES[category]
    hw, hl, hh = w / 2 - INSET, l / 2 - INSET, h / 2 - INSET
    parts = []
    if category == "car":
        body_top = -hh + 0.55 * (2 * hh)
        n_body, n_cab = _split(n, [3.0, 1.0], rng)
        parts.append(_box_faces([-hl, -hw, -hh + 0.15], [hl, hw, body_top], n_body, rng))
        parts.append(_box_faces([-0.55 * hl, -0.9 * hw, body_top], [0.35 * hl, 0.9 * hw, hh], n_cab, rng))
    elif category == "pedestrian":
        legs, torso, head, arms = _split(n, [2.0, 3.0, 1.0, 1.2], rng)
        leg_top = -hh + 0.47 * 2 * hh
        l1, l2 = _split(legs, [1, 1], rng)
        parts.append(_cylinder((0.0, -0.11), 0.08, -hh, leg_top, l1, rng))
        parts.append(_cylinder((0.0, 0.11), 0.08, -hh, leg_top, l2, rng))
        parts.append(_cylinder((0.0, 0.0), 0.17, leg_top, hh - 0.26, torso, rng))
        a1, a2 = _split(arms, [1, 1], rng)
        parts.append(_cylinder((0.05, -0.24), 0.05, leg_top + 0.05, hh - 0.3, a1, rng))
        parts.append(_cylinder((0.05, 0.24), 0.05, leg_top + 0.05, hh - 0.3, a2, rng))
        parts.append(_sphere((0.0, 0.0, hh - 0.11), 0.11, head, rng))
    elif category == "cyclist":
        wheels, bar, torso, head = _split(n, [3.0, 0.8, 2.0, 0.6], rng)
        r = 0.32
        w1, w2 = _split(wheels, [1, 1], rng)
        parts.append(_ring((hl - r, -hh + r), r, 0.0, w1, rng))
        parts.append(_ring((-hl + r, -hh + r), r, 0.0, w2, rng))
        t = rng.random(bar)
        bar_pts = np.stack([(-hl + r) + t * (2 * hl - 2 * r), np.zeros(bar), np.full(bar, -hh + 2 * r)], axis=1)
        parts.append((bar_pts, np.tile([0.0, 0.0, 1.0], (bar, 1))))
        parts.append(_cylinder((-0.1, 0.0), 0.18, -hh + 2 * r, hh - 0.25, torso, rng))
        parts.append(_sphere((0.0, 0.0, hh - 0.12), 0.12, head, rng))
    else:
        raise GeneratorSpecError(f"unknown category {category!r}")
    pts = np.concatenate([p for p, _ in parts])
    nrm = np.concatenate([q for _, q in parts])
    return pts, nrm


def _pose(box: Box3D, pts: np.ndarray) -> np.ndarray:
    c, s = math.cos(box.heading), math.sin(box.heading)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    return pts @ rot + box.center_array()


MIN_RANGE = 5.0


def _instance_surface(category, n_base, rng):
    """Canonical surface samples for one object, shuffled once.

    Frames take a prefix whose length follows range, so every frame shows a
    subset of the same canonical points.
    """
    n_max = max(int(round(n_base * (10.0 / MIN_RANGE) ** 2)), 8)
    pts, nrm = sample_archetype(category, n_max, rng)
    perm = rng.permutation(len(pts))
    return pts[perm], nrm[perm]


def _visible_instance(surface, box: Box3D, n_base, self_occlusion=True):
    pts, nrm = surface
    dist = max(float(np.linalg.norm(np.array(box.center[:2]))), MIN_RANGE)
    n = min(max(int(round(n_base * (10.0 / dist) ** 2)), 8), len(pts))
    pts, nrm = pts[:n], nrm[:n]
    world = _pose(box, pts)
    if self_occlusion:
        world_n = _pose(box.with_pose((0.0, 0.0, 0.0), box.heading), nrm)
        facing = np.einsum("ij,ij->i", world_n, SENSOR - world) > 0
        return world[facing], pts[facing]
    return world, pts


def occlude_sector(local: np.ndarray, fraction: float, start: float) -> np.ndarray:
    """Keep-mask hiding the ``fraction`` of points in the azimuth sector that
    begins at ``start`` (counter-clockwise, canonical frame)."""
    n = local.shape[0]
    drop = int(round(fraction * n))
    keep = np.ones(n, bool)
    if drop == 0:
        return keep
    az = np.mod(np.arctan2(local[:, 1], local[:, 0]) - start, 2 * math.pi)
    keep[np.argsort(az, kind="stable")[:drop]] = False
    return keep


def generate_sequence(spec: GeneratorSpec, name: str = "") -> Sequence:
    rng = np.random.default_rng(spec.seed)
    size = CATEGORY_SIZES[spec.category]
    boxes = [Box3D(tuple(p[:3]), p[3], size) for p in spec.path]

    surface = _instance_surface(spec.category, spec.target_points, rng)
    offsets = []
    for k in range(spec.distractors):
        side = 1 if k % 2 == 0 else -1
        lateral = side * spec.distractor_offset * (1 + k // 2) + rng.normal(0, 0.2)
        offsets.append((rng.normal(0, 1.0), lateral, rng.normal(0, 0.1),
                        _instance_surface(spec.category, spec.target_points, rng)))

    lo = spec.path[:, :2].min(axis=0) - spec.scene_margin
    hi = spec.path[:, :2].max(axis=0) + spec.scene_margin
    area = float(np.prod(hi - lo))
    n_clutter = int(round(spec.clutter_density * area))
    clutter = np.column_stack([lo + rng.random((n_clutter, 2)) * (hi - lo), rng.random(n_clutter) * 2.5])
    clutter = clutter[~_inside_any(clutter, boxes)]

    frames = []
    for t, box in enumerate(boxes):
        world, local = _visible_instance(surface, box, spec.target_points, spec.self_occlusion)
        keep = occlude_sector(local, spec.occlusion[t], spec.occlusion_angle[t])
        if t == 0 and not keep.any():
            raise GeneratorSpecError("first frame has no visible target points")
        chunks = [world[keep]]
        for along, lateral, dyaw, dsurf in offsets:
            c, s = math.cos(box.heading), math.sin(box.heading)
            centre = np.array(box.center) + np.array([c * along - s * lateral, s * along + c * lateral, 0.0])
            dbox = box.with_pose(centre, box.heading + dyaw)
            dpts, _ = _visible_instance(dsurf, dbox, spec.target_points, spec.self_occlusion)
            chunks.append(dpts[~points_in_box(dpts, box)])
        if spec.ground_density > 0:
            r = spec.scene_margin
            n_ground = int(round(spec.ground_density * (2 * r) ** 2))
            g = np.column_stack([box.center[0] - r + rng.random(n_ground) * 2 * r,
                                 box.center[1] - r + rng.random(n_ground) * 2 * r,
                                 np.full(n_ground, box.center[2] - box.h / 2 - 0.2)])
            chunks.append(g)
        if n_clutter:
            chunks.append(clutter)
        pts = np.concatenate(chunks)
        if spec.noise > 0:
            pts = pts + rng.normal(0.0, spec.noise, size=pts.shape)
        frames.append(Frame(pts, box, points_in_box(pts, box)))
    if not frames[0].gt_mask.any():
        raise GeneratorSpecError("first frame has no target points inside the box")
    return Sequence(spec.category, size, frames, name)


def _inside_any(pts, boxes) -> np.ndarray:
    mask = np.zeros(len(pts), bool)
    for b in boxes:
        # generous margin so static clutter never sits on the target's path
        grown = Box3D(b.center, b.heading, (b.w + 1.0, b.l + 1.0, b.h + 1.0))
        mask |= points_in_box(pts, grown)
    return mask


# random scenario specs -----------------------------------------------------------

MOTION = {
    # speed range (m/frame), heading random-walk sigma, initial range (m)
    "car": ((0.2, 1.2), 0.03, (8.0, 25.0)),
    "pedestrian": ((0.03, 0.15), 0.08, (6.0, 15.0)),
    "cyclist": ((0.15, 0.6), 0.05, (6.0, 20.0)),
}


def random_path(category: str, T: int, rng: np.random.Generator, static: bool = False) -> np.ndarray:
    size = CATEGORY_SIZES[category]
    (vmin, vmax), turn, (rmin, rmax) = MOTION[category]
    r = rng.uniform(rmin, rmax)
    phi = rng.uniform(-math.pi, math.pi)
    pos = np.array([r * math.cos(phi), r * math.sin(phi)])
    heading = rng.uniform(-math.pi, math.pi)
    speed = 0.0 if static else rng.uniform(vmin, vmax)
    omega = 0.0
    path = np.empty((T, 4))
    for t in range(T):
        path[t] = (pos[0], pos[1], size[2] / 2, heading)
        if not static:
            omega = 0.8 * omega + rng.normal(0, turn)
            heading += omega
            speed = float(np.clip(speed + rng.normal(0, 0.05 * vmax), vmin, vmax))
            pos = pos + speed * np.array([math.cos(heading), math.sin(heading)])
    return path


def random_occlusion(T: int, rng: np.random.Generator, max_fraction: float, episodes: float = 0.08):
    """Occlusion episodes: each frame starts one with probability ``episodes``."""
    occ = np.zeros(T)
    ang = np.zeros(T)
    t = 1
    while t < T:
        if max_fraction > 0 and rng.random() < episodes:
            length = int(rng.integers(3, 12))
            frac = rng.uniform(0.3, max_fraction)
            start = rng.uniform(0, 2 * math.pi)
            occ[t:t + length] = frac
            ang[t:t + length] = start
            t += length
        else:
            t += 1
    return occ, ang


def random_spec(category: str, T: int, seed: int, max_occlusion: float = 0.0, distractors: int = 0,
                clutter_density: float = 0.0, ground_density: float = 0.0, noise: float = 0.0,
                target_points: int = 400, static: bool = False) -> GeneratorSpec:
    rng = np.random.default_rng([seed, 7])
    path = random_path(category, T, rng, static=static)
    occ, ang = random_occlusion(T, rng, max_occlusion)
    offset = {"car": 3.5, "pedestrian": 1.5, "cyclist": 2.0}[category]
    return GeneratorSpec(category, path, seed=seed, target_points=target_points, occlusion=occ,
                         occlusion_angle=ang, distractors=distractors, distractor_offset=offset,
                         clutter_density=clutter_density, ground_density=ground_density, noise=noise)


@dataclass
class SuiteSpec:
    """Recipe for a set of sequences (the ``gen-data --spec`` file)."""

    count: int = 20
    seed: int = 0
    categories: tuple[str, ...] = ("car", "pedestrian", "cyclist")
    min_frames: int = 40
    max_frames: int = 60
    max_occlusion: float = 0.7
    distractors: int = 1
    clutter_density: float = 0.05
    ground_density: float = 0.5
    noise: float = 0.02
    target_points: int = 400
    static: bool = False

    _types = {"count": int, "seed": int, "min_frames": int, "max_frames": int, "max_occlusion": float,
              "distractors": int, "clutter_density": float, "ground_density": float, "noise": float,
              "target_points": int}

    @classmethod
    def parse(cls, text: str) -> "SuiteSpec":
        kw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise GeneratorSpecError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "categories":
                kw[key] = tuple(v.strip() for v in value.split(",") if v.strip())
                bad = [c for c in kw[key] if c not in CATEGORY_SIZES]
                if bad:
                    raise GeneratorSpecError(f"line {lineno}: unknown categories {bad}")
            elif key == "static":
                kw[key] = value.lower() in ("1", "true", "yes")
            elif key in cls._types:
                try:
                    kw[key] = cls._types[key](value)
                except ValueError:
                    raise GeneratorSpecError(f"line {lineno}: bad value for {key}: {value!r}") from None
            else:
                raise GeneratorSpecError(f"line {lineno}: unknown key {key!r}")
        return cls(**kw)


def generate_suite(suite: SuiteSpec) -> list[Sequence]:
    rng = np.random.default_rng(suite.seed)
    out = []
    k = 0
    while len(out) < suite.count:
        cat = suite.categories[len(out) % len(suite.categories)]
        T = int(rng.integers(suite.min_frames, suite.max_frames + 1))
        spec = random_spec(cat, T, seed=suite.seed * 100003 + k, max_occlusion=suite.max_occlusion,
                           distractors=suite.distractors, clutter_density=suite.clutter_density,
                           ground_density=suite.ground_density, noise=suite.noise,
                           target_points=suite.target_points, static=suite.static)
        k += 1
        try:
            seq = generate_sequence(spec, name=f"seq_{len(out):04d}")
        except GeneratorSpecError:
            continue
        out.append(seq)
    return out


# file format -----------------------------------------------------------------------

def write_sequence(seq: Sequence, path) -> None:
    w, l, h = seq.size
    lines = [f"SEQ v1 {seq.category} {len(seq.frames)} {w!r} {l!r} {h!r}"]
    for t, fr in enumerate(seq.frames, 1):
        cx, cy, cz = fr.gt_box.center
        lines.append(f"FRAME {t} {len(fr.points)} {cx!r} {cy!r} {cz!r} {fr.gt_box.heading!r}")
        for (x, y, z), m in zip(fr.points.tolist(), fr.gt_mask.tolist()):
            lines.append(f"{x!r} {y!r} {z!r} {int(m)}")
    Path(path).write_text("\n".join(lines) + "\n")


def _floats(parts, lineno, what):
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise SequenceFormatError(lineno, f"malformed number in {what}") from None


def read_sequence(path) -> Sequence:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise SequenceFormatError(1, "missing SEQ header (empty file)")
    head = lines[0].split()
    if len(head) != 7 or head[0] != "SEQ" or head[1] != "v1":
        raise SequenceFormatError(1, "expected 'SEQ v1 <category> <T> <w> <l> <h>'")
    category = head[2]
    try:
        T = int(head[3])
    except ValueError:
        raise SequenceFormatError(1, "frame count is not an integer") from None
    size = tuple(_floats(head[4:7], 1, "header size"))
    frames = []
    pos = 1
    for t in range(1, T + 1):
        if pos >= len(lines):
            raise SequenceFormatError(pos + 1, f"missing FRAME {t} section (file ends after {t - 1} of {T})")
        parts = lines[pos].split()
        if len(parts) != 7 or parts[0] != "FRAME":
            raise SequenceFormatError(pos + 1, f"expected FRAME {t} header")
        if parts[1] != str(t):
            raise SequenceFormatError(pos + 1, f"expected frame index {t}, got {parts[1]}")
        if not parts[2].isdigit():
            raise SequenceFormatError(pos + 1, "point count is not a non-negative integer")
        n = int(parts[2])
        cx, cy, cz, theta = _floats(parts[3:7], pos + 1, "frame header")
        if pos + 1 + n > len(lines):
            raise SequenceFormatError(len(lines) + 1,
                                      f"FRAME {t} points section truncated "
                                      f"({len(lines) - pos - 1} of {n} point lines)")
        pts = np.empty((n, 3))
        mask = np.empty(n, bool)
        for r in range(n):
            row = lines[pos + 1 + r].split()
            if len(row) != 4 or row[3] not in ("0", "1"):
                raise SequenceFormatError(pos + 2 + r, "expected '<x> <y> <z> <mask-bit>'")
            pts[r] = _floats(row[:3], pos + 2 + r, "point")
            mask[r] = row[3] == "1"
        box = Box3D((cx, cy, cz), theta, size)
        expected = points_in_box(pts, box)
        if not np.array_equal(expected, mask):
            warnings.warn(f"{path.name}: frame {t} mask disagrees with box for "
                          f"{int((expected != mask).sum())} points; recomputed", stacklevel=2)
            mask = expected
        frames.append(Frame(pts, box, mask))
        pos += 1 + n
    if any(line.strip() for line in lines[pos:]):
        raise SequenceFormatError(pos + 1, "unexpected content after last frame")
    return Sequence(category, size, frames, path.stem)


def write_suite(seqs: Seq[Sequence], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(seqs):
        p = out / f"{s.name or f'seq_{i:04d}'}.seq"
        write_sequence(s, p)
        paths.append(p)
    return paths


def read_suite(in_dir) -> list[Sequence]:
    return [read_sequence(p) for p in sorted(Path(in_dir).glob("*.seq"))]
