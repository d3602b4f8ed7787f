"""One-pass evaluation, length stratification, feature consistency, memory footprint
and the ablation runner, plus the boxes/report file formats."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence as Seq

import numpy as np

from .autodiff import Graph
from .config import TrackerConfig, TrainConfig
from .geometry import Box3D, build_correspondences, center_distance, iou3d, points_in_box
from .model import encode_in_frame, init_params
from .synth import Sequence
from .tracker import crop_and_resample, frame_seed, track_sequence

log = logging.getLogger(__name__)

PRECISION_RANGE = 2.0
GROUPS = ("S", "M", "L", "XL")


class EvaluationError(ValueError):
    pass


# one-pass evaluation -------------------------------------------------------------

@dataclass
class OpeResult:
    success: float
    precision: float
    ious: np.ndarray
    errors: np.ndarray

    def __len__(self) -> int:
        return len(self.ious)


def _closed_forms(ious: np.ndarray, errors: np.ndarray) -> tuple[float, float]:
    success = 100.0 * float(np.mean(ious))
    precision = 100.0 * float(np.mean((PRECISION_RANGE - np.minimum(errors, PRECISION_RANGE)) / PRECISION_RANGE))
    return success, precision


def ope(pred: Seq[Box3D], gt: Seq[Box3D]) -> OpeResult:
    if len(pred) != len(gt):
        raise EvaluationError(f"{len(pred)} predicted boxes for {len(gt)} ground-truth boxes")
    if len(gt) == 0:
        raise EvaluationError("cannot evaluate an empty result list")
    ious = np.array([iou3d(p, g) for p, g in zip(pred, gt)])
    errors = np.array([center_distance(p, g) for p, g in zip(pred, gt)])
    return OpeResult(*_closed_forms(ious, errors), ious, errors)


def combine(results: Seq[OpeResult]) -> OpeResult:
    """Pool frames of several tracklets (frame-weighted)."""
    if not results:
        return OpeResult(0.0, 0.0, np.zeros(0), np.zeros(0))
    ious = np.concatenate([r.ious for r in results])
    errors = np.concatenate([r.errors for r in results])
    if len(ious) == 0:
        return OpeResult(0.0, 0.0, ious, errors)
    return OpeResult(*_closed_forms(ious, errors), ious, errors)


def success_curve(ious: np.ndarray, n: int = 2001) -> tuple[np.ndarray, np.ndarray]:
    th = np.linspace(0.0, 1.0, n)
    return th, np.array([(ious > t).mean() for t in th])


def precision_curve(errors: np.ndarray, n: int = 2001) -> tuple[np.ndarray, np.ndarray]:
    th = np.linspace(0.0, PRECISION_RANGE, n)
    return th, np.array([(errors <= t).mean() for t in th])


def trapezoid_auc(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2) / (x[-1] - x[0]))


# stratification ------------------------------------------------------------------

@dataclass
class Tracklet:
    name: str
    category: str
    length: int
    result: OpeResult


@dataclass
class StratifiedTable:
    thresholds: tuple[float, float, float] | None
    groups: dict[str, list[Tracklet]]

    def summary(self) -> dict[str, tuple[int, float, float]]:
        out = {}
        for g, members in self.groups.items():
            r = combine([m.result for m in members])
            out[g] = (len(members), r.success, r.precision)
        return out


def stratify_by_length(tracklets: Seq[Tracklet]) -> StratifiedTable:
    """Quartile groups by sequence length, split at the 25/50/75th percentiles."""
    if len(tracklets) < 4:
        warnings.warn("fewer than 4 tracklets: reporting a single group", stacklevel=2)
        return StratifiedTable(None, {"ALL": list(tracklets)})
    lengths = np.array([t.length for t in tracklets], dtype=np.float64)
    p = tuple(float(v) for v in np.percentile(lengths, [25, 50, 75]))
    groups: dict[str, list[Tracklet]] = {g: [] for g in GROUPS}
    for t in tracklets:
        k = int(np.searchsorted(p, t.length, side="left"))
        groups[GROUPS[k]].append(t)
    if lengths.min() == lengths.max():
        warnings.warn("all tracklets have the same length: quartile groups are degenerate", stacklevel=2)
    return StratifiedTable(p, groups)


# feature consistency -------------------------------------------------------------

def sequence_features(params: dict, seq: Sequence, cfg: TrackerConfig) -> tuple[list, list, list]:
    """Backbone features, world seeds and GT seed masks for every frame.

    Frame t is cropped and encoded around the ground-truth box of frame t-1
    (the first frame around its own box).
    """
    sid = seq.identity()
    feats, seeds, masks = [], [], []
    for t, fr in enumerate(seq.frames):
        ref = seq.frames[max(t - 1, 0)].gt_box
        pts, _ = crop_and_resample(fr.points, ref, cfg, frame_seed(sid, t + 1))
        fmap, sw = encode_in_frame(Graph(params), pts, ref, cfg)
        feats.append(fmap.features.data)
        seeds.append(sw)
        masks.append(points_in_box(sw, fr.gt_box))
    return feats, seeds, masks


def _row_cosine(a: np.ndarray, b: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    na = np.linalg.norm(a, axis=1) + eps
    nb = np.linalg.norm(b, axis=1) + eps
    return (a * b).sum(axis=1) / (na * nb)


def consistency_from_features(features: Seq[np.ndarray], seeds: Seq[np.ndarray], boxes: Seq[Box3D],
                              masks: Seq[np.ndarray], max_gap: int, tau_dist: float,
                              acc: dict[int, list[float]] | None = None) -> dict[int, list[float]]:
    """Per-frame-pair mean cosine similarity of corresponding foreground seeds, keyed by gap."""
    acc = {} if acc is None else acc
    T = len(features)
    for g in range(1, max_gap + 1):
        pairs = [(t, t + g) for t in range(T - g)]
        if not pairs:
            continue
        cs = build_correspondences(seeds, boxes, masks, tau_dist, pairs=pairs)
        if len(cs) == 0:
            continue
        sims = np.empty(len(cs))
        for t in np.unique(cs.t):
            sel = cs.t == t
            t2 = int(cs.t2[sel][0])
            sims[sel] = _row_cosine(features[t][cs.i[sel]], features[t2][cs.j[sel]])
        for t in np.unique(cs.t):
            acc.setdefault(g, []).append(float(sims[cs.t == t].mean()))
    return acc


def consistency_profile(params: dict, sequences: Seq[Sequence], cfg: TrackerConfig, max_gap: int = 20,
                        tau_dist: float = 0.3) -> dict[int, float]:
    """Mean cosine similarity between matched target features ``g`` frames apart.

    Averaged over every (sequence, t) pair that has correspondences; gaps with
    none are omitted.
    """
    acc: dict[int, list[float]] = {}
    for seq in sequences:
        feats, seeds, masks = sequence_features(params, seq, cfg)
        consistency_from_features(feats, seeds, seq.boxes, masks, max_gap, tau_dist, acc)
    return {g: float(np.mean(v)) for g, v in sorted(acc.items())}


# memory footprint ----------------------------------------------------------------

@dataclass
class FootprintRow:
    capacity: int
    token: int
    point_baseline: int

    @property
    def ratio(self) -> float:
        return self.point_baseline / self.token


def memory_footprint(cfg: TrackerConfig, capacities: Seq[int], n_prime: int | None = None) -> list[FootprintRow]:
    """Stored foreground feature elements: K*D for the token bank, c*N'*D for a
    point-level memory that keeps the seed features of the last c frames."""
    n_prime = cfg.n_seeds if n_prime is None else n_prime
    kd = cfg.k_tokens * cfg.d_model
    return [FootprintRow(int(c), kd, int(c) * n_prime * cfg.d_model) for c in capacities]


# suite evaluation and ablation ---------------------------------------------------

@dataclass
class SuiteResult:
    tracklets: list[Tracklet]
    seconds_per_frame: float

    @property
    def overall(self) -> OpeResult:
        return combine([t.result for t in self.tracklets])

    def by_category(self) -> dict[str, OpeResult]:
        cats = sorted({t.category for t in self.tracklets})
        return {c: combine([t.result for t in self.tracklets if t.category == c]) for c in cats}


def evaluate_suite(params: dict, sequences: Seq[Sequence], cfg: TrackerConfig,
                   freeze_memory: bool = False) -> SuiteResult:
    out = []
    frames = 0
    t0 = time.perf_counter()
    for seq in sequences:
        boxes = track_sequence(seq, params, cfg, freeze_memory=freeze_memory)
        frames += len(boxes)
        out.append(Tracklet(seq.name, seq.category, len(seq.frames), ope(boxes, seq.boxes[1:])))
    return SuiteResult(out, (time.perf_counter() - t0) / max(frames, 1))


ABLATION_VARIANTS = {
    "a": {"use_tc": False, "use_mcc": False},
    "b": {"use_tc": True, "use_mcc": False},
    "c": {"use_tc": True, "use_mcc": True},
}


@dataclass
class AblationResult:
    params: dict[str, dict]
    results: dict[str, SuiteResult]
    profiles: dict[str, dict[int, float]]

    def success(self, variant: str) -> float:
        return self.results[variant].overall.success

    def deltas(self) -> dict[str, float]:
        return {"b-a": self.success("b") - self.success("a"), "c-b": self.success("c") - self.success("b")}


def run_ablation(train_seqs: Seq[Sequence], eval_seqs: Seq[Sequence], cfg: TrackerConfig, tcfg: TrainConfig,
                 variants: Seq[str] = ("a", "b", "c"), max_gap: int = 20) -> AblationResult:
    """Train one model per loss variant from identical initialisation and data
    order, then evaluate each on the held-out suite."""
    from .training import train

    params, results, profiles = {}, {}, {}
    for v in variants:
        vcfg = replace(tcfg, **ABLATION_VARIANTS[v])
        t0 = time.perf_counter()
        p, _, _ = train(train_seqs, cfg, vcfg, params=init_params(cfg, tcfg.seed))
        log.info("variant %s trained in %.0fs", v, time.perf_counter() - t0)
        params[v] = p
        results[v] = evaluate_suite(p, eval_seqs, cfg)
        profiles[v] = consistency_profile(p, eval_seqs, cfg, max_gap, tcfg.tau_dist)
        log.info("variant %s success %.2f", v, results[v].overall.success)
    return AblationResult(params, results, profiles)


# files and reports ---------------------------------------------------------------

def write_boxes(boxes: Seq[Box3D], path) -> None:
    lines = [f"BOXES v1 {len(boxes)}"]
    for t, b in enumerate(boxes, start=2):
        lines.append(f"{t} {b.center[0]!r} {b.center[1]!r} {b.center[2]!r} {b.heading!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_boxes(path, size: tuple[float, float, float]) -> list[Box3D]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or lines[0].split()[:2] != ["BOXES", "v1"] or len(lines[0].split()) != 3:
        raise EvaluationError(f"{path}: line 1: expected 'BOXES v1 <count>'")
    n = int(lines[0].split()[2])
    if len(lines) - 1 != n:
        raise EvaluationError(f"{path}: header announces {n} boxes, file has {len(lines) - 1}")
    out = []
    for k, ln in enumerate(lines[1:], start=2):
        parts = ln.split()
        if len(parts) != 5:
            raise EvaluationError(f"{path}: line {k}: expected '<t> <cx> <cy> <cz> <theta>'")
        try:
            vals = [float(v) for v in parts[1:]]
        except ValueError:
            raise EvaluationError(f"{path}: line {k}: malformed number") from None
        out.append(Box3D(tuple(vals[:3]), vals[3], size))
    return out


def _table(header: Seq[str], rows: Seq[Seq]) -> list[str]:
    cells = [[str(h) for h in header]] + [[f"{c:.2f}" if isinstance(c, float) else str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.rjust(w) for c, w in zip(r, widths))  # noqa: E731
    return [fmt(cells[0]), "  ".join("-" * w for w in widths)] + [fmt(r) for r in cells[1:]]


def format_report(tracklets: Seq[Tracklet], profile: dict[int, float] | None = None,
                  footprint: Seq[FootprintRow] | None = None, seconds_per_frame: float | None = None,
                  extra_metrics: dict[str, float] | None = None) -> str:
    """Text tables followed by a ``# METRICS`` key=value block.

    Tracklets are sorted by name first so input order never changes the output.
    """
    tracklets = sorted(tracklets, key=lambda t: t.name)
    out: list[str] = []
    metrics: dict[str, float] = {}
    if tracklets:
        overall = combine([t.result for t in tracklets])
        cats = sorted({t.category for t in tracklets})
        rows = []
        for c in cats:
            members = [t for t in tracklets if t.category == c]
            r = combine([t.result for t in members])
            rows.append([c, len(members), len(r), r.success, r.precision])
        rows.append(["mean", len(tracklets), len(overall), overall.success, overall.precision])
        out += ["# OPE", *_table(["category", "tracklets", "frames", "success", "precision"], rows), ""]
        metrics.update(success=overall.success, precision=overall.precision, tracklets=len(tracklets),
                       frames=len(overall))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            strat = stratify_by_length(tracklets)
        summ = strat.summary()
        th = "" if strat.thresholds is None else " split at " + ", ".join(f"{v:g}" for v in strat.thresholds)
        out += [f"# LENGTH QUARTILES{th}", *_table(["group", "tracklets", "success", "precision"],
                                                   [[g, n, s, p] for g, (n, s, p) in summ.items()]), ""]
        for g, (n, s, p) in summ.items():
            metrics[f"group_{g}_size"] = n
            metrics[f"group_{g}_success"] = s
    if profile:
        out += ["# CONSISTENCY", *_table(["gap", "cosine"], [[g, f"{v:.4f}"] for g, v in profile.items()]), ""]
        for g, v in profile.items():
            metrics[f"consistency_{g}"] = v
    if footprint:
        out += ["# MEMORY FOOTPRINT", *_table(["capacity", "token", "point_baseline", "ratio"],
                                              [[r.capacity, r.token, r.point_baseline, r.ratio]
                                               for r in footprint]), ""]
    if seconds_per_frame is not None:
        metrics["ms_per_frame"] = 1000.0 * seconds_per_frame
    metrics.update(extra_metrics or {})
    out.append("# METRICS")
    out += [f"{k}={v!r}" for k, v in metrics.items()]
    return "\n".join(out) + "\n"


def parse_metrics(text: str) -> dict[str, float]:
    lines = text.splitlines()
    try:
        start = lines.index("# METRICS") + 1
    except ValueError:
        raise EvaluationError("report has no '# METRICS' block") from None
    out = {}
    for ln in lines[start:]:
        if "=" in ln:
            k, v = ln.split("=", 1)
            out[k.strip()] = float(v)
    return out
