"""Window sampling, the windowed training objective, Adam, and checkpoints."""

from __future__ import annotations

import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence as Seq

import numpy as np

from .autodiff import Graph, Tensor
from .config import TrackerConfig, TrainConfig, format_config, parse_config
from .geometry import Box3D, build_correspondences, canonicalize, points_in_box
from .model import first_frame, init_params, next_frame
from .perception import seed_indices
from .objectives import (
    LossBreakdown,
    build_transitions,
    decoder_loss,
    mcc_loss,
    temporal_consistency_loss,
    total_loss,
)
from .synth import Sequence
from .tracker import crop_and_resample

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# window sampling -----------------------------------------------------------------

@dataclass
class WindowSample:
    """Frames of one training window plus the randomness used to view them."""

    sequence: int
    offset: int
    points: list[np.ndarray]      # resampled world points, one array per frame
    boxes: list[Box3D]            # ground truth
    refs: list[Box3D]             # reference (previous) box each frame is encoded in


def sample_window(dataset: Seq[Sequence], window: int, rng: np.random.Generator) -> tuple[int, int]:
    """Uniform eligible sequence, then uniform start offset."""
    eligible = [i for i, s in enumerate(dataset) if len(s.frames) >= window]
    if not eligible:
        raise TrainingError(f"no sequence has at least {window} frames")
    i = eligible[int(rng.integers(len(eligible)))]
    offset = int(rng.integers(len(dataset[i].frames) - window + 1))
    return i, offset


def jitter_box(box: Box3D, tcfg: TrainConfig, rng: np.random.Generator) -> Box3D:
    d = rng.normal(size=4) * np.array([tcfg.ref_jitter_xy, tcfg.ref_jitter_xy, tcfg.ref_jitter_z,
                                       tcfg.ref_jitter_theta])
    return box.with_pose(box.center_array() + d[:3], box.heading + d[3])


def prepare_window(dataset: Seq[Sequence], cfg: TrackerConfig, tcfg: TrainConfig,
                   rng: np.random.Generator, attempts: int = 20) -> WindowSample:
    """Draw a window whose first frame keeps foreground among the encoder seeds."""
    for _ in range(attempts):
        si, off = sample_window(dataset, tcfg.window, rng)
        frames = dataset[si].frames[off:off + tcfg.window]
        boxes = [f.gt_box for f in frames]
        refs = [boxes[0]] + [jitter_box(b, tcfg, rng) for b in boxes[:-1]]
        pts = []
        for f, ref in zip(frames, refs):
            p, _ = crop_and_resample(f.points, ref, cfg, rng.integers(2**63))
            pts.append(p)
        seeds = pts[0][seed_indices(canonicalize(pts[0], refs[0]), cfg)]
        if points_in_box(seeds, boxes[0]).any():
            return WindowSample(si, off, pts, boxes, refs)
    raise TrainingError("could not draw a window with foreground seeds in its first frame")


# objective -----------------------------------------------------------------------------

def window_objective(g: Graph, sample: WindowSample, cfg: TrackerConfig, tcfg: TrainConfig,
                     return_details: bool = False):
    """Full windowed loss: decoder terms on frames 2..T, TC and MCC over the window."""
    first = first_frame(g, sample.points[0], sample.boxes[0], cfg)
    memory = first.memory
    feats, seeds_world, masks, tokens = [first.fmap.features], [first.seeds_world], [], [memory.fg_tokens]
    masks.append(points_in_box(first.seeds_world, sample.boxes[0]))
    dec_terms = {"m": [], "c": [], "bbox": [], "dec": []}
    for t in range(1, len(sample.points)):
        res = next_frame(g, memory, sample.points[t], sample.refs[t], cfg)
        memory = res.memory
        mask = points_in_box(res.seeds_world, sample.boxes[t])
        l_m, l_c, l_bbox, l_dec = decoder_loss(g, res.prediction, sample.boxes[t], sample.refs[t], mask,
                                               tcfg.lambda_m, tcfg.lambda_c)
        for k, v in zip(("m", "c", "bbox", "dec"), (l_m, l_c, l_bbox, l_dec)):
            dec_terms[k].append(v)
        feats.append(res.fmap.features)
        seeds_world.append(res.seeds_world)
        masks.append(mask)
        tokens.append(memory.fg_tokens)

    def avg(terms):
        out = terms[0]
        for x in terms[1:]:
            out = out + x
        return out * (1.0 / len(terms))

    m, c, bbox, dec = (avg(dec_terms[k]) for k in ("m", "c", "bbox", "dec"))
    zero = g.constant(0.0)
    pairs = build_correspondences(seeds_world, sample.boxes, masks, tcfg.tau_dist)
    tc = temporal_consistency_loss(g, feats, pairs) if tcfg.use_tc else zero
    if tcfg.use_mcc:
        mats = [build_transitions(x, f, tcfg.tau_cycle) for x, f in zip(tokens, feats)]
        cyc, fg, mcc = mcc_loss(g, mats, [np.flatnonzero(mk) for mk in masks])
    else:
        cyc = fg = mcc = zero
    if not tcfg.use_dec:
        dec = zero
    loss = LossBreakdown(tc, cyc, fg, mcc, m, c, bbox, dec, total_loss(dec, tc, mcc))
    if return_details:
        return loss, {"pairs": pairs, "features": feats, "masks": masks, "tokens": tokens}
    return loss


# optimiser -------------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_update(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    state.step += 1
    b1, b2 = ADAM_BETA1, ADAM_BETA2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def clip_gradients(grads: dict, max_norm: float) -> float:
    # fixed summation order so a reloaded (name-sorted) store clips identically
    norm = float(np.sqrt(sum(float((grads[k] * grads[k]).sum()) for k in sorted(grads))))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, 0x5EED])


def train_step(samples: Seq[WindowSample], params: dict, adam: AdamState, cfg: TrackerConfig,
               tcfg: TrainConfig, lr: float) -> tuple[dict[str, float], float]:
    """One Adam update on the mean objective over ``samples``.

    Returns the averaged loss breakdown values and the pre-clip gradient norm.
    """
    acc = {k: np.zeros_like(p) for k, p in params.items()}
    totals: dict[str, float] = {}
    for s in samples:
        g = Graph(params)
        loss = window_objective(g, s, cfg, tcfg)
        grads = g.backward(loss.total)
        for k, v in grads.items():
            acc[k] += v
        for k, v in loss.values().items():
            totals[k] = totals.get(k, 0.0) + v / len(samples)
    for v in acc.values():
        v /= len(samples)
    norm = clip_gradients(acc, tcfg.grad_clip)
    adam_update(params, acc, adam, lr)
    return totals, norm


def train(dataset: Seq[Sequence], cfg: TrackerConfig, tcfg: TrainConfig, params: dict | None = None,
          adam: AdamState | None = None, start_step: int = 0, steps: int | None = None,
          callback: Callable[[int, dict], None] | None = None) -> tuple[dict, AdamState, list[dict]]:
    """Run ``steps`` optimisation steps (default: the full schedule).

    Every step draws its windows from an RNG seeded by (seed, step), so a run
    resumed from a checkpoint at step s continues exactly as the uninterrupted
    run would.
    """
    if params is None:
        params = init_params(cfg, tcfg.seed)
    if adam is None:
        adam = AdamState.zeros_like(params)
    end = tcfg.total_steps if steps is None else start_step + steps
    history = []
    t0 = time.perf_counter()
    for s in range(start_step, end):
        rng = step_rng(tcfg.seed, s)
        samples = [prepare_window(dataset, cfg, tcfg, rng) for _ in range(tcfg.batch_size)]
        lr = tcfg.lr_at_epoch(s // tcfg.steps_per_epoch)
        values, norm = train_step(samples, params, adam, cfg, tcfg, lr)
        if not np.isfinite(values["total"]):
            raise TrainingError(f"non-finite loss at step {s}: {values}")
        values.update(step=s, lr=lr, grad_norm=norm)
        history.append(values)
        if callback is not None:
            callback(s, values)
        if s % 25 == 0:
            log.info("step %d  loss %.4f  (dec %.4f tc %.4f mcc %.4f)  %.1fs", s, values["total"],
                     values["dec"], values["tc"], values["mcc"], time.perf_counter() - t0)
    return params, adam, history


# checkpoints -----------------------------------------------------------------------------

def _write_array(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    buf.write(f"{name} {arr.ndim} {' '.join(str(s) for s in arr.shape)}".rstrip().encode() + b"\n")
    raw = arr.tobytes()
    buf.write(f"BYTES {len(raw)}\n".encode())
    buf.write(raw)
    buf.write(b"\n")


def save_checkpoint(path, params: dict, adam: AdamState | None = None, epoch: int = 0, step: int = 0,
                    cfg: TrackerConfig | None = None, tcfg: TrainConfig | None = None) -> None:
    """``CKPT v1`` text header, config snapshot, then framed little-endian float64 arrays."""
    buf = io.BytesIO()
    buf.write(b"CKPT v1\n")
    conf = format_config(cfg, tcfg).encode() if cfg is not None else b""
    buf.write(f"META epoch={epoch} step={step} adam_step={adam.step if adam else 0}\n".encode())
    buf.write(f"CONFIG {len(conf)}\n".encode() + conf)
    names = sorted(params)
    arrays = [(f"param/{k}", params[k]) for k in names]
    if adam is not None:
        arrays += [(f"adam_m/{k}", adam.m[k]) for k in names]
        arrays += [(f"adam_v/{k}", adam.v[k]) for k in names]
    buf.write(f"ARRAYS {len(arrays)}\n".encode())
    for name, arr in arrays:
        _write_array(buf, name, arr)
    Path(path).write_bytes(buf.getvalue())


@dataclass
class Checkpoint:
    params: dict
    adam: AdamState | None
    epoch: int
    step: int
    tracker_config: TrackerConfig | None
    train_config: TrainConfig | None


def _readline(data: bytes, pos: int, what: str) -> tuple[str, int]:
    end = data.find(b"\n", pos)
    if end < 0:
        raise CheckpointError(f"truncated checkpoint: missing {what}")
    return data[pos:end].decode(), end + 1


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    head, pos = _readline(data, 0, "header")
    if head != "CKPT v1":
        raise CheckpointError("not a CKPT v1 file")
    meta_line, pos = _readline(data, pos, "META line")
    meta = dict(kv.split("=", 1) for kv in meta_line.split()[1:])
    conf_line, pos = _readline(data, pos, "CONFIG line")
    n_conf = int(conf_line.split()[1])
    conf_text = data[pos:pos + n_conf].decode()
    pos += n_conf
    cfg = tcfg = None
    if conf_text.strip():
        cfg, tcfg = parse_config(conf_text)
    count_line, pos = _readline(data, pos, "ARRAYS line")
    arrays = {}
    for _ in range(int(count_line.split()[1])):
        desc, pos = _readline(data, pos, "array descriptor")
        parts = desc.split()
        name, rank = parts[0], int(parts[1])
        shape = tuple(int(s) for s in parts[2:2 + rank])
        size_line, pos = _readline(data, pos, f"byte length of {name}")
        nbytes = int(size_line.split()[1])
        if nbytes != 8 * int(np.prod(shape, dtype=np.int64)) or pos + nbytes > len(data):
            raise CheckpointError(f"array {name}: byte length does not match shape {shape}")
        arrays[name] = np.frombuffer(data[pos:pos + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
        pos += nbytes + 1
    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
    adam = None
    if any(k.startswith("adam_m/") for k in arrays):
        adam = AdamState({k[7:]: v for k, v in arrays.items() if k.startswith("adam_m/")},
                         {k[7:]: v for k, v in arrays.items() if k.startswith("adam_v/")},
                         int(meta.get("adam_step", 0)))
    return Checkpoint(params, adam, int(meta.get("epoch", 0)), int(meta.get("step", 0)), cfg, tcfg)


ROLE_NAMES = {"mem.tokens": "fg_tokens"}


def check_compatible(params: dict, expected: dict) -> None:
    """Raise listing every name/shape difference between two parameter stores."""
    problems = []
    for k in sorted(set(expected) | set(params)):
        label = f"{k} ({ROLE_NAMES[k]})" if k in ROLE_NAMES else k
        if k not in params:
            problems.append(f"{label}: missing from checkpoint")
        elif k not in expected:
            problems.append(f"{label}: not part of the model")
        elif params[k].shape != expected[k].shape:
            problems.append(f"{label}: checkpoint shape {params[k].shape} != model shape {expected[k].shape}")
    if problems:
        raise CheckpointError("checkpoint does not match model:\n  " + "\n  ".join(problems))


def load_into(path, cfg: TrackerConfig) -> Checkpoint:
    ck = load_checkpoint(path)
    check_compatible(ck.params, init_params(cfg, 0))
    return ck
