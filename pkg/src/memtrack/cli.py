"""Command-line entry point: gen-data, train, track, eval, analyze, selftest.

Exit codes: 0 success, 1 usage error, 2 validation failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from .config import ConfigError, TrackerConfig, TrainConfig, load_config
from .evaluation import (
    EvaluationError,
    Tracklet,
    consistency_profile,
    format_report,
    memory_footprint,
    ope,
    read_boxes,
    run_ablation,
    write_boxes,
)
from .memory import MemoryInitError
from .synth import GeneratorSpecError, SequenceFormatError, SuiteSpec, generate_suite, read_sequence, \
    read_suite, write_suite
from .training import CheckpointError, TrainingError, load_checkpoint, load_into, save_checkpoint, train
from .tracker import track_sequence

EXIT_OK, EXIT_USAGE, EXIT_INVALID = 0, 1, 2
VALIDATION_ERRORS = (ConfigError, EvaluationError, MemoryInitError, GeneratorSpecError, SequenceFormatError,
                     CheckpointError, TrainingError, FileNotFoundError, NotADirectoryError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _checkpoint_configs(path) -> tuple:
    ck = load_checkpoint(path)
    cfg = ck.tracker_config or TrackerConfig()
    ck = load_into(path, cfg)
    return ck, cfg, ck.train_config or TrainConfig()


def cmd_gen_data(args) -> int:
    suite = SuiteSpec.parse(Path(args.spec).read_text())
    seqs = generate_suite(suite)
    paths = write_suite(seqs, args.out)
    print(f"wrote {len(paths)} sequences to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, tcfg = load_config(args.config)
    data = read_suite(args.data)
    params = adam = None
    start = 0
    if args.resume:
        ck = load_into(args.resume, cfg)
        params, adam, start = ck.params, ck.adam, ck.step
    steps = tcfg.total_steps - start if args.steps is None else args.steps
    params, adam, hist = train(data, cfg, tcfg, params=params, adam=adam, start_step=start, steps=steps)
    end = start + len(hist)
    save_checkpoint(args.out, params, adam, epoch=end // tcfg.steps_per_epoch, step=end, cfg=cfg, tcfg=tcfg)
    for h in hist:
        print(f"step {h['step']} loss {h['total']!r}")
    print(f"saved {args.out} after {end} steps")
    return EXIT_OK


def cmd_track(args) -> int:
    ck, cfg, _ = _checkpoint_configs(args.ckpt)
    src = Path(args.seq)
    jobs = [(p, Path(args.out) / (p.stem + ".boxes")) for p in sorted(src.glob("*.seq"))] if src.is_dir() \
        else [(src, Path(args.out))]
    if src.is_dir():
        Path(args.out).mkdir(parents=True, exist_ok=True)
    frames, t0 = 0, time.perf_counter()
    for seq_path, out in jobs:
        seq = read_sequence(seq_path)
        boxes = track_sequence(seq, ck.params, cfg, freeze_memory=args.freeze_memory)
        write_boxes(boxes, out)
        frames += len(boxes)
    dt = time.perf_counter() - t0
    print(f"tracked {len(jobs)} sequence(s), {frames} frames, {1000 * dt / max(frames, 1):.1f} ms/frame")
    return EXIT_OK


def cmd_eval(args) -> int:
    gt_paths = sorted(Path(args.gt).glob("*.seq"))
    if not gt_paths:
        raise EvaluationError(f"no .seq files in {args.gt}")
    tracklets = []
    for gp in gt_paths:
        seq = read_sequence(gp)
        pp = Path(args.pred) / (gp.stem + ".boxes")
        if not pp.exists():
            raise EvaluationError(f"sequence {gp.stem}: no prediction file {pp}")
        pred = read_boxes(pp, seq.size)
        if len(pred) != len(seq.frames) - 1:
            raise EvaluationError(f"sequence {gp.stem}: {len(pred)} predicted boxes, "
                                  f"expected {len(seq.frames) - 1}")
        tracklets.append(Tracklet(gp.stem, seq.category, len(seq.frames), ope(pred, seq.boxes[1:])))
    report = format_report(tracklets)
    Path(args.report).write_text(report)
    print(report, end="")
    return EXIT_OK


def cmd_analyze(args) -> int:
    ck, cfg, tcfg = _checkpoint_configs(args.ckpt)
    if args.mode == "footprint":
        report = format_report([], footprint=memory_footprint(cfg, args.capacities))
    else:
        seqs = read_suite(args.data)
        if args.mode == "consistency":
            prof = consistency_profile(ck.params, seqs, cfg, args.max_gap, tcfg.tau_dist)
            report = format_report([], profile=prof)
        else:
            held = seqs[::4]
            train_seqs = [s for i, s in enumerate(seqs) if i % 4]
            res = run_ablation(train_seqs, held, cfg, tcfg, max_gap=args.max_gap)
            lines = ["# ABLATION", "variant  L_TC  L_MCC  success  precision"]
            extra = {}
            for v, r in res.results.items():
                o = r.overall
                lines.append(f"{v:>7}  {'x' if v in 'bc' else ' ':>4}  {'x' if v == 'c' else ' ':>5}  "
                             f"{o.success:7.2f}  {o.precision:9.2f}")
                extra[f"success_{v}"] = o.success
                extra[f"precision_{v}"] = o.precision
            for k, d in res.deltas().items():
                lines.append(f"delta {k}: {d:+.2f}")
                extra[f"delta_{k.replace('-', '_')}"] = d
            report = "\n".join(lines) + "\n\n" + format_report([], extra_metrics=extra)
    if args.report:
        Path(args.report).write_text(report)
    print(report, end="")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return EXIT_OK if run_selftest() else EXIT_INVALID


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="memtrack", description="Memory-token 3D single object tracker.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", help="generate a synthetic sequence suite")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train", help="train a model and write a checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, help="override the number of steps")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("track", help="track one sequence file or every .seq in a directory")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--seq", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--freeze-memory", action="store_true", help="never update the memory after frame 1")
    s.set_defaults(fn=cmd_track)

    s = sub.add_parser("eval", help="score predicted boxes against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("analyze", help="consistency profile, memory footprint or loss ablation")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--mode", required=True, choices=("consistency", "footprint", "ablation"))
    s.add_argument("--max-gap", type=int, default=20)
    s.add_argument("--capacities", type=int, nargs="+", default=[1, 2, 3, 4, 8, 16, 32])
    s.add_argument("--report")
    s.set_defaults(fn=cmd_analyze)

    s = sub.add_parser("selftest", help="run the built-in oracle checks")
    s.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
