"""Command line: synth, track, eval, train, oracle-check, ablate.

Exit codes: 0 ok, 1 usage, 2 I/O, 3 numeric failure. Output files are
written to a temporary name and renamed, so a failed run leaves none behind.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .association import check_one_to_one, two_round
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .core import ContractViolation, MalformedInputError
from .experiments import (
    ablation,
    ablation_table,
    attach_identities,
    fitted_ablation_model,
    initial_model,
    oracle_check,
    oracle_csv,
    planted_model,
    relabel_planted,
    scene_tracklets,
    two_round_windows_for,
)
from .inference import SizeLimitError
from .learning import CrfModel, TrainingDiverged, decoded_accuracy, load_params, mean_loss, save_params, train
from .metrics import evaluate, frame_range, restrict_frames
from .motio import (
    atomic_write_text,
    format_mot,
    format_xy_csv,
    read_detections,
    read_tracks,
    tracks_to_records,
    detections_to_records,
)
from .potentials import LogisticPairProvider, LogisticUnaryProvider, load_provider, save_provider
from .simulate import generate_scene
from .tracklets import link_detections

log = logging.getLogger("crftrack")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ----------------------------------------------------------------------------
# shared helpers


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return apply_overrides(cfg, getattr(args, "set", None) or [])


def _load_model(cfg: RunConfig, unary_path=None, pair_path=None, params_path=None) -> CrfModel:
    unary_path = unary_path or cfg.unary_provider
    pair_path = pair_path or cfg.pair_provider
    params_path = params_path or cfg.params_file
    unary = load_provider(unary_path) if unary_path else LogisticUnaryProvider()
    pair = load_provider(pair_path) if pair_path else LogisticPairProvider()
    if not isinstance(unary, LogisticUnaryProvider) or not isinstance(pair, LogisticPairProvider):
        raise MalformedInputError("provider files are swapped or of the wrong type")
    params = load_params(params_path, cfg.crf) if params_path else cfg.crf
    return CrfModel(params, unary, pair)


def _write_model(out: Path, model: CrfModel) -> None:
    save_provider(out / "unary.txt", model.unary)
    save_provider(out / "pair.txt", model.pair)
    save_params(out / "params.txt", model.params)


def _jobs(args) -> int:
    return max(1, args.jobs or os.cpu_count() or 1)


def _add_config_flags(p):
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a configuration key (repeatable)")


def _add_model_flags(p):
    p.add_argument("--unary-provider", help="unary provider file")
    p.add_argument("--pair-provider", help="pair provider file")
    p.add_argument("--params", help="params file (w_u, w_d, gamma, iterations)")


# ----------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    if args.seed is not None:
        cfg = replace(cfg, scene=replace(cfg.scene, seed=args.seed))
    scene = generate_scene(cfg.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "gt.txt", format_mot(tracks_to_records(scene.gt, "gt")))
    atomic_write_text(out / "det.txt", format_mot(detections_to_records(scene.detections)))
    atomic_write_text(out / "config.txt", cfg.to_text())
    log.info("wrote %d gt tracks and %d detections to %s", len(scene.gt), sum(map(len, scene.detections)), out)
    return EXIT_OK


def run_tracker(frames, cfg: RunConfig, model: CrfModel, jobs: int = 1):
    tracklets = link_detections(frames, cfg.link, cfg.velocity_window)
    tracks, rounds = two_round(tracklets, model.params, model.unary, model.pair, cfg.mode, cfg.pairs,
                               cfg.velocity_window, jobs=jobs)
    for r in rounds:
        check_one_to_one(r.result.links())
    return tracklets, tracks, rounds


def cmd_track(args) -> int:
    cfg = _resolve_config(args)
    if args.mode:
        cfg = replace(cfg, mode=args.mode)
    model = _load_model(cfg, args.unary_provider, args.pair_provider, args.params)
    frames = read_detections(args.detections)
    t0 = time.perf_counter()
    _, tracks, rounds = run_tracker(frames, cfg, model, _jobs(args))
    elapsed = time.perf_counter() - t0
    atomic_write_text(args.out, format_mot(tracks_to_records(tracks)))
    if args.trace_dir:
        d = Path(args.trace_dir)
        d.mkdir(parents=True, exist_ok=True)
        for rn, r in enumerate(rounds, start=1):
            for w, trace in enumerate(r.result.traces):
                atomic_write_text(d / f"trace_r{rn}_w{w:03d}.csv",
                                  format_xy_csv(("iteration", "energy"), enumerate(trace.energies)))
    n_frames = sum(1 for g in frames if g)
    print(f"{len(tracks)} tracks, {n_frames} frames in {elapsed:.2f}s "
          f"({n_frames / elapsed if elapsed > 0 else float('inf'):.1f} frames/s)", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    gt = read_tracks(args.gt, "gt")
    res = read_tracks(args.results, "results")
    rg, rr = frame_range(gt), frame_range(res)
    if rg and rr and rg != rr:
        lo, hi = max(rg[0], rr[0]), min(rg[1], rr[1])
        log.warning("frame ranges differ (gt %d-%d, results %d-%d); evaluating %d-%d", *rg, *rr, lo, hi)
        gt, res = restrict_frames(gt, lo, hi), restrict_frames(res, lo, hi)
    report = evaluate(gt, res, args.iou)
    print(report.table())
    if args.csv:
        atomic_write_text(args.csv, report.csv())
    return EXIT_OK


def _training_scenes(args, cfg: RunConfig):
    """(tracklets list) per scene, from scene directories or synthesized."""
    scenes = []
    if args.scenes:
        for d in args.scenes:
            d = Path(d)
            det, gt = d / "det.txt", d / "gt.txt"
            if not det.exists() or not gt.exists():
                raise UsageError(f"{d} needs det.txt and gt.txt")
            frames = attach_identities(read_detections(det), read_tracks(gt, "gt"))
            scenes.append(link_detections(frames, cfg.link, cfg.velocity_window))
    elif args.synth:
        for k in range(args.synth):
            _, tracklets = scene_tracklets(replace(cfg.scene, seed=cfg.scene.seed + k), cfg.link, cfg.velocity_window)
            scenes.append(tracklets)
    if not scenes:
        raise UsageError("no training data: give --scenes DIR... or --synth N")
    return scenes


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    scenes = _training_scenes(args, cfg)
    init = _load_model(cfg, args.unary_provider, args.pair_provider, args.params)
    if args.planted:
        truth = planted_model()
        init = initial_model()
    per_scene = [two_round_windows_for(t, init.unary if not args.planted else truth.unary, init.params,
                                       init.params.window_size, cfg.velocity_window) for t in scenes]
    if args.planted:
        per_scene = [relabel_planted(ws, truth) for ws in per_scene]
    if len(per_scene) > 1:
        tr = [w for ws in per_scene[:-1] for w in ws]
        va = per_scene[-1]
    else:
        tr = va = per_scene[0]
    tr = [w for w in tr if w.n_nodes]
    va = [w for w in va if w.n_nodes]
    if not tr:
        raise UsageError("training data produced no linkable tracklet pairs")
    model, logbook = train(tr, init, lr=args.lr, epochs=args.epochs, batch=args.batch, val_windows=va or None,
                           patience=args.patience, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_model(out, model)
    atomic_write_text(out / "train_log.csv", logbook.csv())
    target = va or tr
    print(f"val loss {mean_loss(target, init):.6f} -> {mean_loss(target, model):.6f}; "
          f"decoded accuracy {decoded_accuracy(target, init):.4f} -> {decoded_accuracy(target, model):.4f}")
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def cmd_oracle_check(args) -> int:
    cfg = _resolve_config(args)
    sizes = _int_list(args.sizes)
    rows = oracle_check(sizes, range(args.seed0, args.seed0 + args.seeds), args.density, cfg.crf)
    text = oracle_csv(rows)
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    gaps = [r.gap for r in rows]
    print(f"instances {len(rows)}  agreement {np.mean([r.agree for r in rows]):.4f}  mean gap {np.mean(gaps) if gaps else 0.0:.6f}",
          file=sys.stderr)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    if args.unary_provider or args.pair_provider or args.params:
        model = _load_model(cfg, args.unary_provider, args.pair_provider, args.params)
    else:
        log.info("fitting providers on held-out simulator scenes")
        model = fitted_ablation_model()
    rows = ablation(range(args.seed0, args.seed0 + args.scenes), model, jobs=_jobs(args))
    table = ablation_table(rows)
    print(table)
    if args.out:
        atomic_write_text(args.out, table + "\n")
    return EXIT_OK


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crftrack", description="Tracklet association with an unrolled CRF.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--jobs", type=int, default=None, help="worker threads (default: available CPUs)")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a simulator scene")
    _add_config_flags(s)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("track", help="track detections")
    s.add_argument("detections", help="det.txt")
    s.add_argument("--out", required=True, help="results file")
    s.add_argument("--mode", choices=("unary", "crf"))
    s.add_argument("--trace-dir", help="write per-window energy traces here")
    _add_config_flags(s)
    _add_model_flags(s)
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("eval", help="CLEAR-MOT and IDF1 scores")
    s.add_argument("gt")
    s.add_argument("results")
    s.add_argument("--iou", type=float, default=0.5)
    s.add_argument("--csv", help="also write the report as CSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("train", help="fit CRF weights and providers")
    s.add_argument("--scenes", nargs="+", help="directories holding det.txt and gt.txt")
    s.add_argument("--synth", type=int, help="train on N simulator scenes from the config")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--lr", type=float, default=0.001)
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--batch", type=int, default=8)
    s.add_argument("--patience", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--planted", action="store_true", help="labels from the planted model, uninformative start")
    _add_config_flags(s)
    _add_model_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("oracle-check", help="decoded vs exhaustive energies on small graphs")
    s.add_argument("--sizes", default="1,4,8,12")
    s.add_argument("--seeds", type=int, default=10, help="number of seeds")
    s.add_argument("--seed0", type=int, default=0)
    s.add_argument("--density", type=float, default=0.3)
    s.add_argument("--out", help="CSV report (stdout when omitted)")
    _add_config_flags(s)
    s.set_defaults(func=cmd_oracle_check)

    s = sub.add_parser("ablate", help="unary-only vs CRF association on simulator scenes")
    s.add_argument("--scenes", type=int, default=20)
    s.add_argument("--seed0", type=int, default=0)
    s.add_argument("--out", help="write the table here too")
    _add_config_flags(s)
    _add_model_flags(s)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        if not args.command:
            raise UsageError("a command is required")
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"crftrack: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, MalformedInputError) as exc:
        print(f"crftrack: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDiverged, FloatingPointError, ContractViolation, SizeLimitError, np.linalg.LinAlgError) as exc:
        print(f"crftrack: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
