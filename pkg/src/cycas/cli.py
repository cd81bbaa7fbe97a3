"""Command line entry point.

    cycas gradcheck
    cycas train    --config toy.yaml --out runs/toy
    cycas eval     --config toy.yaml --checkpoint runs/toy/checkpoint.bin
    cycas sweep    --config sweep.yaml --out runs/sweep
    cycas simulate --config toy.yaml --count 4

Exit codes: 0 success, 1 validation failure, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .config import ConfigError, RunConfig, load_config, write_resolved
from .diffmath import DimensionError, ParameterError
from .evalkit import build_probe, evaluate_embeddings
from .simulator import INTER, INTRA, VideoStream, sample_batch, write_batches_csv
from .sweep import SWEEP_COLUMNS, symmetry_sweep
from .trainer import (METRIC_COLUMNS, CheckpointError, TrainingDiverged, load_checkpoint,
                      save_checkpoint, train)

log = logging.getLogger("cycas")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ValidationFailure(Exception):
    pass


def _load(args) -> RunConfig:
    if not args.config:
        raise ValidationFailure("--config is required for this command")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def cmd_gradcheck(args) -> int:
    report = gradcheck.run_suite(args.instances, args.seed or 0)
    for line in gradcheck.format_report(report, args.tol):
        print(line)
    failed = [k for k, v in report.items() if not v < args.tol]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    write_resolved(cfg, out)
    metrics_path = out / "metrics.csv"
    with metrics_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)

        def sink(row):
            writer.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
            fh.flush()
        ckpt = train(cfg.stream_config(), cfg.loss, cfg.train_config(), cfg.eval,
                     sink=sink, dump_dir=out)
    save_checkpoint(out / "checkpoint.bin", ckpt)
    if not args.quiet:
        print(json.dumps(ckpt.metrics, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load(args)
    if not args.checkpoint:
        raise ValidationFailure("--checkpoint is required for eval")
    ckpt = load_checkpoint(args.checkpoint)
    stream_cfg = cfg.stream_config()
    if ckpt.encoder.d_in != stream_cfg.d_obs:
        raise DimensionError(
            f"checkpoint encoder expects {ckpt.encoder.d_in}-d observations, "
            f"config stream produces {stream_cfg.d_obs}-d")
    metrics = evaluate_embeddings(ckpt.encoder.embed, build_probe(stream_cfg, cfg.eval), cfg.loss)
    out = _out_dir(args, cfg)
    (out / "eval.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    if not args.quiet:
        print(json.dumps(metrics, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    grid = cfg.sweep
    if args.seed is not None:
        grid = type(grid)(**{**grid.__dict__, "seed": (args.seed,)})
    out = _out_dir(args, cfg)
    write_resolved(cfg, out)
    rows = symmetry_sweep(cfg, grid, out / "sweep.csv")
    if not args.quiet:
        print(",".join(SWEEP_COLUMNS))
        for r in rows:
            print(",".join(_fmt(r[c]) if not isinstance(r[c], str) else r[c] for c in SWEEP_COLUMNS))
    return EXIT_OK


def _tau_stats(values) -> dict:
    if not values:
        return {"pairs": 0}
    a = np.asarray(values)
    return {"pairs": int(a.size), "mean": float(a.mean()), "std": float(a.std()),
            "min": float(a.min()), "max": float(a.max())}


def cmd_simulate(args) -> int:
    cfg = _load(args)
    sim = cfg.simulate
    count = sim.count if args.count is None else args.count
    if count < 0:
        raise ValidationFailure(f"count must be >= 0, got {count}")
    out = _out_dir(args, cfg)
    stream = VideoStream(cfg.stream_config())
    rng = np.random.default_rng([cfg.seed, 20])
    batches = [sample_batch(stream, rng, sim.pairs_per_batch, sim.inter_fraction, sim.cap_per_side)
               for _ in range(count)]
    if batches:
        write_batches_csv(out / "batches.csv", batches)
    stats = [s for b in batches for s in b.truth.pair_stats]
    summary = {
        "batches": count,
        "tau_alpha_target": cfg.stream.tau_alpha,
        "tau_beta_target": cfg.stream.tau_beta,
        INTRA: _tau_stats([t for k, t in stats if k == INTRA]),
        INTER: _tau_stats([t for k, t in stats if k == INTER]),
        "per_batch": [[[k, t] for k, t in b.truth.pair_stats] for b in batches],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if not args.quiet:
        print(json.dumps({k: v for k, v in summary.items() if k != "per_batch"}, indent=2))
    return EXIT_OK


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "simulate": cmd_simulate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--out", help="output directory (default: out_dir from the config)")
    common.add_argument("--seed", type=int, help="override the config's root seed")
    common.add_argument("--quiet", action="store_true", help="only log warnings")

    p = argparse.ArgumentParser(prog="cycas", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    g.add_argument("--instances", type=int, default=20)
    g.add_argument("--tol", type=float, default=gradcheck.DEFAULT_TOL)
    sub.add_parser("train", parents=[common], help="train an encoder")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the probe")
    e.add_argument("--checkpoint", help="checkpoint file written by train")
    sub.add_parser("sweep", parents=[common], help="train one model per grid point")
    s = sub.add_parser("simulate", parents=[common], help="dump simulated minibatches")
    s.add_argument("--count", type=int, help="number of batches (default from config)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValidationFailure, DimensionError, ParameterError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingDiverged, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
