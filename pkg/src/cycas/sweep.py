"""Grid driver: one toy training run per point, evaluated on the held-out probe.

Rows are appended to a CSV as they finish, so an interrupted sweep can be
rerun and only the missing points are trained.
"""
from __future__ import annotations

import csv
import itertools
import logging
from pathlib import Path
from typing import Callable, Iterable

from .config import RunConfig, SweepConfig
from .trainer import train

log = logging.getLogger(__name__)

KEY_COLUMNS = ["tau_alpha_mean", "tau_beta_mean", "memory_size", "top_k", "seed"]
SWEEP_COLUMNS = ["tau_alpha_mean", "tau_beta_mean", "rank1", "map", "cycle_acc", "assoc_acc",
                 "seed", "memory_size", "top_k"]


def grid_points(grid: SweepConfig) -> list[dict]:
    pts = itertools.product(grid.tau_alpha_mean, grid.tau_beta_mean, grid.memory_size,
                            grid.top_k, grid.seed)
    return [dict(zip(KEY_COLUMNS, p)) for p in pts]


def point_key(row: dict) -> tuple:
    return (float(row["tau_alpha_mean"]), float(row["tau_beta_mean"]),
            int(row["memory_size"]), int(row["top_k"]), int(row["seed"]))


def run_point(cfg: RunConfig, point: dict, tau_var: float) -> dict:
    """Train and evaluate one grid point in isolation."""
    run = cfg.with_seed(point["seed"])
    stream_cfg = run.stream_config(tau_alpha=point["tau_alpha_mean"],
                                   tau_beta=point["tau_beta_mean"],
                                   tau_alpha_var=tau_var, tau_beta_var=tau_var)
    train_cfg = run.train_config(memory_size=point["memory_size"], top_k=point["top_k"])
    metrics = train(stream_cfg, run.loss, train_cfg, run.eval).metrics
    row = dict(point)
    row.update({k: metrics[k] for k in ("rank1", "map", "cycle_acc", "assoc_acc")})
    return row


def read_rows(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def symmetry_sweep(cfg: RunConfig, grid: SweepConfig | None = None, out_csv=None,
                   runner: Callable[[RunConfig, dict, float], dict] = run_point) -> list[dict]:
    """Run every grid point not already present in ``out_csv``.

    Returns all rows for the grid, previously completed ones included,
    in grid order.
    """
    grid = grid or cfg.sweep
    done = {point_key(r): r for r in read_rows(out_csv)} if out_csv else {}
    if out_csv is not None and not Path(out_csv).exists():
        with Path(out_csv).open("w", newline="") as fh:
            csv.writer(fh).writerow(SWEEP_COLUMNS)
    rows = []
    for point in grid_points(grid):
        key = point_key(point)
        if key in done:
            log.info("skipping completed point %s", key)
            rows.append(done[key])
            continue
        row = runner(cfg, point, grid.tau_var)
        log.info("point %s rank1 %.4f", key, row["rank1"])
        if out_csv is not None:
            with Path(out_csv).open("a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row[c]) for c in SWEEP_COLUMNS])
        rows.append(row)
    return rows


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def rank1_range(rows: Iterable[dict]) -> float:
    vals = [float(r["rank1"]) for r in rows]
    return max(vals) - min(vals) if vals else 0.0
