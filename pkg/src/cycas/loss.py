"""Cycle-association losses.

Embedding matrices are d x n with unit-length columns. The forward
assignment maps frame 1 instances onto frame 2, the backward assignment maps
them back; their product should be the identity when every instance is
matched to its own identity.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import DegenerateInputError, DimensionError, Node, ParameterError

log = logging.getLogger(__name__)

SYMMETRIC = "symmetric"
ASYMMETRIC = "asymmetric"


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.5
    epsilon: float = 0.5
    delta: float = 0.5
    mode: str = ASYMMETRIC

    def __post_init__(self):
        if not 0 < self.margin < 1:
            raise ParameterError(f"margin must lie in (0, 1), got {self.margin}")
        if not 0 < self.delta < 1:
            raise ParameterError(f"delta must lie in (0, 1), got {self.delta}")
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be > 0, got {self.epsilon}")
        if self.mode not in (SYMMETRIC, ASYMMETRIC):
            raise ParameterError(f"unknown loss mode {self.mode!r}")


# incremented whenever a single-instance side makes a pair unusable
degenerate_skips = 0


def affinity(x1: Node, x2: Node) -> Node:
    if x1.shape[0] != x2.shape[0]:
        raise DimensionError(
            f"embedding dimensions differ: {x1.shape[0]} vs {x2.shape[0]}")
    return dm.matmul(dm.transpose(x1), x2)


def adaptive_temperature(k: int, eps: float = 0.5, delta: float = 0.5) -> float:
    """Softmax temperature that keeps the one-positive/(k-1)-negative gap at
    ``delta`` for a similarity margin of ``eps``."""
    if k < 1:
        raise ParameterError(f"K must be >= 1, got {k}")
    if not eps > 0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    if not 0 < delta < 1:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    return math.log((delta * (k - 1) + 1) / (1 - delta)) / eps


def assign(s: Node, temperature: float) -> Node:
    return dm.row_softmax(s, temperature)


def cycle(a_fwd: Node, a_bwd: Node) -> Node:
    n1, n2 = a_fwd.shape
    if a_bwd.shape != (n2, n1):
        raise DimensionError(
            f"backward assignment must be {(n2, n1)}, got {a_bwd.shape}")
    return dm.matmul(a_fwd, a_bwd)


def loss_symmetric(a_cycle: Node) -> Node:
    n, m = a_cycle.shape
    if n != m:
        raise DimensionError(f"cycle matrix must be square, got {a_cycle.shape}")
    diff = dm.add(a_cycle, dm.constant(-np.eye(n)))
    return dm.scale(dm.sum_all(dm.abs_(diff)), 1.0 / (n * n))


def loss_asymmetric(a_cycle: Node, margin: float = 0.5) -> Node:
    n, m = a_cycle.shape
    if n != m:
        raise DimensionError(f"cycle matrix must be square, got {a_cycle.shape}")
    if n < 2:
        raise DegenerateInputError("margin loss needs at least two instances")
    if not 0 < margin < 1:
        raise ParameterError(f"margin must lie in (0, 1), got {margin}")
    row_max, col_max = dm.row_col_max_excluding_diag(a_cycle)
    d = dm.diag(a_cycle)
    row_terms = dm.hinge(dm.add_scalar(dm.sub(row_max, d), margin))
    col_terms = dm.hinge(dm.add_scalar(dm.sub(col_max, d), margin))
    return dm.scale(dm.add(dm.sum_all(row_terms), dm.sum_all(col_terms)), 1.0 / n)


def enforce_swap(x1, x2):
    """Order the pair so the first side is not larger than the second."""
    if x1.shape[1] > x2.shape[1]:
        return x2, x1, True
    return x1, x2, False


def cycle_matrix(x1: Node, x2: Node, cfg: LossConfig) -> Node:
    s = affinity(x1, x2)
    n1, n2 = s.shape
    a_fwd = assign(s, adaptive_temperature(n2, cfg.epsilon, cfg.delta))
    a_bwd = assign(dm.transpose(s), adaptive_temperature(n1, cfg.epsilon, cfg.delta))
    return cycle(a_fwd, a_bwd)


def cycas_forward(x1: Node, x2: Node, cfg: LossConfig | None = None):
    """Returns ``(loss, a_cycle, swapped)``.

    A pair whose smaller side holds a single instance gives a zero loss and
    bumps :data:`degenerate_skips`.
    """
    global degenerate_skips
    cfg = cfg or LossConfig()
    x1, x2, swapped = enforce_swap(x1, x2)
    a_cycle = cycle_matrix(x1, x2, cfg)
    if cfg.mode == SYMMETRIC:
        return loss_symmetric(a_cycle), a_cycle, swapped
    if a_cycle.shape[0] < 2:
        degenerate_skips += 1
        log.warning("skipping single-instance pair (%d skipped so far)", degenerate_skips)
        return dm.scale(dm.sum_all(a_cycle), 0.0), a_cycle, swapped
    return loss_asymmetric(a_cycle, cfg.margin), a_cycle, swapped
