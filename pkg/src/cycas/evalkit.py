"""Ground-truth evaluation: assignment, association accuracy, CMC and mAP."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import diffmath as dm
from .loss import LossConfig, cycle_matrix, enforce_swap
from .simulator import StreamConfig, VideoStream

log = logging.getLogger(__name__)


def hungarian_assign(cost) -> np.ndarray:
    """Minimum-cost one-to-one assignment.

    Returns ``cols`` with ``cols[i]`` the column given to row ``i``, or -1
    for rows left unassigned when there are more rows than columns.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    if np.isnan(cost).any():
        raise ValueError("cost matrix contains NaN")
    out = np.full(cost.shape[0], -1, dtype=np.int64)
    if cost.size == 0:
        return out
    rows, cols = linear_sum_assignment(cost)
    out[rows] = cols
    return out


def association_accuracy(x1: np.ndarray, x2: np.ndarray, truth1, truth2) -> float:
    """Share of correctly matched rows, over rows whose identity is present
    in the other frame. Matching is Hungarian on negated cosine similarity."""
    truth1, truth2 = np.asarray(truth1), np.asarray(truth2)
    s = x1.T @ x2
    cols = hungarian_assign(-s)
    present = np.isin(truth1, truth2)
    if not present.any():
        return 0.0
    hits = [cols[i] >= 0 and truth2[cols[i]] == truth1[i] for i in np.flatnonzero(present)]
    return float(np.mean(hits))


def cycle_accuracy(x1: np.ndarray, x2: np.ndarray, cfg: LossConfig | None = None) -> float:
    """Fraction of instances whose cycle row peaks on themselves."""
    a, b, _ = enforce_swap(dm.constant(x1), dm.constant(x2))
    a_cycle = cycle_matrix(a, b, cfg or LossConfig()).value
    return cycle_self_return(a_cycle)


def cycle_self_return(a_cycle: np.ndarray) -> float:
    n = a_cycle.shape[0]
    if n == 0:
        return 0.0
    return float(np.mean(np.argmax(a_cycle, axis=1) == np.arange(n)))


@dataclass
class RankingResult:
    order: np.ndarray      # queries x gallery, gallery indices by descending similarity
    relevant: np.ndarray   # same shape, relevance of the item at each rank


def rank_gallery(sim: np.ndarray, query_ids, gallery_ids) -> RankingResult:
    # stable sort keeps lower gallery index first among equal similarities
    order = np.argsort(-sim, axis=1, kind="stable")
    gallery_ids = np.asarray(gallery_ids)
    relevant = gallery_ids[order] == np.asarray(query_ids)[:, None]
    return RankingResult(order, relevant)


def _valid_queries(rankings: RankingResult) -> np.ndarray:
    valid = rankings.relevant.any(axis=1)
    missing = int((~valid).sum())
    if missing:
        log.warning("%d queries have no relevant gallery item and are excluded", missing)
    return valid


def cmc_rank(rankings: RankingResult, r: int) -> float:
    valid = _valid_queries(rankings)
    if not valid.any():
        return 0.0
    hits = rankings.relevant[valid, :r].any(axis=1)
    return float(hits.mean())


def average_precision(relevant_row: np.ndarray) -> float:
    hits = np.flatnonzero(relevant_row)
    if hits.size == 0:
        return 0.0
    precision_at_hits = np.arange(1, hits.size + 1) / (hits + 1)
    return float(precision_at_hits.mean())


def mean_average_precision(rankings: RankingResult) -> float:
    valid = _valid_queries(rankings)
    if not valid.any():
        return 0.0
    return float(np.mean([average_precision(row) for row in rankings.relevant[valid]]))


# ------------------------------------------------------------- probe protocol

@dataclass(frozen=True)
class EvalConfig:
    probe_identities: int = 16
    gallery_per_identity: int = 4
    query_camera: int = 0
    gallery_camera: int = 1
    assoc_pairs: int = 20
    assoc_pair_size: int = 6
    seed: int = 1


@dataclass
class ProbeSet:
    query: np.ndarray
    query_ids: np.ndarray
    gallery: np.ndarray
    gallery_ids: np.ndarray
    # symmetric cross-camera frame pairs: (obs1, obs2, ids1, ids2)
    pairs: list


def build_probe(stream_cfg: StreamConfig, eval_cfg: EvalConfig) -> ProbeSet:
    """Held-out identities: one query per identity on one camera, gallery
    views on a disjoint camera, plus symmetric cross-camera frame pairs."""
    if stream_cfg.n_cameras < 2:
        raise ValueError("the probe protocol needs two cameras")
    if eval_cfg.query_camera == eval_cfg.gallery_camera:
        raise ValueError("query and gallery cameras must differ")
    stream = VideoStream(stream_cfg)
    rng = np.random.default_rng([stream_cfg.seed, 3, eval_cfg.seed])
    base = stream_cfg.n_identities
    ids = np.arange(base, base + eval_cfg.probe_identities, dtype=np.int64)
    query = stream.render(ids, eval_cfg.query_camera, rng)
    gallery_ids = np.repeat(ids, eval_cfg.gallery_per_identity)
    gallery = stream.render(gallery_ids, eval_cfg.gallery_camera, rng)
    pairs = []
    size = min(eval_cfg.assoc_pair_size, len(ids))
    for _ in range(eval_cfg.assoc_pairs):
        pid = rng.choice(ids, size=size, replace=False)
        pid2 = pid[rng.permutation(size)]
        pairs.append((stream.render(pid, eval_cfg.query_camera, rng),
                      stream.render(pid2, eval_cfg.gallery_camera, rng), pid, pid2))
    return ProbeSet(query, ids, gallery, gallery_ids, pairs)


def evaluate_embeddings(embed, probe: ProbeSet, loss_cfg: LossConfig | None = None) -> dict:
    """``embed`` maps a d_obs x n observation matrix to d x n unit embeddings."""
    q = embed(probe.query)
    g = embed(probe.gallery)
    rankings = rank_gallery(q.T @ g, probe.query_ids, probe.gallery_ids)
    cyc, assoc = [], []
    for o1, o2, i1, i2 in probe.pairs:
        e1, e2 = embed(o1), embed(o2)
        cyc.append(cycle_accuracy(e1, e2, loss_cfg))
        assoc.append(association_accuracy(e1, e2, i1, i2))
    return {
        "rank1": cmc_rank(rankings, 1),
        "rank5": cmc_rank(rankings, 5),
        "map": mean_average_precision(rankings),
        "cycle_acc": float(np.mean(cyc)) if cyc else 0.0,
        "assoc_acc": float(np.mean(assoc)) if assoc else 0.0,
    }


def random_embedding_baseline(probe: ProbeSet, dim: int, seed: int = 0) -> dict:
    """Metrics for embeddings that ignore the input entirely."""
    rng = np.random.default_rng(seed)

    def embed(obs):
        x = rng.standard_normal((dim, obs.shape[1]))
        return x / np.linalg.norm(x, axis=0, keepdims=True)

    return evaluate_embeddings(embed, probe)
