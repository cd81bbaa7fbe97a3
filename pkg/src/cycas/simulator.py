"""Synthetic multi-person video streams with hidden identities.

An observation is a feature vector standing in for a cropped person image.
Identity appearance lives in a fixed ``identity_dim``-dimensional subspace of
the observation space. Each camera adds a style term that reads the identity
coordinates and writes into the remaining directions, plus a constant bias;
every observation also gets a pose term in those remaining directions and
isotropic appearance noise, then is l2-normalized.

Identities come from an open population: each id's latent is derived from
``(seed, id)`` so a population of any size costs nothing until sampled.
Training streams draw ids from ``[0, n_identities)``; evaluation probes use
ids at or above ``n_identities`` so they are never seen in training.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

INTRA = "intra"
INTER = "inter"
MIXED = "mixed"


@dataclass(frozen=True)
class StreamConfig:
    n_identities: int = 1_000_000
    d_obs: int = 32
    identity_dim: int = 12
    pose_noise: float = 0.5
    # share of pose change between the two frames of an intra pair (1 = independent)
    pose_drift: float = 0.3
    persons_per_frame: float = 6.0
    min_persons: int = 2
    appearance_noise: float = 0.1
    n_cameras: int = 2
    camera_rank: int = 4
    camera_gain: float = 2.0
    camera_strength: float = 6.0
    camera_bias: float = 1.0
    tau_alpha: float = 0.9
    tau_beta: float = 0.6
    # variance of the per-batch truncated gaussian draw around tau_alpha/tau_beta
    tau_alpha_var: float = 0.0
    tau_beta_var: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("tau_alpha", "tau_beta"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.d_obs < 1 or self.n_identities < 1:
            raise ValueError("d_obs and n_identities must be positive")
        if self.appearance_noise < 0:
            raise ValueError("appearance_noise must be >= 0")
        if not 1 <= self.identity_dim <= self.d_obs:
            raise ValueError("identity_dim must lie in [1, d_obs]")
        if self.camera_rank > min(self.identity_dim, self.d_obs - self.identity_dim):
            raise ValueError("camera_rank cannot exceed identity_dim or d_obs - identity_dim")
        if self.pose_noise < 0:
            raise ValueError("pose_noise must be >= 0")
        if not 0 <= self.pose_drift <= 1:
            raise ValueError("pose_drift must lie in [0, 1]")


@dataclass
class GroundTruth:
    """Evaluation-only labels. Nothing in the training path reads these."""
    ids1: np.ndarray
    ids2: np.ndarray
    cams1: np.ndarray
    cams2: np.ndarray
    # (kind, measured tau) per source pair
    pair_stats: list = field(default_factory=list)


@dataclass
class ObservedPair:
    """What the learner gets to see: observations and video ids."""
    obs1: np.ndarray  # d_obs x n1
    obs2: np.ndarray  # d_obs x n2
    vids1: np.ndarray
    vids2: np.ndarray


@dataclass
class FramePairBatch:
    obs1: np.ndarray
    obs2: np.ndarray
    vids1: np.ndarray
    vids2: np.ndarray
    pair_kind: str
    truth: GroundTruth
    n_pairs: int = 1

    def __post_init__(self):
        if self.obs1.shape[1] != len(self.vids1) or self.obs1.shape[1] != len(self.truth.ids1):
            raise ValueError("frame 1 observation and label counts differ")
        if self.obs2.shape[1] != len(self.vids2) or self.obs2.shape[1] != len(self.truth.ids2):
            raise ValueError("frame 2 observation and label counts differ")

    @property
    def n1(self) -> int:
        return self.obs1.shape[1]

    @property
    def n2(self) -> int:
        return self.obs2.shape[1]

    def visible(self) -> ObservedPair:
        return ObservedPair(self.obs1, self.obs2, self.vids1, self.vids2)


def measure_symmetry(ids1: Sequence, ids2: Sequence) -> float:
    """Shared identities over the larger set size."""
    s1, s2 = set(np.asarray(ids1).tolist()), set(np.asarray(ids2).tolist())
    big = max(len(s1), len(s2))
    if big == 0:
        return 0.0
    return len(s1 & s2) / big


def pair_symmetry(pair: FramePairBatch) -> float:
    return measure_symmetry(pair.truth.ids1, pair.truth.ids2)


def truncated_gaussian(rng: np.random.Generator, mean: float, var: float,
                       lo: float = 0.0, hi: float = 1.0) -> float:
    """Draw from N(mean, var) restricted to the open interval (lo, hi], by rejection."""
    if var <= 0:
        return mean
    sd = math.sqrt(var)
    for _ in range(10_000):
        v = rng.normal(mean, sd)
        if lo < v <= hi:
            return float(v)
    return float(min(max(mean, lo + 1e-6), hi))


def _stochastic_round(x: float, rng: np.random.Generator) -> int:
    base = math.floor(x)
    return base + int(rng.random() < x - base)


class VideoStream:
    """Camera style maps and identity latents for one stream configuration."""

    def __init__(self, cfg: StreamConfig):
        self.cfg = cfg
        d, k, r = cfg.d_obs, cfg.identity_dim, cfg.camera_rank
        basis, _ = np.linalg.qr(np.random.default_rng([cfg.seed, 0]).standard_normal((d, d)))
        self.identity_basis = basis[:, :k]
        self.nuisance_basis = basis[:, k:]
        self.camera_maps = []
        self.camera_biases = []
        for cam in range(cfg.n_cameras):
            crng = np.random.default_rng([cfg.seed, 1, cam])
            u = self.nuisance_basis @ np.linalg.qr(crng.standard_normal((d - k, r)))[0] if r else np.zeros((d, 0))
            v = self.identity_basis @ np.linalg.qr(crng.standard_normal((k, r)))[0] if r else np.zeros((d, 0))
            self.camera_maps.append(cfg.camera_gain * np.eye(d) + cfg.camera_strength * (u @ v.T))
            b = crng.standard_normal(d)
            self.camera_biases.append(cfg.camera_bias * b / np.linalg.norm(b))
        self._latents: dict[int, np.ndarray] = {}

    def latent(self, identity: int) -> np.ndarray:
        vec = self._latents.get(identity)
        if vec is None:
            z = np.random.default_rng([self.cfg.seed, 2, int(identity)]).standard_normal(self.cfg.identity_dim)
            vec = self.identity_basis @ (z / np.linalg.norm(z))
            if len(self._latents) > 50_000:
                self._latents.clear()
            self._latents[identity] = vec
        return vec

    def latents(self, ids: Sequence[int]) -> np.ndarray:
        return np.stack([self.latent(int(i)) for i in ids], axis=1)

    def draw_poses(self, n: int, rng: np.random.Generator) -> np.ndarray:
        k = self.nuisance_basis.shape[1]
        if self.cfg.pose_noise <= 0 or k == 0:
            return np.zeros((k, n))
        return rng.standard_normal((k, n)) * (self.cfg.pose_noise / math.sqrt(k))

    def render(self, ids: Sequence[int], camera: int, rng: np.random.Generator,
               noise: float | None = None, poses: np.ndarray | None = None) -> np.ndarray:
        """Observations (d_obs x n) of ``ids`` seen through ``camera``.

        ``poses`` (nuisance coordinates, one column per instance) are drawn
        fresh when not given.
        """
        sigma = self.cfg.appearance_noise if noise is None else noise
        if len(ids) == 0:
            return np.zeros((self.cfg.d_obs, 0))
        lat = self.latents(ids)
        x = self.camera_maps[camera] @ lat + self.camera_biases[camera][:, None]
        if poses is None:
            poses = self.draw_poses(len(ids), rng)
        if poses.size:
            x = x + self.nuisance_basis @ poses
        if sigma > 0:
            x = x + sigma * rng.standard_normal(x.shape)
        return x / np.maximum(np.linalg.norm(x, axis=0, keepdims=True), 1e-12)

    def generate_observation(self, identity: int, camera: int, rng: np.random.Generator) -> np.ndarray:
        return self.render([identity], camera, rng)[:, 0]

    # -- pair sampling -------------------------------------------------------

    def frame_size(self, rng: np.random.Generator) -> int:
        return max(self.cfg.min_persons, int(rng.poisson(self.cfg.persons_per_frame)))

    def draw_ids(self, rng: np.random.Generator, n: int, exclude=(), lo: int = 0,
                 hi: int | None = None) -> np.ndarray:
        hi = self.cfg.n_identities if hi is None else hi
        taken = set(int(i) for i in exclude)
        if hi - lo < n + len(taken):
            raise ValueError("identity population too small for the requested frame")
        out = []
        while len(out) < n:
            i = int(rng.integers(lo, hi))
            if i not in taken:
                taken.add(i)
                out.append(i)
        return np.array(out, dtype=np.int64)

    def _pair_ids(self, rng, tau: float):
        n = self.frame_size(rng)
        ids1 = self.draw_ids(rng, n)
        shared = min(n, _stochastic_round(tau * n, rng))
        keep = rng.permutation(n)[:shared]
        fresh = self.draw_ids(rng, n - shared, exclude=ids1)
        ids2 = np.concatenate([ids1[keep], fresh])
        return ids1, ids2[rng.permutation(n)]

    def _video_id(self, rng) -> int:
        return int(rng.integers(0, 2**62))

    def sample_intra_pair(self, rng: np.random.Generator, tau: float | None = None) -> FramePairBatch:
        """Two frames of one camera a short interval apart."""
        tau = self.cfg.tau_alpha if tau is None else tau
        ids1, ids2 = self._pair_ids(rng, tau)
        cam = int(rng.integers(self.cfg.n_cameras))
        vid = self._video_id(rng)
        return self._make_pair(rng, ids1, ids2, cam, cam, vid, vid, INTRA)

    def sample_inter_pair(self, rng: np.random.Generator, tau: float | None = None) -> FramePairBatch:
        """Simultaneous frames from two cameras with overlapping views."""
        if self.cfg.n_cameras < 2:
            raise ValueError("inter-video sampling needs at least 2 cameras")
        tau = self.cfg.tau_beta if tau is None else tau
        ids1, ids2 = self._pair_ids(rng, tau)
        cam1, cam2 = (int(c) for c in rng.choice(self.cfg.n_cameras, size=2, replace=False))
        vid1 = self._video_id(rng)
        vid2 = vid1 + 1
        return self._make_pair(rng, ids1, ids2, cam1, cam2, vid1, vid2, INTER)

    def _make_pair(self, rng, ids1, ids2, cam1, cam2, vid1, vid2, kind) -> FramePairBatch:
        poses1 = self.draw_poses(len(ids1), rng)
        poses2 = self.draw_poses(len(ids2), rng)
        if kind == INTRA and self.cfg.pose_drift < 1:
            # a person keeps most of their pose over the short interval
            where = {int(i): j for j, i in enumerate(ids1)}
            for j, ident in enumerate(ids2):
                if int(ident) in where:
                    src = poses1[:, where[int(ident)]]
                    poses2[:, j] = math.sqrt(1 - self.cfg.pose_drift ** 2) * src + self.cfg.pose_drift * poses2[:, j]
        obs1 = self.render(ids1, cam1, rng, poses=poses1)
        obs2 = self.render(ids2, cam2, rng, poses=poses2)
        truth = GroundTruth(ids1, ids2, np.full(len(ids1), cam1), np.full(len(ids2), cam2))
        pair = FramePairBatch(obs1, obs2, np.full(len(ids1), vid1, dtype=np.int64),
                              np.full(len(ids2), vid2, dtype=np.int64), kind, truth)
        truth.pair_stats.append((kind, pair_symmetry(pair)))
        return pair

    def inject_asymmetry(self, pair: FramePairBatch, tau_target: float,
                         rng: np.random.Generator) -> FramePairBatch:
        """Replace ceil((1 - tau) * n2) frame-2 instances with irrelevant identities."""
        return inject_asymmetry(pair, tau_target, rng, self)


def inject_asymmetry(pair: FramePairBatch, tau_target: float, rng: np.random.Generator,
                     stream: VideoStream) -> FramePairBatch:
    if not 0 < tau_target <= 1:
        raise ValueError(f"tau_target must lie in (0, 1], got {tau_target}")
    n2 = pair.n2
    n_replace = min(n2, math.ceil(round((1 - tau_target) * n2, 9)))
    if n_replace == 0:
        return pair
    slots = np.sort(rng.choice(n2, size=n_replace, replace=False))
    exclude = np.concatenate([pair.truth.ids1, pair.truth.ids2])
    new_ids = stream.draw_ids(rng, n_replace, exclude=exclude)
    ids2 = pair.truth.ids2.copy()
    obs2 = pair.obs2.copy()
    cams2 = pair.truth.cams2.copy()
    for slot, ident in zip(slots, new_ids):
        ids2[slot] = ident
        obs2[:, slot] = stream.render([ident], int(cams2[slot]), rng)[:, 0]
    truth = replace(pair.truth, ids2=ids2, cams2=cams2, pair_stats=[])
    out = FramePairBatch(pair.obs1, obs2, pair.vids1, pair.vids2.copy(), pair.pair_kind,
                         truth, pair.n_pairs)
    truth.pair_stats.append((pair.pair_kind, pair_symmetry(out)))
    return out


def build_minibatch(pairs: Sequence[FramePairBatch], cap_per_side: int = 40) -> FramePairBatch:
    """Merge frame pairs side by side, keeping each side within ``cap_per_side``.

    Whole trailing pairs are dropped first; if the first pair alone exceeds
    the cap its trailing instances are cut.
    """
    if not pairs:
        raise ValueError("build_minibatch needs at least one pair")
    pairs = list(pairs)
    while len(pairs) > 1 and (sum(p.n1 for p in pairs) > cap_per_side
                              or sum(p.n2 for p in pairs) > cap_per_side):
        pairs.pop()
    kinds = {p.pair_kind for p in pairs}
    truth = GroundTruth(
        np.concatenate([p.truth.ids1 for p in pairs])[:cap_per_side],
        np.concatenate([p.truth.ids2 for p in pairs])[:cap_per_side],
        np.concatenate([p.truth.cams1 for p in pairs])[:cap_per_side],
        np.concatenate([p.truth.cams2 for p in pairs])[:cap_per_side],
        [s for p in pairs for s in p.truth.pair_stats],
    )
    return FramePairBatch(
        np.hstack([p.obs1 for p in pairs])[:, :cap_per_side],
        np.hstack([p.obs2 for p in pairs])[:, :cap_per_side],
        np.concatenate([p.vids1 for p in pairs])[:cap_per_side],
        np.concatenate([p.vids2 for p in pairs])[:cap_per_side],
        kinds.pop() if len(kinds) == 1 else MIXED,
        truth,
        len(pairs),
    )


def sample_batch(stream: VideoStream, rng: np.random.Generator, n_pairs: int = 16,
                 inter_fraction: float = 0.5, cap_per_side: int = 40) -> FramePairBatch:
    """One training minibatch of ``n_pairs`` frame pairs, each one inter-video
    with probability ``inter_fraction`` and intra-video otherwise.

    Target symmetries are drawn once per batch from the truncated gaussian
    when a variance is configured.
    """
    cfg = stream.cfg
    tau_a = truncated_gaussian(rng, cfg.tau_alpha, cfg.tau_alpha_var)
    tau_b = truncated_gaussian(rng, cfg.tau_beta, cfg.tau_beta_var)
    pairs = []
    for _ in range(n_pairs):
        if cfg.n_cameras >= 2 and rng.random() < inter_fraction:
            pairs.append(stream.sample_inter_pair(rng, tau_b))
        else:
            pairs.append(stream.sample_intra_pair(rng, tau_a))
    return build_minibatch(pairs, cap_per_side)


# ---------------------------------------------------------------- tracklets

class TrackletStore:
    """Labeled-dataset simulation: every (identity, camera) is one tracklet.

    Boxes of a tracklet share a tracklet-level appearance draw and differ by a
    smaller per-box noise.
    """

    def __init__(self, stream: VideoStream, n_identities: int, boxes_per_tracklet: int,
                 rng: np.random.Generator, box_noise: float | None = None):
        cfg = stream.cfg
        if cfg.n_cameras < 2:
            raise ValueError("tracklet simulation needs at least 2 cameras")
        self.stream = stream
        self.identities = np.arange(n_identities, dtype=np.int64)
        box_noise = cfg.appearance_noise / 2 if box_noise is None else box_noise
        self.tracklets: dict[tuple[int, int], np.ndarray] = {}
        for ident in self.identities:
            for cam in range(cfg.n_cameras):
                center = stream.render([ident], cam, rng)
                boxes = center + box_noise * rng.standard_normal((cfg.d_obs, boxes_per_tracklet))
                self.tracklets[(int(ident), cam)] = boxes / np.linalg.norm(boxes, axis=0, keepdims=True)
        self._next_vid = 0

    def _box(self, ident: int, cam: int, rng) -> np.ndarray:
        boxes = self.tracklets[(ident, cam)]
        return boxes[:, rng.integers(boxes.shape[1])]

    def sample_pair(self, rng: np.random.Generator, batch_size: int, kind: str,
                    tau: float = 1.0) -> FramePairBatch:
        """B/2 identities; intra takes two boxes of one tracklet, inter one box
        from each of two tracklets on different cameras. Symmetry below 1 is
        produced by replacing frame-2 boxes with irrelevant identities."""
        n = batch_size // 2
        if n > len(self.identities):
            raise ValueError("batch asks for more identities than the store holds")
        ids = rng.choice(self.identities, size=n, replace=False)
        n_cam = self.stream.cfg.n_cameras
        cams1 = np.empty(n, dtype=np.int64)
        cams2 = np.empty(n, dtype=np.int64)
        obs1 = np.empty((self.stream.cfg.d_obs, n))
        obs2 = np.empty_like(obs1)
        for j, ident in enumerate(ids):
            if kind == INTRA:
                c1 = c2 = int(rng.integers(n_cam))
                boxes = self.tracklets[(int(ident), c1)]
                b1, b2 = rng.choice(boxes.shape[1], size=2, replace=boxes.shape[1] < 2)
                obs1[:, j], obs2[:, j] = boxes[:, b1], boxes[:, b2]
            else:
                c1, c2 = (int(c) for c in rng.choice(n_cam, size=2, replace=False))
                obs1[:, j] = self._box(int(ident), c1, rng)
                obs2[:, j] = self._box(int(ident), c2, rng)
            cams1[j], cams2[j] = c1, c2
        perm = rng.permutation(n)
        ids2, obs2, cams2 = ids[perm], obs2[:, perm], cams2[perm]
        vid = self._next_vid
        self._next_vid += 2
        vid2 = vid if kind == INTRA else vid + 1
        truth = GroundTruth(ids.astype(np.int64), ids2.astype(np.int64), cams1, cams2)
        pair = FramePairBatch(obs1, obs2, np.full(n, vid, dtype=np.int64),
                              np.full(n, vid2, dtype=np.int64), kind, truth)
        truth.pair_stats.append((kind, pair_symmetry(pair)))
        if tau < 1:
            pair = self._replace(pair, tau, rng)
        return pair

    def _replace(self, pair: FramePairBatch, tau: float, rng) -> FramePairBatch:
        n2 = pair.n2
        n_replace = min(n2, math.ceil(round((1 - tau) * n2, 9)))
        used = set(pair.truth.ids1.tolist()) | set(pair.truth.ids2.tolist())
        pool = np.array([i for i in self.identities if int(i) not in used], dtype=np.int64)
        n_replace = min(n_replace, len(pool))
        if n_replace == 0:
            return pair
        slots = rng.choice(n2, size=n_replace, replace=False)
        new_ids = rng.choice(pool, size=n_replace, replace=False)
        ids2, obs2 = pair.truth.ids2.copy(), pair.obs2.copy()
        for slot, ident in zip(slots, new_ids):
            ids2[slot] = ident
            obs2[:, slot] = self._box(int(ident), int(pair.truth.cams2[slot]), rng)
        truth = replace(pair.truth, ids2=ids2, pair_stats=[])
        out = FramePairBatch(pair.obs1, obs2, pair.vids1, pair.vids2, pair.pair_kind, truth)
        truth.pair_stats.append((pair.pair_kind, pair_symmetry(out)))
        return out


def simulate_labeled_dataset(cfg: StreamConfig, rng: np.random.Generator,
                             n_identities: int = 64, boxes_per_tracklet: int = 8) -> TrackletStore:
    return TrackletStore(VideoStream(cfg), n_identities, boxes_per_tracklet, rng)


# ---------------------------------------------------------------- CSV dump

def write_batches_csv(path, batches: Sequence[FramePairBatch]) -> None:
    """One row per instance: batch, side, video_id, truth_id, camera, v0..v{d-1}."""
    d = batches[0].obs1.shape[0] if batches else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["batch", "side", "video_id", "truth_id", "camera"] + [f"v{i}" for i in range(d)])
        for b, batch in enumerate(batches):
            for side, obs, vids, ids, cams in (
                (1, batch.obs1, batch.vids1, batch.truth.ids1, batch.truth.cams1),
                (2, batch.obs2, batch.vids2, batch.truth.ids2, batch.truth.cams2),
            ):
                for j in range(obs.shape[1]):
                    w.writerow([b, side, int(vids[j]), int(ids[j]), int(cams[j])]
                               + [repr(float(v)) for v in obs[:, j]])


def read_batches_csv(path) -> list[dict]:
    """Group a dump back into per-batch dicts of side -> (video ids, truth ids, obs)."""
    out: dict[int, dict] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            b = out.setdefault(int(row["batch"]), {1: ([], [], []), 2: ([], [], [])})
            side = b[int(row["side"])]
            side[0].append(int(row["video_id"]))
            side[1].append(int(row["truth_id"]))
            side[2].append([float(v) for k, v in row.items() if k.startswith("v") and k[1:].isdigit()])
    return [out[k] for k in sorted(out)]
