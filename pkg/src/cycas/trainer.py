"""Encoder, optimizer, schedule, training loop and checkpoint files."""
from __future__ import annotations

import hashlib
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import DimensionError, Node
from .evalkit import EvalConfig, build_probe, evaluate_embeddings
from .loss import LossConfig, cycas_forward
from .simulator import INTER, INTRA, FramePairBatch, StreamConfig, VideoStream, sample_batch
from .xbm import MemoryQueue, xbm_loss

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "lr", "loss_asym", "loss_xbm", "cycle_acc", "rank1_probe",
                  "tau_alpha_mean", "tau_beta_mean"]


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# ------------------------------------------------------------------ encoder

class Encoder:
    """ReLU perceptron whose output columns are l2-normalized."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None):
        if len(sizes) < 2:
            raise ValueError("an encoder needs at least input and output sizes")
        self.sizes = [int(s) for s in sizes]
        rng = rng or np.random.default_rng(0)
        self.weights: list[Node] = []
        self.biases: list[Node] = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            w = rng.standard_normal((fan_out, fan_in)) * math.sqrt(2.0 / fan_in)
            self.weights.append(dm.leaf(w))
            self.biases.append(dm.leaf(np.zeros((fan_out, 1))))

    @property
    def d_in(self) -> int:
        return self.sizes[0]

    @property
    def d_out(self) -> int:
        return self.sizes[-1]

    def parameters(self) -> list[Node]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __call__(self, obs) -> Node:
        return encode(self, obs)

    def embed(self, obs: np.ndarray) -> np.ndarray:
        """Gradient-free forward pass."""
        h = np.asarray(obs, dtype=np.float64)
        if h.shape[0] != self.d_in:
            raise DimensionError(f"observations have {h.shape[0]} rows, encoder expects {self.d_in}")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = w.value @ h + b.value
            if i < last:
                h = np.maximum(h, 0.0)
        return h / np.maximum(np.linalg.norm(h, axis=0, keepdims=True), 1e-12)


def encode(model: Encoder, obs) -> Node:
    x = obs if isinstance(obs, Node) else dm.constant(obs)
    if x.shape[0] != model.d_in:
        raise DimensionError(f"observations have {x.shape[0]} rows, encoder expects {model.d_in}")
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        x = dm.add(dm.matmul(w, x), b)
        if i < last:
            x = dm.relu(x)
    return dm.l2_normalize_columns(x, 1e-12)


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def init_for(self, params: Sequence[Node]) -> "OptimizerState":
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        return self


def adamw_step(state: OptimizerState, params: Sequence[Node], grads: Sequence[np.ndarray],
               lr: float | None = None) -> None:
    """Bias-corrected Adam with decoupled weight decay, in place."""
    lr = state.lr if lr is None else lr
    if not state.m:
        state.init_for(params)
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("parameter, gradient and moment counts differ")
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.value.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.value.shape}")
        p.value *= 1 - lr * state.weight_decay
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ----------------------------------------------------------------- schedule

@dataclass(frozen=True)
class Phase:
    epochs: int
    rule: str = "cosine"        # cosine | constant
    lr: float = 1e-3
    inter_fraction: float = 0.5  # share of frame pairs drawn by inter-video sampling

    def __post_init__(self):
        if self.rule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr rule {self.rule!r}")
        if self.epochs < 0:
            raise ValueError("phase epochs must be >= 0")


@dataclass(frozen=True)
class Schedule:
    phases: tuple[Phase, ...]

    @property
    def total_epochs(self) -> int:
        return sum(p.epochs for p in self.phases)

    def phase_of(self, epoch: int) -> tuple[Phase, int]:
        start = 0
        for p in self.phases:
            if epoch < start + p.epochs:
                return p, epoch - start
            start += p.epochs
        raise ValueError(f"epoch {epoch} outside schedule of {self.total_epochs} epochs")


def lr_at(schedule: Schedule, epoch: int, step_frac: float = 0.0) -> float:
    if epoch < 0:
        raise ValueError(f"epoch {epoch} outside schedule")
    phase, local = schedule.phase_of(epoch)
    if phase.rule == "constant":
        return phase.lr
    progress = (local + step_frac) / phase.epochs
    return phase.lr * 0.5 * (1 + math.cos(math.pi * progress))


# full-scale recipe: cosine decay on intra pairs, then a short mixed phase at a small fixed rate
FULL_SCALE_SCHEDULE = Schedule((Phase(45, "cosine", 1e-4, 0.0), Phase(5, "constant", 2.5e-6, 0.5)))


# -------------------------------------------------------------- train config

@dataclass(frozen=True)
class TrainConfig:
    hidden: tuple[int, ...] = (64, 64)
    embed_dim: int = 16
    schedule: Schedule = Schedule((Phase(20, "cosine", 5e-3, 0.5),))
    batches_per_epoch: int = 50
    pairs_per_batch: int = 16
    cap_per_side: int = 40
    xbm_weight: float = 1.0
    memory_size: int = 65536
    top_k: int = 10
    weight_decay: float = 0.01
    max_grad_norm: float | None = None
    seed: int = 0


@dataclass
class Checkpoint:
    encoder: Encoder
    optimizer: OptimizerState
    metrics: dict = field(default_factory=dict)


def total_loss(batch: FramePairBatch, model: Encoder, memory: MemoryQueue | None,
               loss_cfg: LossConfig, xbm_weight: float = 1.0, top_k: int = 10):
    """Margin cycle loss plus weighted memory repulsion.

    Only observations and video ids are read; ground truth stays on the batch.
    Returns ``(total, asym, xbm, features, video_ids)``; ``xbm`` is None
    without memory.
    """
    seen = batch.visible()
    x1 = encode(model, seen.obs1)
    x2 = encode(model, seen.obs2)
    asym, _, _ = cycas_forward(x1, x2, loss_cfg)
    feats = dm.hstack([x1, x2])
    vids = np.concatenate([seen.vids1, seen.vids2])
    if memory is None or memory.capacity == 0 or xbm_weight == 0:
        return asym, asym, None, feats, vids
    rep = xbm_loss(feats, vids, memory, top_k)
    return dm.add(asym, dm.scale(rep, xbm_weight)), asym, rep, feats, vids


def _grad_norm(grads) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads))


def _dump_batch(path: Path, batch: FramePairBatch) -> None:
    np.savez(path, obs1=batch.obs1, obs2=batch.obs2, vids1=batch.vids1, vids2=batch.vids2)


def init_checkpoint(stream_cfg: StreamConfig, train_cfg: TrainConfig) -> Checkpoint:
    init_rng = np.random.default_rng([train_cfg.seed, 11])
    sizes = [stream_cfg.d_obs, *train_cfg.hidden, train_cfg.embed_dim]
    model = Encoder(sizes, init_rng)
    lr0 = train_cfg.schedule.phases[0].lr if train_cfg.schedule.phases else 0.0
    opt = OptimizerState(lr=lr0, weight_decay=train_cfg.weight_decay).init_for(model.parameters())
    return Checkpoint(model, opt)


def train(stream_cfg: StreamConfig, loss_cfg: LossConfig, train_cfg: TrainConfig,
          eval_cfg: EvalConfig | None = None,
          sink: Callable[[dict], None] | None = None,
          dump_dir: Path | None = None) -> Checkpoint:
    """Run the full schedule; one metrics row per epoch goes to ``sink``."""
    eval_cfg = eval_cfg or EvalConfig()
    ckpt = init_checkpoint(stream_cfg, train_cfg)
    model, opt = ckpt.encoder, ckpt.optimizer
    params = model.parameters()
    stream = VideoStream(stream_cfg)
    probe = build_probe(stream_cfg, eval_cfg)
    memory = MemoryQueue(train_cfg.memory_size, train_cfg.embed_dim)
    data_rng = np.random.default_rng([train_cfg.seed, 10])
    schedule = train_cfg.schedule
    nb = train_cfg.batches_per_epoch

    for epoch in range(schedule.total_epochs):
        phase, _ = schedule.phase_of(epoch)
        t0 = time.perf_counter()
        asym_sum = xbm_sum = 0.0
        taus = {INTRA: [], INTER: []}
        lr = opt.lr
        for b in range(nb):
            lr = lr_at(schedule, epoch, b / nb)
            batch = sample_batch(stream, data_rng, train_cfg.pairs_per_batch,
                                 phase.inter_fraction, train_cfg.cap_per_side)
            for kind, tau in batch.truth.pair_stats:
                taus[kind].append(tau)
            total, asym, rep, feats, vids = total_loss(
                batch, model, memory, loss_cfg, train_cfg.xbm_weight, train_cfg.top_k)
            value = total.item()
            if not math.isfinite(value):
                where = Path(dump_dir or ".") / f"diverged_epoch{epoch}_batch{b}.npz"
                _dump_batch(where, batch)
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch} batch {b}; batch dumped to {where}")
            for p in params:
                p.grad = None
            dm.backward(total)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in params]
            if train_cfg.max_grad_norm:
                norm = _grad_norm(grads)
                if norm > train_cfg.max_grad_norm:
                    grads = [g * (train_cfg.max_grad_norm / norm) for g in grads]
            adamw_step(opt, params, grads, lr)
            memory.enqueue_batch(feats.value, vids)
            asym_sum += asym.item()
            xbm_sum += rep.item() if rep is not None else 0.0
        opt.lr = lr
        ev = evaluate_embeddings(model.embed, probe, loss_cfg)
        row = {
            "epoch": epoch,
            "lr": lr,
            "loss_asym": asym_sum / nb,
            "loss_xbm": xbm_sum / nb,
            "cycle_acc": ev["cycle_acc"],
            "rank1_probe": ev["rank1"],
            "tau_alpha_mean": float(np.mean(taus[INTRA])) if taus[INTRA] else float("nan"),
            "tau_beta_mean": float(np.mean(taus[INTER])) if taus[INTER] else float("nan"),
        }
        ckpt.metrics = ev
        log.info("epoch %d  loss_asym %.4f  loss_xbm %.4f  rank1 %.3f  (%.1fs)", epoch,
                 row["loss_asym"], row["loss_xbm"], row["rank1_probe"], time.perf_counter() - t0)
        if sink is not None:
            sink(row)
    if schedule.total_epochs == 0:
        ckpt.metrics = evaluate_embeddings(model.embed, probe, loss_cfg)
    return ckpt


# --------------------------------------------------------------- checkpoint

MAGIC = b"CYCASCKP"
FORMAT_VERSION = 1
_DIGEST = 32


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Little-endian layout: magic, version, layer sizes, optimizer header,
    parameter blob, first-moment blob, second-moment blob, sha256 of all that."""
    model, opt = ckpt.encoder, ckpt.optimizer
    params = model.parameters()
    m = opt.m or [np.zeros_like(p.value) for p in params]
    v = opt.v or [np.zeros_like(p.value) for p in params]
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(model.sizes)),
             struct.pack(f"<{len(model.sizes)}I", *model.sizes),
             struct.pack("<Q5d", opt.step, opt.lr, opt.beta1, opt.beta2, opt.weight_decay, opt.eps)]
    for group in (params, m, v):
        for arr in group:
            a = arr.value if isinstance(arr, Node) else arr
            parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 + _DIGEST:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt file)")
    if body[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(MAGIC)
    version, n_sizes = struct.unpack_from("<II", body, off)
    off += 8
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    sizes = list(struct.unpack_from(f"<{n_sizes}I", body, off))
    off += 4 * n_sizes
    step, lr, b1, b2, wd, eps = struct.unpack_from("<Q5d", body, off)
    off += struct.calcsize("<Q5d")
    model = Encoder(sizes)
    shapes = [p.value.shape for p in model.parameters()]
    expected = off + 3 * 8 * sum(a * b for a, b in shapes)
    if expected != len(body):
        raise CheckpointError(f"{path}: payload size {len(body)} does not match header ({expected})")
    groups = []
    for _ in range(3):
        arrays = []
        for shape in shapes:
            count = shape[0] * shape[1]
            arrays.append(np.frombuffer(body, dtype="<f8", count=count, offset=off)
                          .reshape(shape).astype(np.float64))
            off += 8 * count
        groups.append(arrays)
    for p, value in zip(model.parameters(), groups[0]):
        p.value = value
    opt = OptimizerState(lr=lr, beta1=b1, beta2=b2, weight_decay=wd, eps=eps, step=step,
                         m=groups[1], v=groups[2])
    return Checkpoint(model, opt)
