import dataclasses
import math

import numpy as np
import pytest

from cycas import diffmath as dm
from cycas import trainer as tr
from cycas.evalkit import EvalConfig
from cycas.loss import LossConfig, cycas_forward
from cycas.simulator import GroundTruth, StreamConfig, VideoStream, sample_batch
from cycas.xbm import MemoryQueue

TINY = tr.TrainConfig(hidden=(16,), embed_dim=8, batches_per_epoch=3, pairs_per_batch=4,
                      memory_size=64, schedule=tr.Schedule((tr.Phase(2, "cosine", 1e-3),)))
TINY_EVAL = EvalConfig(probe_identities=4, gallery_per_identity=2, assoc_pairs=2, assoc_pair_size=3)


def test_encoder_outputs_unit_columns():
    enc = tr.Encoder([32, 64, 64, 16], np.random.default_rng(0))
    obs = np.random.default_rng(1).standard_normal((32, 9))
    out = tr.encode(enc, obs).value
    assert np.allclose(np.linalg.norm(out, axis=0), 1.0)
    assert np.allclose(enc.embed(obs), out)


def test_linear_encoder_with_identity_weights():
    enc = tr.Encoder([3, 3])
    enc.weights[0].value = np.eye(3)
    obs = np.diag([2.0, 3.0, 0.5])
    assert np.allclose(tr.encode(enc, obs).value, np.eye(3))


def test_encoder_dimension_check():
    with pytest.raises(dm.DimensionError):
        tr.Encoder([4, 2]).embed(np.ones((5, 1)))


def params(*shapes):
    rng = np.random.default_rng(0)
    return [dm.leaf(rng.standard_normal(s)) for s in shapes]


def test_adamw_zero_grad_zero_decay_is_noop():
    ps = params((2, 3))
    before = ps[0].value.copy()
    st = tr.OptimizerState(lr=0.1, weight_decay=0.0)
    tr.adamw_step(st, ps, [np.zeros((2, 3))])
    assert np.array_equal(ps[0].value, before)


def test_adamw_first_step():
    ps = params((1, 3))
    before = ps[0].value.copy()
    g = np.array([[0.5, -2.0, 1e-3]])
    st = tr.OptimizerState(lr=0.01, weight_decay=0.0)
    tr.adamw_step(st, ps, [g])
    # bias-corrected moments at step 1 are g and g^2
    assert np.allclose(ps[0].value, before - 0.01 * g / (np.abs(g) + st.eps))


def test_adamw_decoupled_decay():
    ps = params((2, 2))
    before = ps[0].value.copy()
    st = tr.OptimizerState(lr=0.1, weight_decay=0.5)
    tr.adamw_step(st, ps, [np.zeros((2, 2))])
    assert np.allclose(ps[0].value, before * (1 - 0.1 * 0.5))


def test_lr_schedule():
    s = tr.Schedule((tr.Phase(10, "cosine", 1e-3),))
    assert tr.lr_at(s, 0) == 1e-3
    assert tr.lr_at(s, 9, 0.9999) < 1e-8
    assert tr.lr_at(tr.FULL_SCALE_SCHEDULE, 47) == 2.5e-6
    assert tr.FULL_SCALE_SCHEDULE.total_epochs == 50
    with pytest.raises(ValueError):
        tr.lr_at(s, 10)


def small_batch():
    return sample_batch(VideoStream(StreamConfig()), np.random.default_rng(0), 2)


def test_total_loss_lambda_zero_and_empty_memory():
    b = small_batch()
    enc = tr.Encoder([32, 16, 8], np.random.default_rng(1))
    cfg = LossConfig()
    x1, x2 = tr.encode(enc, b.obs1), tr.encode(enc, b.obs2)
    ref = cycas_forward(x1, x2, cfg)[0].item()
    mem = MemoryQueue(16, 8)
    mem.enqueue_batch(np.eye(8)[:, :4], [-1, -2, -3, -4])
    assert tr.total_loss(b, enc, mem, cfg, xbm_weight=0.0)[0].item() == ref
    assert tr.total_loss(b, enc, MemoryQueue(16, 8), cfg)[0].item() == ref
    total, asym, rep, _, _ = tr.total_loss(b, enc, mem, cfg)
    assert total.item() == pytest.approx(asym.item() + rep.item())


def test_total_loss_perfect_embeddings():
    enc = tr.Encoder([4, 4])
    enc.weights[0].value = np.eye(4)
    obs = np.eye(4)
    from cycas.simulator import FramePairBatch
    truth = GroundTruth(np.arange(4), np.arange(4), np.zeros(4, int), np.zeros(4, int))
    b = FramePairBatch(obs, obs.copy(), np.zeros(4, int), np.zeros(4, int), "intra", truth)
    mem = MemoryQueue(8, 4)
    mem.enqueue_batch(-np.eye(4), [5, 5, 5, 5])
    total, asym, rep, _, _ = tr.total_loss(b, enc, mem, LossConfig())
    assert asym.item() == pytest.approx(0.0, abs=1e-12)
    assert rep.item() > 0


def test_loss_ignores_ground_truth():
    b = small_batch()
    enc = tr.Encoder([32, 16, 8], np.random.default_rng(2))
    clean = tr.total_loss(b, enc, None, LossConfig())[0].item()
    r = np.random.default_rng(3)
    t = b.truth
    scrambled = GroundTruth(r.permutation(t.ids1) + 999, r.permutation(t.ids2) - 7,
                            t.cams1[::-1].copy(), t.cams2[::-1].copy(), [("inter", 0.0)])
    tainted = dataclasses.replace(b, truth=scrambled)
    assert tr.total_loss(tainted, enc, None, LossConfig())[0].item() == clean


def test_zero_epochs_returns_initial_checkpoint():
    cfg = dataclasses.replace(TINY, schedule=tr.Schedule((tr.Phase(0, "cosine", 1e-3),)))
    ck = tr.train(StreamConfig(), LossConfig(), cfg, TINY_EVAL)
    init = tr.init_checkpoint(StreamConfig(), cfg)
    assert ck.optimizer.step == 0
    for a, b in zip(ck.encoder.parameters(), init.encoder.parameters()):
        assert np.array_equal(a.value, b.value)
    assert "rank1" in ck.metrics


def test_training_is_deterministic():
    rows_a, rows_b = [], []
    a = tr.train(StreamConfig(), LossConfig(), TINY, TINY_EVAL, sink=rows_a.append)
    b = tr.train(StreamConfig(), LossConfig(), TINY, TINY_EVAL, sink=rows_b.append)
    for p, q in zip(a.encoder.parameters(), b.encoder.parameters()):
        assert np.array_equal(p.value, q.value)
    assert len(rows_a) == 2 and list(rows_a[0]) == tr.METRIC_COLUMNS
    assert repr(rows_a) == repr(rows_b)


def test_nan_loss_dumps_batch(tmp_path, monkeypatch):
    real = tr.total_loss

    def poisoned(*args, **kw):
        out = real(*args, **kw)
        return (dm.scale(out[0], math.nan),) + out[1:]
    monkeypatch.setattr(tr, "total_loss", poisoned)
    with pytest.raises(tr.TrainingDiverged):
        tr.train(StreamConfig(), LossConfig(), TINY, TINY_EVAL, dump_dir=tmp_path)
    dumps = list(tmp_path.glob("diverged_*.npz"))
    assert len(dumps) == 1 and "obs1" in np.load(dumps[0])


def test_checkpoint_round_trip(tmp_path):
    ck = tr.train(StreamConfig(), LossConfig(), TINY, TINY_EVAL)
    path = tmp_path / "c.bin"
    tr.save_checkpoint(path, ck)
    back = tr.load_checkpoint(path)
    for p, q in zip(ck.encoder.parameters(), back.encoder.parameters()):
        assert np.array_equal(p.value, q.value)
    for m, n in zip(ck.optimizer.m + ck.optimizer.v, back.optimizer.m + back.optimizer.v):
        assert np.array_equal(m, n)
    assert back.optimizer.step == ck.optimizer.step
    x = np.random.default_rng(0).standard_normal((32, 10))
    assert np.array_equal(ck.encoder.embed(x), back.encoder.embed(x))
    tr.save_checkpoint(tmp_path / "d.bin", back)
    assert (tmp_path / "d.bin").read_bytes() == path.read_bytes()


def test_truncated_checkpoint_is_rejected(tmp_path):
    ck = tr.init_checkpoint(StreamConfig(), TINY)
    path = tmp_path / "c.bin"
    tr.save_checkpoint(path, ck)
    raw = path.read_bytes()
    path.write_bytes(raw[:-100])
    with pytest.raises(tr.CheckpointError, match="checksum"):
        tr.load_checkpoint(path)
    path.write_bytes(b"short")
    with pytest.raises(tr.CheckpointError):
        tr.load_checkpoint(path)
    path.write_bytes(raw[:-1] + bytes([raw[-1] ^ 1]))
    with pytest.raises(tr.CheckpointError):
        tr.load_checkpoint(path)
