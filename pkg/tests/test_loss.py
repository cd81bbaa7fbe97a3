import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cycas import diffmath as dm
from cycas import loss as L


def unit_cols(rng, d, n):
    x = rng.standard_normal((d, n))
    return x / np.linalg.norm(x, axis=0)


def test_affinity_examples():
    e = np.eye(3)
    one = dm.constant([[1.0], [0.0]])
    assert L.affinity(one, one).item() == 1.0
    assert L.affinity(one, dm.constant([[0.0], [1.0]])).item() == 0.0
    assert np.array_equal(L.affinity(dm.constant(e), dm.constant(e)).value, e)
    with pytest.raises(dm.DimensionError):
        L.affinity(dm.constant(np.ones((2, 1))), dm.constant(np.ones((3, 1))))


def test_adaptive_temperature_values():
    assert L.adaptive_temperature(1, 1.0, 0.5) == pytest.approx(math.log(2), abs=1e-12)
    assert L.adaptive_temperature(3, 0.5, 0.5) == pytest.approx(2 * math.log(4), abs=1e-12)
    assert L.adaptive_temperature(3, 0.5, 0.5) == pytest.approx(2.7726, abs=1e-4)


@pytest.mark.parametrize("args", [(0, 0.5, 0.5), (3, 0.0, 0.5), (3, 0.5, 1.0), (3, 0.5, 0.0)])
def test_adaptive_temperature_rejects(args):
    with pytest.raises(dm.ParameterError):
        L.adaptive_temperature(*args)


@given(st.integers(2, 500), st.floats(0.05, 3.0), st.floats(0.01, 0.99))
@settings(max_examples=100, deadline=None)
def test_temperature_keeps_gap_constant(k, eps, delta):
    # one positive at similarity eps above k-1 negatives
    t = L.adaptive_temperature(k, eps, delta)
    row = np.zeros((1, k))
    row[0, 0] = eps
    p = dm.row_softmax(dm.constant(row), t).value[0]
    assert p[0] - p[1] == pytest.approx(delta, abs=1e-9)


def test_assign_examples():
    a = L.assign(dm.constant(np.eye(2)), 40.0).value
    assert np.allclose(a, np.eye(2), atol=1e-8)
    a = L.assign(dm.constant([[1, 0.5], [0.5, 1]]), 2.0).value
    assert np.allclose(a, [[0.7311, 0.2689], [0.2689, 0.7311]], atol=1e-4)


def test_cycle_examples():
    eye = dm.constant(np.eye(3))
    assert np.array_equal(L.cycle(eye, eye).value, np.eye(3))
    swap = dm.constant([[0.0, 1.0], [1.0, 0.0]])
    assert np.array_equal(L.cycle(swap, swap).value, np.eye(2))
    rng = np.random.default_rng(0)
    a = rng.random((4, 6))
    b = rng.random((6, 4))
    a /= a.sum(1, keepdims=True)
    b /= b.sum(1, keepdims=True)
    prod = L.cycle(dm.constant(a), dm.constant(b)).value
    assert np.allclose(prod.sum(axis=1), 1.0, atol=1e-9)
    with pytest.raises(dm.DimensionError):
        L.cycle(dm.constant(a), dm.constant(a))


def test_loss_symmetric_examples():
    assert L.loss_symmetric(dm.constant(np.eye(3))).item() == 0.0
    assert L.loss_symmetric(dm.constant([[0.8, 0.2], [0.2, 0.8]])).item() == pytest.approx(0.2)
    assert L.loss_symmetric(dm.constant(np.full((2, 2), 0.5))).item() == pytest.approx(0.5)


def test_loss_asymmetric_examples():
    assert L.loss_asymmetric(dm.constant(np.eye(3)), 0.5).item() == 0.0
    val = L.loss_asymmetric(dm.constant([[0.6, 0.5], [0.1, 0.9]]), 0.5).item()
    assert val == pytest.approx(0.25, abs=1e-12)
    dominant = np.array([[0.9, 0.1, 0.3], [0.2, 0.95, 0.0], [0.1, 0.3, 0.85]])
    assert L.loss_asymmetric(dm.constant(dominant), 0.5).item() == 0.0
    with pytest.raises(dm.DegenerateInputError):
        L.loss_asymmetric(dm.constant([[1.0]]), 0.5)


def test_enforce_swap():
    a, b = np.zeros((2, 5)), np.zeros((2, 3))
    x1, x2, swapped = L.enforce_swap(a, b)
    assert swapped and (x1.shape[1], x2.shape[1]) == (3, 5)
    x1, x2, swapped = L.enforce_swap(b, a)
    assert not swapped and x1 is b
    x1, x2, swapped = L.enforce_swap(a, a.copy())
    assert not swapped and x1 is a


def test_backward_uses_its_own_temperature():
    rng = np.random.default_rng(3)
    x1, x2 = dm.constant(unit_cols(rng, 4, 3)), dm.constant(unit_cols(rng, 4, 7))
    cfg = L.LossConfig()
    got = L.cycle_matrix(x1, x2, cfg).value
    s = x1.value.T @ x2.value

    def sm(z, t):
        e = np.exp(t * (z - z.max(1, keepdims=True)))
        return e / e.sum(1, keepdims=True)
    want = sm(s, L.adaptive_temperature(7)) @ sm(s.T, L.adaptive_temperature(3))
    assert np.allclose(got, want, atol=1e-14)


def test_perfect_embeddings_zero_loss():
    x = dm.constant(np.eye(4))
    loss, a_cycle, _ = L.cycas_forward(x, x, L.LossConfig(margin=0.5, epsilon=0.5))
    assert loss.item() == pytest.approx(0.0, abs=1e-6)


def test_random_embeddings_positive_loss():
    rng = np.random.default_rng(4)
    loss, _, _ = L.cycas_forward(dm.constant(unit_cols(rng, 6, 8)), dm.constant(unit_cols(rng, 6, 8)))
    assert loss.item() > 0


@given(st.integers(0, 10_000), st.integers(2, 7), st.integers(2, 9))
@settings(max_examples=40, deadline=None)
def test_loss_invariant_to_frame2_column_order(seed, n1, n2):
    rng = np.random.default_rng(seed)
    x1 = unit_cols(rng, 5, n1)
    x2 = unit_cols(rng, 5, max(n1, n2))
    perm = rng.permutation(x2.shape[1])
    base = L.cycas_forward(dm.constant(x1), dm.constant(x2))[0].item()
    permuted = L.cycas_forward(dm.constant(x1), dm.constant(x2[:, perm]))[0].item()
    assert permuted == pytest.approx(base, abs=1e-9)


def test_swap_makes_order_irrelevant():
    rng = np.random.default_rng(5)
    a, b = unit_cols(rng, 5, 6), unit_cols(rng, 5, 3)
    l1, _, s1 = L.cycas_forward(dm.constant(a), dm.constant(b))
    l2, _, s2 = L.cycas_forward(dm.constant(b), dm.constant(a))
    assert s1 and not s2
    assert l1.item() == l2.item()


def test_single_instance_side_is_skipped():
    before = L.degenerate_skips
    rng = np.random.default_rng(6)
    loss, _, _ = L.cycas_forward(dm.constant(unit_cols(rng, 4, 1)), dm.constant(unit_cols(rng, 4, 5)))
    assert loss.item() == 0.0
    assert L.degenerate_skips == before + 1


def test_config_validation():
    with pytest.raises(dm.ParameterError):
        L.LossConfig(margin=1.5)
    with pytest.raises(dm.ParameterError):
        L.LossConfig(mode="other")
