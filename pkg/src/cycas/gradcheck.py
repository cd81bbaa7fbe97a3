"""Finite-difference gradient suite over every differentiable op and loss.

Each registered check draws a random instance from the given generator and
returns the max relative error between analytic and central-difference
gradients. Scalar outputs are formed as ``u^T Y v`` with fixed random
``u, v`` so that every output entry carries a distinct weight.
"""
from __future__ import annotations

import time
import zlib
from typing import Callable

import numpy as np

from . import diffmath as dm
from .loss import LossConfig, cycle_matrix, cycas_forward, loss_symmetric
from .xbm import MemoryQueue, xbm_loss

DEFAULT_TOL = 1e-4
H = 1e-5


def _contract(y: dm.Node, rng: np.random.Generator) -> Callable[[dm.Node], dm.Node]:
    u = rng.standard_normal((1, y.shape[0]))
    v = rng.standard_normal((y.shape[1], 1))
    return lambda out: dm.matmul(dm.matmul(dm.constant(u), out), dm.constant(v))


def _unary(op: Callable[[dm.Node], dm.Node], make_x: Callable[[np.random.Generator], np.ndarray]):
    def check(rng):
        x = make_x(rng)
        reduce = _contract(op(dm.constant(x)), rng)
        return dm.finite_diff_check(lambda a: reduce(op(a)), x, H)
    return check


def _shape(rng, lo=2, hi=8):
    return int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))


def _normal(rng):
    return rng.standard_normal(_shape(rng))


def _away_from_zero(rng):
    # keeps kinks at 0 out of reach of the finite-difference step
    x = rng.standard_normal(_shape(rng))
    return np.where(np.abs(x) < 1e-3, 0.5, x)


def _unit_pair(rng):
    d = int(rng.integers(2, 17))
    n1, n2 = _shape(rng)
    a = rng.standard_normal((d, n1))
    b = rng.standard_normal((d, n2))
    return a, b


def _check_matmul(rng):
    n, k = _shape(rng)
    m = int(rng.integers(2, 9))
    a, b = rng.standard_normal((n, k)), rng.standard_normal((k, m))
    ra = _contract(dm.constant(a @ b), rng)
    e1 = dm.finite_diff_check(lambda x: ra(dm.matmul(x, dm.constant(b))), a, H)
    e2 = dm.finite_diff_check(lambda x: ra(dm.matmul(dm.constant(a), x)), b, H)
    return max(e1, e2)


def _check_add(rng):
    # second operand is a broadcast column, as used for encoder biases
    a = rng.standard_normal(_shape(rng))
    c = rng.standard_normal((a.shape[0], 1))
    r = _contract(dm.constant(a), rng)
    e1 = dm.finite_diff_check(lambda x: r(dm.add(x, dm.constant(c))), a, H)
    e2 = dm.finite_diff_check(lambda x: r(dm.add(dm.constant(a), x)), c, H)
    return max(e1, e2)


def _check_sub(rng):
    a = rng.standard_normal(_shape(rng))
    b = rng.standard_normal(a.shape)
    r = _contract(dm.constant(a), rng)
    e1 = dm.finite_diff_check(lambda x: r(dm.sub(x, dm.constant(b))), a, H)
    e2 = dm.finite_diff_check(lambda x: r(dm.sub(dm.constant(a), x)), b, H)
    return max(e1, e2)


def _check_hstack(rng):
    a = rng.standard_normal(_shape(rng))
    b = rng.standard_normal((a.shape[0], int(rng.integers(1, 6))))
    r = _contract(dm.constant(np.hstack([a, b])), rng)
    e1 = dm.finite_diff_check(lambda x: r(dm.hstack([x, dm.constant(b)])), a, H)
    e2 = dm.finite_diff_check(lambda x: r(dm.hstack([dm.constant(a), x])), b, H)
    return max(e1, e2)


def _check_masked_sum(rng):
    x = rng.standard_normal(_shape(rng))
    mask = rng.random(x.shape) < 0.5
    return dm.finite_diff_check(lambda a: dm.masked_sum(a, mask), x, H)


def _check_row_col_max(rng):
    n = int(rng.integers(2, 9))
    x = rng.standard_normal((n, n))
    u, v = rng.standard_normal((1, n)), rng.standard_normal((1, n))

    def f(a):
        r, c = dm.row_col_max_excluding_diag(a)
        return dm.add(dm.matmul(dm.constant(u), r), dm.matmul(dm.constant(v), c))
    return dm.finite_diff_check(f, x, H)


def _check_loss_symmetric(rng):
    a, b = _unit_pair(rng)
    cfg = LossConfig(mode="symmetric")
    fixed = dm.l2_normalize_columns(dm.constant(b))
    return dm.finite_diff_check(
        lambda x: loss_symmetric(cycle_matrix(dm.l2_normalize_columns(x), fixed, cfg)), a, H)


def _check_loss_asymmetric(rng):
    a, b = _unit_pair(rng)
    # a small margin keeps some hinges active and some inactive
    cfg = LossConfig(margin=float(rng.uniform(0.05, 0.95)))
    fixed = dm.l2_normalize_columns(dm.constant(b))

    def f(x):
        return cycas_forward(dm.l2_normalize_columns(x), fixed, cfg)[0]
    return dm.finite_diff_check(f, a, H)


def _check_xbm(rng):
    d = int(rng.integers(2, 17))
    n = int(rng.integers(2, 9))
    x = rng.standard_normal((d, n))
    vids = rng.integers(0, 3, size=n)
    mem = MemoryQueue(32, d)
    z = rng.standard_normal((d, 24))
    mem.enqueue_batch(z / np.linalg.norm(z, axis=0), rng.integers(0, 3, size=24))
    k = int(rng.integers(1, 8))
    return dm.finite_diff_check(
        lambda a: xbm_loss(dm.l2_normalize_columns(a), vids, mem, k), x, H)


def _check_encoder_losses(rng):
    """Both losses composed through a two-layer ReLU encoder, checked
    against the encoder parameters."""
    from .trainer import Encoder, encode

    d_obs = int(rng.integers(4, 17))
    d = int(rng.integers(2, 17))
    enc = Encoder([d_obs, 12, d], rng)
    for b in enc.biases:
        b.value = rng.normal(0.0, 0.3, b.value.shape)
    n1, n2 = _shape(rng)
    o1, o2 = rng.standard_normal((d_obs, n1)), rng.standard_normal((d_obs, n2))
    mem = MemoryQueue(16, d)
    z = rng.standard_normal((d, 16))
    mem.enqueue_batch(z / np.linalg.norm(z, axis=0), np.arange(16) % 4)
    vids = np.r_[np.zeros(n1, int), np.ones(n2, int)]
    cfg = LossConfig()

    def f():
        x1, x2 = encode(enc, o1), encode(enc, o2)
        asym = cycas_forward(x1, x2, cfg)[0]
        sym = loss_symmetric(cycle_matrix(*sorted((x1, x2), key=lambda t: t.shape[1]),
                                          LossConfig(mode="symmetric")))
        rep = xbm_loss(dm.hstack([x1, x2]), vids, mem, 5)
        return dm.add(dm.add(asym, sym), rep)
    return dm.finite_diff_check_params(f, enc.parameters(), H)


CHECKS: dict[str, Callable[[np.random.Generator], float]] = {
    "matmul": _check_matmul,
    "transpose": _unary(dm.transpose, _normal),
    "add": _check_add,
    "sub": _check_sub,
    "scale": _unary(lambda a: dm.scale(a, -1.7), _normal),
    "add_scalar": _unary(lambda a: dm.add_scalar(a, 0.3), _normal),
    "hstack": _check_hstack,
    "l2_normalize_columns": _unary(dm.l2_normalize_columns, _normal),
    "row_softmax": _unary(lambda a: dm.row_softmax(a, 2.5), _normal),
    "hinge": _unary(dm.hinge, _away_from_zero),
    "abs": _unary(dm.abs_, _away_from_zero),
    "softplus": _unary(dm.softplus, _normal),
    "sum_all": _unary(dm.sum_all, _normal),
    "mean_all": _unary(dm.mean_all, _normal),
    "masked_sum": _check_masked_sum,
    "diag": _unary(dm.diag, lambda rng: rng.standard_normal((int(rng.integers(2, 9)),) * 2)),
    "row_col_max_excluding_diag": _check_row_col_max,
    "loss_symmetric": _check_loss_symmetric,
    "loss_asymmetric": _check_loss_asymmetric,
    "xbm_loss": _check_xbm,
    "encoder_losses": _check_encoder_losses,
}


def run_suite(n_instances: int = 20, seed: int = 0, checks=None) -> dict[str, float]:
    """Max relative error per check over ``n_instances`` seeded draws."""
    checks = CHECKS if checks is None else checks
    report = {}
    for name, check in checks.items():
        worst = 0.0
        for i in range(n_instances):
            rng = np.random.default_rng([seed, i, zlib.crc32(name.encode())])
            worst = max(worst, check(rng))
        report[name] = worst
    return report


def format_report(report: dict[str, float], tol: float = DEFAULT_TOL) -> list[str]:
    width = max(len(k) for k in report) if report else 0
    return [f"{name:<{width}}  {err:.3e}  {'ok' if err < tol else 'FAIL'}"
            for name, err in report.items()]


if __name__ == "__main__":
    t = time.perf_counter()
    rep = run_suite()
    print("\n".join(format_report(rep)))
    print(f"{time.perf_counter() - t:.2f}s")
