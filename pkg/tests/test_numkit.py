import numpy as np
import pytest

from bisample.errors import DegenerateVector, InvalidArgument, NonFinite
from bisample.numkit import (
    finite_diff_check,
    l2_normalize,
    l2_normalize_rows,
    softmax_rows,
    stable_softmax,
)


def test_softmax_symmetry():
    assert np.allclose(stable_softmax(np.array([0.0, 0.0])), [0.5, 0.5], atol=1e-12)


def test_softmax_large_logits_no_overflow():
    out = stable_softmax(np.array([1000.0, 1000.0, 1000.0]))
    assert np.isfinite(out).all()
    assert np.allclose(out, 1.0 / 3.0, atol=1e-12)


def test_softmax_hand_computed():
    out = stable_softmax(np.log(np.array([1.0, 3.0])))
    assert np.allclose(out, [0.25, 0.75], atol=1e-12)


def test_softmax_sums_to_one_and_open_interval():
    rng = np.random.default_rng(0)
    for _ in range(50):
        logits = rng.normal(scale=5.0, size=rng.integers(1, 12))
        out = stable_softmax(logits)
        assert abs(out.sum() - 1.0) <= 1e-9
        assert (out > 0).all() and (out < 1).all() or logits.size == 1


def test_softmax_shift_invariance():
    rng = np.random.default_rng(1)
    for _ in range(50):
        logits = rng.normal(scale=3.0, size=7)
        c = rng.normal(scale=100.0)
        assert np.abs(stable_softmax(logits + c) - stable_softmax(logits)).max() <= 1e-12


def test_softmax_errors():
    with pytest.raises(InvalidArgument):
        stable_softmax(np.array([]))
    with pytest.raises(NonFinite):
        stable_softmax(np.array([1.0, np.nan]))
    with pytest.raises(NonFinite):
        softmax_rows(np.array([[1.0, np.inf]]))


def test_l2_normalize_basic():
    assert np.allclose(l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8], atol=1e-12)
    unit = np.array([0.6, 0.8])
    assert np.allclose(l2_normalize(unit), unit, atol=1e-12)
    with pytest.raises(DegenerateVector):
        l2_normalize(np.array([0.0, 0.0]), eps=1e-12)


def test_l2_normalize_rows_norms():
    rng = np.random.default_rng(2)
    m = rng.normal(size=(20, 5))
    out = l2_normalize_rows(m)
    assert np.abs(np.linalg.norm(out, axis=1) - 1.0).max() <= 1e-9
    with pytest.raises(DegenerateVector):
        l2_normalize_rows(np.vstack([m, np.zeros(5)]))


def test_finite_diff_quadratic():
    rep = finite_diff_check(lambda x: float(x[0] ** 2), np.array([3.0]), np.array([6.0]))
    assert rep.passed and rep.max_rel_err < 1e-6


def test_finite_diff_constant():
    rep = finite_diff_check(lambda x: 7.5, np.array([1.0, -2.0]), np.zeros(2))
    assert rep.passed


def test_finite_diff_softmax_cross_entropy():
    # independent check of the checker itself on a 5x4 softmax CE instance
    rng = np.random.default_rng(3)
    w = rng.normal(size=(4, 3))
    x0 = rng.normal(size=(5, 3))
    labels = rng.integers(0, 4, size=5)

    def loss(x):
        logits = x @ w.T
        logits = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        return -float(np.mean(np.log(p[np.arange(5), labels])))

    logits = x0 @ w.T
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    g = p.copy()
    g[np.arange(5), labels] -= 1.0
    analytic = (g / 5.0) @ w
    rep = finite_diff_check(loss, x0, analytic, h=1e-5, tol=1e-4)
    assert rep.passed


def test_finite_diff_detects_wrong_gradient():
    rep = finite_diff_check(lambda x: float(x[0] ** 2), np.array([3.0]), np.array([5.0]))
    assert not rep.passed


def test_finite_diff_errors():
    with pytest.raises(InvalidArgument):
        finite_diff_check(lambda x: 0.0, np.zeros(2), np.zeros(2), h=1e-2)
    with pytest.raises(NonFinite):
        finite_diff_check(
            lambda x: float("nan"), np.zeros(2), np.zeros(2), h=1e-5
        )


def _matmul_naive(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def test_matmul_matches_naive_triple_loop():
    rng = np.random.default_rng(4)
    for _ in range(20):
        a = rng.normal(size=(7, 5))
        b = rng.normal(size=(5, 3))
        assert np.abs(a @ b - _matmul_naive(a, b)).max() <= 1e-10
