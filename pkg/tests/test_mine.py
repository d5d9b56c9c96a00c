import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demon_dnc import mine


class ConstNet:
    """Stand-in statistics network returning fixed scores."""

    def __init__(self, joint, marg):
        self.joint, self.marg = np.asarray(joint, float), np.asarray(marg, float)
        self.calls = 0

    def scores(self, x, y):
        self.calls += 1
        return self.joint if self.calls % 2 else self.marg


def batch_of(n, dim=2, seed=0):
    rng = np.random.default_rng(seed)
    return mine.shuffle_marginals(rng.normal(size=(n, dim)), rng.normal(size=(n, dim)), rng)


# --- DV bound ------------------------------------------------------------------

def test_dv_constant_statistic_is_zero():
    assert mine.dv_bound_from_scores(np.zeros(5), np.zeros(5)) == 0.0
    for c in (-3.0, 0.7, 250.0):
        assert abs(mine.dv_bound_from_scores(np.full(4, c), np.full(4, c))) < 1e-12


def test_dv_hand_example():
    assert mine.dv_lower_bound(batch_of(3), ConstNet([1, 2, 3], [0, 0, 0])) == 2.0


def test_dv_needs_two_pairs():
    with pytest.raises(ValueError):
        mine.dv_bound_from_scores(np.zeros(1), np.zeros(1))


def test_dv_logmeanexp_no_overflow():
    v = mine.dv_bound_from_scores(np.array([700.0, 699.0]), np.array([700.0, -700.0]))
    assert math.isfinite(v)
    assert abs(v - (699.5 - (700 - math.log(2)))) < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 20), st.floats(-50, 50))
def test_dv_constant_any_batch(n, c):
    assert abs(mine.dv_bound_from_scores(np.full(n, c), np.full(n, c))) < 1e-12


# --- shuffling ---------------------------------------------------------------

def test_shuffle_forced_swap():
    x, y = np.array([[1.0], [2.0]]), np.array([[10.0], [20.0]])
    b = mine.shuffle_marginals(x, y, perm=np.array([1, 0]))
    np.testing.assert_array_equal(b.marg_x, x)
    np.testing.assert_array_equal(b.marg_y, [[20.0], [10.0]])


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2 ** 32 - 1))
def test_shuffle_multiset_and_determinism(n, seed):
    y = np.random.default_rng(seed).normal(size=(n, 3))
    b1 = mine.shuffle_marginals(y, y, np.random.default_rng(seed))
    b2 = mine.shuffle_marginals(y, y, np.random.default_rng(seed))
    assert np.array_equal(b1.marg_y, b2.marg_y)
    np.testing.assert_array_equal(np.sort(b1.marg_y, axis=0), np.sort(y, axis=0))


def test_shuffle_errors():
    with pytest.raises(ValueError):
        mine.shuffle_marginals(np.zeros((1, 2)), np.zeros((1, 2)), np.random.default_rng(0))
    with pytest.raises(ValueError):
        mine.shuffle_marginals(np.zeros((3, 2)), np.zeros((2, 2)), np.random.default_rng(0))


# --- estimator ---------------------------------------------------------------

def test_untrained_estimate_is_exactly_zero():
    rng = np.random.default_rng(0)
    est = mine.MineEstimator(3, 3, rng)
    x, y = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
    assert mine.estimate_mi(est, x, y, rng) == 0.0


def test_estimate_order_invariance():
    rng = np.random.default_rng(1)
    est = mine.MineEstimator(2, 2, rng)
    for _ in range(20):
        x = rng.normal(size=(64, 2))
        est.update(mine.shuffle_marginals(x, x + 0.1 * rng.normal(size=x.shape), rng))
    x, y = rng.normal(size=(30, 2)), rng.normal(size=(30, 2))
    perm = rng.permutation(30)
    q = rng.permutation(30)          # reorder pairs
    qinv = np.argsort(q)
    a = mine.estimate_mi(est, x, y, perm=perm)
    b = mine.estimate_mi(est, x[q], y[q], perm=qinv[perm[q]])
    assert abs(a - b) < 1e-12


def test_ema_positive_over_many_updates():
    rng = np.random.default_rng(2)
    est = mine.MineEstimator(2, 2, rng, hidden=(8, 8), lr=1e-2)
    for _ in range(10_000):
        x, y = rng.normal(size=(8, 2)), rng.normal(size=(8, 2)) * 5
        est.update(mine.shuffle_marginals(x, y, rng))
        assert est.ema_denominator > 0
    assert est.updates == 10_000


def test_first_batch_initializes_ema():
    rng = np.random.default_rng(3)
    est = mine.MineEstimator(1, 1, rng)
    assert est.log_ema is None
    est.update(batch_of(16, dim=1))
    assert est.log_ema == 0.0  # T == 0 on the first batch


def test_update_returns_negative_bound():
    rng = np.random.default_rng(4)
    est = mine.MineEstimator(1, 1, rng, lr=1e-2)
    for _ in range(50):
        x, y = mine.correlated_gaussians(0.9, 128, rng)
        b = mine.shuffle_marginals(x, y, rng)
        before = mine.dv_lower_bound(b, est.net)
        loss = est.update(b)
        assert abs(loss + before) < 1e-5


def test_independent_streams_bound_near_zero():
    rng = np.random.default_rng(5)
    est = mine.MineEstimator(1, 1, rng, lr=1e-3)
    for _ in range(1500):
        est.update(mine.shuffle_marginals(rng.normal(size=(256, 1)), rng.normal(size=(256, 1)), rng))
    ev = np.random.default_rng(6)
    v = mine.estimate_mi(est, ev.normal(size=(20000, 1)), ev.normal(size=(20000, 1)), ev)
    assert -0.05 <= v <= 0.1


def test_identical_snapshots_estimate_trends_upward():
    # y = x has unbounded MI; the seed-averaged bound must rise with the training budget
    budgets = [50, 100, 200, 400, 800]
    curves = []
    for seed in range(3):
        rng = np.random.default_rng(seed)
        est = mine.MineEstimator(1, 1, rng, lr=1e-3)
        xe = np.random.default_rng(100 + seed).normal(size=(5000, 1))
        done, marks = 0, []
        for b in budgets:
            for _ in range(b - done):
                x = rng.normal(size=(256, 1))
                est.update(mine.shuffle_marginals(x, x, rng))
            done = b
            marks.append(mine.estimate_mi(est, xe, xe, np.random.default_rng(9)))
        curves.append(marks)
    mean = np.mean(curves, axis=0)
    assert np.all(np.diff(mean) > 0), mean


# --- oracles -----------------------------------------------------------------

def test_gaussian_oracle():
    assert mine.gaussian_mi_oracle(0.0) == 0.0
    assert abs(mine.gaussian_mi_oracle(0.5) - 0.143841) < 1e-6
    assert abs(mine.gaussian_mi_oracle(0.9) - 0.830366) < 1e-6
    for bad in (1.0, -1.0, 2.0):
        with pytest.raises(ValueError):
            mine.gaussian_mi_oracle(bad)


def test_discrete_oracle_examples():
    p, q = np.array([0.2, 0.8]), np.array([0.1, 0.3, 0.6])
    assert abs(mine.discrete_mi_oracle(np.outer(p, q))) < 1e-15
    assert abs(mine.discrete_mi_oracle(np.diag([0.5, 0.5])) - math.log(2)) < 1e-15
    assert abs(mine.discrete_mi_oracle([[0.4, 0.1], [0.1, 0.4]]) - 0.192745) < 1e-6
    with pytest.raises(ValueError):
        mine.discrete_mi_oracle([[0.5, 0.6]])
    with pytest.raises(ValueError):
        mine.discrete_mi_oracle([[1.2, -0.2]])


def test_discrete_oracle_three_entropy_identity():
    rng = np.random.default_rng(10)
    for _ in range(100):
        shape = tuple(rng.integers(1, 7, size=2))
        t = rng.random(shape) * (rng.random(shape) > 0.3)
        if t.sum() == 0:
            t[0, 0] = 1.0
        t /= t.sum()
        assert abs(mine.discrete_mi_oracle(t) - mine.three_entropy_mi(t)) <= 1e-12


# --- standardizer ------------------------------------------------------------

def test_standardizer_matches_numpy_and_freezes():
    rng = np.random.default_rng(11)
    s = mine.Standardizer(3, warmup=100)
    rows = rng.normal(2.0, 3.0, size=(130, 3))
    for chunk in np.array_split(rows[:130], 7):
        s.update(chunk)
    assert s.frozen and s.count == 100
    np.testing.assert_allclose(s.mean, rows[:100].mean(0), atol=1e-12)
    np.testing.assert_allclose(s.std, np.sqrt(rows[:100].var(0, ddof=1) + 1e-8), atol=1e-12)
    mean = s.mean.copy()
    s.update(rng.normal(size=(50, 3)) * 100)
    np.testing.assert_array_equal(s.mean, mean)


def test_standardizer_state_round_trip():
    rng = np.random.default_rng(12)
    s = mine.Standardizer(4, warmup=10)
    s.update(rng.normal(size=(6, 4)))
    t = mine.Standardizer(4, warmup=10)
    t.load_state_arrays(s.state_arrays())
    x = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(s(x), t(x))
    assert (t.count, t.frozen) == (s.count, s.frozen)
