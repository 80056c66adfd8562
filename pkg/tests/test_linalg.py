import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import random_pd
from upgrec.data import sparse_precision
from upgrec.linalg import (
    NotPositiveDefiniteError, UserCounters, cg_solve, counters_from_arrays,
    is_positive_definite, read_symmetric_coo, soft_threshold, sum_user_cov, to_sparse,
    woodbury_active_diag, woodbury_user_cov, write_symmetric_coo,
)


def _counters(rng, n, n_active, scale=1.0):
    items = np.sort(rng.choice(n, size=n_active, replace=False))
    return UserCounters(items, scale * rng.uniform(0.2, 2.0, n_active), rng.standard_normal(n_active))


def test_soft_threshold_examples():
    assert soft_threshold(3.0, 1.0) == 2.0
    assert soft_threshold(-0.5, 1.0) == 0.0
    assert soft_threshold(-3.0, 1.0) == -2.0
    with pytest.raises(ValueError):
        soft_threshold(1.0, -1.0)


@given(st.floats(-1e6, 1e6))
def test_soft_threshold_zero_rho_is_identity(x):
    assert soft_threshold(x, 0.0) == x


def test_cg_identity_system():
    b = np.arange(5.0)
    res = cg_solve(sp.identity(5, format="csr"), UserCounters(), b)
    np.testing.assert_allclose(res.x, b)
    assert res.converged


def test_cg_zero_rhs():
    res = cg_solve(sp.identity(4, format="csr"), UserCounters(), np.zeros(4))
    assert res.iterations == 0 and np.all(res.x == 0)


def test_cg_matches_dense_solve(rng):
    n = 50
    om = sparse_precision(n, 0.1, rng)
    c = _counters(rng, n, 8)
    b = rng.standard_normal(n)
    res = cg_solve(to_sparse(om), c, b, tol=1e-12)
    dense = np.linalg.solve(om + np.diag(c.dense_k(n)), b)
    np.testing.assert_allclose(res.x, dense, atol=1e-8)
    a = om + np.diag(c.dense_k(n))
    assert np.linalg.norm(a @ res.x - b) <= 1e-12 * np.linalg.norm(b) * 1.0001


def test_cg_storage_order_invariant(rng):
    n = 30
    om = sparse_precision(n, 0.2, rng)
    c = _counters(rng, n, 5)
    b = rng.standard_normal(n)
    coo = sp.coo_array(om)
    perm = rng.permutation(coo.nnz)
    shuffled = sp.csr_array((coo.data[perm], (coo.row[perm], coo.col[perm])), shape=om.shape)
    x1 = cg_solve(to_sparse(om), c, b).x
    x2 = cg_solve(shuffled, c, b).x
    np.testing.assert_allclose(x1, x2, atol=1e-8)


def test_cg_detects_indefinite():
    a = sp.csr_array(np.array([[1.0, 0.0], [0.0, -2.0]]))
    with pytest.raises(NotPositiveDefiniteError):
        cg_solve(a, UserCounters(), np.array([0.0, 1.0]))


def test_counters_validation():
    with pytest.raises(ValueError):
        UserCounters([0, 1], [1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        UserCounters([0], [-1.0], [0.0])
    with pytest.raises(ValueError):
        UserCounters([1, 1], [1.0, 1.0], [0.0, 0.0])
    c = UserCounters([3, 1], [1.0, 2.0], [5.0, 6.0])
    np.testing.assert_array_equal(c.items, [1, 3])
    np.testing.assert_array_equal(c.k, [2.0, 1.0])


def test_counters_add_keeps_sorted():
    c = UserCounters()
    c.add(4, 1.0, 2.0)
    c.add(1, 0.5, 1.0)
    c.add(4, 1.0, 3.0)
    np.testing.assert_array_equal(c.items, [1, 4])
    np.testing.assert_array_equal(c.k, [0.5, 2.0])
    np.testing.assert_array_equal(c.u, [1.0, 5.0])


def test_counters_from_arrays_groups():
    cs = counters_from_arrays(np.array([0, 0, 2, 0]), np.array([1, 1, 0, 3]),
                              np.ones(4), np.array([1.0, 2.0, 3.0, 4.0]), 3, 4)
    assert len(cs) == 3 and len(cs[1]) == 0
    np.testing.assert_array_equal(cs[0].items, [1, 3])
    np.testing.assert_array_equal(cs[0].k, [2.0, 1.0])
    np.testing.assert_array_equal(cs[0].u, [3.0, 4.0])


def test_woodbury_empty_counters_returns_sigma(rng):
    s = random_pd(6, rng)
    np.testing.assert_array_equal(woodbury_user_cov(s, UserCounters()), s)


def test_woodbury_matches_dense(rng):
    s = random_pd(20, rng)
    c = _counters(rng, 20, 3)
    want = np.linalg.inv(np.linalg.inv(s) + np.diag(c.dense_k(20)))
    np.testing.assert_allclose(woodbury_user_cov(s, c), want, atol=1e-10)
    np.testing.assert_allclose(woodbury_active_diag(s, c), np.diag(want)[c.items], atol=1e-10)


def test_woodbury_huge_precision_limit(rng):
    s = random_pd(8, rng)
    c = UserCounters([2], [1e12], [0.0])
    got = woodbury_user_cov(s, c)
    want = np.linalg.inv(np.linalg.inv(s) + np.diag(c.dense_k(8)))
    assert np.max(np.abs(got[2])) < 1e-9
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_sum_user_cov_matches_per_user(rng):
    s = random_pd(20, rng)
    cs = [_counters(rng, 20, rng.integers(0, 6)) for _ in range(10)]
    want = sum(woodbury_user_cov(s, c) for c in cs)
    np.testing.assert_allclose(sum_user_cov(s, cs), want, atol=1e-9)


def test_sum_user_cov_identical_counters_is_linear(rng):
    s = random_pd(10, rng)
    c = _counters(rng, 10, 4)
    np.testing.assert_allclose(sum_user_cov(s, [c] * 7), 7 * woodbury_user_cov(s, c), atol=1e-10)


def test_sum_user_cov_single_empty_user(rng):
    s = random_pd(5, rng)
    np.testing.assert_allclose(sum_user_cov(s, [UserCounters()]), s, atol=1e-14)


def test_sum_user_cov_thread_and_chunk_invariant(rng):
    s = random_pd(12, rng)
    cs = [_counters(rng, 12, rng.integers(1, 5)) for _ in range(40)]
    a = sum_user_cov(s, cs, n_threads=1, chunk_size=8)
    b = sum_user_cov(s, cs, n_threads=4, chunk_size=8)
    np.testing.assert_array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**31 - 1))
def test_woodbury_output_pd_and_singleton_sum(n, seed):
    rng = np.random.default_rng(seed)
    s = random_pd(n, rng)
    c = _counters(rng, n, int(rng.integers(0, n + 1)), scale=10 ** rng.uniform(-3, 3))
    cov = woodbury_user_cov(s, c)
    assert np.array_equal(cov, cov.T)
    assert is_positive_definite(cov)
    np.testing.assert_allclose(sum_user_cov(s, [c]), cov, atol=1e-10 * max(1, np.abs(s).max()))


def test_coo_round_trip(tmp_path, rng):
    om = sparse_precision(9, 0.3, rng)
    f = tmp_path / "m.txt"
    write_symmetric_coo(to_sparse(om), f)
    np.testing.assert_array_equal(read_symmetric_coo(f), om)
    for line in f.read_text().splitlines()[1:]:
        i, j, _ = line.split()
        assert int(i) <= int(j)
