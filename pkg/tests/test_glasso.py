import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import glasso_admm, glasso_objective_dense, random_pd
from upgrec.glasso import (
    GlassoError, glasso_fit, glasso_objective, kkt_residual, partial_correlations, read_graph,
    top_pairs, write_graph,
)
from upgrec.linalg import is_positive_definite


def test_two_by_two_unpenalized():
    s = np.array([[2.0, 0.5], [0.5, 1.0]])
    sol = glasso_fit(s, 0.0)
    want = np.array([[1.0, -0.5], [-0.5, 2.0]]) / 1.75
    np.testing.assert_allclose(sol.omega_dense, want, atol=1e-12)
    np.testing.assert_allclose(sol.omega_dense, np.linalg.inv(s), atol=1e-12)


def test_singular_unpenalized_raises():
    s = np.ones((3, 3))
    with pytest.raises(GlassoError, match="unregularized MLE does not exist"):
        glasso_fit(s, 0.0)


def test_input_validation():
    with pytest.raises(GlassoError):
        glasso_fit(np.ones((2, 3)), 0.1)
    with pytest.raises(GlassoError):
        glasso_fit(np.array([[1.0, 0.2], [0.3, 1.0]]), 0.1)
    with pytest.raises(GlassoError):
        glasso_fit(np.eye(2), -0.1)
    with pytest.raises(GlassoError):
        glasso_fit(np.diag([1.0, -1.0]), 0.1)


def test_large_rho_gives_diagonal(rng):
    s = random_pd(6, rng)
    rho = np.max(np.abs(s - np.diag(np.diag(s)))) + 1e-3
    cand = np.diag(1.0 / (np.diag(s) + rho))
    w = np.linalg.inv(cand)
    # the candidate is stationary: off-diagonal |W_ij - S_ij| = |S_ij| <= rho
    assert kkt_residual(s, cand, w, rho) <= 1e-12
    sol = glasso_fit(s, rho)
    np.testing.assert_allclose(sol.omega_dense, cand, atol=1e-10)
    assert sol.offdiag_fraction() == 0.0


def test_matches_admm_oracle(rng):
    s = random_pd(5, rng)
    x, obj = glasso_admm(s, 0.1)
    sol = glasso_fit(s, 0.1)
    assert abs(sol.objective - obj) <= 1e-6
    np.testing.assert_allclose(sol.omega_dense, x, atol=1e-5)
    assert sol.kkt_residual <= 1e-5


def test_unpenalized_diagonal_matches_admm(rng):
    s = random_pd(6, rng)
    _, obj = glasso_admm(s, 0.15, penalize_diagonal=False)
    sol = glasso_fit(s, 0.15, penalize_diagonal=False)
    assert abs(sol.objective - obj) <= 1e-6
    np.testing.assert_allclose(np.diag(sol.sigma), np.diag(s), atol=1e-5)


def test_solution_invariants(rng):
    s = random_pd(10, rng)
    sol = glasso_fit(s, 0.05)
    om = sol.omega_dense
    assert is_positive_definite(om)
    assert np.max(np.abs(om @ sol.sigma - np.eye(10))) <= 1e-6
    assert np.array_equal(om, om.T)
    np.testing.assert_allclose(np.diag(sol.sigma), np.diag(s) + 0.05, atol=1e-5)
    assert sol.objective == pytest.approx(glasso_objective(s, om, 0.05), abs=1e-12)
    assert sol.objective == pytest.approx(glasso_objective_dense(s, om, 0.05), abs=1e-9)


def test_objective_nonincreasing_per_sweep(rng):
    s = random_pd(12, rng)
    sol = glasso_fit(s, 0.02, tol=1e-8, check_monotone=True)
    h = np.array(sol.history)
    assert np.all(np.diff(h) <= 1e-9 * np.abs(h[:-1]).max())


def test_warm_start_from_solution_is_immediate(rng):
    s = random_pd(8, rng)
    sol = glasso_fit(s, 0.05, tol=1e-7, kkt_tol=1e-8)
    again = glasso_fit(s, 0.05, warm=sol)
    assert again.sweeps <= 1
    np.testing.assert_allclose(again.omega_dense, sol.omega_dense, atol=1e-6)


def test_early_stop_flags_unconverged_but_stays_pd(rng):
    s = random_pd(15, rng, n_samples=10)
    sol = glasso_fit(s, 0.01, max_sweeps=1, tol=1e-12)
    assert not sol.converged
    assert is_positive_definite(sol.omega_dense)


def test_permutation_equivariance(rng):
    s = random_pd(7, rng)
    p = rng.permutation(7)
    a = glasso_fit(s, 0.08, tol=1e-7).omega_dense
    b = glasso_fit(s[np.ix_(p, p)], 0.08, tol=1e-7).omega_dense
    np.testing.assert_allclose(b, a[np.ix_(p, p)], atol=1e-6)


def test_sparsity_trend_in_rho(rng):
    s = random_pd(30, rng, n_samples=200)
    fr = [glasso_fit(s, r).offdiag_fraction() for r in (0.0008, 0.02, 0.08)]
    assert fr[-1] <= fr[0]


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 7), st.sampled_from([0.0, 0.01, 0.1, 0.5]), st.integers(0, 2**31 - 1))
def test_kkt_and_pd_on_random_inputs(n, rho, seed):
    s = random_pd(n, np.random.default_rng(seed))
    sol = glasso_fit(s, rho)
    assert sol.converged
    assert sol.kkt_residual <= 1e-5
    assert is_positive_definite(sol.omega_dense)


def test_partial_correlations():
    pc = partial_correlations(np.array([[2.0, -1.0], [-1.0, 2.0]]))
    assert pc[0, 1] == pytest.approx(0.5)
    assert pc[0, 0] == 0.0
    assert np.count_nonzero(partial_correlations(np.diag([1.0, 2.0, 3.0]))) == 0
    with pytest.raises(ValueError):
        partial_correlations(np.diag([1.0, 0.0]))


def test_top_pairs_examples():
    pc = np.zeros((3, 3))
    pc[0, 1] = pc[1, 0] = 0.5
    pc[0, 2] = pc[2, 0] = -0.7
    assert top_pairs(pc, 2) == [(0, 2, -0.7), (0, 1, 0.5)]
    zero = top_pairs(np.zeros((4, 4)), 5)
    assert [(a, b) for a, b, _ in zero] == [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3)]
    assert len(top_pairs(np.zeros((3, 3)), 10)) == 3


def test_top_pairs_full_sort(rng):
    a = rng.standard_normal((10, 10))
    pc = (a + a.T) / 2
    np.fill_diagonal(pc, 0)
    got = top_pairs(pc, 45)
    want = sorted(((i, j, pc[i, j]) for i in range(10) for j in range(i + 1, 10)),
                  key=lambda t: (-abs(t[2]), t[0], t[1]))
    assert got == [(i, j, float(v)) for i, j, v in want]


def test_graph_round_trip(tmp_path, rng):
    s = random_pd(6, rng)
    sol = glasso_fit(s, 0.05)
    ids = tuple(f"m{i}" for i in range(6))
    n = write_graph(sol.omega, tmp_path / "g.tsv", ids)
    rows = read_graph(tmp_path / "g.tsv")
    om = sol.omega_dense
    assert n == len(rows) == np.count_nonzero(np.triu(om, 1))
    mags = [abs(r[3]) for r in rows]
    assert mags == sorted(mags, reverse=True)
    for a, b, o, _ in rows:
        assert o == om[ids.index(a), ids.index(b)]


def test_diagonal_precision_exports_no_edges(tmp_path):
    assert write_graph(np.diag([1.0, 2.0]), tmp_path / "g.tsv") == 0
    assert read_graph(tmp_path / "g.tsv") == []
