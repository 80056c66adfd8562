import numpy as np
import pytest

from oracles import logit_intercept_newton
from upgrec.data import BERNOULLI, GAUSSIAN, Dataset, synth_generate
from upgrec.regression import (
    ConstantModel, IregModel, fit_constant, fit_ireg, fit_mp, ireg_objective, mp_marginal_loglik,
    predict_ireg, predict_mp, select_c_penalty, sigmoid, weighted_item_regression,
)


def _clicks(users, items, y, cov=None, n_items=None):
    users = np.asarray(users)
    n_users = users.max() + 1
    n_items = n_items or np.max(items) + 1
    cov = np.ones((n_users, 1)) if cov is None else cov
    return Dataset(users, np.asarray(items), np.asarray(y, dtype=float), np.arange(len(users)), cov,
                   tuple(f"u{i}" for i in range(n_users)), tuple(f"i{j}" for j in range(n_items)),
                   family=BERNOULLI)


def _ratings(users, items, y, n_users=None, n_items=None):
    users = np.asarray(users)
    n_users = n_users or users.max() + 1
    n_items = n_items or np.max(items) + 1
    return Dataset(users, np.asarray(items), np.asarray(y, dtype=float), np.arange(len(users)),
                   np.ones((n_users, 1)), tuple(f"u{i}" for i in range(n_users)),
                   tuple(f"i{j}" for j in range(n_items)))


def test_ireg_intercept_matches_newton_oracle():
    y = np.array([1, 0, 1, 1, 0, 1, 0, 1])
    d = _clicks(np.arange(8), np.zeros(8, dtype=int), y)
    for c in (0.1, 1.0):
        # the ridge keeps the Hessian >= 1, so a gradient within 1e-6 puts beta within 1e-6
        m = fit_ireg(d, c)
        assert m.beta[0, 0] == pytest.approx(logit_intercept_newton(y, c), abs=1e-6)
        m = fit_ireg(d, c, grad_tol=1e-12)
        assert m.beta[0, 0] == pytest.approx(logit_intercept_newton(y, c), abs=1e-11)
    m = fit_ireg(d, 1e6)
    assert m.beta[0, 0] == pytest.approx(np.log(5 / 3), abs=1e-4)


def test_ireg_unobserved_item_is_zero():
    d = _clicks([0, 1], [0, 0], [1, 0], n_items=2)
    m = fit_ireg(d, 1.0)
    np.testing.assert_array_equal(m.beta[1], 0.0)
    assert predict_ireg(m, [1.0], 1) == 0.5


def test_ireg_separable_stays_finite():
    cov = np.column_stack([np.ones(6), [-2, -1, -0.5, 0.5, 1, 2]])
    d = _clicks(np.arange(6), np.zeros(6, dtype=int), [0, 0, 0, 1, 1, 1], cov=cov)
    m = fit_ireg(d, 10.0)
    assert np.all(np.isfinite(m.beta)) and m.beta[0, 1] > 0
    assert m.grad_norms.max() <= 1e-6


def test_ireg_minimizes_standard_objective():
    d, _ = synth_generate(60, 3, 2, 0.0, family=BERNOULLI, seed=1, obs_per_user=10)
    m = fit_ireg(d, 0.5)
    x = d.covariates[d.users]
    rng = np.random.default_rng(0)
    for j in range(3):
        sel = d.items == j
        best = ireg_objective(m.beta[j], x[sel], d.responses[sel], np.zeros(sel.sum()), 0.5)
        for _ in range(20):
            pert = m.beta[j] + 1e-3 * rng.standard_normal(2)
            assert ireg_objective(pert, x[sel], d.responses[sel], np.zeros(sel.sum()), 0.5) >= best


def test_ireg_per_item_separability():
    d, _ = synth_generate(50, 4, 2, 0.0, family=BERNOULLI, seed=2, obs_per_user=8)
    base = fit_ireg(d, 1.0).beta
    keep = d.items != 3
    m = fit_ireg(d.subset(np.flatnonzero(keep)), 1.0)
    np.testing.assert_allclose(m.beta[:3], base[:3], atol=1e-10)


def test_ireg_rejects_bad_inputs():
    d = _ratings([0], [0], [3.0])
    with pytest.raises(ValueError):
        fit_ireg(d, 1.0)
    c = _clicks([0], [0], [1])
    with pytest.raises(ValueError):
        fit_ireg(c, 0.0)


def test_predict_ireg_examples():
    m = IregModel(np.array([[0.0, 0.0], [np.log(3), 0.0], [0.0, 1.0]]), 1.0)
    assert predict_ireg(m, [1.0, 5.0], 0) == 0.5
    assert predict_ireg(m, [1.0, 0.0], 1) == pytest.approx(0.75)
    assert predict_ireg(m, [1.0, 2.0], 2) > predict_ireg(m, [1.0, 1.0], 2)
    with pytest.raises(ValueError):
        predict_ireg(m, [1.0], 0)


def test_sigmoid_stable():
    assert sigmoid(np.array([-1000.0]))[0] == 0.0
    assert sigmoid(np.array([1000.0]))[0] == 1.0


def test_select_c_penalty_returns_grid_value():
    d, _ = synth_generate(80, 4, 2, 0.0, family=BERNOULLI, seed=3, obs_per_user=10)
    assert select_c_penalty(d, grid=(0.01, 1.0)) in (0.01, 1.0)


def test_weighted_regression_intercept_is_weighted_mean():
    items = np.array([0, 0, 1, 1, 1])
    y = np.array([1.0, 3.0, 2.0, 4.0, 6.0])
    w = np.array([1.0, 3.0, 1.0, 1.0, 2.0])
    beta, pooled = weighted_item_regression(np.ones((5, 1)), items, y, w, 3)
    assert beta[0, 0] == pytest.approx(2.5)
    assert beta[1, 0] == pytest.approx(4.5)
    assert beta[2, 0] == pytest.approx(pooled[0])


def test_constant():
    assert fit_constant(_ratings([0, 1], [0, 0], [1.0, 5.0])) == 3.0
    assert fit_constant(_ratings([0], [0], [4.0])) == 4.0
    with pytest.raises(ValueError):
        fit_constant(_ratings(np.zeros(0, dtype=int), np.zeros(0, dtype=int), [], 1, 1))
    np.testing.assert_array_equal(ConstantModel(2.0).predict_many([0, 1], [0, 3]), [2.0, 2.0])


def test_mp_single_observation_shrinks():
    d = _ratings([0, 1, 1, 2], [0, 1, 0, 1], [5.0, 1.0, 2.0, 1.5])
    m = fit_mp(d)
    p = predict_mp(m, 0, 0)
    assert abs(p - m.mu) < abs(5.0 - m.mu)


def test_mp_unseen_indices():
    d = _ratings([0, 1, 1], [0, 1, 0], [4.0, 2.0, 3.0])
    m = fit_mp(d)
    assert predict_mp(m, 99, 99) == m.mu
    assert predict_mp(m, 0, 99) == pytest.approx(m.mu + m.alpha[0])
    assert m.var_alpha > 0 and m.var_b > 0 and m.var_noise > 0


def test_mp_null_user_effect_shrinks_variance():
    rng = np.random.default_rng(4)
    n_users, n_items, reps = 60, 5, 8
    users = np.repeat(np.arange(n_users), n_items * reps)
    items = np.tile(np.repeat(np.arange(n_items), reps), n_users)
    b = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])
    y = 3 + b[items] + 0.5 * rng.standard_normal(len(users))
    m = fit_mp(_ratings(users, items, y))
    assert m.var_alpha < 0.01
    half = 1.96 * np.sqrt(m.b_var)
    assert np.all(np.abs(m.mu + m.b_item - (3 + b)) <= half + 0.05)


@pytest.mark.filterwarnings("ignore:MP EM hit max_iter")
def test_mp_marginal_likelihood_monotone():
    for seed in range(5):
        d, _ = synth_generate(15, 8, 1, 0.3, seed=seed, obs_per_user=4)
        assert d.n_users * d.n_items <= 200
        m = fit_mp(d, tol=1e-8, max_iter=60)
        ll = [mp_marginal_loglik(h, d) for h in m.history]
        assert np.all(np.diff(ll) >= -1e-8), seed


def test_mp_prediction_matches_posterior_means():
    d, _ = synth_generate(30, 6, 1, 0.3, seed=8, obs_per_user=5)
    m = fit_mp(d)
    np.testing.assert_allclose(m.predict_many(d.users, d.items),
                               m.mu + m.alpha[d.users] + m.b_item[d.items])
    assert d.family == GAUSSIAN
