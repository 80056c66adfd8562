import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from upgrec.evaluation import (
    CovariatePolicy, EvalReport, ModelPolicy, RandomizedLog, RandomPolicy, TablePolicy,
    bootstrap_lift, click_estimate, click_lift, mae, policy_value, read_randomized_log, rmse,
    simulate_randomized_log,
)


def test_rmse_mae_examples():
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([0, 0], [3, 4]) == pytest.approx(np.sqrt(12.5))
    assert mae([0], [-2]) == 2.0
    assert mae([1, 2], [1, 2]) == 0.0
    with pytest.raises(ValueError):
        rmse([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        mae([], [])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=30))
def test_rmse_dominates_mae(pairs):
    p, t = zip(*pairs)
    r, a = rmse(p, t), mae(p, t)
    assert a >= 0
    assert r >= a * (1 - 1e-12)


def _log(users, served, clicked, n_items, cov=None):
    return RandomizedLog(np.asarray(users), np.asarray(served), np.asarray(clicked), n_items, cov)


def test_click_estimate_examples():
    log = _log([0, 1, 2], [3, 4, 5], [0, 0, 0], 10)
    assert click_estimate(log, lambda u, x: 0) == 0.0
    served = np.array([1, 2, 3, 4, 5, 6, 7])
    clicked = np.array([1, 1, 1, 1, 1, 0, 0])
    log = _log(np.arange(7), served, clicked, 10)
    oracle = TablePolicy(np.eye(10)[served])
    assert click_estimate(log, oracle) == 50.0
    assert click_estimate(log, lambda u, x: int(served[u])) == 50.0


def test_click_estimate_errors():
    with pytest.raises(ValueError):
        click_estimate(_log([], [], [], 3), lambda u, x: 0)
    with pytest.raises(ValueError):
        click_estimate(_log([0], [1], [1], 3), lambda u, x: 3)


def test_policy_called_once_per_clicked_record():
    calls = []
    log = _log([0, 1, 0, 1], [0, 1, 1, 0], [1, 0, 1, 1], 2)

    def pol(u, x):
        calls.append(u)
        return 0
    click_estimate(log, pol)
    assert calls == [0, 0, 1]


def test_click_estimate_invariant_to_monotone_transform(rng):
    truth = rng.uniform(0, 0.3, (30, 8))
    log = simulate_randomized_log(truth, 5000, seed=1)
    scores = rng.standard_normal((30, 8))
    base = click_estimate(log, TablePolicy(scores))
    for f in (np.exp, lambda s: 3 * s + 7, lambda s: s ** 3):
        assert click_estimate(log, TablePolicy(f(scores))) == base


def test_tie_break_is_lowest_index():
    assert TablePolicy(np.array([[1.0, 2.0, 2.0]]))(0) == 1
    assert CovariatePolicy(np.array([[1.0], [1.0]])).select([0], np.ones((1, 1)))[0] == 0


def test_click_lift_examples():
    assert click_lift(3.0, 3.0) == 0.0
    assert click_lift(1.8 * 5, 5) == pytest.approx(80.0)
    assert click_lift(0.0, 4.0) == -100.0
    with pytest.raises(ZeroDivisionError):
        click_lift(1.0, 0.0)


def test_bootstrap_identical_policies():
    truth = np.full((10, 5), 0.3)
    log = simulate_randomized_log(truth, 2000, seed=2)
    pol = RandomPolicy(10, 5, seed=3)
    point, lo, hi = bootstrap_lift(log, pol, pol, n_boot=20, seed=4)
    assert point == 0.0 and lo <= 0.0 <= hi


def test_bootstrap_single_resample_is_degenerate():
    truth = np.full((10, 5), 0.4)
    log = simulate_randomized_log(truth, 2000, seed=5)
    a, b = RandomPolicy(10, 5, seed=1), RandomPolicy(10, 5, seed=2)
    _, lo, hi = bootstrap_lift(log, a, b, n_boot=1, seed=6)
    idx = np.random.default_rng([6, 0]).integers(0, len(log), size=len(log))
    sub = log.subset(idx)
    assert lo == hi == pytest.approx(click_lift(click_estimate(sub, a), click_estimate(sub, b)))
    with pytest.raises(ValueError):
        bootstrap_lift(log, a, b, n_boot=0)


def test_bootstrap_dominance_gives_positive_interval():
    n_users, n_items = 50, 10
    truth = np.full((n_users, n_items), 0.02)
    truth[:, 0] = 0.5
    log = simulate_randomized_log(truth, 20000, seed=7)
    good = TablePolicy(truth)
    bad = TablePolicy(-truth)
    point, lo, hi = bootstrap_lift(log, good, bad, n_boot=20, seed=8)
    assert lo > 0 and point > 0 and hi >= lo


def test_simulator_extremes_and_determinism():
    zero = simulate_randomized_log(np.zeros((4, 3)), 500, seed=1)
    assert zero.clicked.sum() == 0
    one = simulate_randomized_log(np.ones((4, 3)), 500, seed=1)
    assert one.clicked.all()
    a = simulate_randomized_log(np.full((4, 3), 0.5), 500, seed=9)
    b = simulate_randomized_log(np.full((4, 3), 0.5), 500, seed=9)
    np.testing.assert_array_equal(a.served, b.served)
    np.testing.assert_array_equal(a.clicked, b.clicked)
    with pytest.raises(ValueError):
        simulate_randomized_log(np.full((2, 2), 1.5), 10)


def test_simulator_serves_uniformly():
    t, j = 100_000, 20
    log = simulate_randomized_log(np.full((50, j), 0.1), t, seed=10)
    counts = np.bincount(log.served, minlength=j)
    assert np.all(np.abs(counts - t / j) <= 4 * np.sqrt(t / j))


def test_simulator_user_sampler():
    probs = np.array([0.0, 1.0, 0.0])
    log = simulate_randomized_log(np.full((3, 2), 0.5), 200, seed=11, user_probs=probs)
    assert np.all(log.users == 1)


def test_mean_estimate_close_to_policy_value(rng):
    n_users, n_items, t, reps = 40, 20, 100_000, 200
    truth = rng.uniform(0, 0.2, (n_users, n_items))
    pol = TablePolicy(truth)
    v = policy_value(truth, pol, t)
    est = [click_estimate(simulate_randomized_log(truth, t, seed=s), pol) for s in range(reps)]
    assert abs(np.mean(est) / v - 1) <= 0.02


def test_log_round_trip(tmp_path):
    log = _log([0, 2, 1], [1, 0, 1], [1, 0, 1], 2)
    log.user_ids = ("a", "b", "c")
    log.item_ids = ("x", "y")
    f = tmp_path / "log.tsv"
    log.write(f)
    assert f.read_text().splitlines()[0] == "user_id\tserved_item_id\tclicked"
    back = read_randomized_log(f, ("a", "b", "c"), ("x", "y"))
    np.testing.assert_array_equal(back.users, log.users)
    np.testing.assert_array_equal(back.served, log.served)
    np.testing.assert_array_equal(back.clicked, log.clicked)
    f.write_text("user_id\tserved_item_id\tclicked\nq\tx\t1\n")
    with pytest.raises(ValueError, match="unknown id"):
        read_randomized_log(f, ("a",), ("x",))


def test_log_validation():
    with pytest.raises(ValueError):
        _log([0], [2], [1], 2)
    with pytest.raises(ValueError):
        _log([0], [0], [2], 2)


def test_model_policy_uses_argmax():
    class Fixed:
        def predict_many(self, users, items, covariates=None):
            return np.array([0.1, 0.9, 0.9, 0.2])
    assert ModelPolicy(Fixed(), 4)(0) == 1


def test_eval_report(tmp_path):
    r = EvalReport("upg", 10, rmse=0.5, mae=0.4, s_estimate=12.0, lift_vs_baseline=5.0,
                   bootstrap_ci=(1.0, 9.0))
    f = tmp_path / "r.json"
    r.write(f)
    d = json.loads(f.read_text())
    assert d["rmse"] == 0.5 and d["bootstrap_ci"] == [1.0, 9.0]
    lines = f.with_suffix(".tsv").read_text().splitlines()
    assert lines[0].split("\t") == list(EvalReport.TSV_FIELDS)
    assert lines[1].split("\t")[:3] == ["upg", "10", "0.5"]
    with pytest.raises(ValueError):
        EvalReport("x", 1, rmse=-1.0)
