"""Accuracy metrics and offline click evaluation on uniformly randomized serving logs."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

RANDOMIZED_LOG_HEADER = ("user_id", "served_item_id", "clicked")


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(truth)} responses")
    if len(pred) == 0:
        raise ValueError("cannot score an empty prediction set")
    return pred, truth


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    d = np.abs(p - t)
    scale = d.max()
    if scale == 0 or not np.isfinite(scale):
        return float(scale)
    # scaling first keeps tiny or huge errors from under/overflowing when squared
    return float(scale * np.sqrt(np.mean((d / scale) ** 2)))


def mae(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


@dataclass
class RandomizedLog:
    """Visits served with one uniformly random item each.

    ``covariates`` holds one row per user index; ``records`` refer to it.
    """

    users: np.ndarray
    served: np.ndarray
    clicked: np.ndarray
    n_items: int
    covariates: np.ndarray | None = None
    user_ids: tuple | None = None
    item_ids: tuple | None = None

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.served = np.asarray(self.served, dtype=np.int64)
        self.clicked = np.asarray(self.clicked, dtype=np.int64)
        if not (len(self.users) == len(self.served) == len(self.clicked)):
            raise ValueError("log columns must have equal length")
        if len(self.served) and (self.served.min() < 0 or self.served.max() >= self.n_items):
            raise ValueError("served item out of range")
        if not np.isin(self.clicked, (0, 1)).all():
            raise ValueError("clicked must be 0 or 1")

    def __len__(self):
        return len(self.users)

    def subset(self, index) -> "RandomizedLog":
        return RandomizedLog(self.users[index], self.served[index], self.clicked[index],
                             self.n_items, self.covariates, self.user_ids, self.item_ids)

    def write(self, path) -> None:
        uid = self.user_ids or tuple(str(i) for i in range(int(self.users.max(initial=-1)) + 1))
        iid = self.item_ids or tuple(str(i) for i in range(self.n_items))
        with open(path, "w") as fh:
            fh.write("\t".join(RANDOMIZED_LOG_HEADER) + "\n")
            for u, j, c in zip(self.users, self.served, self.clicked):
                fh.write(f"{uid[u]}\t{iid[j]}\t{c}\n")


def read_randomized_log(path, user_ids, item_ids, covariates=None) -> RandomizedLog:
    """Parse a log TSV against known user and item vocabularies."""
    uidx = {u: i for i, u in enumerate(user_ids)}
    iidx = {j: i for i, j in enumerate(item_ids)}
    users, served, clicked = [], [], []
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != RANDOMIZED_LOG_HEADER:
            raise ValueError(f"{path}: expected header {'/'.join(RANDOMIZED_LOG_HEADER)}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
            try:
                users.append(uidx[parts[0]])
                served.append(iidx[parts[1]])
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: unknown id {exc.args[0]!r}") from None
            if parts[2] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: clicked must be 0 or 1")
            clicked.append(int(parts[2]))
    return RandomizedLog(users, served, clicked, len(item_ids), covariates,
                         tuple(user_ids), tuple(item_ids))


def simulate_randomized_log(truth: np.ndarray, t_visits: int, seed: int = 42,
                            user_probs: np.ndarray | None = None,
                            covariates: np.ndarray | None = None) -> RandomizedLog:
    """Uniform random serving against a known ``(user, item)`` click-probability table."""
    truth = np.asarray(truth, dtype=float)
    if truth.ndim != 2:
        raise ValueError("truth must be a users x items table")
    if np.any((truth < 0) | (truth > 1)):
        raise ValueError("click probabilities must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n_users, n_items = truth.shape
    users = rng.choice(n_users, size=t_visits, p=user_probs)
    served = rng.integers(0, n_items, size=t_visits)
    clicked = (rng.random(t_visits) < truth[users, served]).astype(np.int64)
    return RandomizedLog(users, served, clicked, n_items, covariates)


def _select(policy, users, covariates):
    if hasattr(policy, "select"):
        return np.asarray(policy.select(users, covariates), dtype=np.int64)
    cov = [None] * len(users) if covariates is None else covariates[users]
    return np.array([policy(int(u), c) for u, c in zip(users, cov)], dtype=np.int64)


def click_estimate(log: RandomizedLog, policy) -> float:
    """``S(M) = J * #{clicked visits where the policy picks the served item}``.

    ``policy`` is either a callable ``(user, covariates) -> item`` or an
    object with a vectorized ``select(users, covariates)``; it is evaluated
    once per clicked record.
    """
    if len(log) == 0:
        raise ValueError("randomized log is empty")
    hit = log.clicked == 1
    if not hit.any():
        return 0.0
    chosen = _select(policy, log.users[hit], log.covariates)
    if chosen.min() < 0 or chosen.max() >= log.n_items:
        raise ValueError("policy selected an item outside the catalogue")
    return float(log.n_items * np.count_nonzero(chosen == log.served[hit]))


def click_lift(s1: float, s2: float) -> float:
    """Percentage improvement ``100 (s1/s2 - 1)``."""
    if s2 == 0:
        raise ZeroDivisionError("baseline click estimate is zero")
    return 100.0 * (s1 / s2 - 1.0)


def bootstrap_lift(log: RandomizedLog, policy, baseline_policy, n_boot: int = 20, seed: int = 42):
    """Point lift and 2.5/97.5 percentiles over record-level bootstrap resamples.

    Both policies are scored once per clicked record; resamples reuse those
    choices, so each replicate only recounts matches.
    """
    if n_boot < 1:
        raise ValueError("n_boot must be at least 1")
    if len(log) == 0:
        raise ValueError("randomized log is empty")
    hit = np.flatnonzero(log.clicked == 1)
    m1 = np.zeros(len(log), dtype=bool)
    m2 = np.zeros(len(log), dtype=bool)
    if len(hit):
        for mask, pol in ((m1, policy), (m2, baseline_policy)):
            chosen = _select(pol, log.users[hit], log.covariates)
            if chosen.min() < 0 or chosen.max() >= log.n_items:
                raise ValueError("policy selected an item outside the catalogue")
            mask[hit] = chosen == log.served[hit]
    point = click_lift(m1.sum(), m2.sum())
    lifts = []
    for b in range(n_boot):
        idx = np.random.default_rng([seed, b]).integers(0, len(log), size=len(log))
        lifts.append(click_lift(m1[idx].sum(), m2[idx].sum()))
    lo, hi = np.percentile(lifts, [2.5, 97.5])
    return float(point), float(lo), float(hi)


def policy_value(truth: np.ndarray, policy, t_visits: int, user_probs=None, covariates=None) -> float:
    """Expected clicks ``T * E_u[c_{u, M(u)}]`` of a policy under the simulator."""
    truth = np.asarray(truth, dtype=float)
    n_users = truth.shape[0]
    users = np.arange(n_users)
    w = np.full(n_users, 1.0 / n_users) if user_probs is None else np.asarray(user_probs)
    chosen = _select(policy, users, covariates)
    return float(t_visits * np.sum(w * truth[users, chosen]))


# ------------------------------------------------------------------ policies


def argmax_first(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest item index."""
    return np.argmax(np.asarray(scores), axis=-1)


class TablePolicy:
    """Pick the top item of a per-user score table."""

    def __init__(self, scores: np.ndarray):
        self.scores = np.asarray(scores, dtype=float)
        self._best = argmax_first(self.scores)

    def select(self, users, covariates=None):
        return self._best[np.asarray(users)]

    def __call__(self, user, covariates=None):
        return int(self._best[user])


class RandomPolicy:
    """A fixed, seeded uniform choice per user."""

    def __init__(self, n_users: int, n_items: int, seed: int = 42):
        self._pick = np.random.default_rng(seed).integers(0, n_items, size=n_users)

    def select(self, users, covariates=None):
        return self._pick[np.asarray(users)]

    def __call__(self, user, covariates=None):
        return int(self._pick[user])


class CovariatePolicy:
    """Pick ``argmax_j x' B_j`` from a coefficient block, ignoring user identity."""

    def __init__(self, beta: np.ndarray):
        self.beta = np.asarray(beta, dtype=float)

    def select(self, users, covariates):
        if covariates is None:
            raise ValueError("covariate policy needs covariates")
        return argmax_first(covariates[np.asarray(users)] @ self.beta.T)

    def __call__(self, user, covariates):
        return int(argmax_first(np.asarray(covariates) @ self.beta.T))


class ModelPolicy:
    """Greedy policy over a fitted model's ``predict_many(users, items, covariates)``."""

    def __init__(self, model, n_items: int, covariates: np.ndarray | None = None, chunk: int = 2048):
        self.model = model
        self.n_items = n_items
        self.covariates = covariates
        self.chunk = chunk
        self._cache: dict[int, int] = {}

    def _best(self, user: int) -> int:
        if user not in self._cache:
            items = np.arange(self.n_items)
            users = np.full(self.n_items, user)
            if self.covariates is None:
                scores = self.model.predict_many(users, items)
            else:
                x = np.repeat(self.covariates[user][None, :], self.n_items, axis=0)
                scores = self.model.predict_many(users, items, x)
            self._cache[user] = int(argmax_first(scores))
        return self._cache[user]

    def select(self, users, covariates=None):
        return np.array([self._best(int(u)) for u in users], dtype=np.int64)

    def __call__(self, user, covariates=None):
        return self._best(int(user))


# ------------------------------------------------------------------ reporting


@dataclass
class EvalReport:
    model: str
    n: int
    rmse: float | None = None
    mae: float | None = None
    s_estimate: float | None = None
    baseline_s: float | None = None
    lift_vs_baseline: float | None = None
    bootstrap_ci: tuple | None = None

    def __post_init__(self):
        for name in ("rmse", "mae", "s_estimate"):
            val = getattr(self, name)
            if val is not None and val < 0:
                raise ValueError(f"{name} must be nonnegative")

    def to_json(self) -> str:
        d = asdict(self)
        if d["bootstrap_ci"] is not None:
            d["bootstrap_ci"] = list(d["bootstrap_ci"])
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    TSV_FIELDS = ("model", "n", "rmse", "mae", "s_estimate", "lift_vs_baseline", "ci_low", "ci_high")

    def tsv_row(self) -> str:
        lo, hi = self.bootstrap_ci if self.bootstrap_ci is not None else (None, None)
        vals = [self.model, self.n, self.rmse, self.mae, self.s_estimate, self.lift_vs_baseline, lo, hi]
        return "\t".join("" if v is None else (f"{v:.6g}" if isinstance(v, float) else str(v))
                         for v in vals)

    def write(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_json())
        tmp.replace(path)
        path.with_suffix(".tsv").write_text("\t".join(self.TSV_FIELDS) + "\n" + self.tsv_row() + "\n")
