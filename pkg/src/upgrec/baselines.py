"""Comparison recommenders: item-item similarity, PLSI and bilinear random effects."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .data import BERNOULLI, GAUSSIAN, Dataset

PEARSON = "pearson"
JACCARD = "jaccard"


# ------------------------------------------------------------------ IIS


@dataclass
class IisModel:
    weights: np.ndarray
    item_means: np.ndarray
    variant: str
    abs_denominator: bool = True
    top_k: int | None = None
    history: tuple | None = field(default=None, repr=False)

    @property
    def n_items(self) -> int:
        return len(self.item_means)

    def predict_many(self, users, items, covariates=None) -> np.ndarray:
        """Batch predictions using the training history stored at fit time."""
        if self.history is None:
            raise ValueError("model has no stored training history")
        return _iis_many(self, *self.history, users, items)


def _pair_means(data: Dataset):
    """Average response per (user, item) pair, as parallel arrays."""
    keys = data.users.astype(np.int64) * data.n_items + data.items
    uniq, inv = np.unique(keys, return_inverse=True)
    total = np.bincount(inv, weights=data.responses, minlength=len(uniq))
    count = np.bincount(inv, minlength=len(uniq))
    return (uniq // data.n_items).astype(np.int64), (uniq % data.n_items).astype(np.int64), total / count


def item_means(data: Dataset) -> np.ndarray:
    """Per-item training mean; items without observations get the global mean."""
    s = np.bincount(data.items, weights=data.responses, minlength=data.n_items)
    n = np.bincount(data.items, minlength=data.n_items)
    glob = float(data.responses.mean()) if data.n_obs else 0.0
    out = np.full(data.n_items, glob)
    np.divide(s, n, out=out, where=n > 0)
    return out


def pearson_weights(data: Dataset) -> np.ndarray:
    """Correlation of item-mean-centered ratings over co-raters; fewer than two co-raters gives 0."""
    means = item_means(data)
    u, j, r = _pair_means(data)
    shape = (data.n_users, data.n_items)
    c = sp.csr_array((r - means[j], (u, j)), shape=shape)
    b = sp.csr_array((np.ones(len(u)), (u, j)), shape=shape)
    c2 = sp.csr_array((c.data ** 2, c.indices, c.indptr), shape=shape)
    num = (c.T @ c).toarray()
    d = (c2.T @ b).toarray()
    co = (b.T @ b).toarray()
    den = np.sqrt(d * d.T)
    w = np.zeros_like(num)
    ok = (co >= 2) & (den > 0)
    w[ok] = num[ok] / den[ok]
    w = np.clip((w + w.T) / 2, -1.0, 1.0)
    return w


def jaccard_weights(data: Dataset) -> np.ndarray:
    """Share of users clicking both items among those clicking either."""
    pos = data.responses > 0
    keys = np.unique(data.users[pos].astype(np.int64) * data.n_items + data.items[pos])
    b = sp.csr_array((np.ones(len(keys)), (keys // data.n_items, keys % data.n_items)),
                     shape=(data.n_users, data.n_items))
    inter = (b.T @ b).toarray()
    n = np.diag(inter).copy()
    union = n[:, None] + n[None, :] - inter
    w = np.zeros_like(inter)
    np.divide(inter, union, out=w, where=union > 0)
    return w


def fit_iis(data: Dataset, variant: str | None = None, abs_denominator: bool = True,
            top_k: int | None = None) -> IisModel:
    """Item-item similarities: Pearson for ratings, Jaccard for clicks."""
    if variant is None:
        variant = PEARSON if data.family == GAUSSIAN else JACCARD
    if variant == PEARSON:
        if data.family != GAUSSIAN:
            raise ValueError("Pearson similarity needs gaussian responses")
        w = pearson_weights(data)
    elif variant == JACCARD:
        if data.family != BERNOULLI:
            raise ValueError("Jaccard similarity needs binary responses")
        w = jaccard_weights(data)
    else:
        raise ValueError(f"unknown IIS variant {variant!r}")
    return IisModel(w, item_means(data), variant, abs_denominator, top_k,
                    history=_pair_means(data) + (data.n_users,))


def _iis_score(model: IisModel, hist_items: np.ndarray, hist_dev: np.ndarray,
               targets: np.ndarray) -> np.ndarray:
    out = model.item_means[targets].copy()
    if len(hist_items) == 0:
        return out
    w = model.weights[np.ix_(targets, hist_items)].copy()
    w[targets[:, None] == hist_items[None, :]] = 0.0
    if model.top_k is not None and w.shape[1] > model.top_k:
        cut = np.argsort(-np.abs(w), axis=1, kind="stable")[:, model.top_k:]
        np.put_along_axis(w, cut, 0.0, axis=1)
    den = np.abs(w).sum(axis=1) if model.abs_denominator else w.sum(axis=1)
    num = w @ hist_dev
    ok = den != 0
    out[ok] += num[ok] / den[ok]
    return out


def predict_iis(model: IisModel, history, item: int) -> float:
    """Neighbourhood prediction for one item given ``(item, response)`` history pairs.

    Returns ``rbar_j + sum_k w_jk (r_k - rbar_k) / sum_k |w_jk|`` over history
    items ``k != j``; the plain ``sum_k w_jk`` denominator is used when the
    model was built with ``abs_denominator=False``.  An empty history or a
    zero weight sum gives ``rbar_j``.
    """
    if not 0 <= item < model.n_items:
        raise IndexError(f"item {item} out of range")
    if len(history) == 0:
        return float(model.item_means[item])
    hi = np.array([h[0] for h in history], dtype=np.int64)
    hr = np.array([h[1] for h in history], dtype=float)
    uniq, inv = np.unique(hi, return_inverse=True)
    avg = np.bincount(inv, weights=hr) / np.bincount(inv)
    dev = avg - model.item_means[uniq]
    return float(_iis_score(model, uniq, dev, np.array([item]))[0])


def predict_iis_many(model: IisModel, train: Dataset, users: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Batch IIS predictions, taking each user's history from ``train``."""
    return _iis_many(model, *_pair_means(train), train.n_users, users, items)


def _iis_many(model, u, j, r, n_users, users, items):
    users = np.asarray(users)
    items = np.asarray(items)
    out = np.empty(len(users))
    bounds = np.searchsorted(u, np.arange(n_users + 1))
    order = np.argsort(users, kind="stable")
    cuts = np.flatnonzero(np.diff(users[order])) + 1
    for grp in np.split(order, cuts):
        if len(grp) == 0:
            continue
        uidx = int(users[grp[0]])
        tgt = items[grp]
        ok = (tgt >= 0) & (tgt < model.n_items)
        res = np.full(len(grp), float(np.mean(model.item_means)))
        if 0 <= uidx < n_users:
            a, b = bounds[uidx], bounds[uidx + 1]
            hi, hr = j[a:b], r[a:b]
        else:
            hi, hr = np.zeros(0, dtype=np.int64), np.zeros(0)
        res[ok] = _iis_score(model, hi, hr - model.item_means[hi], tgt[ok])
        out[grp] = res
    return out


# ------------------------------------------------------------------ PLSI


@dataclass
class PlsiModel:
    k_latent: int
    p_item_given_class: np.ndarray
    p_class_given_user: np.ndarray
    loglik_history: list = field(default_factory=list)
    converged: bool = True

    def score(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        """``p(j|u) = sum_l p(j|l) p(l|u)``; unseen users use the average class mix."""
        users = np.asarray(users)
        items = np.asarray(items)
        n_items = self.p_item_given_class.shape[1]
        mix = np.tile(self.p_class_given_user.mean(axis=0), (len(users), 1))
        seen = (users >= 0) & (users < len(self.p_class_given_user))
        mix[seen] = self.p_class_given_user[users[seen]]
        out = np.zeros(len(users))
        ok = (items >= 0) & (items < n_items)
        out[ok] = np.einsum("nk,kn->n", mix[ok], self.p_item_given_class[:, items[ok]])
        return out

    def predict_many(self, users, items, covariates=None) -> np.ndarray:
        return self.score(users, items)


def _plsi_counts(data: Dataset):
    pos = data.responses > 0
    keys = data.users[pos].astype(np.int64) * data.n_items + data.items[pos]
    uniq, cnt = np.unique(keys, return_counts=True)
    return uniq // data.n_items, uniq % data.n_items, cnt.astype(float)


def fit_plsi(data: Dataset, k_latent: int, tol: float = 1e-6, max_iter: int = 500,
             seed: int = 42) -> PlsiModel:
    """Aspect model on (user, clicked item) co-occurrence counts fitted by EM."""
    if k_latent < 1:
        raise ValueError("k_latent must be at least 1")
    if data.family != BERNOULLI:
        raise ValueError("PLSI is fitted on binary click data")
    u, j, n = _plsi_counts(data)
    rng = np.random.default_rng(seed)
    p_jl = rng.uniform(size=(k_latent, data.n_items))
    p_jl /= p_jl.sum(axis=1, keepdims=True)
    p_lu = rng.uniform(size=(data.n_users, k_latent))
    p_lu /= p_lu.sum(axis=1, keepdims=True)
    history = []
    active_u = np.zeros(data.n_users, dtype=bool)
    active_u[u] = True
    converged = False
    for _ in range(max_iter):
        joint = p_jl[:, j].T * p_lu[u]
        tot = joint.sum(axis=1)
        history.append(float(n @ np.log(tot)))
        if len(history) > 1 and history[-1] - history[-2] <= tol:
            converged = True
            break
        resp = joint * (n / tot)[:, None]
        new_jl = np.zeros_like(p_jl)
        for l in range(k_latent):
            new_jl[l] = np.bincount(j, weights=resp[:, l], minlength=data.n_items)
        sums = new_jl.sum(axis=1, keepdims=True)
        p_jl = np.where(sums > 0, new_jl / np.where(sums > 0, sums, 1), 1.0 / data.n_items)
        new_lu = np.zeros_like(p_lu)
        for l in range(k_latent):
            new_lu[:, l] = np.bincount(u, weights=resp[:, l], minlength=data.n_users)
        s = new_lu.sum(axis=1, keepdims=True)
        p_lu = np.where(active_u[:, None], new_lu / np.where(s > 0, s, 1), p_lu)
    if not converged:
        warnings.warn("PLSI reached max_iter before the log-likelihood gain fell below tol",
                      RuntimeWarning, stacklevel=2)
    return PlsiModel(k_latent, p_jl, p_lu, history, converged)


# ------------------------------------------------------------------ BIRE


@dataclass
class BireModel:
    mu: float
    alpha: np.ndarray
    b_item: np.ndarray
    q: np.ndarray
    v: np.ndarray
    a_prior: float
    var_noise: float
    var_alpha: float
    var_b: float
    k_factors: int
    history: list = field(default_factory=list, repr=False)
    samples: list | None = field(default=None, repr=False)

    def predict_many(self, users, items, covariates=None) -> np.ndarray:
        users = np.asarray(users)
        items = np.asarray(items)
        out = np.full(len(users), self.mu)
        su = (users >= 0) & (users < len(self.alpha))
        si = (items >= 0) & (items < len(self.b_item))
        out[su] += self.alpha[users[su]]
        out[si] += self.b_item[items[si]]
        both = su & si
        out[both] += np.einsum("nk,nk->n", self.q[users[both]], self.v[items[both]])
        return out


def predict_bire(model: BireModel, user: int, item: int) -> float:
    """``mu + alpha_u + b_j + q_u' v_j`` with zeros for indices outside the fit."""
    return float(model.predict_many(np.array([user]), np.array([item]))[0])


def _grouped_gram(idx, factors, sort_order, bounds, n_groups, k, chunk=65536):
    """Per-group sum of outer products ``factors[i] factors[i]'`` over grouped observations."""
    out = np.zeros((n_groups, k, k))
    for start in range(0, len(sort_order), chunk):
        sel = sort_order[start:start + chunk]
        f = factors[idx[sel]]
        groups = np.searchsorted(bounds, start + np.arange(len(sel)), side="right") - 1
        np.add.at(out, groups, f[:, :, None] * f[:, None, :])
    return out


def _sample_gaussian(prec, lin, rng):
    """Draw from ``N(prec^{-1} lin, prec^{-1})`` for a batch of precisions."""
    chol = np.linalg.cholesky(prec)
    mean = np.linalg.solve(prec, lin[..., None])[..., 0]
    z = rng.standard_normal(lin.shape)
    noise = np.linalg.solve(np.swapaxes(chol, -1, -2), z[..., None])[..., 0]
    return mean + noise


def bire_factor_conditional(v_obs: np.ndarray, resid: np.ndarray, var_noise: float,
                            prior_prec: float = 1.0):
    """Mean and covariance of one factor vector given the other side's factors.

    ``Var = (prior_prec I + sum v v' / s2)^{-1}`` and ``E = Var sum r v / s2``.
    """
    k = v_obs.shape[1]
    prec = prior_prec * np.eye(k) + v_obs.T @ v_obs / var_noise
    cov = np.linalg.inv(prec)
    return cov @ (v_obs.T @ resid) / var_noise, (cov + cov.T) / 2


def fit_bire(data: Dataset, k_factors: int, n_samples: int = 50, n_em_iter: int = 10,
             seed: int = 42, keep_samples: bool = False) -> BireModel:
    """Bilinear random effects fitted by Monte Carlo EM.

    Each E-step runs ``n_samples`` Gibbs sweeps over the main effects and the
    two factor blocks, discarding the first fifth; the M-step sets
    ``mu, a, sigma^2, sigma_alpha^2, sigma_b^2`` from the kept sample moments.
    The returned effects are posterior sample means from the last E-step.
    """
    if data.family != GAUSSIAN:
        raise ValueError("BIRE needs gaussian responses")
    if k_factors < 1:
        raise ValueError("k_factors must be at least 1")
    if k_factors >= min(data.n_users, data.n_items):
        raise ValueError("k_factors must be smaller than both the user and item counts")
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    nu, nj, k = data.n_users, data.n_items, k_factors
    users, items, y = data.users, data.items, data.responses
    u_order = np.argsort(users, kind="stable")
    u_bounds = np.searchsorted(users[u_order], np.arange(nu + 1))
    i_order = np.argsort(items, kind="stable")
    i_bounds = np.searchsorted(items[i_order], np.arange(nj + 1))
    n_u = np.bincount(users, minlength=nu).astype(float)
    n_j = np.bincount(items, minlength=nj).astype(float)

    init = np.random.default_rng(seed)
    mu = float(y.mean())
    var_noise = float(np.var(y)) or 1.0
    var_alpha = var_b = var_noise / 4
    a = 1.0
    alpha, b = np.zeros(nu), np.zeros(nj)
    q = 0.1 * init.standard_normal((nu, k))
    v = 0.1 * init.standard_normal((nj, k))
    burn = n_samples // 5
    history = []
    samples = None

    for it in range(n_em_iter):
        rng = np.random.default_rng([seed, it])
        kept = 0
        acc = {key: 0.0 for key in ("alpha", "b", "q", "v", "a2", "b2", "v2", "sse", "res")}
        samples = [] if keep_samples else None
        for sweep in range(n_samples):
            inter = np.einsum("nk,nk->n", q[users], v[items])
            r = y - mu - b[items] - inter
            prec = n_u / var_noise + 1 / var_alpha
            alpha = (np.bincount(users, weights=r, minlength=nu) / var_noise) / prec
            alpha += rng.standard_normal(nu) / np.sqrt(prec)
            r = y - mu - alpha[users] - inter
            prec = n_j / var_noise + 1 / var_b
            b = (np.bincount(items, weights=r, minlength=nj) / var_noise) / prec
            b += rng.standard_normal(nj) / np.sqrt(prec)

            r = y - mu - alpha[users] - b[items]
            gram = _grouped_gram(items, v, u_order, u_bounds, nu, k)
            lin = np.zeros((nu, k))
            np.add.at(lin, users, r[:, None] * v[items])
            q = _sample_gaussian(np.eye(k) + gram / var_noise, lin / var_noise, rng)
            gram = _grouped_gram(users, q, i_order, i_bounds, nj, k)
            lin = np.zeros((nj, k))
            np.add.at(lin, items, r[:, None] * q[users])
            v = _sample_gaussian(np.eye(k) / a + gram / var_noise, lin / var_noise, rng)
            if sweep < burn:
                continue
            kept += 1
            fit = alpha[users] + b[items] + np.einsum("nk,nk->n", q[users], v[items])
            acc["alpha"] = acc["alpha"] + alpha
            acc["b"] = acc["b"] + b
            acc["q"] = acc["q"] + q
            acc["v"] = acc["v"] + v
            acc["a2"] += float(alpha @ alpha)
            acc["b2"] += float(b @ b)
            acc["v2"] += float(np.sum(v * v))
            acc["res"] += float(np.sum(y - fit))
            acc["sse"] += float(np.sum((y - mu - fit) ** 2))
            if keep_samples:
                samples.append((alpha.copy(), b.copy(), q.copy(), v.copy()))
        mean_res = acc["res"] / kept / len(y)
        # sse was accumulated around the old mu; shift it to the new one
        sse = acc["sse"] / kept - len(y) * (mean_res - mu) ** 2
        mu = mean_res
        var_noise = max(sse / len(y), 1e-12)
        var_alpha = max(acc["a2"] / kept / nu, 1e-12)
        var_b = max(acc["b2"] / kept / nj, 1e-12)
        a = max(acc["v2"] / kept / (nj * k), 1e-12)
        history.append({"iter": it + 1, "mu": mu, "var_noise": var_noise, "var_alpha": var_alpha,
                        "var_b": var_b, "a": a})

    return BireModel(
        mu=mu, alpha=acc["alpha"] / kept, b_item=acc["b"] / kept, q=acc["q"] / kept,
        v=acc["v"] / kept, a_prior=a, var_noise=var_noise, var_alpha=var_alpha, var_b=var_b,
        k_factors=k, history=history, samples=samples,
    )
