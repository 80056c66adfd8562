"""Per-item regression and main-effects baselines.

* IReg: a ridge logistic regression per item on user covariates.
* Constant: the global training mean.
* MP: the two-way random-effects model ``y = mu + alpha_u + b_j + eps``
  fitted by EM.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .data import BERNOULLI, GAUSSIAN, Dataset

P_CLIP = 1e-6
C_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _log1pexp(x):
    return np.logaddexp(0.0, x)


def group_by_item(items: np.ndarray, n_items: int):
    """Stable order of observations by item, and the slice bounds of each item."""
    order = np.argsort(items, kind="stable")
    bounds = np.searchsorted(items[order], np.arange(n_items + 1))
    return order, bounds


@dataclass
class IregModel:
    beta: np.ndarray
    c_penalty: float
    family: str = BERNOULLI
    grad_norms: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_items(self) -> int:
        return self.beta.shape[0]

    @property
    def covariate_dim(self) -> int:
        return self.beta.shape[1]

    def linear_predictor(self, x, items) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        items = np.asarray(items)
        beta = np.zeros((len(items), self.covariate_dim))
        seen = items < self.n_items
        beta[seen] = self.beta[items[seen]]
        return np.einsum("nd,nd->n", np.broadcast_to(x, beta.shape), beta)

    def predict_many(self, users, items, covariates) -> np.ndarray:
        return sigmoid(self.linear_predictor(covariates, items))


def ireg_objective(beta, x, y, offset, c_penalty) -> float:
    eta = x @ beta + offset
    return 0.5 * beta @ beta + c_penalty * float(np.sum(_log1pexp(eta) - y * eta))


def _newton_item(x, y, offset, c_penalty, beta0, grad_tol, max_iter):
    beta = beta0.copy()
    d = x.shape[1]
    obj = ireg_objective(beta, x, y, offset, c_penalty)
    grad = np.full(d, np.inf)
    for _ in range(max_iter):
        eta = x @ beta + offset
        p = sigmoid(eta)
        grad = beta + c_penalty * (x.T @ (p - y))
        if np.max(np.abs(grad)) <= grad_tol:
            break
        w = np.clip(p, P_CLIP, 1 - P_CLIP)
        w = w * (1 - w)
        hess = np.eye(d) + c_penalty * (x.T * w) @ x
        step = scipy.linalg.solve(hess, grad, assume_a="pos")
        t = 1.0
        decrease = grad @ step
        while True:
            cand = beta - t * step
            cand_obj = ireg_objective(cand, x, y, offset, c_penalty)
            if cand_obj <= obj - 1e-4 * t * decrease or t < 1e-10:
                break
            t *= 0.5
        if cand_obj > obj:
            break
        beta, obj = cand, cand_obj
    eta = x @ beta + offset
    grad = beta + c_penalty * (x.T @ (sigmoid(eta) - y))
    return beta, float(np.max(np.abs(grad))) if len(grad) else 0.0


def fit_ireg(data: Dataset, c_penalty: float = 1.0, offsets: np.ndarray | None = None,
             grad_tol: float = 1e-6, max_iter: int = 100,
             init: np.ndarray | None = None) -> IregModel:
    """Ridge logistic regression per item.

    Minimizes ``0.5 * |beta_j|^2 - C * loglik_j(beta_j)`` for every item by
    damped Newton steps until the gradient sup-norm is at most ``grad_tol``.
    ``offsets`` (one per observation) enter the linear predictor unpenalized.
    Items without observations keep ``beta_j = 0``.
    """
    if data.family != BERNOULLI:
        raise ValueError("IReg needs a bernoulli dataset")
    if c_penalty <= 0:
        raise ValueError("c_penalty must be positive")
    n_items, d = data.n_items, data.covariate_dim
    offsets = np.zeros(data.n_obs) if offsets is None else np.asarray(offsets, dtype=float)
    beta = np.zeros((n_items, d)) if init is None else np.array(init, dtype=float)
    grads = np.zeros(n_items)
    order, bounds = group_by_item(data.items, n_items)
    xall = data.covariates[data.users]
    for j in range(n_items):
        sel = order[bounds[j]:bounds[j + 1]]
        if len(sel) == 0:
            beta[j] = 0.0
            continue
        beta[j], grads[j] = _newton_item(
            xall[sel], data.responses[sel], offsets[sel], c_penalty, beta[j], grad_tol, max_iter
        )
    return IregModel(beta=beta, c_penalty=float(c_penalty), family=BERNOULLI, grad_norms=grads)


def predict_ireg(model: IregModel, x, item: int) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != (model.covariate_dim,):
        raise ValueError(f"expected a covariate vector of length {model.covariate_dim}, got shape {x.shape}")
    if not 0 <= item < model.n_items:
        raise IndexError(f"item {item} out of range")
    return float(sigmoid(np.array([x @ model.beta[item]]))[0])


def ireg_loglik(model: IregModel, data: Dataset) -> float:
    eta = model.linear_predictor(data.covariates[data.users], data.items)
    return float(np.sum(data.responses * eta - _log1pexp(eta)))


def select_c_penalty(data: Dataset, grid=C_GRID, n_folds: int = 5, seed: int = 42) -> float:
    """Pick the ridge constant with the best cross-validated log-likelihood."""
    rng = np.random.default_rng(seed)
    fold = rng.integers(0, n_folds, size=data.n_obs)
    best, best_ll = None, -np.inf
    for c in grid:
        ll = 0.0
        for f in range(n_folds):
            train = data.subset(fold != f)
            test = data.subset(fold == f)
            ll += ireg_loglik(fit_ireg(train, c), test)
        if ll > best_ll:
            best, best_ll = c, ll
    return float(best)


def weighted_item_regression(x: np.ndarray, items: np.ndarray, target: np.ndarray,
                             weights: np.ndarray, n_items: int, ridge: float = 0.0):
    """Per-item weighted least squares, shrunk toward the pooled fit by ``ridge``.

    Solves ``min sum w (t - x'beta_j)^2 + ridge * |beta_j - beta_pool|^2``
    for every item; ``beta_pool`` is the weighted fit over all observations
    and is also returned, and used for items with no observations.
    """
    d = x.shape[1]
    xw = x * weights[:, None]
    pooled = np.linalg.lstsq(xw.T @ x, xw.T @ target, rcond=None)[0]
    beta = np.tile(pooled, (n_items, 1))
    if d == 1:
        num = np.bincount(items, weights=weights * target * x[:, 0], minlength=n_items)
        den = np.bincount(items, weights=weights * x[:, 0] ** 2, minlength=n_items)
        den = den + ridge
        num = num + ridge * pooled[0]
        np.divide(num, den, out=beta[:, 0], where=den > 0)
        return beta, pooled
    order, bounds = group_by_item(items, n_items)
    eye = np.eye(d)
    for j in range(n_items):
        sel = order[bounds[j]:bounds[j + 1]]
        if len(sel) == 0:
            continue
        xs, ws = x[sel], weights[sel]
        gram = (xs.T * ws) @ xs + ridge * eye
        rhs = (xs.T * ws) @ target[sel] + ridge * pooled
        beta[j] = np.linalg.lstsq(gram, rhs, rcond=None)[0]
    return beta, pooled


# --------------------------------------------------------------------- Constant


def fit_constant(data: Dataset) -> float:
    if data.n_obs == 0:
        raise ValueError("cannot fit a constant to an empty dataset")
    return float(np.mean(data.responses))


@dataclass
class ConstantModel:
    mu: float

    def predict_many(self, users, items, covariates=None) -> np.ndarray:
        return np.full(len(items), self.mu)


# --------------------------------------------------------------------- MP


@dataclass
class MpModel:
    mu: float
    alpha: np.ndarray
    b_item: np.ndarray
    var_alpha: float
    var_b: float
    var_noise: float
    converged: bool = True
    n_iter: int = 0
    alpha_var: np.ndarray | None = field(default=None, repr=False)
    b_var: np.ndarray | None = field(default=None, repr=False)
    history: list = field(default_factory=list, repr=False)

    def predict_many(self, users, items, covariates=None) -> np.ndarray:
        users = np.asarray(users)
        items = np.asarray(items)
        a = np.zeros(len(users))
        su = (users >= 0) & (users < len(self.alpha))
        a[su] = self.alpha[users[su]]
        b = np.zeros(len(items))
        si = (items >= 0) & (items < len(self.b_item))
        b[si] = self.b_item[items[si]]
        return self.mu + a + b


def predict_mp(model: MpModel, user: int, item: int) -> float:
    return float(model.predict_many(np.array([user]), np.array([item]))[0])


EXACT_ESTEP_MAX_DIM = 400


def _mp_exact_posterior(y, users, items, obs_u, obs_i, mu, va, vb, vn):
    """Joint Gaussian posterior of the observed effects (small problems only)."""
    nu, ni = len(obs_u), len(obs_i)
    umap = np.full(users.max() + 1, -1)
    umap[obs_u] = np.arange(nu)
    imap = np.full(items.max() + 1, -1)
    imap[obs_i] = np.arange(ni)
    z = np.zeros((len(y), nu + ni))
    z[np.arange(len(y)), umap[users]] = 1.0
    z[np.arange(len(y)), nu + imap[items]] = 1.0
    prec = z.T @ z / vn + np.diag(np.r_[np.full(nu, 1 / va), np.full(ni, 1 / vb)])
    cov = np.linalg.inv(prec)
    cov = (cov + cov.T) / 2
    mean = cov @ (z.T @ (y - mu)) / vn
    cross = cov[umap[users], nu + imap[items]]
    return mean[:nu], mean[nu:], np.diag(cov)[:nu], np.diag(cov)[nu:], cross


def fit_mp(data: Dataset, tol: float = 1e-4, max_iter: int = 200,
           exact_estep: bool | None = None, inner_tol: float = 1e-8,
           max_inner: int = 100) -> MpModel:
    """EM for the main-effects random-effects model.

    The E-step alternates the conditional posterior means of the user and
    item effects until they stop moving, which gives the exact joint
    posterior means.  Posterior variances are the per-effect conditional
    ones; on small problems (``exact_estep`` or at most
    ``EXACT_ESTEP_MAX_DIM`` effects) the exact joint covariance is used
    instead, which makes each iteration a true EM step.
    """
    if data.family != GAUSSIAN:
        raise ValueError("MP needs a gaussian dataset")
    if data.n_obs == 0:
        raise ValueError("cannot fit MP to an empty dataset")
    y, users, items = data.responses, data.users, data.items
    n_u, n_i = data.n_users, data.n_items
    cnt_u = np.bincount(users, minlength=n_u).astype(float)
    cnt_i = np.bincount(items, minlength=n_i).astype(float)
    obs_u = np.flatnonzero(cnt_u)
    obs_i = np.flatnonzero(cnt_i)
    if exact_estep is None:
        exact_estep = len(obs_u) + len(obs_i) <= EXACT_ESTEP_MAX_DIM

    mu = float(y.mean())
    tot = float(y.var()) or 1.0
    va, vb, vn = tot / 4, tot / 4, tot / 2
    a = np.zeros(n_u)
    b = np.zeros(n_i)
    a_var = np.zeros(n_u)
    b_var = np.zeros(n_i)
    history = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        cross = 0.0
        if exact_estep:
            am, bm, avv, bvv, cross = _mp_exact_posterior(y, users, items, obs_u, obs_i, mu, va, vb, vn)
            a[:] = 0.0
            b[:] = 0.0
            a[obs_u], b[obs_i] = am, bm
            a_var[:] = va
            b_var[:] = vb
            a_var[obs_u], b_var[obs_i] = avv, bvv
        else:
            prec_u = cnt_u / vn + 1 / va
            prec_i = cnt_i / vn + 1 / vb
            for _ in range(max_inner):
                a_new = np.bincount(users, weights=y - mu - b[items], minlength=n_u) / vn / prec_u
                b_new = np.bincount(items, weights=y - mu - a_new[users], minlength=n_i) / vn / prec_i
                delta = max(np.max(np.abs(a_new - a)), np.max(np.abs(b_new - b)))
                a, b = a_new, b_new
                if delta <= inner_tol:
                    break
            a_var = 1 / prec_u
            b_var = 1 / prec_i
        mu_new = float(np.mean(y - a[users] - b[items]))
        resid = y - mu_new - a[users] - b[items]
        vn_new = float(np.mean(resid ** 2 + a_var[users] + b_var[items] + 2 * cross))
        va_new = float(np.mean(a[obs_u] ** 2 + a_var[obs_u]))
        vb_new = float(np.mean(b[obs_i] ** 2 + b_var[obs_i]))
        change = max(abs(mu_new - mu), abs(va_new - va), abs(vb_new - vb), abs(vn_new - vn))
        mu, va, vb, vn = mu_new, va_new, vb_new, vn_new
        history.append((mu, va, vb, vn))
        if change <= tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"MP EM hit max_iter={max_iter} before converging", RuntimeWarning, stacklevel=2)
    # posterior means under the final variance components
    prec_u = cnt_u / vn + 1 / va
    prec_i = cnt_i / vn + 1 / vb
    if exact_estep:
        am, bm, avv, bvv, _ = _mp_exact_posterior(y, users, items, obs_u, obs_i, mu, va, vb, vn)
        a[:] = 0.0
        b[:] = 0.0
        a[obs_u], b[obs_i] = am, bm
    else:
        for _ in range(max_inner):
            a_new = np.bincount(users, weights=y - mu - b[items], minlength=n_u) / vn / prec_u
            b_new = np.bincount(items, weights=y - mu - a_new[users], minlength=n_i) / vn / prec_i
            delta = max(np.max(np.abs(a_new - a)), np.max(np.abs(b_new - b)))
            a, b = a_new, b_new
            if delta <= inner_tol:
                break
    return MpModel(mu, a, b, va, vb, vn, converged, it, 1 / prec_u, 1 / prec_i, history)


def mp_marginal_loglik(model_params, data: Dataset) -> float:
    """Observed-data log-likelihood of MP with effects integrated out (dense; small data)."""
    mu, va, vb, vn = model_params
    y = data.responses
    zu = (data.users[:, None] == data.users[None, :]).astype(float)
    zi = (data.items[:, None] == data.items[None, :]).astype(float)
    cov = vn * np.eye(len(y)) + va * zu + vb * zi
    r = y - mu
    cf = scipy.linalg.cho_factor(cov, lower=True)
    logdet = 2 * np.sum(np.log(np.diag(cf[0])))
    return float(-0.5 * (len(y) * np.log(2 * np.pi) + logdet + r @ scipy.linalg.cho_solve(cf, r)))
