"""The UPG model: per-item regression plus a per-user latent affinity vector.

For user ``u`` and item ``j`` the linear predictor is
``eta_uj = x_u' beta_j + phi_uj`` with ``phi_u ~ MVN(0, Omega^{-1})`` and a
graphical-lasso penalty on ``Omega``.  Gaussian responses are fitted by EM
directly; binary responses go through penalized quasi-likelihood, which
replaces each click by a Gaussian working response and runs the same EM on
those.
"""
from __future__ import annotations

import logging
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import glasso as gl
from .data import BERNOULLI, GAUSSIAN, Dataset
from .linalg import (
    UserCounters,
    _inner_update,
    cg_solve,
    counters_from_arrays,
    reduce_in_chunks,
)
from .regression import P_CLIP, fit_ireg, sigmoid, weighted_item_regression

log = logging.getLogger(__name__)

CG_TOL = 1e-8
RHO_GRID = (0.0, 0.0008, 0.002, 0.003, 0.005)


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("UPGREC_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class UserPosterior:
    """Counters and posterior mean of one user's affinity vector.

    The covariance ``(K_u + Omega)^{-1}`` is never stored; ``active_var``
    caches its diagonal on the counter support for the noise-variance update.
    """

    counters: UserCounters
    mean: np.ndarray
    active_var: np.ndarray | None = None

    def copy(self) -> "UserPosterior":
        return UserPosterior(
            self.counters.copy(), self.mean.copy(),
            None if self.active_var is None else self.active_var.copy(),
        )


@dataclass
class WorkingResidualSet:
    z: np.ndarray
    v: np.ndarray
    eta: np.ndarray
    e: np.ndarray


@dataclass
class UpgModel:
    beta: np.ndarray
    glasso: gl.GlassoSolution
    family: str
    var_noise: float | None = None
    posteriors: dict = field(default_factory=dict)
    c_penalty: float = 1.0
    beta_default: np.ndarray | None = None
    cg_tol: float = CG_TOL
    converged: bool = True
    history: list = field(default_factory=list, repr=False)
    user_ids: tuple | None = None
    item_ids: tuple | None = None

    def __post_init__(self):
        if self.glasso.dim != self.beta.shape[0]:
            raise ValueError("precision dimension must equal the number of items")
        if self.family == GAUSSIAN and not (self.var_noise and self.var_noise > 0):
            raise ValueError("gaussian UPG needs a positive noise variance")
        if self.beta_default is None:
            self.beta_default = np.zeros(self.beta.shape[1])

    @property
    def n_items(self) -> int:
        return self.beta.shape[0]

    @property
    def covariate_dim(self) -> int:
        return self.beta.shape[1]

    @property
    def omega(self):
        return self.glasso.omega

    @property
    def sigma(self) -> np.ndarray:
        return self.glasso.sigma

    @property
    def rho(self) -> float:
        return self.glasso.rho

    def fixed_part(self, x: np.ndarray, items: np.ndarray) -> np.ndarray:
        """``x' beta_j`` per row, using ``beta_default`` for items beyond the fitted range."""
        items = np.asarray(items)
        x = np.atleast_2d(x)
        beta = np.tile(self.beta_default, (len(items), 1))
        seen = (items >= 0) & (items < self.n_items)
        beta[seen] = self.beta[items[seen]]
        return np.einsum("nd,nd->n", np.broadcast_to(x, beta.shape), beta)

    def random_part(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        users = np.asarray(users)
        items = np.asarray(items)
        out = np.zeros(len(users))
        if not self.posteriors or len(users) == 0:
            return out
        order = np.argsort(users, kind="stable")
        su = users[order]
        cuts = np.flatnonzero(np.diff(su)) + 1
        for grp in np.split(order, cuts):
            post = self.posteriors.get(int(users[grp[0]]))
            if post is None or len(post.counters) == 0:
                continue
            it = items[grp]
            ok = (it >= 0) & (it < self.n_items)
            out[grp[ok]] = post.mean[it[ok]]
        return out

    def linear_predictor(self, users, items, covariates) -> np.ndarray:
        return self.fixed_part(covariates, items) + self.random_part(users, items)

    def predict_many(self, users, items, covariates) -> np.ndarray:
        eta = self.linear_predictor(users, items, covariates)
        return eta if self.family == GAUSSIAN else sigmoid(eta)


# ------------------------------------------------------------------ residuals


def working_residuals(model: UpgModel, data: Dataset) -> WorkingResidualSet:
    """Linearized responses at the current estimates.

    Bernoulli: ``Z = eta + (y - p)/(p(1-p))`` with variance ``V = 1/(p(1-p))``
    and ``p`` clipped to ``[1e-6, 1 - 1e-6]``.  Gaussian: ``Z = y`` and
    ``V = sigma^2``.
    """
    x = data.covariates[data.users]
    fixed = model.fixed_part(x, data.items)
    eta = fixed + model.random_part(data.users, data.items)
    y = data.responses
    if model.family == GAUSSIAN:
        z = y.copy()
        v = np.full(len(y), float(model.var_noise))
    else:
        p = np.clip(sigmoid(eta), P_CLIP, 1 - P_CLIP)
        w = p * (1 - p)
        z = eta + (y - p) / w
        v = 1.0 / w
    return WorkingResidualSet(z=z, v=v, eta=eta, e=z - fixed)


def _refresh_e(res: WorkingResidualSet, model: UpgModel, data: Dataset) -> WorkingResidualSet:
    fixed = model.fixed_part(data.covariates[data.users], data.items)
    v = res.v if model.family == BERNOULLI else np.full(len(res.z), float(model.var_noise))
    return WorkingResidualSet(z=res.z, v=v, eta=res.eta, e=res.z - fixed)


# ------------------------------------------------------------------ E-step


def estep(model: UpgModel, residuals: WorkingResidualSet, data: Dataset,
          n_threads: int | None = None, cg_tol: float | None = None):
    """Posterior of every user's affinity vector and the expected covariance.

    Returns ``(posteriors, s_matrix)`` where ``posteriors`` maps each user
    with observations to a :class:`UserPosterior` (means from conjugate
    gradients against the sparse precision) and
    ``s_matrix = sum_u (Sigma_u + mu_u mu_u') / N_u`` uses the aggregated
    Woodbury form for ``sum_u Sigma_u``.  Users without observations add
    ``Sigma`` and a zero mean.
    """
    n_threads = default_threads() if n_threads is None else n_threads
    cg_tol = model.cg_tol if cg_tol is None else cg_tol
    n_users, n_items = data.n_users, model.n_items
    sigma, omega = model.sigma, model.omega
    counters = counters_from_arrays(
        data.users, data.items, 1.0 / residuals.v, residuals.e / residuals.v, n_users, n_items
    )
    posteriors: dict[int, UserPosterior] = {}

    def chunk(start, stop):
        acc = np.zeros((n_items, n_items))
        means = []
        for uidx in range(start, stop):
            c = counters[uidx]
            if c.nnz == 0:
                continue
            prev = model.posteriors.get(uidx)
            x0 = prev.mean if prev is not None and len(prev.mean) == n_items else None
            sol = cg_solve(omega, c, c.dense_u(n_items), tol=cg_tol, x0=x0)
            if not sol.converged:
                warnings.warn(f"CG did not converge for user {uidx}", RuntimeWarning, stacklevel=2)
            a, sigma_aa, m = _inner_update(sigma, c)
            acc[np.ix_(a, a)] += m
            var = np.diag(sigma)[c.items].copy()
            var[np.searchsorted(c.items, a)] -= np.einsum("ij,ij->i", sigma_aa @ m, sigma_aa)
            posteriors[uidx] = UserPosterior(c, sol.x, var)
            means.append(sol.x)
        outer = np.zeros((n_items, n_items))
        if means:
            mm = np.asarray(means)
            outer = mm.T @ mm
        return np.stack([acc, outer])

    parts = reduce_in_chunks(chunk, n_users, n_threads)
    if parts is None:
        parts = np.zeros((2, n_items, n_items))
    acc, outer = parts
    s = (n_users * sigma - sigma @ acc @ sigma + outer) / max(n_users, 1)
    s = (s + s.T) / 2
    posteriors = dict(sorted(posteriors.items()))
    return posteriors, s


def _offsets(posteriors: dict, data: Dataset, n_items: int):
    """Posterior mean and variance of ``phi_uj`` at every observation."""
    mean = np.zeros(data.n_obs)
    var = np.zeros(data.n_obs)
    order = np.argsort(data.users, kind="stable")
    su = data.users[order]
    bounds = np.searchsorted(su, np.arange(data.n_users + 1))
    for uidx, post in posteriors.items():
        sel = order[bounds[uidx]:bounds[uidx + 1]]
        if len(sel) == 0:
            continue
        it = data.items[sel]
        mean[sel] = post.mean[it]
        if post.active_var is not None:
            var[sel] = post.active_var[np.searchsorted(post.counters.items, it)]
    return mean, var


# ------------------------------------------------------------------ M-step


def mstep(s_matrix: np.ndarray, rho: float, residuals: WorkingResidualSet, data: Dataset,
          current: UpgModel, posteriors: dict | None = None, glasso_max_sweeps: int = 500,
          glasso_tol: float = gl.DEFAULT_TOL, beta_ridge: float = 0.0,
          penalize_diagonal: bool = True) -> UpgModel:
    """Update the precision, the regression coefficients and (Gaussian) the noise variance.

    The precision comes from the graphical lasso on ``s_matrix`` warm-started
    at the current pair; ``beta`` is refitted per item with the posterior
    means as a fixed offset (ridge logistic for clicks, weighted least squares
    for ratings).  ``posteriors`` defaults to ``current.posteriors``.
    """
    posteriors = current.posteriors if posteriors is None else posteriors
    sol = gl.glasso_fit(
        s_matrix, rho, tol=glasso_tol, warm=current.glasso, max_sweeps=glasso_max_sweeps,
        penalize_diagonal=penalize_diagonal,
    )
    off_mean, off_var = _offsets(posteriors, data, current.n_items)
    x = data.covariates[data.users]
    var_noise = current.var_noise
    if current.family == GAUSSIAN:
        target = data.responses - off_mean
        beta, pooled = weighted_item_regression(
            x, data.items, target, 1.0 / residuals.v, current.n_items, ridge=beta_ridge
        )
        resid = data.responses - np.einsum("nd,nd->n", x, beta[data.items]) - off_mean
        var_noise = float(np.mean(resid ** 2 + off_var))
        beta_default = pooled
    else:
        ireg = fit_ireg(data, current.c_penalty, offsets=off_mean, init=current.beta)
        beta = ireg.beta
        beta_default = np.zeros(current.covariate_dim)
    return UpgModel(
        beta=beta, glasso=sol, family=current.family, var_noise=var_noise,
        posteriors=posteriors, c_penalty=current.c_penalty, beta_default=beta_default,
        cg_tol=current.cg_tol, converged=current.converged, history=current.history,
        user_ids=current.user_ids, item_ids=current.item_ids,
    )


# ------------------------------------------------------------------ driver


def initial_model(data: Dataset, c_penalty: float = 1.0, cg_tol: float = CG_TOL) -> UpgModel:
    """Covariate-only start: IReg or per-item means for ``beta``, ``Omega = I``, ``phi = 0``."""
    n_items = data.n_items
    x = data.covariates[data.users]
    if data.family == GAUSSIAN:
        beta, pooled = weighted_item_regression(x, data.items, data.responses, np.ones(data.n_obs), n_items)
        resid = data.responses - np.einsum("nd,nd->n", x, beta[data.items])
        var_noise = float(np.var(resid)) or 1.0
        return UpgModel(beta, gl.identity_solution(n_items), GAUSSIAN, var_noise,
                        c_penalty=c_penalty, beta_default=pooled, cg_tol=cg_tol,
                        user_ids=data.user_ids, item_ids=data.item_ids)
    ireg = fit_ireg(data, c_penalty)
    return UpgModel(ireg.beta, gl.identity_solution(n_items), BERNOULLI, None,
                    c_penalty=c_penalty, cg_tol=cg_tol,
                    user_ids=data.user_ids, item_ids=data.item_ids)


def _max_change(a: UpgModel, b: UpgModel) -> float:
    db = float(np.max(np.abs(a.beta - b.beta))) if a.beta.size else 0.0
    do = float(np.max(np.abs(a.glasso.omega_dense - b.glasso.omega_dense)))
    return max(db, do)


def fit_upg(data: Dataset, rho: float = 0.0, c_penalty: float = 1.0, outer_tol: float = 1e-4,
            max_outer: int = 10, em_tol: float = 1e-4, max_em: int = 20,
            glasso_tol: float = gl.DEFAULT_TOL, early_sweeps: int | None = 10,
            n_threads: int | None = None, cg_tol: float = CG_TOL, beta_ridge: float = 0.0,
            penalize_diagonal: bool = True, init: UpgModel | None = None,
            callback=None) -> UpgModel:
    """Fit UPG to ``data`` (family taken from the dataset).

    Gaussian data runs EM directly for up to ``max_em`` iterations.  Binary
    data alternates working-residual refreshes (up to ``max_outer``) with
    EM passes of up to ``max_em`` iterations on the working responses.
    Intermediate graphical-lasso solves are capped at ``early_sweeps``
    sweeps; the last one is always run to full tolerance, followed by a
    final E-step so the stored posteriors match the returned parameters.

    ``callback(model, record)`` is called after every M-step with the
    iteration record also appended to ``model.history``.
    """
    if data.n_obs == 0:
        raise ValueError("cannot fit UPG to an empty dataset")
    model = init if init is not None else initial_model(data, c_penalty, cg_tol)
    history: list = []
    sweeps = early_sweeps if early_sweeps else 500
    converged = False
    s_last = None

    def em_pass(model, residuals, iters, tol, outer_it):
        nonlocal s_last
        for it in range(1, iters + 1):
            posts, s = estep(model, residuals, data, n_threads)
            new = mstep(s, rho, residuals, data, model, posts, glasso_max_sweeps=sweeps,
                        glasso_tol=glasso_tol, beta_ridge=beta_ridge,
                        penalize_diagonal=penalize_diagonal)
            s_last = s
            change = _max_change(model, new)
            record = {
                "outer": outer_it, "iter": it, "change": change,
                "glasso_objective": new.glasso.objective, "glasso_sweeps": new.glasso.sweeps,
                "offdiag_fraction": new.glasso.offdiag_fraction(),
                "var_noise": new.var_noise,
            }
            history.append(record)
            log.info("upg em %s", record)
            if callback is not None:
                callback(new, record)
            model = new
            residuals = _refresh_e(residuals, model, data)
            if change <= tol:
                return model, True
        return model, False

    if data.family == GAUSSIAN:
        residuals = working_residuals(model, data)
        model, converged = em_pass(model, residuals, max_em, em_tol, 0)
    else:
        for outer in range(1, max_outer + 1):
            before = model
            residuals = working_residuals(model, data)
            model, _ = em_pass(model, residuals, max_em, em_tol, outer)
            if _max_change(before, model) <= outer_tol:
                converged = True
                break

    if s_last is not None and not model.glasso.converged:
        sol = gl.glasso_fit(s_last, rho, tol=glasso_tol, warm=model.glasso,
                            penalize_diagonal=penalize_diagonal)
        gl.warn_unconverged(sol)
        model.glasso = sol
    residuals = working_residuals(model, data)
    posts, _ = estep(model, residuals, data, n_threads)
    model.posteriors = posts
    model.converged = converged
    model.history = history
    if not converged:
        warnings.warn("UPG fit stopped at its iteration cap before meeting the tolerance",
                      RuntimeWarning, stacklevel=2)
    return model


def predict(model: UpgModel, user, x, item: int) -> float:
    """Response prediction; users without a stored posterior fall back to ``x' beta_j``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (model.covariate_dim,):
        raise ValueError(f"expected a covariate vector of length {model.covariate_dim}, got shape {x.shape}")
    if not 0 <= item < model.n_items:
        raise IndexError(f"item {item} out of range")
    eta = float(x @ model.beta[item])
    post = model.posteriors.get(user) if user is not None else None
    if post is not None and len(post.counters):
        eta += float(post.mean[item])
    return eta if model.family == GAUSSIAN else float(sigmoid(np.array([eta]))[0])


def online_update(model: UpgModel, user: int, item: int, response: float, x=None) -> UserPosterior:
    """Fold one new observation into a user's posterior with ``Omega`` and ``beta`` fixed.

    Only the counters of touched items are stored; the new mean solves
    ``(K_new + Omega) mu = U_new`` by conjugate gradients warm-started from
    the old mean.  Calls for the same user must not run concurrently.
    """
    if not 0 <= item < model.n_items:
        raise IndexError(f"item {item} out of range")
    x = np.ones(model.covariate_dim) if x is None else np.asarray(x, dtype=float)
    fixed = float(x @ model.beta[item])
    post = model.posteriors.get(user)
    if post is None:
        post = UserPosterior(UserCounters(), np.zeros(model.n_items))
    else:
        post = post.copy()
    if model.family == GAUSSIAN:
        k = 1.0 / model.var_noise
        u = (response - fixed) * k
    else:
        eta = fixed + float(post.mean[item])
        p = min(max(float(sigmoid(np.array([eta]))[0]), P_CLIP), 1 - P_CLIP)
        w = p * (1 - p)
        z = eta + (response - p) / w
        k = w
        u = (z - fixed) * w
    post.counters.add(item, k, u)
    n = model.n_items
    sol = cg_solve(model.omega, post.counters, post.counters.dense_u(n), tol=model.cg_tol, x0=post.mean)
    post.mean = sol.x
    post.active_var = None
    model.posteriors[user] = post
    return post


def recompute_means(model: UpgModel) -> None:
    """Re-solve every stored posterior mean from its counters (used after loading)."""
    n = model.n_items
    for post in model.posteriors.values():
        if len(post.counters) == 0:
            post.mean = np.zeros(n)
            continue
        post.mean = cg_solve(model.omega, post.counters, post.counters.dense_u(n), tol=model.cg_tol).x


# ------------------------------------------------------------------ diagnostics


def gaussian_marginal_loglik(beta: np.ndarray, sigma: np.ndarray, var_noise: float,
                             data: Dataset) -> float:
    """Observed-data log-likelihood with the affinity vectors integrated out.

    Per user the observed responses are jointly normal with mean
    ``x_u' beta_j`` and covariance ``var_noise * I + Z Sigma Z'`` where ``Z``
    selects the observed item of each response.  Dense; meant for small J.
    """
    total = 0.0
    order = np.argsort(data.users, kind="stable")
    su = data.users[order]
    bounds = np.searchsorted(su, np.arange(data.n_users + 1))
    for uidx in range(data.n_users):
        sel = order[bounds[uidx]:bounds[uidx + 1]]
        if len(sel) == 0:
            continue
        it = data.items[sel]
        r = data.responses[sel] - beta[it] @ data.covariates[uidx]
        cov = var_noise * np.eye(len(sel)) + sigma[np.ix_(it, it)]
        cf = scipy.linalg.cho_factor(cov, lower=True)
        logdet = 2 * np.sum(np.log(np.diag(cf[0])))
        total += -0.5 * (len(sel) * np.log(2 * np.pi) + logdet + r @ scipy.linalg.cho_solve(cf, r))
    return float(total)


def select_rho(train: Dataset, grid=RHO_GRID, holdout_fraction: float = 0.1, metric=None,
               **fit_kwargs):
    """Grid search for the sparsity weight on the latest ``holdout_fraction`` of ``train``.

    Returns ``(best_rho, scores)``; the score is held-out RMSE for ratings
    and negative mean log-likelihood for clicks (lower is better).
    """
    from .data import temporal_split

    fit_part, tune = temporal_split(train, 1.0 - holdout_fraction)
    x = tune.covariates[tune.users]
    scores = {}
    for rho in grid:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            model = fit_upg(fit_part, rho=rho, **fit_kwargs)
        pred = model.predict_many(tune.users, tune.items, x)
        if metric is not None:
            scores[rho] = float(metric(pred, tune.responses))
        elif train.family == GAUSSIAN:
            scores[rho] = float(np.sqrt(np.mean((pred - tune.responses) ** 2)))
        else:
            p = np.clip(pred, P_CLIP, 1 - P_CLIP)
            y = tune.responses
            scores[rho] = float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))
    best = min(scores, key=lambda r: (scores[r], r))
    return best, scores
