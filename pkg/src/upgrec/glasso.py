"""Sparse inverse covariance estimation.

Minimizes ``-log det(Omega) + tr(S Omega) + rho * ||Omega||_1`` over positive
definite ``Omega`` by primal block-coordinate descent.  Each column update
solves a lasso in the off-diagonal precision entries and then refreshes the
precision and the covariance ``W = Omega^{-1}`` together through rank-one
Schur-complement identities, so neither matrix is ever inverted from scratch
and every iterate stays positive definite.

With the column partition ``Omega = [[O11, o12], [o12', o22]]`` and
``w22 = s22 + rho`` fixed by diagonal stationarity, the off-diagonal block
minimizes ``0.5 * w22 * a' O11^{-1} a + s12' a + rho * ||a||_1`` where
``O11^{-1} = W11 - w12 w12' / W22`` is read off the current covariance.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .linalg import NotPositiveDefiniteError, logdet_pd, to_sparse

DEFAULT_TOL = 1e-4
DEFAULT_KKT_TOL = 1e-5


class GlassoError(ValueError):
    pass


@dataclass(frozen=True)
class GlassoSolution:
    omega: sp.csr_array
    sigma: np.ndarray
    rho: float
    kkt_residual: float
    objective: float
    penalize_diagonal: bool = True
    converged: bool = True
    sweeps: int = 0
    history: tuple = field(default=(), repr=False)

    @property
    def omega_dense(self) -> np.ndarray:
        return self.omega.toarray()

    @property
    def dim(self) -> int:
        return self.sigma.shape[0]

    def offdiag_fraction(self) -> float:
        """Fraction of nonzero off-diagonal precision entries."""
        n = self.dim
        if n < 2:
            return 0.0
        nnz_off = self.omega.nnz - np.count_nonzero(self.omega.diagonal())
        return nnz_off / (n * (n - 1))


@numba.njit(cache=True)
def _lasso_cd(q, b, rho, alpha, tol, max_iter):
    """Coordinate descent for ``0.5 a'Qa + b'a + rho|a|_1`` with active-set passes."""
    m = q.shape[0]
    r = b.copy()
    for k in range(m):
        if alpha[k] != 0.0:
            for i in range(m):
                r[i] += q[i, k] * alpha[k]
    for _ in range(max_iter):
        maxd = 0.0
        for k in range(m):
            c = r[k] - q[k, k] * alpha[k]
            if c > rho:
                new = -(c - rho) / q[k, k]
            elif c < -rho:
                new = -(c + rho) / q[k, k]
            else:
                new = 0.0
            d = new - alpha[k]
            if d != 0.0:
                alpha[k] = new
                for i in range(m):
                    r[i] += q[i, k] * d
                ad = abs(d) * np.sqrt(q[k, k])
                if ad > maxd:
                    maxd = ad
        if maxd <= tol:
            break
        for _ in range(max_iter):
            maxa = 0.0
            for k in range(m):
                if alpha[k] == 0.0:
                    continue
                c = r[k] - q[k, k] * alpha[k]
                if c > rho:
                    new = -(c - rho) / q[k, k]
                elif c < -rho:
                    new = -(c + rho) / q[k, k]
                else:
                    new = 0.0
                d = new - alpha[k]
                if d != 0.0:
                    alpha[k] = new
                    for i in range(m):
                        r[i] += q[i, k] * d
                    ad = abs(d) * np.sqrt(q[k, k])
                    if ad > maxa:
                        maxa = ad
            if maxa <= tol:
                break
    return alpha


@numba.njit(cache=True)
def _sweep(s, omega, w, rho, rho_diag, lasso_tol, lasso_max_iter):
    """One pass over all columns in ascending order; returns max |change in W|."""
    n = s.shape[0]
    m = n - 1
    max_dw = 0.0
    idx = np.empty(m, dtype=np.int64)
    a = np.empty((m, m))
    q = np.empty((m, m))
    b = np.empty(m)
    alpha = np.empty(m)
    u = np.empty(m)
    for j in range(n):
        p = 0
        for i in range(n):
            if i != j:
                idx[p] = i
                p += 1
        wjj = w[j, j]
        w22 = s[j, j] + rho_diag
        for k in range(m):
            wk = w[idx[k], j]
            for l in range(m):
                a[k, l] = w[idx[k], idx[l]] - wk * w[idx[l], j] / wjj
        for k in range(m):
            for l in range(m):
                q[k, l] = w22 * a[k, l]
            b[k] = s[idx[k], j]
            alpha[k] = omega[idx[k], j]
        alpha = _lasso_cd(q, b, rho, alpha, lasso_tol, lasso_max_iter)
        quad = 0.0
        for k in range(m):
            acc = 0.0
            for l in range(m):
                acc += a[k, l] * alpha[l]
            u[k] = acc
            quad += alpha[k] * acc
        for k in range(m):
            omega[idx[k], j] = alpha[k]
            omega[j, idx[k]] = alpha[k]
        omega[j, j] = 1.0 / w22 + quad
        for k in range(m):
            for l in range(m):
                new = a[k, l] + w22 * u[k] * u[l]
                d = abs(new - w[idx[k], idx[l]])
                if d > max_dw:
                    max_dw = d
                w[idx[k], idx[l]] = new
            new = -w22 * u[k]
            d = abs(new - w[idx[k], j])
            if d > max_dw:
                max_dw = d
            w[idx[k], j] = new
            w[j, idx[k]] = new
        d = abs(w22 - w[j, j])
        if d > max_dw:
            max_dw = d
        w[j, j] = w22
    return max_dw


def glasso_objective(s: np.ndarray, omega, rho: float, penalize_diagonal: bool = True) -> float:
    """``-log det(Omega) + tr(S Omega) + rho * ||Omega||_1``."""
    om = omega.toarray() if sp.issparse(omega) else np.asarray(omega)
    pen = np.abs(om).sum()
    if not penalize_diagonal:
        pen -= np.abs(np.diag(om)).sum()
    return float(-logdet_pd(om) + np.sum(s * om) + rho * pen)


def kkt_residual(s: np.ndarray, omega: np.ndarray, w: np.ndarray, rho: float,
                 penalize_diagonal: bool = True) -> float:
    """Largest violation of the stationarity conditions ``W - S in rho * subgrad ||Omega||_1``."""
    g = w - s
    off = ~np.eye(s.shape[0], dtype=bool)
    nz = (omega != 0) & off
    z = (omega == 0) & off
    res = 0.0
    if nz.any():
        res = max(res, float(np.max(np.abs(g[nz] - rho * np.sign(omega[nz])))))
    if z.any():
        res = max(res, float(np.max(np.maximum(np.abs(g[z]) - rho, 0.0))))
    diag_rho = rho if penalize_diagonal else 0.0
    res = max(res, float(np.max(np.abs(np.diag(g) - diag_rho))))
    return res


def glasso_fit(s, rho: float, tol: float = DEFAULT_TOL, warm: GlassoSolution | None = None,
               kkt_tol: float = DEFAULT_KKT_TOL, max_sweeps: int = 500,
               penalize_diagonal: bool = True, lasso_tol: float = 1e-12,
               check_monotone: bool = False) -> GlassoSolution:
    """Solve the l1-penalized log-determinant program.

    Parameters
    ----------
    s : (J, J) array
        Symmetric input covariance with nonnegative diagonal.
    rho : float
        Penalty weight; the diagonal is penalized unless
        ``penalize_diagonal=False``.
    tol : float
        Sweeps stop once the largest entry change of ``W`` over a full sweep
        is at most ``tol * mean|offdiag(S)|`` and the KKT residual is within
        ``kkt_tol``.
    warm : GlassoSolution, optional
        Starting (Omega, W) pair, typically the previous EM iterate.
    max_sweeps : int
        Cap on full sweeps.  Hitting it returns ``converged=False``; the
        returned precision is still checked for positive definiteness.
    check_monotone : bool
        Raise if the objective increases between sweeps.
    """
    s = np.asarray(s, dtype=float)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise GlassoError("S must be square")
    if not np.allclose(s, s.T, rtol=1e-10, atol=1e-12):
        raise GlassoError("S must be symmetric")
    s = (s + s.T) / 2
    if np.any(np.diag(s) < 0):
        raise GlassoError("S must have a nonnegative diagonal")
    if rho < 0:
        raise GlassoError("rho must be nonnegative")
    n = s.shape[0]

    if rho == 0.0:
        try:
            cf = scipy.linalg.cho_factor(s, lower=True)
        except np.linalg.LinAlgError:
            raise GlassoError("unregularized MLE does not exist: S is singular") from None
        omega = scipy.linalg.cho_solve(cf, np.eye(n))
        omega = (omega + omega.T) / 2
        obj = glasso_objective(s, omega, 0.0, penalize_diagonal)
        return GlassoSolution(
            omega=to_sparse(omega), sigma=s.copy(), rho=0.0,
            kkt_residual=kkt_residual(s, omega, s, 0.0, penalize_diagonal),
            objective=obj, penalize_diagonal=penalize_diagonal, converged=True,
            sweeps=0, history=(obj,),
        )

    rho_diag = rho if penalize_diagonal else 0.0
    if np.any(np.diag(s) + rho_diag <= 0):
        raise GlassoError("S has a zero diagonal entry and the diagonal is unpenalized")
    if warm is not None and warm.dim == n:
        omega = warm.omega_dense.copy()
        w = warm.sigma.copy()
    else:
        omega = np.diag(1.0 / (np.diag(s) + rho_diag))
        w = np.diag(np.diag(s) + rho_diag)

    if n == 1:
        omega = np.array([[1.0 / (s[0, 0] + rho_diag)]])
        w = np.array([[s[0, 0] + rho_diag]])
        obj = glasso_objective(s, omega, rho, penalize_diagonal)
        return GlassoSolution(to_sparse(omega), w, rho, 0.0, obj, penalize_diagonal, True, 1, (obj,))

    off = ~np.eye(n, dtype=bool)
    scale = float(np.mean(np.abs(s[off])))
    if scale == 0.0:
        scale = float(np.mean(np.diag(s))) or 1.0
    threshold = tol * scale

    history = [glasso_objective(s, omega, rho, penalize_diagonal)]
    converged = False
    kkt = np.inf
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        dw = _sweep(s, omega, w, rho, rho_diag, lasso_tol, 10_000)
        history.append(glasso_objective(s, omega, rho, penalize_diagonal))
        if check_monotone and history[-1] > history[-2] + 1e-9 * max(1.0, abs(history[-2])):
            raise GlassoError(f"objective increased at sweep {sweeps}: {history[-2]} -> {history[-1]}")
        if dw <= threshold:
            kkt = kkt_residual(s, omega, w, rho, penalize_diagonal)
            if kkt <= kkt_tol:
                converged = True
                break
    if not converged:
        kkt = kkt_residual(s, omega, w, rho, penalize_diagonal)

    omega = (omega + omega.T) / 2
    try:
        np.linalg.cholesky(omega)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("graphical lasso iterate lost positive definiteness") from None
    drift = np.max(np.abs(omega @ w - np.eye(n)))
    if drift > 1e-8:
        w = scipy.linalg.cho_solve(scipy.linalg.cho_factor(omega, lower=True), np.eye(n))
        kkt = kkt_residual(s, omega, w, rho, penalize_diagonal)
    w = (w + w.T) / 2
    return GlassoSolution(
        omega=to_sparse(omega), sigma=w, rho=float(rho), kkt_residual=float(kkt),
        objective=history[-1], penalize_diagonal=penalize_diagonal, converged=converged,
        sweeps=sweeps, history=tuple(history),
    )


def identity_solution(n: int) -> GlassoSolution:
    eye = np.eye(n)
    return GlassoSolution(to_sparse(eye), eye.copy(), 0.0, 0.0, float(n), True, True, 0, ())


def partial_correlations(omega) -> np.ndarray:
    """``-Omega_ij / sqrt(Omega_ii Omega_jj)`` off the diagonal, zero on it."""
    om = omega.toarray() if sp.issparse(omega) else np.asarray(omega, dtype=float)
    d = np.diag(om)
    if np.any(d <= 0):
        raise ValueError("precision matrix has a nonpositive diagonal entry")
    sd = np.sqrt(d)
    pc = -om / np.outer(sd, sd)
    np.fill_diagonal(pc, 0.0)
    return pc


def top_pairs(pc: np.ndarray, k: int, item_ids=None) -> list[tuple]:
    """The ``k`` largest ``|pc_ij|`` pairs (i < j), ties by (i, j) ascending.

    Returns ``(a, b, value)`` triples, with ``a``/``b`` external IDs when
    ``item_ids`` is given, else indices.
    """
    pc = np.asarray(pc)
    iu, ju = np.triu_indices(pc.shape[0], k=1)
    vals = pc[iu, ju]
    order = np.lexsort((ju, iu, -np.abs(vals)))[: max(k, 0)]
    name = (lambda i: item_ids[i]) if item_ids is not None else int
    return [(name(iu[o]), name(ju[o]), float(vals[o])) for o in order]


def write_graph(omega, path, item_ids=None) -> int:
    """Edge list of off-diagonal nonzeros sorted by |partial correlation|; returns edge count.

    Columns: ``item_id_a  item_id_b  omega_ij  partial_correlation``.
    """
    om = omega.toarray() if sp.issparse(omega) else np.asarray(omega, dtype=float)
    pc = partial_correlations(om)
    iu, ju = np.nonzero(np.triu(om != 0, k=1))
    order = np.lexsort((ju, iu, -np.abs(pc[iu, ju])))
    name = (lambda i: str(item_ids[i])) if item_ids is not None else str
    with open(path, "w") as fh:
        fh.write("item_id_a\titem_id_b\tomega_ij\tpartial_correlation\n")
        for o in order:
            i, j = iu[o], ju[o]
            fh.write(f"{name(i)}\t{name(j)}\t{float(om[i, j])!r}\t{float(pc[i, j])!r}\n")
    return len(order)


def read_graph(path) -> list[tuple]:
    rows = []
    with open(path) as fh:
        fh.readline()
        for line in fh:
            a, b, o, p = line.rstrip("\n").split("\t")
            rows.append((a, b, float(o), float(p)))
    return rows


def warn_unconverged(sol: GlassoSolution) -> None:
    if not sol.converged:
        warnings.warn(
            f"graphical lasso stopped after {sol.sweeps} sweeps (KKT residual {sol.kkt_residual:.2e})",
            RuntimeWarning, stacklevel=2,
        )
