"""Numerical kernels shared by the UPG fit.

The posterior of a user's affinity vector has precision ``K_u + Omega`` where
``K_u`` is diagonal and supported on the handful of items the user touched.
Everything here exploits that structure: conjugate gradients against the
sparse precision for the posterior mean, and Woodbury identities against the
dense covariance ``Sigma = Omega^{-1}`` for posterior covariances.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

#: users per reduction chunk; partial sums are combined in chunk order so the
#: result does not depend on the thread count.
CHUNK_SIZE = 256


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


@dataclass
class UserCounters:
    """Sufficient statistics of one user: per active item ``k = sum 1/V`` and ``u = sum e/V``."""

    items: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    k: np.ndarray = field(default_factory=lambda: np.zeros(0))
    u: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=np.int64)
        self.k = np.asarray(self.k, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        if not (len(self.items) == len(self.k) == len(self.u)):
            raise ValueError("counter arrays must have equal length")
        if np.any(self.k < 0):
            raise ValueError("k values must be nonnegative")
        if len(self.items) > 1 and np.any(np.diff(self.items) <= 0):
            order = np.argsort(self.items, kind="stable")
            if np.any(np.diff(self.items[order]) == 0):
                raise ValueError("duplicate item in counters")
            self.items, self.k, self.u = self.items[order], self.k[order], self.u[order]

    def __len__(self):
        return len(self.items)

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.k))

    def add(self, item: int, k: float, u: float) -> None:
        """Accumulate one observation's contribution, keeping items sorted."""
        pos = int(np.searchsorted(self.items, item))
        if pos < len(self.items) and self.items[pos] == item:
            self.k[pos] += k
            self.u[pos] += u
        else:
            self.items = np.insert(self.items, pos, item)
            self.k = np.insert(self.k, pos, k)
            self.u = np.insert(self.u, pos, u)

    def dense_k(self, n: int) -> np.ndarray:
        out = np.zeros(n)
        out[self.items] = self.k
        return out

    def dense_u(self, n: int) -> np.ndarray:
        out = np.zeros(n)
        out[self.items] = self.u
        return out

    def copy(self) -> "UserCounters":
        return UserCounters(self.items.copy(), self.k.copy(), self.u.copy())


def counters_from_arrays(users: np.ndarray, items: np.ndarray, k_obs: np.ndarray,
                         u_obs: np.ndarray, n_users: int, n_items: int) -> list[UserCounters]:
    """Group per-observation ``1/V`` and ``e/V`` terms into one counter set per user."""
    keys = users.astype(np.int64) * n_items + items
    uniq, inv = np.unique(keys, return_inverse=True)
    ksum = np.bincount(inv, weights=k_obs, minlength=len(uniq))
    usum = np.bincount(inv, weights=u_obs, minlength=len(uniq))
    pair_user = uniq // n_items
    pair_item = uniq % n_items
    bounds = np.searchsorted(pair_user, np.arange(n_users + 1))
    return [
        UserCounters(pair_item[a:b], ksum[a:b], usum[a:b])
        for a, b in zip(bounds[:-1], bounds[1:])
    ]


def to_sparse(matrix, drop_zeros: bool = True) -> sp.csr_array:
    m = sp.csr_array(matrix)
    if drop_zeros:
        m.eliminate_zeros()
    m.sort_indices()
    return m


def soft_threshold(x, rho):
    """``sign(x) * max(|x| - rho, 0)``."""
    if np.any(np.asarray(rho) < 0):
        raise ValueError("rho must be nonnegative")
    return np.sign(x) * np.maximum(np.abs(x) - rho, 0.0)


class CGResult(NamedTuple):
    x: np.ndarray
    converged: bool
    iterations: int
    residual_norm: float


def cg_solve(precision, counters: UserCounters, rhs: np.ndarray, tol: float = 1e-8,
             max_iter: int | None = None, x0: np.ndarray | None = None) -> CGResult:
    """Solve ``(K_u + Omega) x = rhs`` by unpreconditioned conjugate gradients.

    Stops once ``||(K_u + Omega) x - rhs|| <= tol * ||rhs||``.  A nonpositive
    curvature ``p' A p`` means the operator is not positive definite and
    raises rather than returning garbage.
    """
    rhs = np.asarray(rhs, dtype=float)
    n = rhs.shape[0]
    if max_iter is None:
        max_iter = 10 * n
    kdiag = counters.dense_k(n)

    def apply(v):
        return precision @ v + kdiag * v

    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return CGResult(np.zeros(n), True, 0, 0.0)
    target = tol * bnorm
    if x0 is None:
        x = np.zeros(n)
        r = rhs.copy()
    else:
        x = np.array(x0, dtype=float)
        r = rhs - apply(x)
    p = r.copy()
    rr = r @ r
    it = 0
    while np.sqrt(rr) > target and it < max_iter:
        ap = apply(p)
        curv = p @ ap
        if curv <= 0.0:
            raise NotPositiveDefiniteError(
                f"conjugate gradient met nonpositive curvature p'Ap={curv:.3e} at iteration {it}"
            )
        alpha = rr / curv
        x += alpha * p
        r -= alpha * ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
    res = float(np.sqrt(rr))
    return CGResult(x, res <= target, it, res)


def _inner_update(sigma: np.ndarray, counters: UserCounters):
    """Active items, ``sqrt(K)`` and ``sqrt(K)(I + sqrt(K) Sigma_aa sqrt(K))^{-1} sqrt(K)``."""
    keep = counters.k > 0
    a = counters.items[keep]
    sk = np.sqrt(counters.k[keep])
    sigma_aa = sigma[np.ix_(a, a)]
    inner = np.eye(len(a)) + sk[:, None] * sigma_aa * sk[None, :]
    try:
        cf = scipy.linalg.cho_factor(inner, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("Woodbury inner matrix is not positive definite") from exc
    m = sk[:, None] * scipy.linalg.cho_solve(cf, np.diag(sk), check_finite=False)
    return a, sigma_aa, (m + m.T) / 2


def woodbury_user_cov(sigma: np.ndarray, counters: UserCounters) -> np.ndarray:
    """Posterior covariance ``(Sigma^{-1} + K_u)^{-1}`` as a rank-``||K_u||_0`` update of ``Sigma``."""
    sigma = np.asarray(sigma, dtype=float)
    if counters.nnz == 0:
        return sigma.copy()
    a, _, m = _inner_update(sigma, counters)
    sa = sigma[:, a]
    out = sigma - sa @ m @ sa.T
    return (out + out.T) / 2


def woodbury_active_diag(sigma: np.ndarray, counters: UserCounters) -> np.ndarray:
    """Diagonal of the posterior covariance at ``counters.items`` (same order)."""
    out = np.diag(sigma)[counters.items].copy()
    if counters.nnz == 0:
        return out
    a, sigma_aa, m = _inner_update(sigma, counters)
    corr = np.einsum("ij,ij->i", sigma_aa @ m, sigma_aa)
    pos = np.searchsorted(counters.items, a)
    out[pos] -= corr
    return out


def _chunked(n: int, size: int):
    return [(s, min(s + size, n)) for s in range(0, n, size)]


def reduce_in_chunks(fn, n: int, n_threads: int = 1, chunk_size: int = CHUNK_SIZE):
    """Evaluate ``fn(start, stop)`` over fixed chunks and sum the partials in chunk order."""
    chunks = _chunked(n, chunk_size)
    if n_threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            partials = list(pool.map(lambda c: fn(*c), chunks))
    else:
        partials = [fn(*c) for c in chunks]
    total = None
    for part in partials:
        total = part if total is None else total + part
    return total


def sum_user_cov(sigma: np.ndarray, all_counters: Sequence[UserCounters], n_threads: int = 1,
                 chunk_size: int = CHUNK_SIZE) -> np.ndarray:
    """``sum_u (Sigma^{-1} + K_u)^{-1}`` via the aggregated Woodbury form.

    Only the ``||K_u||_0``-sized inner blocks are accumulated per user; the
    two products with ``Sigma`` happen once.  Chunks of ``chunk_size`` users
    are reduced sequentially in user order.
    """
    sigma = np.asarray(sigma, dtype=float)
    n = sigma.shape[0]
    n_users = len(all_counters)
    if n_users == 0:
        return np.zeros_like(sigma)

    def chunk(start, stop):
        acc = np.zeros((n, n))
        for c in all_counters[start:stop]:
            if c.nnz == 0:
                continue
            a, _, m = _inner_update(sigma, c)
            acc[np.ix_(a, a)] += m
        return acc

    acc = reduce_in_chunks(chunk, n_users, n_threads, chunk_size)
    out = n_users * sigma - sigma @ acc @ sigma
    return (out + out.T) / 2


def is_positive_definite(matrix: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        return False
    return True


def logdet_pd(matrix: np.ndarray) -> float:
    """``log det`` of a symmetric PD matrix through its Cholesky factor."""
    try:
        chol = np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("matrix is not positive definite") from exc
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def write_symmetric_coo(matrix, path) -> None:
    """Upper-triangle ``i j value`` lines (0-based); explicit zeros are skipped except on the diagonal."""
    m = matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix)
    n = m.shape[0]
    with open(path, "w") as fh:
        fh.write(f"# dim {n}\n")
        for i in range(n):
            row = m[i]
            for j in range(i, n):
                if i == j or row[j] != 0.0:
                    fh.write(f"{i} {j} {float(row[j])!r}\n")


def read_symmetric_coo(path, dim: int | None = None) -> np.ndarray:
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "dim" and dim is None:
                    dim = int(parts[1])
                continue
            i, j, v = line.split()
            i, j = int(i), int(j)
            if j < i:
                raise ValueError(f"line {lineno}: entry below the diagonal")
            entries.append((i, j, float(v)))
    if dim is None:
        dim = 1 + max(max(i, j) for i, j, _ in entries) if entries else 0
    out = np.zeros((dim, dim))
    for i, j, v in entries:
        out[i, j] = v
        out[j, i] = v
    return out
