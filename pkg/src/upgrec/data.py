"""Datasets of user-item responses: parsing, splitting and synthetic generation.

Two on-disk formats are supported:

* MovieLens ``UserID::MovieID::Rating::Timestamp`` lines (Gaussian ratings,
  intercept-only covariates).
* A tab-separated event log with header
  ``user_id  item_id  response  timestamp  c1 ... cd`` carrying binary
  responses and per-user covariates.

Dense indices are assigned in natural-sort order of the external IDs
(numeric order when every ID is an integer, lexicographic otherwise), so a
dataset written and re-read keeps its indices.
"""
from __future__ import annotations

import errno
import os
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

GAUSSIAN = "gaussian"
BERNOULLI = "bernoulli"
FAMILIES = (GAUSSIAN, BERNOULLI)


class DataFormatError(ValueError):
    """Raised for malformed input files or inconsistent records."""


class Observation(NamedTuple):
    user_index: int
    item_index: int
    response: float
    timestamp: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Indexed user-item responses with static per-user covariates.

    Observations are stored column-wise (``users``, ``items``, ``responses``,
    ``timestamps``) in file order.  ``covariates`` is ``n_users x d`` with a
    leading intercept column of ones.
    """

    users: np.ndarray
    items: np.ndarray
    responses: np.ndarray
    timestamps: np.ndarray
    covariates: np.ndarray
    user_ids: tuple
    item_ids: tuple
    family: str = GAUSSIAN
    _user_lookup: dict = field(default=None, repr=False, compare=False)
    _item_lookup: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name, dtype in (("users", np.int64), ("items", np.int64),
                            ("responses", float), ("timestamps", np.int64)):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=dtype))
        object.__setattr__(self, "user_ids", tuple(self.user_ids))
        object.__setattr__(self, "item_ids", tuple(self.item_ids))
        n = len(self.users)
        if not (len(self.items) == len(self.responses) == len(self.timestamps) == n):
            raise ValueError("observation columns must have equal length")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        cov = np.array(self.covariates, dtype=float)
        if cov.ndim != 2 or cov.shape[0] != len(self.user_ids) or cov.shape[1] < 1:
            raise ValueError("covariates must be an n_users x d matrix with d >= 1")
        if not np.all(cov[:, 0] == 1.0):
            raise ValueError("first covariate column must be the constant intercept")
        if n:
            if self.users.min() < 0 or self.users.max() >= len(self.user_ids):
                raise ValueError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= len(self.item_ids):
                raise ValueError("item index out of range")
        if self.family == BERNOULLI and n and not np.all(
            (self.responses == 0) | (self.responses == 1)
        ):
            raise ValueError("bernoulli responses must be 0 or 1")
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "_user_lookup", {u: i for i, u in enumerate(self.user_ids)})
        object.__setattr__(self, "_item_lookup", {v: i for i, v in enumerate(self.item_ids)})
        for name in ("users", "items", "responses", "timestamps", "covariates"):
            getattr(self, name).setflags(write=False)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def covariate_dim(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_obs(self) -> int:
        return len(self.users)

    def __len__(self):
        return self.n_obs

    def user_index(self, user_id: str) -> int:
        return self._user_lookup[user_id]

    def item_index(self, item_id: str) -> int:
        return self._item_lookup[item_id]

    def observations(self) -> Iterator[Observation]:
        for u, j, y, t in zip(self.users, self.items, self.responses, self.timestamps):
            yield Observation(int(u), int(j), float(y), int(t))

    def pair_counts(self) -> dict:
        """Replicate count n_uj for every observed (user, item) pair."""
        keys = self.users.astype(np.int64) * self.n_items + self.items
        uniq, counts = np.unique(keys, return_counts=True)
        return {(int(k // self.n_items), int(k % self.n_items)): int(c) for k, c in zip(uniq, counts)}

    def subset(self, mask_or_index) -> "Dataset":
        """Observations selected by a mask or index array; index space is kept."""
        sel = np.asarray(mask_or_index)
        return Dataset(
            users=self.users[sel].copy(),
            items=self.items[sel].copy(),
            responses=self.responses[sel].copy(),
            timestamps=self.timestamps[sel].copy(),
            covariates=self.covariates.copy(),
            user_ids=self.user_ids,
            item_ids=self.item_ids,
            family=self.family,
        )

    def reindex(self, user_ids, item_ids) -> "Dataset":
        """Express this dataset in another vocabulary.

        IDs present in ``user_ids``/``item_ids`` take those indices; IDs the
        vocabulary lacks are appended after it in this dataset's order, so a
        model fitted on the vocabulary sees them as unseen (index >= its size).
        Covariates of appended-only vocabulary users default to intercept-only.
        """
        user_ids = list(user_ids)
        item_ids = list(item_ids)
        ulook = {u: i for i, u in enumerate(user_ids)}
        ilook = {v: i for i, v in enumerate(item_ids)}
        for u in self.user_ids:
            if u not in ulook:
                ulook[u] = len(user_ids)
                user_ids.append(u)
        for v in self.item_ids:
            if v not in ilook:
                ilook[v] = len(item_ids)
                item_ids.append(v)
        umap = np.array([ulook[u] for u in self.user_ids], dtype=np.int64)
        imap = np.array([ilook[v] for v in self.item_ids], dtype=np.int64)
        cov = np.zeros((len(user_ids), self.covariate_dim))
        cov[:, 0] = 1.0
        cov[umap] = self.covariates
        return Dataset(
            users=umap[self.users] if self.n_obs else self.users.copy(),
            items=imap[self.items] if self.n_obs else self.items.copy(),
            responses=self.responses.copy(),
            timestamps=self.timestamps.copy(),
            covariates=cov,
            user_ids=tuple(user_ids),
            item_ids=tuple(item_ids),
            family=self.family,
        )

    def same_as(self, other: "Dataset") -> bool:
        """Exact equality of every field (arrays compared elementwise)."""
        return (
            self.family == other.family
            and self.user_ids == other.user_ids
            and self.item_ids == other.item_ids
            and np.array_equal(self.users, other.users)
            and np.array_equal(self.items, other.items)
            and np.array_equal(self.responses, other.responses)
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.covariates, other.covariates)
        )


@dataclass(frozen=True)
class SynthTruth:
    true_beta: np.ndarray
    true_omega: np.ndarray
    family: str
    noise_var: float | None
    seed: int
    true_phi: np.ndarray | None = None


def _natural_order(ids) -> list:
    ids = list(ids)
    if all(s.isdigit() for s in ids):
        return sorted(ids, key=int)
    return sorted(ids)


def _index(raw_ids: list) -> tuple[np.ndarray, tuple]:
    order = _natural_order(set(raw_ids))
    lookup = {v: i for i, v in enumerate(order)}
    return np.fromiter((lookup[v] for v in raw_ids), dtype=np.int64, count=len(raw_ids)), tuple(order)


def parse_movielens(path) -> Dataset:
    """Read a MovieLens ``::``-delimited ratings file into a Gaussian dataset."""
    uids, iids, ys, ts = [], [], [], []
    with open(path, "r", encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != 4:
                raise DataFormatError(f"line {lineno}: expected 4 '::'-separated fields, got {len(parts)}")
            try:
                y = float(int(parts[2]))
                t = int(parts[3])
            except ValueError:
                raise DataFormatError(f"line {lineno}: malformed rating or timestamp: {line!r}") from None
            uids.append(parts[0])
            iids.append(parts[1])
            ys.append(y)
            ts.append(t)
    if not uids:
        raise DataFormatError(f"{path}: no ratings found")
    users, user_ids = _index(uids)
    items, item_ids = _index(iids)
    return Dataset(
        users=users,
        items=items,
        responses=np.asarray(ys, dtype=float),
        timestamps=np.asarray(ts, dtype=np.int64),
        covariates=np.ones((len(user_ids), 1)),
        user_ids=user_ids,
        item_ids=item_ids,
        family=GAUSSIAN,
    )


def write_movielens(data: Dataset, path) -> None:
    with open(path, "w", encoding="latin-1") as fh:
        for u, j, y, t in zip(data.users, data.items, data.responses, data.timestamps):
            fh.write(f"{data.user_ids[u]}::{data.item_ids[j]}::{int(y)}::{int(t)}\n")


EVENT_LOG_HEADER = ("user_id", "item_id", "response", "timestamp")


def parse_event_log(path, family: str = BERNOULLI) -> Dataset:
    """Read the tab-separated event log.

    Covariate columns must be constant per ``user_id``; the returned
    covariate vector is ``[1, c1, ..., cd]``.
    """
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\r\n").split("\t")
        if tuple(header[:4]) != EVENT_LOG_HEADER:
            expected = "\t".join(EVENT_LOG_HEADER)
            raise DataFormatError(f"{path}: header must start with {expected!r}")
        d_extra = len(header) - 4
        uids, iids, ys, ts = [], [], [], []
        covs: dict[str, tuple] = {}
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4 + d_extra:
                raise DataFormatError(f"line {lineno}: expected {4 + d_extra} fields, got {len(parts)}")
            uid, iid = parts[0], parts[1]
            try:
                y = float(parts[2])
                t = int(parts[3])
                c = tuple(float(v) for v in parts[4:])
            except ValueError:
                raise DataFormatError(f"line {lineno}: non-numeric field in {line!r}") from None
            if family == BERNOULLI and y not in (0.0, 1.0):
                raise DataFormatError(f"line {lineno}: response {parts[2]!r} is not 0 or 1")
            prev = covs.setdefault(uid, c)
            if prev != c:
                raise DataFormatError(f"line {lineno}: inconsistent covariates for user {uid!r}")
            uids.append(uid)
            iids.append(iid)
            ys.append(y)
            ts.append(t)
    if not uids:
        raise DataFormatError(f"{path}: no records found")
    users, user_ids = _index(uids)
    items, item_ids = _index(iids)
    cov = np.ones((len(user_ids), 1 + d_extra))
    for i, uid in enumerate(user_ids):
        cov[i, 1:] = covs[uid]
    return Dataset(
        users=users,
        items=items,
        responses=np.asarray(ys, dtype=float),
        timestamps=np.asarray(ts, dtype=np.int64),
        covariates=cov,
        user_ids=user_ids,
        item_ids=item_ids,
        family=family,
    )


def _fmt(x: float) -> str:
    return repr(float(x))


def write_event_log(data: Dataset, path) -> None:
    d_extra = data.covariate_dim - 1
    header = list(EVENT_LOG_HEADER) + [f"c{k + 1}" for k in range(d_extra)]
    cov_text = ["\t".join(_fmt(v) for v in row[1:]) for row in data.covariates]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for u, j, y, t in zip(data.users, data.items, data.responses, data.timestamps):
            y_text = str(int(y)) if data.family == BERNOULLI else _fmt(y)
            row = f"{data.user_ids[u]}\t{data.item_ids[j]}\t{y_text}\t{int(t)}"
            if d_extra:
                row += "\t" + cov_text[u]
            fh.write(row + "\n")


def load_dataset(path, fmt: str | None = None, family: str | None = None) -> Dataset:
    """Dispatch on ``fmt`` (``movielens``/``eventlog``) or sniff the first line."""
    if not os.path.exists(path):
        raise FileNotFoundError(errno.ENOENT, "no such file", str(path))
    if fmt is None:
        with open(path, "r", encoding="latin-1") as fh:
            first = fh.readline()
        fmt = "movielens" if "::" in first else "eventlog"
    if fmt == "movielens":
        return parse_movielens(path)
    if fmt == "eventlog":
        return parse_event_log(path, family=family or BERNOULLI)
    raise ValueError(f"unknown dataset format {fmt!r}")


def temporal_split(data: Dataset, train_fraction: float) -> tuple[Dataset, Dataset]:
    """Sort by timestamp (stable, so ties keep file order) and cut.

    The first ``floor(train_fraction * n)`` observations form the training
    half.  Both halves share the full index space.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    if data.n_obs == 0:
        raise ValueError("cannot split an empty dataset")
    order = np.argsort(data.timestamps, kind="stable")
    n_train = int(np.floor(train_fraction * data.n_obs))
    return data.subset(order[:n_train]), data.subset(order[n_train:])


def subsample_top(data: Dataset, n_items: int, n_users: int) -> Dataset:
    """Keep the ``n_items`` most-observed items, then the ``n_users`` most active users on them.

    Indices are compacted; ties in counts are broken by smaller index.
    """
    icount = np.bincount(data.items, minlength=data.n_items)
    keep_items = np.sort(np.argsort(-icount, kind="stable")[:n_items])
    imask = np.isin(data.items, keep_items)
    ucount = np.bincount(data.users[imask], minlength=data.n_users)
    keep_users = np.sort(np.argsort(-ucount, kind="stable")[:n_users])
    mask = imask & np.isin(data.users, keep_users)
    umap = np.full(data.n_users, -1, dtype=np.int64)
    umap[keep_users] = np.arange(len(keep_users))
    imap = np.full(data.n_items, -1, dtype=np.int64)
    imap[keep_items] = np.arange(len(keep_items))
    return Dataset(
        users=umap[data.users[mask]],
        items=imap[data.items[mask]],
        responses=data.responses[mask].copy(),
        timestamps=data.timestamps[mask].copy(),
        covariates=data.covariates[keep_users].copy(),
        user_ids=tuple(data.user_ids[u] for u in keep_users),
        item_ids=tuple(data.item_ids[j] for j in keep_items),
        family=data.family,
    )


def sparse_precision(n: int, density: float, rng, min_eig: float = 0.5,
                     low: float = 0.3, high: float = 0.6) -> np.ndarray:
    """Random symmetric PD matrix whose off-diagonal support has the given density.

    Off-diagonal magnitudes are uniform on ``[low, high]`` with random signs;
    a shift of the (unit) diagonal then fixes the smallest eigenvalue at
    ``min_eig`` without touching the support.
    """
    omega = np.eye(n)
    iu = np.triu_indices(n, k=1)
    on = rng.random(len(iu[0])) < density
    vals = rng.uniform(low, high, size=on.sum()) * rng.choice([-1.0, 1.0], size=on.sum())
    omega[iu[0][on], iu[1][on]] = vals
    omega[iu[1][on], iu[0][on]] = vals
    shift = min_eig - np.linalg.eigvalsh(omega)[0]
    omega[np.diag_indices(n)] += shift
    return omega


def synth_generate(n_users: int, n_items: int, covariate_dim: int, sparsity: float,
                   family: str = GAUSSIAN, seed: int = 0, obs_per_user: int = 20,
                   noise_var: float = 1.0, beta_scale: float = 0.5
                   ) -> tuple[Dataset, SynthTruth]:
    """Draw a dataset from the UPG generative model with known parameters.

    ``sparsity`` is the fraction of nonzero off-diagonal precision entries.
    Each user gets ``obs_per_user`` observations on uniformly drawn items
    (replicates allowed); item ``j`` is forced onto user ``j mod n_users`` so
    every item is observed.
    """
    if not 0.0 <= sparsity < 1.0:
        raise ValueError("sparsity must lie in [0, 1)")
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    if covariate_dim < 1 or obs_per_user < 1:
        raise ValueError("covariate_dim and obs_per_user must be >= 1")
    rng = np.random.default_rng(seed)
    omega = sparse_precision(n_items, sparsity, rng)
    sigma = np.linalg.inv(omega)
    sigma = (sigma + sigma.T) / 2
    chol = np.linalg.cholesky(sigma)
    beta = rng.normal(scale=beta_scale, size=(n_items, covariate_dim))
    cov = np.ones((n_users, covariate_dim))
    if covariate_dim > 1:
        cov[:, 1:] = rng.integers(0, 2, size=(n_users, covariate_dim - 1))
    phi = rng.standard_normal((n_users, n_items)) @ chol.T

    users = np.repeat(np.arange(n_users), obs_per_user)
    items = rng.integers(0, n_items, size=n_users * obs_per_user)
    forced = np.arange(min(n_items, n_users * obs_per_user))
    slots = (forced % n_users) * obs_per_user + (forced // n_users) % obs_per_user
    items[slots] = forced
    eta = np.einsum("ud,ud->u", cov[users], beta[items]) + phi[users, items]
    if family == GAUSSIAN:
        y = eta + rng.normal(scale=np.sqrt(noise_var), size=eta.shape)
    else:
        y = (rng.random(eta.shape) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
    ts = np.arange(len(users), dtype=np.int64)
    ts = ts[rng.permutation(len(ts))]
    width_u = len(str(n_users - 1))
    width_i = len(str(n_items - 1))
    data = Dataset(
        users=users.astype(np.int64),
        items=items.astype(np.int64),
        responses=y,
        timestamps=ts,
        covariates=cov,
        user_ids=tuple(f"u{u:0{width_u}d}" for u in range(n_users)),
        item_ids=tuple(f"i{j:0{width_i}d}" for j in range(n_items)),
        family=family,
    )
    truth = SynthTruth(beta, omega, family, noise_var if family == GAUSSIAN else None, seed, phi)
    return data, truth
