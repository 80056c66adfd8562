"""Model bundles: one JSON document per fitted model.

Every bundle carries the model kind, response family and the user/item
vocabularies it was fitted on, so later datasets can be reindexed onto it.
Symmetric matrices are stored as upper-triangle ``[i, j, value]`` triples.
The UPG bundle stores per-user counters only; posterior means are re-solved
on load.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import glasso as gl
from .baselines import BireModel, IisModel, PlsiModel
from .data import BERNOULLI, GAUSSIAN
from .linalg import UserCounters, to_sparse
from .regression import ConstantModel, IregModel, MpModel
from .upg import UpgModel, UserPosterior, recompute_means

FORMAT = "upgrec-model"
VERSION = 1
KINDS = ("constant", "mp", "ireg", "iis", "plsi", "bire", "upg")


def model_kind(model) -> str:
    for kind, cls in (("constant", ConstantModel), ("mp", MpModel), ("ireg", IregModel),
                      ("iis", IisModel), ("plsi", PlsiModel), ("bire", BireModel),
                      ("upg", UpgModel)):
        if isinstance(model, cls):
            return kind
    raise TypeError(f"cannot persist {type(model).__name__}")


def _triples(matrix) -> list:
    m = sp.triu(sp.coo_array(matrix)).tocoo()
    m.sum_duplicates()
    order = np.lexsort((m.col, m.row))
    return [[int(m.row[k]), int(m.col[k]), float(m.data[k])] for k in order if m.data[k] != 0.0]


def _from_triples(triples, n: int) -> np.ndarray:
    out = np.zeros((n, n))
    for i, j, v in triples:
        out[i, j] = v
        out[j, i] = v
    return out


def _arr(x):
    return np.asarray(x, dtype=float).tolist()


def _params(model) -> dict:
    kind = model_kind(model)
    if kind == "constant":
        return {"mu": float(model.mu)}
    if kind == "mp":
        return {"mu": float(model.mu), "alpha": _arr(model.alpha), "b_item": _arr(model.b_item),
                "var_alpha": float(model.var_alpha), "var_b": float(model.var_b),
                "var_noise": float(model.var_noise)}
    if kind == "ireg":
        return {"beta": _arr(model.beta), "c_penalty": float(model.c_penalty)}
    if kind == "iis":
        u, j, r, n_users = model.history
        return {"variant": model.variant, "item_means": _arr(model.item_means),
                "weights": _triples(model.weights), "abs_denominator": model.abs_denominator,
                "top_k": model.top_k,
                "history": {"users": np.asarray(u).tolist(), "items": np.asarray(j).tolist(),
                            "responses": _arr(r), "n_users": int(n_users)}}
    if kind == "plsi":
        return {"k_latent": int(model.k_latent), "p_item_given_class": _arr(model.p_item_given_class),
                "p_class_given_user": _arr(model.p_class_given_user)}
    if kind == "bire":
        return {"mu": float(model.mu), "alpha": _arr(model.alpha), "b_item": _arr(model.b_item),
                "q": _arr(model.q), "v": _arr(model.v), "a_prior": float(model.a_prior),
                "var_noise": float(model.var_noise), "var_alpha": float(model.var_alpha),
                "var_b": float(model.var_b), "k_factors": int(model.k_factors)}
    sol = model.glasso
    return {
        "beta": _arr(model.beta), "beta_default": _arr(model.beta_default),
        "omega": _triples(sol.omega), "rho": float(sol.rho),
        "penalize_diagonal": bool(sol.penalize_diagonal),
        "kkt_residual": float(sol.kkt_residual), "objective": float(sol.objective),
        "var_noise": None if model.var_noise is None else float(model.var_noise),
        "c_penalty": float(model.c_penalty), "cg_tol": float(model.cg_tol),
        "converged": bool(model.converged),
        "counters": [
            {"user": int(u), "items": p.counters.items.tolist(), "k": _arr(p.counters.k),
             "u": _arr(p.counters.u)}
            for u, p in sorted(model.posteriors.items())
        ],
    }


def dumps(model, family: str, user_ids=None, item_ids=None) -> str:
    bundle = {
        "format": FORMAT, "version": VERSION, "model": model_kind(model), "family": family,
        "user_ids": list(user_ids) if user_ids is not None else None,
        "item_ids": list(item_ids) if item_ids is not None else None,
        "params": _params(model),
    }
    return json.dumps(bundle, sort_keys=True, separators=(",", ":")) + "\n"


def save_model(model, path, family: str, user_ids=None, item_ids=None) -> None:
    """Write the bundle via a temporary file so a failed write leaves no partial model."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps(model, family, user_ids, item_ids))
    os.replace(tmp, path)


def _build(kind: str, family: str, p: dict):
    if kind == "constant":
        return ConstantModel(p["mu"])
    if kind == "mp":
        return MpModel(p["mu"], np.array(p["alpha"]), np.array(p["b_item"]), p["var_alpha"],
                       p["var_b"], p["var_noise"])
    if kind == "ireg":
        return IregModel(np.array(p["beta"]).reshape(len(p["beta"]), -1), p["c_penalty"], family)
    if kind == "iis":
        n = len(p["item_means"])
        h = p["history"]
        hist = (np.array(h["users"], dtype=np.int64), np.array(h["items"], dtype=np.int64),
                np.array(h["responses"], dtype=float), h["n_users"])
        return IisModel(_from_triples(p["weights"], n), np.array(p["item_means"]), p["variant"],
                        p["abs_denominator"], p["top_k"], history=hist)
    if kind == "plsi":
        return PlsiModel(p["k_latent"], np.array(p["p_item_given_class"]),
                         np.array(p["p_class_given_user"]))
    if kind == "bire":
        k = p["k_factors"]
        return BireModel(p["mu"], np.array(p["alpha"]), np.array(p["b_item"]),
                         np.array(p["q"]).reshape(-1, k), np.array(p["v"]).reshape(-1, k),
                         p["a_prior"], p["var_noise"], p["var_alpha"], p["var_b"], k)
    beta = np.array(p["beta"])
    beta = beta.reshape(len(beta), -1)
    n = beta.shape[0]
    omega = _from_triples(p["omega"], n)
    sol = gl.GlassoSolution(
        omega=to_sparse(omega), sigma=np.linalg.inv(omega) if n else np.zeros((0, 0)),
        rho=p["rho"], kkt_residual=p["kkt_residual"], objective=p["objective"],
        penalize_diagonal=p["penalize_diagonal"],
    )
    model = UpgModel(beta=beta, glasso=sol, family=family, var_noise=p["var_noise"],
                     c_penalty=p["c_penalty"], beta_default=np.array(p["beta_default"]),
                     cg_tol=p["cg_tol"], converged=p["converged"])
    for c in p["counters"]:
        model.posteriors[c["user"]] = UserPosterior(UserCounters(c["items"], c["k"], c["u"]), np.zeros(n))
    recompute_means(model)
    return model


def loads(text: str):
    """Return ``(model, meta)``; ``meta`` holds kind, family and vocabularies."""
    try:
        bundle = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"not a model bundle: {exc}") from None
    if not isinstance(bundle, dict) or bundle.get("format") != FORMAT:
        raise ValueError("not a model bundle")
    if bundle.get("version") != VERSION:
        raise ValueError(f"unsupported bundle version {bundle.get('version')!r}")
    kind, family = bundle["model"], bundle["family"]
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    if family not in (GAUSSIAN, BERNOULLI):
        raise ValueError(f"unknown family {family!r}")
    model = _build(kind, family, bundle["params"])
    if kind == "upg":
        model.user_ids = tuple(bundle["user_ids"] or ()) or None
        model.item_ids = tuple(bundle["item_ids"] or ()) or None
    meta = {"model": kind, "family": family,
            "user_ids": tuple(bundle["user_ids"]) if bundle["user_ids"] is not None else None,
            "item_ids": tuple(bundle["item_ids"]) if bundle["item_ids"] is not None else None}
    return model, meta


def load_model(path):
    return loads(Path(path).read_text())
