"""Command-line entry point: ``upgrec <command> [--config FILE] [--key value ...]``.

Settings come from an optional ``key = value`` config file; command-line
flags override it.  Unknown keys are rejected.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import evaluation as ev
from . import glasso as gl
from . import persist, plots
from . import regression as rg
from . import upg
from .data import BERNOULLI, FAMILIES, GAUSSIAN, load_dataset, subsample_top, temporal_split, \
    write_event_log, write_movielens

log = logging.getLogger("upgrec")

MODELS = ("constant", "mp", "ireg", "iis", "plsi", "bire", "upg")

# key -> (type, default); None default means "unset"
OPTIONS = {
    "model": (str, None),
    "family": (str, None),
    "format": (str, None),
    "train": (str, None),
    "test": (str, None),
    "input": (str, None),
    "log": (str, None),
    "model_out": (str, None),
    "model_in": (str, None),
    "report_out": (str, None),
    "out": (str, None),
    "train_out": (str, None),
    "test_out": (str, None),
    "train_fraction": (float, 0.75),
    "top_items": (int, None),
    "top_users": (int, None),
    "rho": (str, "0.002"),
    "rho_grid": (str, "0,0.0008,0.002,0.003,0.005"),
    "c_penalty": (str, "1.0"),
    "k_factors": (int, 15),
    "k_latent": (int, 10),
    "n_samples": (int, 50),
    "n_em_iter": (int, 10),
    "tol": (float, 1e-4),
    "em_tol": (float, 1e-4),
    "outer_tol": (float, 1e-4),
    "glasso_tol": (float, gl.DEFAULT_TOL),
    "cg_tol": (float, upg.CG_TOL),
    "max_em": (int, 20),
    "max_outer": (int, 10),
    "max_iter": (int, 200),
    "iis_variant": (str, None),
    "top_k": (int, 10),
    "t_visits": (int, 100000),
    "n_boot": (int, 20),
    "seed": (int, 42),
    "threads": (int, None),
    "figures": (str, "yes"),
}


class ConfigError(ValueError):
    pass


def read_config(path) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in OPTIONS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = val
    return out


def resolve(args: argparse.Namespace) -> dict:
    raw = read_config(args.config) if args.config else {}
    for key in OPTIONS:
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    cfg = {}
    for key, (typ, default) in OPTIONS.items():
        if key in raw:
            try:
                cfg[key] = typ(raw[key])
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {raw[key]!r} as {typ.__name__}") from None
        else:
            cfg[key] = default
    if cfg["threads"] is None:
        cfg["threads"] = upg.default_threads()
    if cfg["model"] is not None and cfg["model"] not in MODELS:
        raise ConfigError(f"model must be one of {', '.join(MODELS)}")
    if cfg["family"] is not None and cfg["family"] not in FAMILIES:
        raise ConfigError(f"family must be one of {', '.join(FAMILIES)}")
    return cfg


def _need(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join(missing)}")


def _load(cfg, key):
    return load_dataset(cfg[key], fmt=cfg["format"], family=cfg["family"])


def _figures(cfg) -> bool:
    return str(cfg["figures"]).lower() not in ("no", "false", "0", "off")


def _aside(path, suffix) -> Path:
    p = Path(path)
    return p.with_name(p.stem + suffix)


def _restrict(data, meta):
    """Reindex a dataset onto a model's vocabulary."""
    if meta["user_ids"] is None or meta["item_ids"] is None:
        return data
    return data.reindex(meta["user_ids"], meta["item_ids"])


# ------------------------------------------------------------------ split


def cmd_split(cfg):
    _need(cfg, "input", "train_out", "test_out")
    data = _load(cfg, "input")
    if cfg["top_items"] or cfg["top_users"]:
        data = subsample_top(data, cfg["top_items"] or data.n_items, cfg["top_users"] or data.n_users)
    train, test = temporal_split(data, cfg["train_fraction"])
    movielens = cfg["format"] == "movielens" or (
        cfg["format"] is None and "::" in Path(cfg["input"]).read_text(encoding="latin-1")[:4096]
    )
    writer = write_movielens if movielens else write_event_log
    writer(train, cfg["train_out"])
    writer(test, cfg["test_out"])
    print(f"train\t{train.n_obs}\ntest\t{test.n_obs}")


# ------------------------------------------------------------------ fit


def _fit(cfg, train):
    kind = cfg["model"]
    history = []
    if kind == "constant":
        model = rg.ConstantModel(rg.fit_constant(train))
        history.append({"mu": model.mu})
    elif kind == "mp":
        model = rg.fit_mp(train, tol=cfg["tol"], max_iter=cfg["max_iter"])
        history = [{"iter": i + 1, "mu": h[0], "var_alpha": h[1], "var_b": h[2], "var_noise": h[3]}
                   for i, h in enumerate(model.history)]
    elif kind == "ireg":
        c = _c_penalty(cfg, train)
        model = rg.fit_ireg(train, c)
        history.append({"c_penalty": c, "max_grad": float(np.max(model.grad_norms, initial=0.0))})
    elif kind == "iis":
        model = bl.fit_iis(train, cfg["iis_variant"])
        history.append({"variant": model.variant})
    elif kind == "plsi":
        model = bl.fit_plsi(train, cfg["k_latent"], tol=cfg["tol"], max_iter=cfg["max_iter"],
                            seed=cfg["seed"])
        history = [{"iter": i + 1, "loglik": v} for i, v in enumerate(model.loglik_history)]
    elif kind == "bire":
        model = bl.fit_bire(train, cfg["k_factors"], n_samples=cfg["n_samples"],
                            n_em_iter=cfg["n_em_iter"], seed=cfg["seed"])
        history = model.history
    else:
        c = _c_penalty(cfg, train) if train.family == BERNOULLI else 1.0
        kwargs = dict(c_penalty=c, outer_tol=cfg["outer_tol"], max_outer=cfg["max_outer"],
                      em_tol=cfg["em_tol"], max_em=cfg["max_em"], glasso_tol=cfg["glasso_tol"],
                      n_threads=cfg["threads"], cg_tol=cfg["cg_tol"])
        if cfg["rho"] == "grid":
            grid = [float(r) for r in cfg["rho_grid"].split(",")]
            rho, scores = upg.select_rho(train, grid, **kwargs)
            for r in grid:
                history.append({"stage": "rho_grid", "rho": r, "heldout_score": scores[r]})
        else:
            rho = float(cfg["rho"])
        model = upg.fit_upg(train, rho=rho, **kwargs)
        history += [dict(r, rho=rho) for r in model.history]
    return model, history


def _c_penalty(cfg, train) -> float:
    if cfg["c_penalty"] == "cv":
        return rg.select_c_penalty(train, seed=cfg["seed"])
    return float(cfg["c_penalty"])


def _check_family(kind, family):
    need = {"mp": GAUSSIAN, "bire": GAUSSIAN, "ireg": BERNOULLI, "plsi": BERNOULLI}.get(kind)
    if need is not None and family != need:
        raise ConfigError(f"model {kind} needs {need} responses, got {family}")


def _write_history(history, path):
    keys = []
    for rec in history:
        for k in rec:
            if k not in keys:
                keys.append(k)
    with open(path, "w") as fh:
        fh.write("\t".join(keys) + "\n")
        for rec in history:
            fh.write("\t".join(_cell(rec.get(k)) for k in keys) + "\n")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def cmd_fit(cfg):
    _need(cfg, "model", "train", "model_out")
    train = _load(cfg, "train")
    _check_family(cfg["model"], train.family)
    model, history = _fit(cfg, train)
    persist.save_model(model, cfg["model_out"], train.family, train.user_ids, train.item_ids)
    _write_history(history, _aside(cfg["model_out"], ".fitlog.tsv"))
    print(f"wrote\t{cfg['model_out']}")


# ------------------------------------------------------------------ predict / evaluate


def _predict(model, data):
    x = data.covariates[data.users]
    return np.asarray(model.predict_many(data.users, data.items, x), dtype=float)


def cmd_predict(cfg):
    _need(cfg, "model_in", "test", "out")
    model, meta = persist.load_model(cfg["model_in"])
    test = _restrict(_load(cfg, "test"), meta)
    pred = _predict(model, test)
    with open(cfg["out"], "w") as fh:
        fh.write("user_id\titem_id\tprediction\n")
        for u, j, p in zip(test.users, test.items, pred):
            fh.write(f"{test.user_ids[u]}\t{test.item_ids[j]}\t{float(p)!r}\n")
    print(f"wrote\t{cfg['out']}\t{len(pred)}")


def cmd_evaluate(cfg):
    _need(cfg, "model_in", "report_out")
    model, meta = persist.load_model(cfg["model_in"])
    out = Path(cfg["report_out"])
    if meta["family"] == GAUSSIAN:
        if cfg["log"] is not None:
            raise ConfigError("randomized-log evaluation needs a bernoulli model")
        _need(cfg, "test")
        test = _restrict(_load(cfg, "test"), meta)
        if test.family != GAUSSIAN:
            raise ConfigError("gaussian model evaluated on non-gaussian data")
        if test.n_obs == 0:
            raise ConfigError("test set is empty")
        pred = _predict(model, test)
        report = ev.EvalReport(meta["model"], test.n_obs, ev.rmse(pred, test.responses),
                               ev.mae(pred, test.responses))
        if _figures(cfg):
            plots.rmse_bars({meta["model"]: report.rmse}, _aside(out, ".rmse.png"))
    else:
        _need(cfg, "log", "train")
        train = _restrict(_load(cfg, "train"), meta)
        n_items = len(meta["item_ids"])
        rlog = ev.read_randomized_log(cfg["log"], train.user_ids, train.item_ids[:n_items],
                                      train.covariates)
        policy = ev.ModelPolicy(model, n_items, train.covariates)
        baseline = ev.RandomPolicy(train.n_users, n_items, seed=cfg["seed"])
        s1 = ev.click_estimate(rlog, policy)
        s2 = ev.click_estimate(rlog, baseline)
        point, lo, hi = ev.bootstrap_lift(rlog, policy, baseline, cfg["n_boot"], cfg["seed"])
        report = ev.EvalReport(meta["model"], len(rlog), s_estimate=s1, baseline_s=s2,
                               lift_vs_baseline=point, bootstrap_ci=(lo, hi))
    report.write(out)
    print("\t".join(ev.EvalReport.TSV_FIELDS))
    print(report.tsv_row())


def online_replay(model: upg.UpgModel, test):
    """Predict each test observation in time order, then fold it into the user's posterior."""
    order = np.argsort(test.timestamps, kind="stable")
    pred = np.empty(len(order))
    for pos, i in enumerate(order):
        u, j = int(test.users[i]), int(test.items[i])
        x = test.covariates[u]
        if j < model.n_items:
            pred[pos] = upg.predict(model, u, x, j)
            upg.online_update(model, u, j, float(test.responses[i]), x)
        else:
            pred[pos] = model.predict_many(np.array([u]), np.array([j]), x[None, :])[0]
    return pred, test.responses[order]


def cmd_online_replay(cfg):
    _need(cfg, "model_in", "test", "report_out")
    model, meta = persist.load_model(cfg["model_in"])
    if meta["model"] != "upg":
        raise ConfigError("online replay needs a upg model")
    test = _restrict(_load(cfg, "test"), meta)
    if test.n_obs == 0:
        raise ConfigError("test set is empty")
    batch = _predict(model, test)
    pred, truth = online_replay(model, test)
    report = ev.EvalReport("upg-online", test.n_obs, ev.rmse(pred, truth), ev.mae(pred, truth))
    out = Path(cfg["report_out"])
    report.write(out)
    if _figures(cfg):
        plots.prequential_curve(pred - truth, _aside(out, ".prequential.png"),
                                ev.rmse(batch, test.responses))
    print("\t".join(ev.EvalReport.TSV_FIELDS))
    print(report.tsv_row())


def cmd_export_graph(cfg):
    _need(cfg, "model_in", "out")
    model, meta = persist.load_model(cfg["model_in"])
    if meta["model"] != "upg":
        raise ConfigError("graph export needs a upg model")
    item_ids = meta["item_ids"] or tuple(str(i) for i in range(model.n_items))
    n_edges = gl.write_graph(model.omega, cfg["out"], item_ids)
    pc = gl.partial_correlations(model.omega)
    rows = gl.top_pairs(pc, cfg["top_k"], item_ids)
    with open(_aside(cfg["out"], ".top.txt"), "w") as fh:
        fh.write("rank\titem_a\titem_b\tpartial_correlation\n")
        for rank, (a, b, v) in enumerate(rows, start=1):
            line = f"{rank}\t{a}\t{b}\t{v:.4f}"
            fh.write(line + "\n")
            print(line)
    if _figures(cfg):
        plots.partial_correlation_heatmap(pc, _aside(cfg["out"], ".heatmap.png"))
    print(f"edges\t{n_edges}")


def cmd_simulate_log(cfg):
    _need(cfg, "model_in", "train", "out")
    model, meta = persist.load_model(cfg["model_in"])
    if meta["family"] != BERNOULLI:
        raise ConfigError("click simulation needs a bernoulli model")
    train = _restrict(_load(cfg, "train"), meta)
    n_items = len(meta["item_ids"])
    n_users = train.n_users
    users = np.repeat(np.arange(n_users), n_items)
    items = np.tile(np.arange(n_items), n_users)
    probs = np.clip(model.predict_many(users, items, train.covariates[users]), 0.0, 1.0)
    rlog = ev.simulate_randomized_log(probs.reshape(n_users, n_items), cfg["t_visits"], cfg["seed"])
    rlog.user_ids = train.user_ids
    rlog.item_ids = train.item_ids[:n_items]
    rlog.write(cfg["out"])
    print(f"wrote\t{cfg['out']}\t{len(rlog)}\tclicks\t{int(rlog.clicked.sum())}")


COMMANDS = {
    "split": cmd_split,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "online-replay": cmd_online_replay,
    "export-graph": cmd_export_graph,
    "simulate-log": cmd_simulate_log,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="upgrec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__name__.replace("cmd_", "").replace("_", " "))
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("-v", "--verbose", action="store_true")
        for key in OPTIONS:
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        COMMANDS[args.command](cfg)
    except (ConfigError, ValueError, OSError, IndexError, KeyError) as exc:
        print(f"upgrec {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
