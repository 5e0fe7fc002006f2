"""``mcre`` command-line entry point.

Every subcommand's parameters may come from flags or from a JSON file given
with ``--config``; flags win. Machine-readable results (JSON or CSV) go to
``--out`` or stdout, human-oriented messages to stderr. Exit status is 0 on
success, 1 on a runtime failure and 2 on bad usage or invalid input.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from mcre import agent as mcrq
from mcre import bounds, suite
from mcre.data import (TIERS, dataset_pair_mask, dumps_dataset, fit_empirical_model,
                       generate_dataset, load_dataset, model_deviation)
from mcre.envs import GRIDWORLD_ID, env_ids, make_env
from mcre.errors import (ConfigurationError, DatasetIntegrityError, DatasetParseError,
                         DimensionError, InvalidConfigError, McreError, MissingSupportError,
                         ValidationError)
from mcre.mdp import check_policy, exact_q
from mcre.operators import (MreConfig, bc_table, fixed_point, mcre_policy_iteration,
                            upsilon_threshold)

log = logging.getLogger("mcre")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
USAGE_ERRORS = (ValidationError, InvalidConfigError, ConfigurationError, DimensionError,
                DatasetParseError, DatasetIntegrityError, MissingSupportError)


class UsageError(Exception):
    pass


def _float_list(text):
    return [float(x) for x in str(text).split(",") if x.strip()]


def _int_list(text):
    return [int(x) for x in str(text).split(",") if x.strip()]


# name -> (default, argparse type, help); REQUIRED marks parameters with no default
REQUIRED = object()

COMMON = {
    "seed": (0, int, "root random seed"),
    "jobs": (None, int, "worker processes (default: number of CPUs)"),
    "out": (None, str, "output path (stdout when omitted, where allowed)"),
}

TRAIN_PARAMS = {
    "dataset": (REQUIRED, str, "dataset file (mcre-ds/1)"),
    "preset": (None, str, "hyperparameter preset, e.g. hopper-e"),
    "upsilon": (None, float, "weight of the TD-corrected target"),
    "omega": (None, float, "behaviour-cloning penalty in the critic target"),
    "alpha": (None, float, "Q-term weight in the actor loss"),
    "gamma": (None, float, "discount"),
    "tau": (None, float, "target-network blending rate"),
    "policy_delay": (None, int, "critic steps per actor step"),
    "batch_size": (None, int, "minibatch size"),
    "steps": (None, int, "gradient steps"),
    "eval_interval": (None, int, "steps between evaluations"),
    "eval_episodes": (None, int, "episodes per evaluation"),
    "hidden": (None, str, "hidden layer sizes, comma separated"),
    "lr": (None, float, "learning rate"),
}

COMMANDS = {
    "gen-data": {
        "env": (REQUIRED, str, f"environment id ({', '.join(env_ids())})"),
        "tier": (REQUIRED, str, f"behaviour tier ({', '.join(TIERS)})"),
        "n": (REQUIRED, int, "number of transitions"),
    },
    "solve": {
        "env": (GRIDWORLD_ID, str, "tabular environment id"),
        "dataset": (None, str, "dataset to fit the model from (and to take pairs from)"),
        "exact": (False, bool, "use the true model even when a dataset is given"),
        "policy": ("expert", str, "expert | random | path to a JSON list of actions"),
        "upsilon": (0.0, float, "TD-correction weight"),
        "omega": (0.0, float, "behaviour-cloning weight"),
        "tol": (1e-10, float, "fixed-point accuracy (sup norm)"),
        "strict": (False, bool, "fail on unvisited pairs instead of filling them"),
    },
    "train": TRAIN_PARAMS,
    "eval": {
        "checkpoint": (REQUIRED, str, "checkpoint directory written by train"),
        "episodes": (10, int, "evaluation episodes"),
        "dataset": (None, str, "dataset for the action-divergence measurement"),
    },
    "verify": {
        "cells": ([], "append", "only run cells matching key=value[,key=value] (repeatable)"),
        "grid": ("default", str, "default | acceptance"),
        "fault_h_scale": (1.0, float, argparse.SUPPRESS),
    },
    "ablate": {
        "dataset": (REQUIRED, str, "dataset file"),
        "upsilon": ("0.0", _float_list, "comma-separated upsilon grid"),
        "omega": ("0.0", _float_list, "comma-separated omega grid"),
        "alpha": ("2.5", _float_list, "comma-separated alpha grid"),
        "seeds": ("0", _int_list, "comma-separated seeds"),
        "steps": (None, int, "gradient steps per cell (continuous datasets)"),
        "eval_interval": (None, int, "steps between evaluations"),
        "eval_episodes": (None, int, "episodes per evaluation"),
        "batch_size": (None, int, "minibatch size"),
        "hidden": (None, str, "hidden layer sizes, comma separated"),
    },
    "bounds-report": {
        "cells": ([], "append", "only run cells matching key=value[,key=value] (repeatable)"),
    },
}


def build_parser():
    parser = argparse.ArgumentParser(prog="mcre", description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=argparse.SUPPRESS,
                        help="JSON file of parameters (flags override)")
    for name, (_, typ, hlp) in COMMON.items():
        parser.add_argument(f"--{name}", type=typ, default=argparse.SUPPRESS, help=hlp)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for cmd, params in COMMANDS.items():
        p = sub.add_parser(cmd, help=f"{cmd} subcommand")
        p.add_argument("--config", default=argparse.SUPPRESS,
                       help="JSON file of parameters (flags override)")
        for name, (_, typ, hlp) in {**COMMON, **params}.items():
            flag = "--" + name.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, dest=name, action="store_true", default=argparse.SUPPRESS,
                               help=hlp)
            elif typ == "append":
                p.add_argument(flag, dest=name, action="append", default=argparse.SUPPRESS,
                               help=hlp)
            else:
                p.add_argument(flag, dest=name, type=typ, default=argparse.SUPPRESS, help=hlp)
    return parser


def resolve_params(command, flags):
    """Merge defaults, the JSON config file and explicit flags, in that order."""
    spec = {**COMMON, **COMMANDS[command]}
    merged = {name: d for name, (d, _, _) in spec.items()}
    cfg_path = flags.pop("config", None)
    if cfg_path is not None:
        try:
            with open(cfg_path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {cfg_path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        doc = {k.replace("-", "_"): v for k, v in doc.items()}
        unknown = sorted(set(doc) - set(spec))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {unknown}")
        for key, value in doc.items():
            typ = spec[key][1]
            if callable(typ) and typ not in (str, bool) and isinstance(value, str):
                value = typ(value)
            merged[key] = value
    merged.update(flags)
    missing = [k for k, v in merged.items() if v is REQUIRED]
    if missing:
        raise UsageError("missing required parameter(s): "
                         + ", ".join("--" + k.replace("_", "-") for k in missing))
    for key in ("upsilon", "omega", "alpha"):
        if command == "ablate" and not isinstance(merged[key], list):
            merged[key] = _float_list(merged[key]) if isinstance(merged[key], str) \
                else [float(x) for x in np.atleast_1d(merged[key])]
    if command == "ablate" and not isinstance(merged["seeds"], list):
        merged["seeds"] = _int_list(merged["seeds"]) if isinstance(merged["seeds"], str) \
            else [int(x) for x in np.atleast_1d(merged["seeds"])]
    if merged["jobs"] is None:
        merged["jobs"] = os.cpu_count() or 1
    if merged["jobs"] < 1:
        raise UsageError("--jobs must be >= 1")
    return merged


# ---------------------------------------------------------------------------
# output helpers


def _dumps(doc):
    return json.dumps(suite._plain(doc), sort_keys=True, indent=1, allow_nan=True) + "\n"


def _emit(text, out):
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        with open(out, "w") as fh:
            fh.write(text)


def _csv(rows, columns):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow(["" if row.get(c) is None else _cell_text(row.get(c)) for c in columns])
    return buf.getvalue()


def _cell_text(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(p):
    if p["out"] is None:
        raise UsageError("gen-data needs --out")
    if p["tier"] not in TIERS:
        raise UsageError(f"unknown tier {p['tier']!r}; known: {sorted(TIERS)}")
    ds = generate_dataset(p["env"], p["tier"], p["n"], p["seed"])
    text = dumps_dataset(ds)
    with open(p["out"], "w") as fh:
        fh.write(text)
    returns = ds.episode_returns()
    summary = {"path": p["out"], "env_id": ds.env_id, "tier": p["tier"], "seed": p["seed"],
               "count": ds.count, "episodes": int(len(returns)),
               "mean_episode_return": float(np.mean(returns)) if len(returns) else None,
               "sha256": hashlib.sha256(text.encode()).hexdigest()}
    sys.stdout.write(_dumps(summary))
    return 0


# ---------------------------------------------------------------------------
# solve


def _resolve_policy(spec, env, seed):
    if spec == "expert":
        return env.expert_table()
    if spec == "random":
        return np.random.default_rng(seed).integers(0, env.n_actions, size=env.n_states)
    try:
        with open(spec) as fh:
            pi = np.asarray(json.load(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"policy must be expert, random or a JSON file ({exc})") from exc
    return check_policy(env.mdp, pi)


def solve_report(p):
    env = make_env(p["env"])
    if not hasattr(env, "mdp"):
        raise UsageError("solve needs a tabular environment")
    mdp = env.mdp
    ds = load_dataset(p["dataset"]) if p["dataset"] else None
    if ds is not None and ds.env_id != env.env_id:
        raise UsageError(f"dataset is for {ds.env_id}, not {env.env_id}")
    pi = _resolve_policy(p["policy"], env, p["seed"])
    cfg = MreConfig(upsilon=p["upsilon"], omega=p["omega"], gamma=mdp.gamma)
    empirical = ds is not None and not p["exact"]
    if empirical:
        em = fit_empirical_model(ds, mdp)
        model = em.to_mdp(strict=p["strict"])
    else:
        model = mdp
    if not cfg.theorem_condition_met:
        log.warning("upsilon=%g is above the threshold %.6g: the gap bounds are undefined",
                    cfg.upsilon, upsilon_threshold(cfg.gamma))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rep = fixed_point(model, pi, cfg, tol=p["tol"])
    q_pi = exact_q(mdp, pi)
    pairs = dataset_pair_mask(ds, mdp.n_states, mdp.n_actions) if ds is not None \
        else np.ones((mdp.n_states, mdp.n_actions), dtype=bool)
    states = np.unique(ds.states) if ds is not None else np.arange(mdp.n_states)
    idx = np.arange(mdp.n_states)
    q_gap = float(np.max(np.abs(rep.q_star - q_pi)[pairs]))
    v_gap = float(np.max(np.abs(rep.q_star[idx, pi] - q_pi[idx, pi])[states]))
    max_bc = float(np.max(bc_table(mdp.action_embedding, pi, cfg.omega)[pairs]))
    report = {"model": "empirical" if empirical else "exact", "upsilon": cfg.upsilon,
              "omega": cfg.omega, "gamma": cfg.gamma, "condition_met": cfg.theorem_condition_met,
              "iterations": rep.iterations, "lhs": q_gap, "v_gap": v_gap, "max_bc": max_bc,
              "rhs": None, "slack": None, "v_rhs": None}
    if empirical:
        max_dev = float(np.max(model_deviation(em, mdp)))
        report["max_dev"] = max_dev
        report["v_rhs"] = bounds.v_gap_bound_empirical(mdp.gamma, max_dev, mdp.r_max)
    else:
        report["v_rhs"] = 0.0
    if cfg.theorem_condition_met:
        rhs = (bounds.q_gap_bound_empirical(cfg, max_bc, report["max_dev"], mdp.r_max) if empirical
               else bounds.q_gap_bound_exact(cfg, max_bc))
        report["rhs"] = rhs
        report["slack"] = rhs - q_gap
    return report


def cmd_solve(p):
    _emit(_dumps(solve_report(p)), p["out"])
    return 0


# ---------------------------------------------------------------------------
# train / eval


def _train_config(p, seed):
    doc = {}
    if p.get("preset"):
        upsilon, omega, alpha = mcrq.PRESETS.get(p["preset"], (None, None, None))
        if upsilon is None:
            raise UsageError(f"unknown preset {p['preset']!r}; known: {sorted(mcrq.PRESETS)}")
        doc.update(upsilon=upsilon, omega=omega, alpha=alpha)
    renames = {"steps": "total_steps"}
    for key in ("upsilon", "omega", "alpha", "gamma", "tau", "policy_delay", "batch_size",
                "steps", "eval_interval", "eval_episodes", "hidden", "lr"):
        if p.get(key) is not None:
            doc[renames.get(key, key)] = p[key]
    if isinstance(doc.get("hidden"), str):
        doc["hidden"] = _int_list(doc["hidden"])
    doc["seed"] = seed
    return mcrq.McrqConfig.from_dict(doc)


def _final_metrics(ag, history, ds, env, cfg):
    if history.rows and history.rows[-1]["step"] == ag.step:
        last = history.rows[-1]
        return last["eval_return"], last["normalized_score"], last["action_divergence"]
    seed = int(np.random.default_rng(cfg.seed).integers(2**62))
    res = mcrq.evaluate(env, ag.policy(), cfg.eval_episodes, seed)
    return res["mean_return"], res["normalized_score"], mcrq.action_divergence(ds, ag.policy())


def run_training(dataset_path, cfg):
    ds = load_dataset(dataset_path)
    env = make_env(ds.env_id)
    ag, history = mcrq.train(ds, cfg, env)
    ret, score, div = _final_metrics(ag, history, ds, env, cfg)
    return ag, history, {"final_return": ret, "final_score": score, "divergence": div,
                         "env_id": env.env_id}


def cmd_train(p):
    if p["out"] is None:
        raise UsageError("train needs --out (checkpoint directory)")
    cfg = _train_config(p, p["seed"])
    log.info("training with %s", cfg.to_dict())
    try:
        ag, history, final = run_training(p["dataset"], cfg)
    except McreError as exc:
        state = getattr(exc, "state", None)
        if state is not None:
            mcrq.save_agent(p["out"], state, cfg)
            log.error("training diverged; last good checkpoint written to %s", p["out"])
        raise
    mcrq.save_agent(p["out"], ag, cfg)
    history.save(os.path.join(p["out"], "log.csv"))
    summary = {"config": cfg.to_dict(), "checkpoint": p["out"], "env_id": final.pop("env_id"),
               "steps": ag.step, **final}
    with open(os.path.join(p["out"], "summary.json"), "w") as fh:
        fh.write(_dumps(summary))
    sys.stdout.write(_dumps(summary))
    return 0


def cmd_eval(p):
    ag, cfg = mcrq.load_agent(p["checkpoint"])
    ds = load_dataset(p["dataset"]) if p["dataset"] else None
    env = make_env(ds.env_id) if ds is not None else make_env(_checkpoint_env(p["checkpoint"]))
    res = mcrq.evaluate(env, ag.policy(), p["episodes"], p["seed"])
    if ds is not None:
        res["action_divergence"] = mcrq.action_divergence(ds, ag.policy())
    res["env_id"] = env.env_id
    _emit(_dumps(res), p["out"])
    return 0


def _checkpoint_env(directory):
    summary = os.path.join(directory, "summary.json")
    if os.path.exists(summary):
        with open(summary) as fh:
            doc = json.load(fh)
        env_id = doc.get("env_id")
        if env_id:
            return env_id
    return "pointmass-1d-v1"


# ---------------------------------------------------------------------------
# verify / bounds-report


def _filters(p):
    try:
        return [suite.parse_filter(f) for f in p["cells"]]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_verify(p):
    grids = {"default": suite.default_grid, "acceptance": suite.acceptance_grid}
    if p["grid"] not in grids:
        raise UsageError(f"unknown grid {p['grid']!r}; known: {sorted(grids)}")
    cells = suite.select(grids[p["grid"]](), _filters(p))
    if not cells:
        raise UsageError("no cells match the filter")
    results = suite.run_cells(cells, jobs=p["jobs"], h_scale=p["fault_h_scale"])
    failed = [i for i, r in enumerate(results) if not r["passed"]]
    report = {"passed": not failed, "n_cells": len(results), "failed": failed, "cells": results}
    _emit(_dumps(report), p["out"])
    for i in failed:
        print(f"FAIL cell {i}: {results[i]['kind']} {json.dumps(results[i]['params'], sort_keys=True)}",
              file=sys.stderr)
    return 0 if not failed else 1


BOUND_COLUMNS = ("kind", "params", "check", "lhs", "rhs", "slack", "condition_met")


def _bound_rows(result):
    kind, params = result["kind"], json.dumps(result["params"], sort_keys=True)
    if "error" in result:
        return [{"kind": kind, "params": params, "check": "error", "condition_met": None}]
    if kind == "theorem2":
        cm = result["condition_met"]
        return [{"kind": kind, "params": params, "check": "q_gap", "lhs": result["q_gap"],
                 "rhs": result["q_bound"], "condition_met": cm},
                {"kind": kind, "params": params, "check": "v_gap", "lhs": result["v_gap"],
                 "rhs": 0.0, "condition_met": cm}]
    if kind == "theorem3":
        return [{"kind": kind, "params": params, "check": "q_gap", "lhs": result["q_gap"],
                 "rhs": result["q_bound"], "condition_met": True},
                {"kind": kind, "params": params, "check": "v_gap", "lhs": result["v_gap"],
                 "rhs": result["v_bound"], "condition_met": True}]
    return [{"kind": kind, "params": params, "check": "suboptimality",
             "lhs": abs(result["suboptimality"]), "rhs": result["bound"], "condition_met": True}]


def cmd_bounds_report(p):
    cells = (suite.theorem2_grid() + suite.theorem3_grid() + suite.suboptimality_grid())
    cells = suite.select(cells, _filters(p))
    if not cells:
        raise UsageError("no cells match the filter")
    rows = []
    for res in suite.run_cells(cells, jobs=p["jobs"]):
        for row in _bound_rows(res):
            if row.get("lhs") is not None and row.get("rhs") is not None:
                row["slack"] = row["rhs"] - row["lhs"]
            rows.append(row)
    _emit(_csv(rows, BOUND_COLUMNS), p["out"])
    return 0


# ---------------------------------------------------------------------------
# ablate

ABLATE_COLUMNS = ("upsilon", "omega", "alpha", "seed", "final_score", "divergence", "q_gap",
                  "q_bound", "condition_met", "mean_td_target", "status")


def tabular_ablation_cell(ds, upsilon, omega, alpha, seed):
    env = make_env(ds.env_id)
    mdp = env.mdp
    cfg = MreConfig(upsilon=upsilon, omega=omega, gamma=mdp.gamma)
    model = fit_empirical_model(ds, mdp).to_mdp(strict=False)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        pi, _ = mcre_policy_iteration(model, cfg)
        q_star = fixed_point(mdp, pi, cfg).q_star
    q_pi = exact_q(mdp, pi)
    # the TD-target column uses one reference (policy, Q) for every cell so it
    # isolates the effect of (upsilon, omega)
    ref_pi = env.expert_table()
    pairs = dataset_pair_mask(ds, mdp.n_states, mdp.n_actions)
    max_bc = float(np.max(bc_table(mdp.action_embedding, pi, omega)[pairs]))
    row = {"upsilon": upsilon, "omega": omega, "alpha": alpha, "seed": seed,
           "final_score": env.reference_returns.normalize(env.expected_return(pi)),
           "divergence": float(np.mean(pi[ds.states] != ds.actions)),
           "q_gap": float(np.max(np.abs(q_star - q_pi)[pairs])),
           "condition_met": cfg.theorem_condition_met,
           "mean_td_target": tabular_mean_td_target(ds, mdp, ref_pi, exact_q(mdp, ref_pi), cfg),
           "status": "ok"}
    row["q_bound"] = bounds.q_gap_bound_exact(cfg, max_bc) if cfg.theorem_condition_met else None
    return row


def tabular_mean_td_target(ds, mdp, pi, q, cfg, batch=4096):
    """Mean sampled ``Z`` target over the first ``batch`` dataset rows for a fixed ``q``."""
    s, a = ds.states[:batch], ds.actions[:batch]
    r, s2 = ds.rewards[:batch], ds.next_states[:batch]
    not_done = 1.0 - ds.dones[:batch].astype(np.float64)
    boot = q[s2, pi[s2]]
    y1 = r + not_done * cfg.gamma * boot
    y2 = r + not_done * cfg.gamma * (boot - (r + cfg.gamma * boot - q[s, pi[s]]))
    emb = mdp.action_embedding
    diff = emb[pi[s]] - emb[a]
    bc = cfg.omega * np.sum(diff * diff, axis=1)
    return float(np.mean((1.0 - cfg.upsilon) * y1 + cfg.upsilon * y2 - cfg.gamma * bc))


def continuous_ablation_cell(dataset_path, p, upsilon, omega, alpha, seed):
    q = {"upsilon": upsilon, "omega": omega, "alpha": alpha}
    for key in ("steps", "eval_interval", "eval_episodes", "batch_size", "hidden"):
        q[key] = p.get(key)
    cfg = _train_config(q, seed)
    _, _, final = run_training(dataset_path, cfg)
    return {"upsilon": upsilon, "omega": omega, "alpha": alpha, "seed": seed,
            "final_score": final["final_score"], "divergence": final["divergence"], "status": "ok"}


def _ablate_one(args):
    dataset_path, p, ups, om, al, seed, tabular = args
    try:
        if tabular:
            return tabular_ablation_cell(load_dataset(dataset_path), ups, om, al, seed)
        return continuous_ablation_cell(dataset_path, p, ups, om, al, seed)
    except (McreError, FloatingPointError) as exc:
        return {"upsilon": ups, "omega": om, "alpha": al, "seed": seed,
                "status": f"error: {type(exc).__name__}: {exc}"}


def cmd_ablate(p):
    ds = load_dataset(p["dataset"])
    tabular = ds.is_tabular
    jobs = [(p["dataset"], p, u, w, a, s, tabular)
            for u in p["upsilon"] for w in p["omega"] for a in p["alpha"] for s in p["seeds"]]
    if p["jobs"] > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=p["jobs"]) as pool:
            rows = list(pool.map(_ablate_one, jobs))
    else:
        rows = [_ablate_one(j) for j in jobs]
    for row in rows:
        if row["status"] != "ok":
            log.warning("cell failed: %s", row["status"])
    _emit(_csv(rows, ABLATE_COLUMNS), p["out"])
    return 0


HANDLERS = {"gen-data": cmd_gen_data, "solve": cmd_solve, "train": cmd_train, "eval": cmd_eval,
            "verify": cmd_verify, "ablate": cmd_ablate, "bounds-report": cmd_bounds_report}


def _setup_logging():
    name = os.environ.get("MCRE_LOG_LEVEL", "warn").strip().lower()
    level = LOG_LEVELS.get(name)
    if level is None:
        raise UsageError(f"MCRE_LOG_LEVEL must be one of error, warn, info, debug (got {name!r})")
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s",
                        force=True)
    logging.captureWarnings(True)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k != "command"}
    try:
        _setup_logging()
        params = resolve_params(args.command, flags)
        return HANDLERS[args.command](params)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mcre {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except USAGE_ERRORS as exc:
        print(f"mcre {args.command}: invalid input: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"mcre {args.command}: invalid input: {exc}", file=sys.stderr)
        return 2
    except (McreError, OSError, FloatingPointError) as exc:
        print(f"mcre {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
