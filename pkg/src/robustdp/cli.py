"""Command-line front end.

Reports go to stdout as JSON with sorted keys unless ``--csv`` or ``--text``
is given; wall time goes to stderr so the payload is reproducible byte for
byte. Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import time
from importlib import metadata

import numpy as np

from . import bellman, dpp, learner
from .fixtures import (
    EX_5_3_CONVEX,
    EX_5_3_FINITE,
    FIXTURE_IDS,
    fixture,
    learner_fixture,
    markov_grid,
)
from .model import ModelError, load_model, validate
from .policy import (
    INFO_CLASSES,
    STATIONARY,
    EvaluationError,
    evaluate_exact,
    evaluate_mc,
    greedy_from_value,
    robust_evaluate,
    stationary_adversary,
)
from .policy_files import adversary_from_dict, load_json, policy_from_dict

DOMAIN_ERRORS = (ModelError, EvaluationError, bellman.SolverError, learner.LearnerError, ValueError, KeyError,
                 OSError, ArithmeticError)


class UsageError(Exception):
    """Bad flag combination detected after parsing."""


def version() -> str:
    try:
        return f"robustdp {metadata.version('artifact')}"
    except metadata.PackageNotFoundError:
        return "robustdp (uninstalled)"


# ---------------------------------------------------------------- rendering


def _plain(obj):
    """JSON-ready copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else repr(value)
    return obj


def _flatten(obj, prefix: str = ""):
    if isinstance(obj, dict):
        for k in sorted(obj):
            yield from _flatten(obj[k], f"{prefix}.{k}" if prefix else str(k))
    elif isinstance(obj, list) and any(isinstance(v, (dict, list)) for v in obj):
        for i, v in enumerate(obj):
            yield from _flatten(v, f"{prefix}[{i}]")
    else:
        yield prefix, obj


def render(report: dict, fmt: str, text: str | None = None, csv_text: str | None = None) -> str:
    if fmt == "text":
        if text is not None:
            return text
        return "".join(f"{k}: {json.dumps(v)}\n" for k, v in _flatten(report["result"]))
    if fmt == "csv":
        if csv_text is not None:
            return csv_text
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["key", "value"])
        for k, v in _flatten(report["result"]):
            writer.writerow([k, json.dumps(v)])
        return out.getvalue()
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------- helpers


def _need(args, name: str):
    value = getattr(args, name)
    if value is None:
        raise UsageError(f"--{name.replace('_', '-')} is required for {args.command}")
    return value


def _model(args):
    model = load_model(_need(args, "model"))
    if args.gamma is not None:
        model = model.replace(gamma=args.gamma)
    return model


def _by_state(model, values) -> dict:
    return {s: float(v) for s, v in zip(model.states, values)}


def _scales(model, values) -> dict:
    """Values on the stored [0, 1] reward scale and on the model's reporting scale."""
    return {"normalized": _by_state(model, values),
            "paper": _by_state(model, model.reward_map.value(values, model.gamma))}


def _scalar_scales(model, value: float) -> dict:
    return {"normalized": float(value), "paper": float(model.reward_map.value(value, model.gamma))}


def _mu(model, args) -> np.ndarray:
    if args.initial is None:
        return np.full(model.n_states, 1.0 / model.n_states)
    if args.initial not in model.states:
        raise ModelError(f"--initial: unknown state {args.initial!r}")
    return model.point_mass(args.initial)


# ---------------------------------------------------------------- commands


def cmd_validate(args) -> tuple[dict, int]:
    try:
        model = load_model(_need(args, "model"))
    except ModelError as exc:
        return {"valid": False, "diagnostics": [str(exc)]}, 1
    problems = validate(model)
    return {"valid": not problems, "diagnostics": problems, "states": len(model.states),
            "actions": len(model.actions), "rectangularity": model.ambiguity.rectangularity,
            "kind": model.ambiguity.kind}, (1 if problems else 0)


def cmd_solve(args) -> tuple[dict, int]:
    model = _model(args)
    solver = {"supinf": bellman.solve_supinf, "infsup": bellman.solve_infsup, "q": bellman.solve_q}[args.equation]
    report = solver(model, args.tol)
    out = {"equation": args.equation, "iterations": report.iterations, "residual": report.residual,
           "tolerance": report.tolerance}
    if args.equation == "q":
        q = report.fixed_point
        out["q"] = {s: {a: float(q[i, j]) for j, a in enumerate(model.actions)} for i, s in enumerate(model.states)}
        out["value"] = _scales(model, q.max(axis=1))
    else:
        out["value"] = _scales(model, report.fixed_point)
        if args.equation == "supinf":
            greedy = greedy_from_value(report.fixed_point, model, report.residual)
            out["greedy_rule"] = {s: greedy.decide(greedy.initial, i).tolist() for i, s in enumerate(model.states)}
    return out, 0


def cmd_evaluate(args) -> tuple[dict, int]:
    model = _model(args)
    policy = policy_from_dict(load_json(_need(args, "policy")), model)
    adversary = adversary_from_dict(load_json(_need(args, "adversary")), model)
    mu = _mu(model, args)
    if args.mc_samples is not None:
        seed = _need(args, "seed")
        result = evaluate_mc(model, policy, adversary, mu, args.mc_samples, args.horizon_eps, seed)
    else:
        result = evaluate_exact(model, policy, adversary, mu, args.horizon_eps)
    return {"method": result.method, "value": _scalar_scales(model, result.value),
            "error_bound": result.error_bound * model.reward_map.scale, "meta": result.meta}, 0


def cmd_robust_eval(args) -> tuple[dict, int]:
    model = _model(args)
    policy = policy_from_dict(load_json(_need(args, "policy")), model)
    mu = _mu(model, args)
    result = robust_evaluate(model, policy, mu, args.tol, args.adversary_class)
    return {"adversary_class": result.adversary_class, "value": _scalar_scales(model, result.value),
            "lower": _scalar_scales(model, result.lower), "exact": result.exact, "meta": result.meta}, 0


def cmd_check_dpp(args) -> tuple[dict, int]:
    model = _model(args)
    mu = _mu(model, args)
    witnesses = None
    if args.policy is not None:
        witnesses = [policy_from_dict(load_json(args.policy), model)]
    controllers = [args.controller_info] if args.controller_info else list(INFO_CLASSES)
    adversaries = [args.adversary_info] if args.adversary_info else list(INFO_CLASSES)
    reports = []
    for ci in controllers:
        for ai in adversaries:
            profile = dpp.profile_for(model, ci, ai)
            reports.append(dpp.verify_numeric(model, profile, args.tol, witnesses, mu).to_dict())
    return {"reports": reports}, 0


def _witness_block(fx, name: str, tol: float) -> dict:
    model, policy = fx.model, fx.witnesses[name]
    cls = fx.adversary_class[name]
    robust = robust_evaluate(model, policy, fx.mu, tol, cls)
    block = {"adversary_class": cls, "robust_value": _scalar_scales(model, robust.value),
             "robust_lower": _scalar_scales(model, robust.lower), "exact": robust.exact}
    vs = {}
    for label, kernel in fx.kernels.items():
        value = evaluate_exact(model, policy, stationary_adversary(kernel), fx.mu).value
        vs[label] = _scalar_scales(model, value)
    block["vs_kernel"] = vs
    if fx.id in (EX_5_3_CONVEX, EX_5_3_FINITE) and cls != STATIONARY:
        block["vs_markov_grid"] = {
            adv.name: _scalar_scales(model, evaluate_exact(model, policy, adv, fx.mu).value)
            for adv in markov_grid(fx)
        }
    return block


def cmd_counterexample(args) -> tuple[dict, int]:
    fx = fixture(args.fixture_id, args.gamma)
    model = fx.model
    u = bellman.solve_supinf(model, args.tol).fixed_point
    reports = dpp.fixture_reports(fx, args.tol)
    out = {
        "fixture": fx.id,
        "gamma": model.gamma,
        "reward_map": {"scale": model.reward_map.scale, "shift": model.reward_map.shift},
        "initial": model.states[int(np.argmax(fx.mu))],
        "u_star": _scales(model, u),
        "bellman_value": _scalar_scales(model, float(fx.mu @ u)),
        "closed_forms": fx.expected,
        "witnesses": {name: _witness_block(fx, name, args.tol) for name in fx.witnesses},
        "dpp": {name: r.to_dict() for name, r in reports.items()},
    }
    return out, 0


def cmd_learn_sim(args) -> tuple[dict, int]:
    seed = _need(args, "seed")
    if args.model is not None:
        model, mu = load_model(args.model), None
    else:
        model, mu = learner_fixture()
    mode = learner.SampleSizeMode.parse(args.mode)
    gammas = [float(g) for g in args.gammas.split(",")] if args.gammas else ([args.gamma] if args.gamma else
                                                                              [0.9, 0.99, 0.999])
    seeds = list(range(seed, seed + args.seeds))
    table = learner.run_experiment(model, gammas, seeds, mode, mu, tol=args.tol)
    out = table.to_dict()
    if args.threshold_delta is not None:
        mu_ = np.full(model.n_states, 1.0 / model.n_states) if mu is None else mu
        diameter = int(table.meta["diameter"])
        n = learner.paper_threshold(diameter, model.n_states, model.n_actions, args.threshold_delta)
        config = learner.LearnerConfig.for_model(model, n, learner.SampleSizeMode(), diameter, args.tol)
        freqs = [learner.success_frequency(config, k, mu_, seeds) for k in learner.vertex_kernels(model)]
        out["threshold"] = {"delta": args.threshold_delta, "n": n, "m": config.m,
                            "min_success_frequency": min(freqs), "success_frequency": freqs}
    return out, 0, table.to_csv()


def cmd_diameter(args) -> tuple[dict, int]:
    model = _model(args)
    kernels = learner.vertex_kernels(model)
    exact = [learner.exact_diameter(k) for k in kernels]
    bound = [learner.uniform_hitting_bound(k) for k in kernels]
    return {"kernels": len(kernels), "exact": exact, "uniform_bound": bound,
            "diameter": max(exact), "communicating": all(math.isfinite(d) for d in exact)}, 0


def cmd_tables(args) -> tuple[dict, int]:
    rows = dpp.tables_dict()
    counts = {v: sum(r["verdict"] == v for r in rows) for v in (dpp.HOLDS, dpp.FAILS)}
    return {"cells": rows, "counts": counts}, 0, None, dpp.render_tables()


COMMANDS = {
    "validate": cmd_validate,
    "solve": cmd_solve,
    "evaluate": cmd_evaluate,
    "robust-eval": cmd_robust_eval,
    "check-dpp": cmd_check_dpp,
    "counterexample": cmd_counterexample,
    "learn-sim": cmd_learn_sim,
    "diameter": cmd_diameter,
    "tables": cmd_tables,
}


# ---------------------------------------------------------------- parser


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _gamma(text: str) -> float:
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError("gamma must lie in (0, 1)")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0.0:
        raise argparse.ArgumentTypeError("must be positive")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", help="model file (JSON)")
    common.add_argument("--policy", help="policy file (JSON)")
    common.add_argument("--gamma", type=_gamma, help="override the discount factor")
    common.add_argument("--tol", type=_positive_float, default=1e-9, help="solver tolerance (default 1e-9)")
    common.add_argument("--seed", type=_seed, help="random seed; required by every randomized command")
    common.add_argument("--mc-samples", type=_positive_int, help="Monte Carlo trajectories instead of exact")
    common.add_argument("--horizon-eps", type=_positive_float, default=1e-10,
                        help="truncation error for truncated or sampled evaluation")
    common.add_argument("--mode", default="practical:50", help="sample size mode: paper or practical:C")
    common.add_argument("--initial", help="start state (default uniform start distribution)")
    fmt = common.add_mutually_exclusive_group()
    fmt.add_argument("--csv", action="store_true", help="emit CSV")
    fmt.add_argument("--text", action="store_true", help="emit plain text")
    common.add_argument("--out", help="write the report to this file instead of stdout")

    parser = argparse.ArgumentParser(prog="robustdp", description="Robust MDP solver and DPP checker")
    parser.add_argument("--version", action="version", version=version())
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("validate", parents=[common], help="check a model file")
    p = sub.add_parser("solve", parents=[common], help="robust Bellman fixed point")
    p.add_argument("--equation", choices=("supinf", "infsup", "q"), default="supinf")
    p = sub.add_parser("evaluate", parents=[common], help="value of a policy against one adversary")
    p.add_argument("--adversary", help="adversary file (JSON)")
    p = sub.add_parser("robust-eval", parents=[common], help="worst-case value over an adversary class")
    p.add_argument("--class", dest="adversary_class", choices=INFO_CLASSES, default="history")
    p = sub.add_parser("check-dpp", parents=[common], help="certify or refute dynamic programming")
    p.add_argument("--controller-info", choices=INFO_CLASSES)
    p.add_argument("--adversary-info", choices=INFO_CLASSES)
    p = sub.add_parser("counterexample", parents=[common], help="reproduce a built-in counterexample")
    p.add_argument("fixture_id", choices=FIXTURE_IDS)
    p = sub.add_parser("learn-sim", parents=[common], help="explore-then-exploit gap experiment")
    p.add_argument("--gammas", help="comma-separated discount factors (default 0.9,0.99,0.999)")
    p.add_argument("--seeds", type=_positive_int, default=20, help="number of seeds starting at --seed")
    p.add_argument("--threshold-delta", type=_positive_float,
                   help="also report exploration success at the paper-mode threshold for this delta")
    sub.add_parser("diameter", parents=[common], help="diameter of every ambiguity vertex kernel")
    sub.add_parser("tables", parents=[common], help="the static 36-cell verdict map")
    return parser


def run(argv=None, stdout=None, stderr=None) -> int:
    stdout = sys.stdout if stdout is None else stdout
    stderr = sys.stderr if stderr is None else stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    fmt = "csv" if args.csv else "text" if args.text else "json"
    started = time.perf_counter()
    try:
        outcome = COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=stderr)
        return 2
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=stderr)
        return 1
    result, code = outcome[0], outcome[1]
    csv_text = outcome[2] if len(outcome) > 2 else None
    text = outcome[3] if len(outcome) > 3 else None
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("csv", "text", "out")}
    report = {"command": args.command, "config": _plain(config), "result": _plain(result), "version": version()}
    payload = render(report, fmt, text, csv_text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as handle:
            handle.write(payload)
    else:
        stdout.write(payload)
    print(f"wall_time_s={time.perf_counter() - started:.3f}", file=stderr)
    return code


def main() -> None:
    sys.exit(run())
