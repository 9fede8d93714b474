"""Command line entry point: ``exante-ic <command> SCENARIO [options]``.

Exit codes: 0 IC / success, 1 non-IC or another finding, 2 input error,
3 internal error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .builder import AutoBidMechanism, extract_menu, induce_rules, solve_multiplier, write_menu_csv
from .characterize import characterize_matrices, rho_sweep, write_rho_csv
from .core import payoff_matrices
from .errors import AssumptionError, DimensionError, InfeasibleError, ScenarioError
from .oracle import verify_ic, write_witness_csv
from .random_scenarios import random_case
from .scenario import load_scenario, resolve, tomllib
from .simulator import (
    EpisodeConfig, compare_controllers, fixed_report, linear_multiplier, truthful, uniform_scale,
    write_trace_csv,
)
from .surrogate import full_theorem3_check, reconstruct_payment, surrogate_field, write_field_csv

EXIT_OK, EXIT_FINDING, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2, 3


class Timer:
    def __init__(self):
        self.phases = {}

    def __call__(self, name):
        timer = self

        class _Phase:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.phases[name] = timer.phases.get(name, 0.0) + time.perf_counter() - self.t0

        return _Phase()


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def dump_report(report, out_dir, name="report.json"):
    text = json.dumps(_plain(report), indent=2, sort_keys=True) + "\n"
    if out_dir is None:
        sys.stdout.write(text)
    else:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / name).write_text(text)
    return text


def _tols(args, scenario):
    t = dict(scenario.tolerances)
    for key in ("feas", "bind", "ic", "pair"):
        val = getattr(args, f"tol_{key}")
        if val is not None:
            t[key] = val
    return t


def _base_report(command, scenario, args):
    return {"command": command, "version": __version__, "scenario": scenario.provenance(),
            "seed": args.seed}


def _need_rules(scenario):
    if scenario.rules is not None:
        return scenario.rules
    mech = solve_multiplier(scenario.menu.outcomes, scenario.menu.prices, scenario.model, scenario.space)
    return induce_rules(mech, scenario.model, scenario.space)


def _verdict_oracle(scenario, rules, M, tols):
    v = verify_ic(rules, scenario.model, scenario.space, tol_ic=tols.get("ic", 1e-9),
                  tol_feas=tols.get("feas", 1e-9), matrices=M)
    out = {"ic": v.ic, "truthful_utility": v.truthful_utility, "truthful_constraint": v.truthful_constraint,
           "truthful_feasible": v.truthful_feasible, "best_deviation_gain": v.best_deviation_gain}
    if v.witness is not None:
        out["witness"] = {"strategy": v.witness.strategy.triples(), "value": v.witness.value,
                          "constraint_value": v.witness.constraint_value,
                          "lambda_star": v.witness.lambda_star}
    return v.ic, out, v


def _verdict_char(scenario, M, tols):
    c = characterize_matrices(*M, scenario.space.weights, scenario.model.C, tol_feas=tols.get("feas", 1e-9),
                              tol_bind=tols.get("bind", 1e-9), tol_pair=tols.get("pair", 1e-9))
    out = {"ic": c.valid, "regime": c.regime, "r": c.r, "r0": c.r0, "r_upper": c.r_upper,
           "feasible": c.feasible, "binding": c.binding, "violations": c.violations[:50],
           "violation_count": len(c.violations), "boundary_pairs": c.boundary_pairs[:50]}
    return c.valid, out, c


def _verdict_surrogate(scenario, rules, M, tols, step=None):
    t = full_theorem3_check(rules, scenario.model, scenario.space, step=step, tol_feas=tols.get("feas", 1e-9),
                            tol_bind=tols.get("bind", 1e-9), matrices=M)
    out = {"ic": t.ic_candidate, "r": t.r, "r_fit": t.r_fit, "r_interval": list(t.r_interval),
           "route": t.route, "gradient_ok": t.gradient_ok, "convex_ok": t.convex_ok,
           "binding_ok": t.binding_ok, "feasible": t.feasible, "diagnostics": t.diagnostics,
           "field": t.report.summary()}
    return t.ic_candidate, out, t


def cmd_verify(args, scenario, timer):
    rules = _need_rules(scenario)
    tols = _tols(args, scenario)
    with timer("payoffs"):
        M = payoff_matrices(rules, scenario.model, scenario.space)
    modes = ["oracle", "characterize", "surrogate"] if args.mode == "all" else [args.mode]
    report = _base_report("verify", scenario, args)
    report["mode"] = args.mode
    verdicts, findings, flags = {}, [], {}
    for mode in modes:
        with timer(mode):
            if mode == "oracle":
                flags[mode], verdicts[mode], v = _verdict_oracle(scenario, rules, M, tols)
                if v.witness is not None and args.out:
                    Path(args.out).mkdir(parents=True, exist_ok=True)
                    write_witness_csv(Path(args.out) / "witness.csv", v.witness.strategy)
            elif mode == "characterize":
                flags[mode], verdicts[mode], _ = _verdict_char(scenario, M, tols)
            else:
                try:
                    flags[mode], verdicts[mode], _ = _verdict_surrogate(scenario, rules, M, tols)
                except AssumptionError as exc:
                    if args.mode != "all":
                        raise
                    verdicts[mode] = {"skipped": str(exc)}
    agree = len(set(flags.values())) <= 1
    if not agree:
        findings.append({"kind": "cross_mode_disagreement", "verdicts": flags})
    report.update(verdicts=verdicts, agreement=agree, findings=findings, ic=all(flags.values()) and agree)
    return report, EXIT_OK if report["ic"] else EXIT_FINDING


def cmd_characterize(args, scenario, timer):
    rules = _need_rules(scenario)
    tols = _tols(args, scenario)
    M = payoff_matrices(rules, scenario.model, scenario.space)
    with timer("characterize"):
        ok, verdict, _ = _verdict_char(scenario, M, tols)
        rs, rp, rm = rho_sweep(rules, scenario.model, scenario.space, matrices=M)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_rho_csv(Path(args.out) / "rho.csv", rs, rp, rm)
    report = _base_report("characterize", scenario, args)
    report.update(verdicts={"characterize": verdict}, ic=ok)
    return report, EXIT_OK if ok else EXIT_FINDING


def _mechanism_json(mech):
    return {"outcomes": mech.outcomes, "prices": mech.prices, "r": mech.r, "regime": mech.regime,
            "tie_policy": mech.tie_policy,
            "assignments": {str(i): [list(t) for t in mix] for i, mix in sorted(mech.assignments.items())}}


def cmd_build(args, scenario, timer):
    model, space = scenario.model, scenario.space
    report = _base_report("build", scenario, args)
    if scenario.menu is not None:
        outcomes, prices = scenario.menu.outcomes, scenario.menu.prices
    else:
        seed_mech = extract_menu(scenario.rules, model, space, r=float(scenario.build.get("r", 0.0)))
        outcomes, prices = seed_mech.outcomes, seed_mech.prices
    try:
        with timer("solve"), warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            mech = solve_multiplier(outcomes, prices, model, space,
                                    r_max=float(scenario.build.get("r_max", 1e6)))
    except InfeasibleError as exc:
        report.update(ok=False, error="infeasible", message=str(exc), best_constraint=exc.best_constraint,
                      target=model.C)
        return report, EXIT_FINDING
    rules = induce_rules(mech, model, space)
    X, P = rules.on(space)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_menu_csv(out / "menu.csv", mech)
        (out / "mechanism.json").write_text(json.dumps(_plain(_mechanism_json(mech)), indent=2, sort_keys=True))
        cols = [f"v_{k + 1}" for k in range(space.dim)] + [f"q_{k + 1}" for k in range(X.shape[1])] + ["p"]
        np.savetxt(out / "rules.csv", np.column_stack([space.points, X, P]), fmt="%.17g", delimiter=",",
                   header=",".join(cols), comments="")
    tols = _tols(args, scenario)
    M = payoff_matrices(rules, model, space)
    flags, verdicts = {}, {}
    with timer("verify"):
        flags["oracle"], verdicts["oracle"], _ = _verdict_oracle(scenario, rules, M, tols)
        flags["characterize"], verdicts["characterize"], _ = _verdict_char(scenario, M, tols)
        if model.has_linear_form and space.is_regular and space.interior_mask().any():
            flags["surrogate"], verdicts["surrogate"], _ = _verdict_surrogate(scenario, rules, M, tols)
    ok = all(flags.values())
    report.update(mechanism=_mechanism_json(mech), warnings=[str(w.message) for w in caught],
                  verdicts=verdicts, ok=ok, ic=ok)
    return report, EXIT_OK if ok else EXIT_FINDING


def cmd_surrogate(args, scenario, timer):
    rules = _need_rules(scenario)
    tols = _tols(args, scenario)
    M = payoff_matrices(rules, scenario.model, scenario.space)
    report = _base_report("surrogate", scenario, args)
    with timer("surrogate"):
        if args.r is not None:
            field_ = surrogate_field(rules, scenario.model, scenario.space, args.r, args.step)
            ok = field_.convexity_margin <= field_.tol and field_.max_gradient_excess <= field_.tol
            verdict = {"ic": ok, "r": args.r, "field": field_.summary()}
        else:
            ok, verdict, t = _verdict_surrogate(scenario, rules, M, tols, args.step)
            field_ = t.report
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_field_csv(Path(args.out) / "surrogate_field.csv", scenario.space, field_)
    report.update(verdicts={"surrogate": verdict}, ic=ok)
    return report, EXIT_OK if ok else EXIT_FINDING


def cmd_reconstruct(args, scenario, timer):
    rules = _need_rules(scenario)
    model, space = scenario.model, scenario.space
    r = args.r
    if r is None:
        r = full_theorem3_check(rules, model, space).r
    field_ = surrogate_field(rules, model, space, r)
    a = int(args.anchor_index)
    with timer("reconstruct"):
        rec = reconstruct_payment(rules, field_.u_tilde, r, model.c1, model.c2, space,
                                  anchor=(a, float(field_.U_tilde[a])), strict=False)
    _, P = rules.on(space)
    _, P2 = rec.rules.on(space)
    diff = P2 - P
    spread = float(diff.max() - diff.min())
    tol = float(args.tol)
    ok = rec.path_discrepancy <= tol and spread <= tol
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        cols = [f"v_{k + 1}" for k in range(space.dim)] + ["p", "p_reconstructed", "U_tilde"]
        np.savetxt(Path(args.out) / "reconstructed.csv", np.column_stack([space.points, P, P2, rec.U_tilde]),
                   fmt="%.17g", delimiter=",", header=",".join(cols), comments="")
    report = _base_report("reconstruct", scenario, args)
    report.update(r=r, anchor_index=a, path_discrepancy=rec.path_discrepancy, payment_spread=spread,
                  tol=tol, ok=ok)
    return report, EXIT_OK if ok else EXIT_FINDING


def _controller(spec, default_r, n):
    kind = spec.get("kind")
    if kind == "linear_multiplier":
        return linear_multiplier(float(spec.get("r", default_r)))
    if kind == "truthful":
        return truthful()
    if kind == "uniform_scale":
        return uniform_scale(float(spec["k"]))
    if kind == "fixed_report":
        return fixed_report(int(spec["report"]))
    raise ScenarioError(f"unknown controller kind {kind!r}")


def cmd_simulate(args, scenario, timer):
    cfg_path = resolve(args.episode)
    try:
        cfg = tomllib.loads(Path(cfg_path).read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"{cfg_path}: {exc}") from exc
    model, space = scenario.model, scenario.space
    if scenario.rules is None:
        mech = solve_multiplier(scenario.menu.outcomes, scenario.menu.prices, model, space)
        r_default = mech.r
    else:
        mech = scenario.rules
        r_default = characterize_matrices(*payoff_matrices(mech, model, space), space.weights, model.C).r
    rounds = int(cfg.get("rounds", 100000))
    seed = int(cfg.get("seed", args.seed))
    specs = cfg.get("controller", [])
    if not specs:
        raise ScenarioError(f"{cfg_path}: no [[controller]] entries")
    seeds = {int(s.get("seed", seed)) for s in specs}
    if len(seeds) > 1:
        raise ScenarioError("common random numbers need a single seed across controllers")
    configs = [EpisodeConfig(rounds, seed, _controller(s, r_default, space.size), mech, keep_trace=bool(args.out))
               for s in specs]
    with timer("simulate"):
        table = compare_controllers(configs, model, space)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for k, res in enumerate(table.results):
            write_trace_csv(out / f"trace_{k}.csv", res, space)
    report = _base_report("simulate", scenario, args)
    report.update(
        episode={"path": str(cfg_path), "rounds": rounds, "seed": seed,
                 "draws": "i.i.d. from the grid distribution"},
        rows=[{"controller": r.controller, "realized_utility": r.realized_utility,
               "realized_constraint": r.realized_constraint, "utility_se": r.utility_se,
               "constraint_se": r.constraint_se, "feasible": r.feasible,
               "trace": f"trace_{k}.csv" if args.out else None} for k, r in enumerate(table.rows)],
        ranking=[r.controller for r in table.ranking], all_infeasible=table.all_infeasible,
    )
    return report, EXIT_OK


def cmd_sweep(args, timer):
    from .core import payoff_matrices as pm

    rows, disagreements = [], []
    with timer("sweep"), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for k in range(args.count):
            case = random_case(args.seed + k)
            M = pm(case.rules, case.model, case.space)
            o = verify_ic(case.rules, case.model, case.space, matrices=M).ic
            c = characterize_matrices(*M, case.space.weights, case.model.C).valid
            t = full_theorem3_check(case.rules, case.model, case.space, matrices=M).ic_candidate
            rows.append({"case": case.label, "oracle": o, "characterize": c, "surrogate": t})
            if not (o == c == t):
                disagreements.append(rows[-1])
    report = {"command": "sweep", "version": __version__, "seed": args.seed, "count": args.count,
              "ic_count": sum(r["oracle"] for r in rows), "disagreements": disagreements}
    return report, EXIT_OK if not disagreements else EXIT_FINDING


def build_parser():
    p = argparse.ArgumentParser(prog="exante-ic", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario=True):
        if scenario:
            sp.add_argument("scenario", help="scenario TOML file or bundled scenario name")
        sp.add_argument("--out", help="directory for the report and CSV outputs (report to stdout if omitted)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=None, help="cap numerical library threads")
        sp.add_argument("--timing", action="store_true", help="add wall-clock phase timings to the report")
        for key in ("feas", "bind", "ic", "pair"):
            sp.add_argument(f"--tol-{key}", type=float, default=None)
        return sp

    v = common(sub.add_parser("verify", help="decide IC by one or all verifiers"))
    v.add_argument("--mode", choices=["oracle", "characterize", "surrogate", "all"], default="all")
    common(sub.add_parser("characterize", help="deviation-set certificate and rho sweep"))
    common(sub.add_parser("build", help="solve the multiplier for a menu and verify the result"))
    s = common(sub.add_parser("surrogate", help="surrogate utility convexity and gradient check"))
    s.add_argument("--r", type=float, default=None)
    s.add_argument("--step", type=float, default=None)
    rc = common(sub.add_parser("reconstruct", help="recover payments from the allocation"))
    rc.add_argument("--r", type=float, default=None)
    rc.add_argument("--anchor-index", type=int, default=0)
    rc.add_argument("--tol", type=float, default=1e-6)
    sm = common(sub.add_parser("simulate", help="compare bidding controllers on the mechanism"))
    sm.add_argument("episode", help="episode TOML file or bundled name")
    sw = common(sub.add_parser("sweep", help="randomised agreement sweep of the three verifiers"), scenario=False)
    sw.add_argument("--count", type=int, default=200)
    return p


COMMANDS = {"verify": cmd_verify, "characterize": cmd_characterize, "build": cmd_build,
            "surrogate": cmd_surrogate, "reconstruct": cmd_reconstruct, "simulate": cmd_simulate}


def _run(args):
    timer = Timer()
    if args.command == "sweep":
        report, code = cmd_sweep(args, timer)
    else:
        scenario = load_scenario(args.scenario)
        report, code = COMMANDS[args.command](args, scenario, timer)
        if scenario.is_stale():
            report.setdefault("findings", []).append({"kind": "scenario_changed_during_run"})
    if args.timing:
        report["timing"] = timer.phases
    dump_report(report, args.out)
    return code


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=max(1, args.threads)):
                return _run(args)
        return _run(args)
    except (ScenarioError, DimensionError, AssumptionError, FileNotFoundError, ValueError) as exc:
        print(f"exante-ic: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        print(f"exante-ic: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if os.environ.get("EXANTE_IC_DEBUG"):
            raise
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
