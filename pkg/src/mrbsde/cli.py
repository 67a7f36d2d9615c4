"""Command-line surface: simulate | solve | hedge | validate.

Every run writes a RunRecord (config hash, seed, artifact paths, summary
metrics) into the output directory. Exit codes: 0 success, 2 config or
schema problem, 3 assumption or plan infeasibility, 4 solver divergence
or numeric failure, 5 tolerance failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import config as cfg
from .bsde import plan_contraction
from .errors import (
    AssumptionError,
    ConfigError,
    ConvergenceError,
    MrbsdeError,
    NumericError,
)
from .insurance import (
    build_hedging_bsde,
    hedging_view,
    price_and_hedge,
    replay_wealth,
    simulate_insurance_bundle,
)
from .mean_reflect import flatness_report, save_reflected, solve_mean_reflected
from .reflection import LossReflector, RhoReflector, lipschitz_ratio
from .scenario import build_grid, check_assumptions, save_bundle

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ASSUMPTION = 3
EXIT_DIVERGENCE = 4
EXIT_TOLERANCE = 5

THREADS_ENV = "MRBSDE_THREADS"


def _thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _write_record(out_dir: str, command: str, config: dict, metrics: dict,
                  artifacts: dict, started: float) -> str:
    record = {
        "command": command,
        "config_hash": cfg.config_hash(config),
        "seed": config["scenario"]["seed"],
        "started_at": started,
        "finished_at": time.time(),
        "threads": _thread_count(),
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "metrics": metrics,
    }
    path = os.path.join(out_dir, "run_record.json")
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True, default=float)
    return path


def _metrics_json(out_dir: str, metrics: dict) -> str:
    """Summary metrics alone, bit-stable across reruns of one config."""
    path = os.path.join(out_dir, "metrics.json")
    with open(path, "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True, default=float)
    return path


def cmd_simulate(config: dict, out_dir: str, formats) -> int:
    started = time.time()
    _, _, _, bundle = cfg.build_scenario(config)
    artifacts = {}
    if "csv" in formats:
        artifacts = save_bundle(bundle, os.path.join(out_dir, "bundle"))
    counts = bundle.total_counts()
    metrics = {
        "paths": bundle.paths,
        "steps": bundle.grid.steps,
        "mean_terminal_count": float(counts[:, -1].mean()),
        "mean_terminal_clock": float(bundle.clock_full[:, -1].mean()),
        "rows": bundle.paths * (bundle.grid.steps + 1),
    }
    artifacts["metrics"] = _metrics_json(out_dir, metrics)
    artifacts["record"] = _write_record(out_dir, "simulate", config, metrics,
                                        artifacts, started)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return EXIT_OK


def _solve_ingredients(config: dict):
    if "generator" not in config or "loss" not in config:
        raise ConfigError("solve needs 'generator' and 'loss' sections")
    grid, _, _, bundle = cfg.build_scenario(config)
    gen = cfg.build_generator(config["generator"])
    loss = cfg.build_loss(config["loss"], grid.horizon)
    loss.validate()
    params = cfg.solver_params(config)
    basis = cfg.build_basis(config)
    reflector = LossReflector(loss, tol=params["delta_l"])
    kappa = max(lipschitz_ratio(loss), 1.0)
    return grid, bundle, gen, loss, reflector, kappa, basis, params


def cmd_solve(config: dict, out_dir: str, formats) -> int:
    started = time.time()
    grid, bundle, gen, loss, reflector, kappa, basis, params = \
        _solve_ingredients(config)
    plan = plan_contraction(gen, kappa, params["beta"], bundle)
    sol = solve_mean_reflected(gen, reflector, bundle, basis, plan,
                               tol=params["tol"],
                               max_iters=params["max_iters"])
    report = flatness_report(sol, reflector)
    artifacts = {}
    if "csv" in formats or "json" in formats:
        artifacts = save_reflected(sol, report, os.path.join(out_dir, "solve"))
    delta_l = params["delta_l"] if params["delta_l"] is not None else 1e-8
    ok = report.passes(delta_l)
    metrics = {
        "y0_mean": float(sol.backward.y[:, 0].mean()),
        "k_total": float(sol.compensator[-1]),
        "constraint_min": report.constraint_min,
        "skorokhod_defect": report.skorokhod_defect,
        "iterations": sol.info["iterations"],
        "ratios": sol.info["ratios"],
        "intervals": plan.n_intervals,
        "alphas": [float(a) for a in plan.alphas],
        "tolerances_met": bool(ok),
    }
    artifacts["metrics"] = _metrics_json(out_dir, metrics)
    artifacts["record"] = _write_record(out_dir, "solve", config, metrics,
                                        artifacts, started)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return EXIT_OK if ok else EXIT_TOLERANCE


def cmd_hedge(config: dict, out_dir: str, formats) -> int:
    started = time.time()
    for key in ("contract", "risk_measure"):
        if key not in config:
            raise ConfigError(f"hedge needs the '{key}' section")
    sc = config["scenario"]
    grid = build_grid(sc["horizon"], sc["steps"],
                      sc.get("refinement", "uniform"),
                      sc.get("geometric_ratio", 1.05))
    model = cfg.build_market(config.get("market"))
    contract = cfg.build_contract(config["contract"])
    measure = cfg.build_pricing_measure(config.get("measure"))
    rm = cfg.build_risk_measure(config["risk_measure"])
    params = cfg.solver_params(config)
    basis = cfg.build_basis(config)

    bundle = simulate_insurance_bundle(model, contract, grid, sc["paths"],
                                       seed=sc["seed"])
    hedge = price_and_hedge(model, contract, measure, rm, bundle, basis,
                            beta=params["beta"], tol=params["tol"],
                            max_iters=params["max_iters"])
    wealth = replay_wealth(hedge, model, contract, measure, bundle)
    xi = hedge.solution.y_raw[:, -1]
    shortfall = float((xi - wealth[:, -1]).max())

    margins = hedge.margins
    es_ok = bool(margins.min() >= -1e-6 * max(1.0, abs(hedge.price)))
    k_total = float(hedge.k_premium[-1])
    defect = float(np.sum(np.concatenate([[0.0], np.diff(hedge.k_premium)])
                          * margins))
    defect_ok = bool(abs(defect) <= 0.02 * max(k_total, 1e-12))
    ok = es_ok and defect_ok

    artifacts = {}
    if "csv" in formats:
        path = os.path.join(out_dir, "hedge_schedule.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "mean_pi", "mean_chi", "K", "bond_mean",
                             "es", "benchmark"])
            m = grid.steps
            for i, t in enumerate(grid.nodes):
                writer.writerow([
                    repr(float(t)),
                    repr(float(hedge.pi[:, min(i, m - 1)].mean())),
                    repr(float(hedge.chi[:, min(i, m - 1)].mean())),
                    repr(float(hedge.k_premium[i])),
                    repr(float(hedge.bond_mean[i])),
                    repr(float(hedge.es_values[i])),
                    repr(float(hedge.benchmarks[i]))])
        artifacts["schedule"] = path
    metrics = {
        "y0": hedge.price,
        "k_total": k_total,
        "es_margin_min": float(margins.min()),
        "skorokhod_defect": defect,
        "replay_worst_shortfall": shortfall,
        "cause_dispersion": hedge.cause_dispersion,
        "iterations": hedge.solution.info["iterations"],
        "tolerances_met": bool(ok),
    }
    if "json" in formats:
        path = os.path.join(out_dir, "pricing_report.json")
        with open(path, "w") as fh:
            json.dump(metrics, fh, indent=2, sort_keys=True, default=float)
        artifacts["pricing"] = path
    artifacts["metrics"] = _metrics_json(out_dir, metrics)
    artifacts["record"] = _write_record(out_dir, "hedge", config, metrics,
                                        artifacts, started)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return EXIT_OK if ok else EXIT_TOLERANCE


def cmd_validate(config: dict, out_dir: str, formats) -> int:
    started = time.time()
    params = cfg.solver_params(config)
    if "contract" in config:
        sc = config["scenario"]
        grid = build_grid(sc["horizon"], sc["steps"],
                          sc.get("refinement", "uniform"),
                          sc.get("geometric_ratio", 1.05))
        model = cfg.build_market(config.get("market"))
        contract = cfg.build_contract(config["contract"])
        measure = cfg.build_pricing_measure(config.get("measure"))
        rm = cfg.build_risk_measure(config["risk_measure"])
        bundle = simulate_insurance_bundle(model, contract, grid,
                                           sc["paths"], seed=sc["seed"])
        view = hedging_view(bundle, contract)
        gen = build_hedging_bsde(model, contract, measure, grid)
        kappa = max(RhoReflector(rm).lipschitz_constant(grid.nodes), 1.0)
        assumptions = check_assumptions(view, params["beta"])
        plan = plan_contraction(gen, kappa, params["beta"], view)
    else:
        _, bundle, gen, loss, _, kappa, _, params = _solve_ingredients(config)
        assumptions = check_assumptions(bundle, params["beta"])
        plan = plan_contraction(gen, kappa, params["beta"], bundle)
    metrics = {
        "assumptions": assumptions,
        "plan": {
            "beta": plan.beta,
            "kappa": plan.kappa,
            "threshold": plan.threshold,
            "h": plan.h,
            "intervals": plan.n_intervals,
            "alphas": [float(a) for a in plan.alphas],
        },
    }
    artifacts = {"metrics": _metrics_json(out_dir, metrics)}
    artifacts["record"] = _write_record(out_dir, "validate", config, metrics,
                                        artifacts, started)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mrbsde",
        description="Mean-reflected backward SDE solver and hedging desk")
    parser.add_argument("command",
                        choices=["simulate", "solve", "hedge", "validate"])
    parser.add_argument("--config", required=True, help="JSON config path")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the scenario seed")
    parser.add_argument("--paths", type=int, default=None,
                        help="override the scenario path count")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--format", choices=["csv", "json"], default=None,
                        help="restrict artifact formats")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = cfg.load_config(args.config)
        if args.seed is not None:
            config["scenario"]["seed"] = args.seed
        if args.paths is not None:
            config["scenario"]["paths"] = args.paths
        out_section = config.get("output", {})
        out_dir = args.out or out_section.get("directory", "out")
        formats = ([args.format] if args.format
                   else out_section.get("formats", ["csv", "json"]))
        os.makedirs(out_dir, exist_ok=True)
        handler = {"simulate": cmd_simulate, "solve": cmd_solve,
                   "hedge": cmd_hedge, "validate": cmd_validate}[args.command]
        return handler(config, out_dir, formats)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AssumptionError as exc:
        print(f"assumption/plan error: {exc}", file=sys.stderr)
        return EXIT_ASSUMPTION
    except ConvergenceError as exc:
        print(f"divergence: {exc} (ratios: {exc.ratios})", file=sys.stderr)
        return EXIT_DIVERGENCE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except MrbsdeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
