from __future__ import annotations

import argparse
import dataclasses
import faulthandler
import json
import logging
import signal
import sys
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from .conditions import best_report, check
from .config import CheckConfig, ConfigError, RunConfig, load_run_config
from .core_math import FiniteEscapeError, probit
from .env import Settings, load_settings
from .io_utils import json_safe, write_csv_atomic, write_json_atomic, write_series
from .simulator import (
    GapStudyRow,
    ResourceBudgetError,
    SimulationConfig,
    agent_cost_profile,
    best_response_costs,
    check_memory_budget,
    gap_study,
    iter_trials,
    simulate_population,
)
from .solver import (
    CoupledSolution,
    IdentityViolationError,
    SpecialCaseSolution,
    feedback_control,
    solve,
    solve_constant_coefficient,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NONCONVERGENCE = 2
EXIT_CONDITIONS = 3
EXIT_RESOURCES = 4

# Probit curve sampled for plotting.
_PROBIT_LEVELS = np.linspace(0.001, 0.999, 999)


def _solve(cfg: RunConfig) -> tuple[CoupledSolution, SpecialCaseSolution | None]:
    sol = solve(cfg.model, cfg.solver)
    if isinstance(sol, SpecialCaseSolution):
        return sol.base, sol
    return sol, None


def _paths_frame(sol: CoupledSolution) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "t": sol.grid.nodes,
            "pi": sol.pi.values,
            "V": sol.variance.values,
            "q_alpha": sol.q_alpha.values,
            "s": sol.offset.values,
            "xbar": sol.mean.values,
        }
    )


def _summary(sol: CoupledSolution) -> dict[str, Any]:
    return {
        "iterations": int(sol.iterations),
        "final_update_norm": float(sol.final_update_norm),
        "pi0": float(sol.pi.values[0]),
        "vT": float(sol.variance.values[-1]),
        "converged": bool(sol.converged),
    }


def _emit_solution_plotdata(cfg: RunConfig, sol: CoupledSolution) -> None:
    pdir = cfg.output_dir / "plotdata"
    t = sol.grid.nodes
    write_series(pdir, "probit", "alpha", _PROBIT_LEVELS, "probit", [probit(float(a)) for a in _PROBIT_LEVELS])
    write_series(pdir, "pi", "t", t, "pi", sol.pi.values)
    write_series(pdir, "variance", "t", t, "V", sol.variance.values)
    write_series(pdir, "q_alpha", "t", t, "q_alpha", sol.q_alpha.values)
    const = solve_constant_coefficient(cfg.model, cfg.solver)
    write_series(pdir, "pi_const", "t", t, "pi", const.pi.values)
    write_series(pdir, "variance_const", "t", t, "V", const.variance.values)


def cmd_solve(cfg: RunConfig, settings: Settings) -> tuple[int, dict[str, Any]]:
    sol, special = _solve(cfg)
    out_dir = cfg.output_dir
    written: list[str] = []
    if "paths_csv" in cfg.emit:
        written.append(str(write_csv_atomic(out_dir / "paths.csv", _paths_frame(sol))))
    summary = _summary(sol)
    if "summary_json" in cfg.emit:
        written.append(str(write_json_atomic(out_dir / "summary.json", summary)))
    if special is not None:
        df = pd.DataFrame({"t": sol.grid.nodes, "p": special.p.values, "h": special.h.values})
        written.append(str(write_csv_atomic(out_dir / "special_case.csv", df)))
        summary = {**summary, "identity_error": special.identity_error}
    if "plotdata" in cfg.emit:
        _emit_solution_plotdata(cfg, sol)
        written.append(str(out_dir / "plotdata"))
    code = EXIT_OK if sol.converged else EXIT_NONCONVERGENCE
    return code, {"cmd": "solve", "coupling": sol.coupling, **summary, "written": written}


def cmd_check(cfg: RunConfig, settings: Settings) -> tuple[int, dict[str, Any]]:
    grid = cfg.check.m_values()
    if cfg.check.m is not None:
        report = check(cfg.model, cfg.check.m)
        witness = cfg.check.m if report.both_hold else None
    else:
        report, witness = best_report(cfg.model, grid)
    out = {
        "mu_star": report.mu_star,
        "m": report.m_witness,
        "existence_lhs": report.existence_lhs,
        "existence_holds": report.existence_holds,
        "contraction_lhs": report.contraction_lhs,
        "contraction_holds": report.contraction_holds,
        "witness": witness,
        "grid_size": len(grid),
    }
    write_json_atomic(cfg.output_dir / "conditions.json", out)
    code = EXIT_OK if report.both_hold else EXIT_CONDITIONS
    return code, {"cmd": "check", **out}


def _require(cfg: RunConfig, section: str, cmd: str) -> None:
    if getattr(cfg, section) is None:
        raise ConfigError(f"{cfg.source}:1: {section}: missing required section for `{cmd}`")


def _budget(cfg: RunConfig, settings: Settings) -> int:
    return cfg.memory_budget if cfg.memory_budget is not None else settings.memory_budget


def cmd_simulate(cfg: RunConfig, settings: Settings) -> tuple[int, dict[str, Any]]:
    _require(cfg, "simulation", "simulate")
    sim = cfg.simulation
    assert sim is not None
    check_memory_budget(sim.n_agents, sim.grid.n_steps, sim.n_trials, _budget(cfg, settings))
    sol, _ = _solve(cfg)
    if not sol.converged:
        log.warning("simulating against a non-converged equilibrium (update norm %.3e)", sol.final_update_norm)

    t = sol.grid.nodes
    n, nodes = sim.n_agents, sol.grid.n_nodes
    populations: list[pd.DataFrame] = []
    means: list[pd.DataFrame] = []
    costs: list[pd.DataFrame] = []
    for run in iter_trials(cfg.model, sol, sim, progress=settings.progress):
        u_last = feedback_control(sol.pi.values[-1], sol.offset.values[-1], run.states[:, -1], cfg.model)
        u = np.concatenate([run.controls, np.asarray(u_last, dtype=float).reshape(n, 1)], axis=1)
        populations.append(
            pd.DataFrame(
                {
                    "trial": np.full(n * nodes, run.trial, dtype=np.int64),
                    "agent": np.repeat(np.arange(n, dtype=np.int64), nodes),
                    "t": np.tile(t, n),
                    "x": run.states.reshape(-1),
                    "u": u.reshape(-1),
                    "q_emp": run.emp_coeff.reshape(-1),
                }
            )
        )
        means.append(pd.DataFrame({"trial": np.full(nodes, run.trial, dtype=np.int64), "t": t, "xbar_n": run.pop_mean.values}))
        costs.append(
            pd.DataFrame(
                {
                    "trial": np.full(n, run.trial, dtype=np.int64),
                    "agent": np.arange(n, dtype=np.int64),
                    "cost_mfg": run.costs,
                    "cost_best_response": best_response_costs(run, cfg.model),
                }
            )
        )

    out_dir = cfg.output_dir
    written = [
        str(write_csv_atomic(out_dir / "population.csv", pd.concat(populations, ignore_index=True))),
        str(write_csv_atomic(out_dir / "pop_mean.csv", pd.concat(means, ignore_index=True))),
        str(write_csv_atomic(out_dir / "costs.csv", pd.concat(costs, ignore_index=True))),
    ]
    all_costs = pd.concat(costs, ignore_index=True)
    code = EXIT_OK if sol.converged else EXIT_NONCONVERGENCE
    return code, {
        "cmd": "simulate",
        "n_agents": n,
        "n_trials": sim.n_trials,
        "seed": sim.seed,
        "converged": sol.converged,
        "mean_cost_mfg": float(all_costs["cost_mfg"].mean()),
        "mean_cost_best_response": float(all_costs["cost_best_response"].mean()),
        "written": written,
    }


def _gap_frame(rows: list[GapStudyRow]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "n": [r.n_agents for r in rows],
            "mean_cost_mfg": [r.mean_cost_mfg for r in rows],
            "mean_cost_br": [r.mean_cost_best_response for r in rows],
            "cost_gap": [r.cost_gap for r in rows],
            "max_mean_dev": [r.max_mean_deviation for r in rows],
        }
    )


def cmd_study(cfg: RunConfig, settings: Settings) -> tuple[int, dict[str, Any]]:
    _require(cfg, "study", "study")
    study = cfg.study
    assert study is not None
    budget = _budget(cfg, settings)
    for n in study.n_list:
        check_memory_budget(n, cfg.solver.grid.n_steps, study.trials, budget)
    sol, _ = _solve(cfg)
    if not sol.converged:
        log.warning("study against a non-converged equilibrium (update norm %.3e)", sol.final_update_norm)

    rows = gap_study(
        cfg.model,
        sol,
        study.n_list,
        study.trials,
        cfg.seed,
        workers=cfg.workers,
        substeps=cfg.substeps,
        progress=settings.progress,
    )
    out_dir = cfg.output_dir
    written: list[str] = []
    if "gap_csv" in cfg.emit:
        written.append(str(write_csv_atomic(out_dir / "gap_study.csv", _gap_frame(rows))))
    if "plotdata" in cfg.emit:
        pdir = out_dir / "plotdata"
        ns = [r.n_agents for r in rows]
        write_series(pdir, "cost_gap", "n", ns, "cost_gap", [r.cost_gap for r in rows])
        write_series(pdir, "cost_gap_stderr", "n", ns, "cost_gap_stderr", [r.cost_gap_stderr for r in rows])
        write_series(pdir, "max_mean_dev", "n", ns, "max_mean_dev", [r.max_mean_deviation for r in rows])
        # First trial at the largest n.
        big = SimulationConfig(n_agents=ns[-1], grid=sol.grid, seed=cfg.seed, substeps=cfg.substeps)
        run = simulate_population(cfg.model, sol, big, trial=0)
        write_series(pdir, "population_mean", "t", sol.grid.nodes, "xbar_n", run.pop_mean.values)
        if study.profile_agents:
            check_memory_budget(study.profile_agents, cfg.solver.grid.n_steps, study.trials, budget)
            profile = agent_cost_profile(
                cfg.model,
                sol,
                study.profile_agents,
                study.trials,
                cfg.seed,
                workers=cfg.workers,
                substeps=cfg.substeps,
                progress=settings.progress,
            )
            agents = [p.agent for p in profile]
            write_series(pdir, "agent_cost_best_response", "agent", agents, "cost", [p.cost_best_response for p in profile])
            write_series(pdir, "agent_cost_mfg_frozen", "agent", agents, "cost", [p.cost_mfg_frozen for p in profile])
            write_series(pdir, "agent_cost_mfg_average", "agent", agents, "cost", [p.cost_mfg_average for p in profile])
        _emit_solution_plotdata(cfg, sol)
        written.append(str(pdir))
    code = EXIT_OK if sol.converged else EXIT_NONCONVERGENCE
    return code, {
        "cmd": "study",
        "converged": sol.converged,
        "rows": [
            {
                "n": r.n_agents,
                "cost_gap": r.cost_gap,
                "cost_gap_stderr": r.cost_gap_stderr,
                "max_mean_dev": r.max_mean_deviation,
            }
            for r in rows
        ],
        "written": written,
    }


_COMMANDS = {
    "solve": cmd_solve,
    "check": cmd_check,
    "simulate": cmd_simulate,
    "study": cmd_study,
}


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="Run configuration (JSON, schema_version 1).")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a dotted config key, e.g. model.q=0.5 (value parsed as JSON). Repeatable.",
    )
    common.add_argument("--output-dir", default=None, help="Override output_dir.")
    common.add_argument("--seed", type=int, default=None, help="Override simulation.seed.")
    common.add_argument("--workers", type=int, default=None, help="Trial-level worker threads.")

    p = argparse.ArgumentParser(prog="quantile_mfg")
    sub = p.add_subparsers(dest="cmd", required=True)
    sub.add_parser("solve", parents=[common], help="Solve the equilibrium; write paths.csv and summary.json.")
    p_check = sub.add_parser("check", parents=[common], help="Evaluate existence/uniqueness conditions; write conditions.json.")
    p_check.add_argument("--m", type=float, default=None, help="Check a single ball radius instead of the configured scan.")
    sub.add_parser("simulate", parents=[common], help="Simulate the finite population; write population/pop_mean/costs CSVs.")
    sub.add_parser("study", parents=[common], help="Cost-gap study over population sizes; write gap_study.csv and plotdata/.")
    return p


def main(argv: list[str] | None = None) -> int:
    # `kill -USR1 <pid>` prints stack traces of all threads to stderr.
    try:
        faulthandler.enable()
        faulthandler.register(signal.SIGUSR1, all_threads=True)
    except Exception:
        pass

    args = _build_parser().parse_args(argv)

    try:
        settings = load_settings()
        level = settings.log_level
    except RuntimeError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )

    try:
        cfg = load_run_config(
            Path(args.config),
            args.overrides,
            output_dir=args.output_dir,
            seed=args.seed,
            workers=args.workers,
            default_workers=settings.workers,
        )
        m = getattr(args, "m", None)
        if m is not None:
            if not (m >= 0.0):
                raise ConfigError(f"<--m {m}>: check.m: must be >= 0")
            cfg = dataclasses.replace(cfg, check=CheckConfig(m=float(m)))
        code, out = _COMMANDS[args.cmd](cfg, settings)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeError as e:
        # Settings properties raise RuntimeError for malformed QMFG_* values.
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ResourceBudgetError as e:
        print(f"refused: {e}", file=sys.stderr)
        return EXIT_RESOURCES
    except (FiniteEscapeError, IdentityViolationError) as e:
        log.error("numerical failure: %s", e)
        return EXIT_NONCONVERGENCE
    except OSError as e:
        target = e.filename if e.filename is not None else "?"
        print(f"config error: output_dir: cannot write {target}: {e.strerror or e}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as e:
        log.error("numerical failure: %s", e)
        return EXIT_NONCONVERGENCE

    print(json.dumps(json_safe(out), ensure_ascii=False, indent=2, default=str))
    return code


if __name__ == "__main__":
    raise SystemExit(main())
