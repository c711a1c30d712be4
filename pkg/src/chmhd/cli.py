"""Command-line entry point: ``chmhd {simulate,convergence,project}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from typing import Dict, List, Optional, Sequence, Tuple

from .diagnostics import RateTable, rate_table, terminal_errors
from .fem import error_norm
from .io_scenarios import (PRESETS, ConfigError, OutputConfig, ScenarioConfig, SolverConfig, load_config, preset,
                           run_scenario, scenario_spaces)
from .manufactured import ExactSolution2D
from .mesh import build_unit_square_mesh
from .projections import l2_project, maxwell_quasi_project, ritz_project
from .stepper import Params, StepFailure

log = logging.getLogger("chmhd")

PROJECTION_NORMS = {"phi0": ("L2", "H1_semi"), "u0": ("L2", "H1_semi"), "B0": ("L2", "Hcurl")}


class UsageError(ValueError):
    pass


def parse_levels(text: str) -> List[int]:
    """Comma-separated mesh levels, each twice the previous one."""
    try:
        levels = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--levels expects comma-separated integers, got {text!r}") from None
    if not levels:
        raise UsageError("--levels is empty")
    if levels[0] < 2:
        raise UsageError("mesh levels must be at least 2")
    for a, b in zip(levels, levels[1:]):
        if b != 2 * a:
            raise UsageError(f"each level must double the previous one, got {a} then {b}")
    return levels


def parse_dt_rule(text: str) -> float:
    """``h2:<c>`` gives dt = c h^2 with h = 1/n."""
    kind, _, c = text.partition(":")
    if kind != "h2" or not c:
        raise UsageError(f"--dt-rule expects h2:<c>, got {text!r}")
    try:
        val = float(c)
    except ValueError:
        raise UsageError(f"--dt-rule coefficient is not a number: {c!r}") from None
    if not val > 0:
        raise UsageError("--dt-rule coefficient must be positive")
    return val


def convergence_level(n: int, c: float = 1.0, solver: str = "lu") -> Tuple[float, Dict[str, float]]:
    """Manufactured run to T = 1 on an n x n mesh with dt = c / n^2; returns (h, errors)."""
    dt = c / n ** 2
    steps = max(1, int(round(1.0 / dt)))
    cfg = ScenarioConfig(scenario="manufactured", n=n, params=Params(dt=1.0 / steps, T=1.0),
                         solver=SolverConfig(linear=solver), output=OutputConfig(every=steps))
    traj = run_scenario(cfg, write=False)
    return 1.0 / n, terminal_errors(traj.state, ExactSolution2D(cfg.params.gamma).fields(1.0))


def run_convergence(levels: Sequence[int], c: float = 1.0, solver: str = "lu", threads: int = 1,
                    out: Optional[str] = None) -> RateTable:
    """Errors and observed orders over ``levels``; a failing level aborts with the partial table."""
    runs: List[Tuple[float, Dict[str, float]]] = []
    if threads > 1 and len(levels) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(convergence_level, n, c, solver) for n in levels]
            for n, fut in zip(levels, futures):
                try:
                    runs.append(fut.result())
                except StepFailure:
                    _write_partial(runs, out)
                    raise
    else:
        for n in levels:
            log.info("convergence level n=%d", n)
            try:
                runs.append(convergence_level(n, c, solver))
            except StepFailure:
                _write_partial(runs, out)
                raise
    table = rate_table(runs)
    if out:
        _write_text(out, table.to_csv())
    return table


def _write_partial(runs, out):
    if out and runs:
        _write_text(out, rate_table(runs).to_csv())


def _write_text(path: str, text: str):
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(text)


def projection_level(target: str, n: int) -> Tuple[float, Dict[str, float]]:
    """Projection errors of the exact initial data on an n x n mesh."""
    spaces = scenario_spaces(ScenarioConfig(scenario="manufactured", n=n, params=Params(dt=1.0, T=1.0)),
                             build_unit_square_mesh(n))
    f0 = ExactSolution2D().fields(0.0)
    if target == "phi0":
        fe, exact = ritz_project(f0["phi"], spaces.phi), f0["phi"]
    elif target == "u0":
        fe, exact = l2_project(f0["u"], spaces.u), f0["u"]
    elif target == "B0":
        fe, exact = maxwell_quasi_project(f0["B"], f0["u"], spaces.B), f0["B"]
    else:
        raise UsageError(f"unknown projection target {target!r}")
    return 1.0 / n, {f"{target}_{k}": error_norm(fe, exact, k) for k in PROJECTION_NORMS[target]}


def run_projection(target: str, levels: Sequence[int], out: Optional[str] = None) -> RateTable:
    runs = [projection_level(target, n) for n in levels]
    table = rate_table(runs, norms=tuple(f"{target}_{k}" for k in PROJECTION_NORMS[target]))
    if out:
        _write_text(out, table.to_csv())
    return table


def _print_table(table: RateTable, stream=None):
    (stream or sys.stdout).write(table.to_csv())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--solver", choices=("lu", "gmres"), default=None,
                        help="linear solver inside Newton (default: lu)")
    common.add_argument("--threads", type=int, default=1, metavar="K",
                        help="worker processes for independent convergence levels (default 1)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="chmhd", description="Convex-splitting finite element solver for the "
                                "2D Cahn-Hilliard-MHD system.")
    sub = p.add_subparsers(dest="command", metavar="{simulate,convergence,project}")

    s = sub.add_parser("simulate", parents=[common], help="run a scenario and write VTK and CSV output")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", metavar="PATH", help="scenario configuration file")
    src.add_argument("--scenario-preset", choices=sorted(PRESETS), help="shipped scenario")
    s.add_argument("--out", metavar="DIR", help="output directory (overrides the configuration)")
    s.add_argument("--seed", type=int, metavar="U64", help="noise seed for the spinodal scenario")

    c = sub.add_parser("convergence", parents=[common], help="manufactured-solution convergence study")
    c.add_argument("--levels", default="8,16,32", help="mesh levels n, each doubling (default 8,16,32)")
    c.add_argument("--dt-rule", default="h2:1.0", metavar="h2:<c>", help="time step dt = c h^2 (default h2:1.0)")
    c.add_argument("--out", metavar="PATH", help="CSV file for the rate table")

    j = sub.add_parser("project", parents=[common], help="projection error study of the initial data")
    j.add_argument("target", choices=sorted(PROJECTION_NORMS), help="which initial field to project")
    j.add_argument("--levels", default="8,16,32", help="mesh levels n, each doubling (default 8,16,32)")
    j.add_argument("--out", metavar="PATH", help="CSV file for the rate table")
    return p


def _simulate(args) -> int:
    cfg = load_config(args.config) if args.config else preset(args.scenario_preset)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.solver:
        cfg = replace(cfg, solver=replace(cfg.solver, linear=args.solver))
    out = args.out or cfg.output.directory
    traj = run_scenario(cfg, out)
    last = traj.rows[-1]
    print(f"{cfg.scenario}: {cfg.n_steps} steps to t={last['t']:.6g}, mass={last['mass']:.12g}, "
          f"E_system={last['E_system']:.6g}; output in {out}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        if args.command == "simulate":
            return _simulate(args)
        levels = parse_levels(args.levels)
        if args.command == "convergence":
            table = run_convergence(levels, parse_dt_rule(args.dt_rule), args.solver or "lu",
                                    args.threads, args.out)
        else:
            table = run_projection(args.target, levels, args.out)
        _print_table(table)
        return 0
    except UsageError as exc:
        print(f"chmhd: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, StepFailure, OSError, ValueError) as exc:
        print(f"chmhd: error: {exc}", file=sys.stderr)
        return 1
