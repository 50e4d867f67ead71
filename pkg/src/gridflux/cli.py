"""
Command-line front end.

Subcommands:
- solve: Solve one case with DPF, Newton-Raphson or DC; write the solution table and metadata.
- compare: Solve one case with several methods; write per-method files and a summary table.
- batch: Solve B copies of a case in one batched DPF run; write one solution table per copy.
- series: Solve a seeded random-walk time series with warm starts; write a per-step table.
- bench: Run a benchmark suite file; write run records.
- export-problem: Write a text dump of Y_bus and the index sets.

Exit codes: 0 on success, 1 on input or file errors, 2 when a solver does not converge or diverges.
"""

import argparse
import logging
import sys
import time
from pathlib import Path

import pandas as pd

from gridflux.benchmark import RECORD_FORMATS, load_suite, run_benchmark
from gridflux.grid_model import build_problem, export_problem, load_case
from gridflux.solvers import (
    DivergenceError,
    DpfConfig,
    SingularJacobianError,
    evaluate_state,
    make_batch,
    solution_frame,
    solution_metadata,
    solve_batch,
    solve_dc,
    solve_dpf,
    solve_nr,
)
from gridflux.timeseries import SeriesStepError, generate_series, series_frame, solve_series
from gridflux.utils import resolve_seed, write_json

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_NOT_CONVERGED = 2

METHODS = ("dpf", "nr", "dc")
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def build_parser():
    """Argument parser of the ``gridflux`` command."""
    parser = argparse.ArgumentParser(prog="gridflux", description="Sparse AC power-flow toolkit")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Log per-iteration details")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Log warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="Solve one case")
    solve.add_argument("case", type=Path, help="MATPOWER case file")
    solve.add_argument("--method", choices=METHODS, default="dpf")
    solve.add_argument("--preset", default="dpf-118", help="DPF hyperparameter preset")
    solve.add_argument("--init", choices=("flat", "dc"), default="flat", help="DPF initialization")
    solve.add_argument("--tol", type=float, default=None, help="Mismatch tolerance [p.u.]")
    solve.add_argument("--max-iter", type=int, default=None)
    solve.add_argument("--out", type=Path, default=Path())

    compare = sub.add_parser("compare", help="Compare methods on one case")
    compare.add_argument("case", type=Path)
    compare.add_argument("--methods", nargs="+", choices=METHODS, default=list(METHODS))
    compare.add_argument("--preset", default="dpf-118")
    compare.add_argument("--out", type=Path, default=Path())

    batch = sub.add_parser("batch", help="Solve copies of a case in one batched DPF run")
    batch.add_argument("case", type=Path)
    batch.add_argument("--copies", type=int, default=8)
    batch.add_argument("--preset", default="dpf-118")
    batch.add_argument("--max-iter", type=int, default=None)
    batch.add_argument("--out", type=Path, default=Path())

    series = sub.add_parser("series", help="Solve a warm-started time series")
    series.add_argument("case", type=Path)
    series.add_argument("--steps", type=int, default=20)
    series.add_argument("--amplitude", type=float, default=0.02)
    series.add_argument("--seed", type=int, default=None, help="Default from GRIDFLUX_SEED, else 0")
    series.add_argument("--preset-first", default="ts-first")
    series.add_argument("--preset-warm", default="ts-warm")
    series.add_argument("--out", type=Path, default=Path())

    bench = sub.add_parser("bench", help="Run a benchmark suite")
    bench.add_argument("--suite", type=Path, required=True, help="JSON suite file")
    bench.add_argument("--out", type=Path, default=Path("records.csv"))
    bench.add_argument("--format", choices=RECORD_FORMATS, default="csv", dest="fmt")

    export = sub.add_parser("export-problem", help="Dump Y_bus and index sets")
    export.add_argument("case", type=Path)
    export.add_argument("--out", type=Path, required=True)

    return parser


def main(argv=None):
    """
    Run the ``gridflux`` command.

    Parameters
    ----------
    argv : list of str, optional
        Arguments without the program name. Default is ``sys.argv[1:]``.

    Returns
    -------
    int
        Exit code.
    """
    args = build_parser().parse_args(argv)

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT)

    commands = {
        "solve": cmd_solve,
        "compare": cmd_compare,
        "batch": cmd_batch,
        "series": cmd_series,
        "bench": cmd_bench,
        "export-problem": cmd_export_problem,
    }
    try:
        return commands[args.command](args)
    except (DivergenceError, SeriesStepError, SingularJacobianError) as err:
        logger.error("%s", err)
        return EXIT_NOT_CONVERGED
    except (OSError, ValueError, KeyError) as err:
        logger.error("%s", err)
        return EXIT_INPUT_ERROR


def cmd_solve(args):
    """Solve one case and write ``<case>_<method>.csv`` and ``.json``."""
    problem = build_problem(load_case(args.case))
    config = None

    if args.method == "dpf":
        overrides = {} if args.max_iter is None else {"max_iter": args.max_iter}
        if args.tol is not None:
            overrides["mismatch_tol"] = args.tol
        config = DpfConfig.from_preset(args.preset, **overrides)
        init = solve_dc(problem) if args.init == "dc" else None
        solution = solve_dpf(problem, config, init=init)
    elif args.method == "nr":
        config = {
            "tol": 1e-8 if args.tol is None else args.tol,
            "max_iter": 20 if args.max_iter is None else args.max_iter,
        }
        solution = solve_nr(problem, **config)
    else:
        solution = _solve_dc_timed(problem)

    _write_solution(problem, solution, args.out / f"{problem.name}_{args.method}", config)
    return EXIT_OK if solution.converged else EXIT_NOT_CONVERGED


def cmd_compare(args):
    """Solve with several methods; write per-method files and ``<case>_summary.csv``."""
    methods = list(dict.fromkeys(args.methods))
    if len(methods) < 2:
        logger.error("compare needs at least two methods, got %s", methods)
        return EXIT_INPUT_ERROR

    problem = build_problem(load_case(args.case))
    config = DpfConfig.from_preset(args.preset)
    rows = []
    for method in methods:
        try:
            if method == "dpf":
                solution = solve_dpf(problem, config)
            elif method == "nr":
                solution = solve_nr(problem)
            else:
                solution = _solve_dc_timed(problem)
        except (RuntimeError, FloatingPointError, ValueError) as err:
            logger.error("%s failed: %s", method, err)
            rows.append({"method": method, "converged": False, "error": str(err)})
            continue

        _write_solution(problem, solution, args.out / f"{problem.name}_{method}", config if method == "dpf" else None)
        rows.append({
            "method": method,
            "converged": solution.converged,
            "iterations": solution.iterations,
            "wall_time_ms": 1e3 * solution.wall_time,
            "max_mismatch": solution.max_mismatch,
            "final_loss": solution.final_loss,
            "error": "",
        })

    summary = pd.DataFrame(
        rows, columns=["method", "converged", "iterations", "wall_time_ms", "max_mismatch", "final_loss", "error"]
    )
    summary.to_csv(args.out / f"{problem.name}_summary.csv", index=False)
    return EXIT_OK if summary["converged"].any() else EXIT_NOT_CONVERGED


def cmd_batch(args):
    """Solve ``--copies`` copies in one batched run; write ``<case>_batch<b>.csv`` per copy."""
    if args.copies < 1:
        logger.error("--copies should be at least 1, got %d", args.copies)
        return EXIT_INPUT_ERROR

    problem = build_problem(load_case(args.case))
    overrides = {} if args.max_iter is None else {"max_iter": args.max_iter}
    config = DpfConfig.from_preset(args.preset, **overrides)
    solutions = solve_batch(make_batch([problem] * args.copies), config)

    args.out.mkdir(parents=True, exist_ok=True)
    for b, solution in enumerate(solutions):
        solution_frame(problem, solution).to_csv(args.out / f"{problem.name}_batch{b}.csv", index=False)
    write_json(
        {"copies": args.copies, "cases": [solution_metadata(s) for s in solutions], "config": config.to_dict()},
        args.out / f"{problem.name}_batch.json",
    )
    return EXIT_OK if all(s.converged for s in solutions) else EXIT_NOT_CONVERGED


def cmd_series(args):
    """Solve a random-walk series; write ``<case>_series.csv``."""
    seed = resolve_seed(args.seed)
    problem = build_problem(load_case(args.case))
    series = generate_series(problem, args.steps, args.amplitude, seed=seed)
    solutions = solve_series(
        series,
        first_config=DpfConfig.from_preset(args.preset_first),
        warm_config=DpfConfig.from_preset(args.preset_warm),
    )

    args.out.mkdir(parents=True, exist_ok=True)
    frame = series_frame(solutions)
    frame.insert(0, "seed", seed)
    frame.to_csv(args.out / f"{problem.name}_series.csv", index=False)
    return EXIT_OK if frame["converged"].all() else EXIT_NOT_CONVERGED


def cmd_bench(args):
    """Run a benchmark suite; write the run records to ``--out``."""
    suite = load_suite(args.suite)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    records = run_benchmark(suite, out=args.out, fmt=args.fmt)
    failed = sum(1 for r in records if r.error)
    logger.info("Wrote %d records to %s (%d failed)", len(records), args.out, failed)
    return EXIT_OK


def cmd_export_problem(args):
    """Dump Y_bus triplets and index sets of a case."""
    problem = build_problem(load_case(args.case))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    export_problem(problem, args.out)
    return EXIT_OK


def _solve_dc_timed(problem):
    t0 = time.perf_counter()
    state = solve_dc(problem)
    return evaluate_state(problem, state, "dc", iterations=1, wall_time=time.perf_counter() - t0)


def _write_solution(problem, solution, prefix, config=None):
    prefix.parent.mkdir(parents=True, exist_ok=True)
    solution_frame(problem, solution).to_csv(prefix.with_suffix(".csv"), index=False)
    write_json(solution_metadata(solution, config), prefix.with_suffix(".json"))


if __name__ == "__main__":
    sys.exit(main())
