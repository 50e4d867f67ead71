"""
Benchmark harness for timing and solution quality of the power-flow solvers.

A suite is a JSON document naming grids (optionally scaled), solvers, batch
sizes and a repeat count. Every (grid, solver, batch size) cell is run once
as a warm-up and then `repeats` times. Wall-clock time covers the solver
call only; parsing, scaling and batch assembly are excluded. Records are
written to the output file as each cell finishes, and a failing cell is
recorded with its error message while the suite continues.

With batch size B > 1, DPF solves B copies of the grid in one stacked run.
Newton-Raphson and DC solve the stacked block-diagonal system as a single
problem.

Main functions:
- load_suite: Read a suite file.
- run_benchmark: Run a suite and collect RunRecords.
- write_records: Write records as CSV or as whitespace-delimited text.
- scaling_exponent: Log-log slope and R^2 of time against problem size.
- traced_peak_bytes: Peak traced allocation of a call.
"""

import dataclasses
import json
import logging
import time
import tracemalloc
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import linregress

from gridflux.grid_model import build_problem, load_case
from gridflux.optimizers import get_preset
from gridflux.scaling import edge_scale, node_scale
from gridflux.solvers import DpfConfig, evaluate_state, make_batch, solve_batch, solve_dc, solve_dpf, solve_nr

logger = logging.getLogger(__name__)

SOLVERS = ("dpf", "nr", "dc")
RECORD_FORMATS = ("csv", "plain")


@dataclasses.dataclass(frozen=True)
class RunRecord:
    """
    Timing and quality of one benchmark run.

    Attributes
    ----------
    label : str
        Suite label.
    grid : str
        Grid name.
    n_buses, nnz : int
        Size of the solved (stacked) system.
    solver : str
        "dpf", "nr" or "dc".
    batch : int
        Batch size.
    iterations : int
        Iterations of the run; the largest per-case count for batched DPF.
    wall_ms : float
        Wall-clock time of the solver call [ms].
    per_iter_ms : float
        wall_ms / iterations, NaN when no iteration was taken.
    final_loss, max_mismatch : float
        Worst-case loss [p.u.^2] and mismatch [p.u.] over the batch.
    seed : int
        Seed of the grid generators.
    error : str
        Error message of a failed run, empty otherwise.
    """

    label: str
    grid: str
    n_buses: int
    nnz: int
    solver: str
    batch: int
    iterations: int
    wall_ms: float
    per_iter_ms: float
    final_loss: float
    max_mismatch: float
    seed: int
    error: str = ""


RECORD_COLUMNS = [field.name for field in dataclasses.fields(RunRecord)]


@dataclasses.dataclass(frozen=True)
class GridSpec:
    """
    One grid of a suite.

    Attributes
    ----------
    path : pathlib.Path
        MATPOWER case file.
    name : str or None
        Name in the records. Default is the scaled case name.
    node_scale : int or None
        Number of copies for `node_scale`; None leaves the grid unscaled.
    edge_scale : int
        Number of random branches added with `edge_scale`.
    """

    path: Path
    name: str | None = None
    node_scale: int | None = None
    edge_scale: int = 0


@dataclasses.dataclass(frozen=True)
class BenchmarkSuite:
    """
    Benchmark matrix.

    Attributes
    ----------
    grids : tuple of GridSpec
        Grids.
    solvers : tuple of str
        Solvers out of "dpf", "nr", "dc".
    batch_sizes : tuple of int
        Batch sizes.
    repeats : int
        Timed runs per cell, after one warm-up.
    seed : int
        Seed of the grid generators.
    preset : str
        DPF preset.
    max_iter : int or None
        Overrides the preset iteration budget.
    label : str
        Label copied into every record.
    """

    grids: tuple
    solvers: tuple = ("dpf",)
    batch_sizes: tuple = (1,)
    repeats: int = 1
    seed: int = 0
    preset: str = "dpf-118"
    max_iter: int | None = None
    label: str = "bench"

    def __post_init__(self):
        if len(self.grids) == 0:
            msg = "A suite needs at least one grid"
            raise ValueError(msg)
        unknown = set(self.solvers) - set(SOLVERS)
        if unknown:
            msg = f"Unknown solvers {sorted(unknown)}, expected a subset of {SOLVERS}"
            raise ValueError(msg)
        if self.repeats < 1 or any(b < 1 for b in self.batch_sizes):
            msg = "repeats and batch sizes should be at least 1"
            raise ValueError(msg)
        get_preset(self.preset)

    def dpf_config(self):
        """DPF settings of the suite."""
        overrides = {} if self.max_iter is None else {"max_iter": self.max_iter}
        return DpfConfig.from_preset(self.preset, record_history=False, **overrides)


def load_suite(path):
    """
    Read a benchmark suite from a JSON file.

    Grid paths are resolved relative to the suite file.

    Parameters
    ----------
    path : str or pathlib.Path
        Suite file.

    Returns
    -------
    BenchmarkSuite
        Suite.
    """
    path = Path(path)
    data = json.loads(path.read_text())
    if "grids" not in data:
        msg = f"Suite {path} has no 'grids' entry"
        raise ValueError(msg)

    grid_keys = {field.name for field in dataclasses.fields(GridSpec)}
    grids = []
    for entry in data["grids"]:
        entry = {"path": entry} if isinstance(entry, str) else dict(entry)
        unknown = set(entry) - grid_keys
        if unknown:
            msg = f"Unknown keys {sorted(unknown)} in grid entry of {path}"
            raise ValueError(msg)
        grid_path = Path(entry.pop("path"))
        if not grid_path.is_absolute():
            grid_path = path.parent / grid_path
        grids.append(GridSpec(path=grid_path, **entry))

    return BenchmarkSuite(
        grids=tuple(grids),
        solvers=tuple(data.get("solvers", ("dpf",))),
        batch_sizes=tuple(data.get("batch_sizes", (1,))),
        repeats=int(data.get("repeats", 1)),
        seed=int(data.get("seed", 0)),
        preset=data.get("preset", "dpf-118"),
        max_iter=data.get("max_iter"),
        label=data.get("label", path.stem),
    )


def prepare_grid(spec, seed=0):
    """
    Load and scale a suite grid.

    Parameters
    ----------
    spec : GridSpec
        Grid entry.
    seed : int, optional
        Seed of the scaling generators. Default is 0.

    Returns
    -------
    tuple
        (name, PowerFlowProblem).
    """
    case = load_case(spec.path)
    if spec.node_scale is not None:
        case = node_scale(case, spec.node_scale, seed=seed)
    if spec.edge_scale:
        case = edge_scale(case, spec.edge_scale, seed=seed)
    return spec.name or case.name, build_problem(case)


def run_benchmark(suite, out=None, fmt="csv"):
    """
    Run every cell of a suite.

    Parameters
    ----------
    suite : BenchmarkSuite
        Suite.
    out : str or pathlib.Path, optional
        Output file, overwritten, then appended to after each cell.
    fmt : {"csv", "plain"}, optional
        Output format. Default is "csv".

    Returns
    -------
    list of RunRecord
        Records in execution order.
    """
    if fmt not in RECORD_FORMATS:
        msg = f"Unknown record format {fmt!r}, expected one of {RECORD_FORMATS}"
        raise ValueError(msg)

    config = suite.dpf_config()
    records = []
    written = False

    for spec in suite.grids:
        try:
            name, problem = prepare_grid(spec, seed=suite.seed)
        except (OSError, ValueError) as err:
            logger.error("Cannot prepare grid %s: %s", spec.path, err)
            name, problem = spec.name or Path(spec.path).stem, None
            failure = str(err)

        for solver in suite.solvers:
            for batch_size in suite.batch_sizes:
                if problem is None:
                    cell = [_failed_record(suite, name, solver, batch_size, failure)]
                else:
                    cell = _run_cell(suite, name, problem, solver, batch_size, config)
                records.extend(cell)
                if out is not None:
                    write_records(cell, out, fmt=fmt, append=written)
                    written = True

    return records


def write_records(records, path, fmt="csv", append=False):
    """
    Write run records.

    Parameters
    ----------
    records : list of RunRecord
        Records.
    path : str or pathlib.Path
        Output file.
    fmt : {"csv", "plain"}, optional
        Comma-separated with a header row, or whitespace-delimited with a
        ``#``-prefixed header line. Default is "csv".
    append : bool, optional
        Append without header instead of overwriting. Default is False.
    """
    if fmt not in RECORD_FORMATS:
        msg = f"Unknown record format {fmt!r}, expected one of {RECORD_FORMATS}"
        raise ValueError(msg)

    path = Path(path)
    frame = pd.DataFrame([dataclasses.asdict(r) for r in records], columns=RECORD_COLUMNS)

    if fmt == "csv":
        frame.to_csv(path, mode="a" if append else "w", header=not append, index=False)
        return

    if not append:
        path.write_text("# " + " ".join(RECORD_COLUMNS) + "\n")
    frame["error"] = frame["error"].replace("", "-")
    frame.to_csv(path, mode="a", sep=" ", header=False, index=False, na_rep="nan")


def scaling_exponent(sizes, times):
    """
    Fit time = c size^alpha on log-log axes.

    Parameters
    ----------
    sizes : array-like
        Problem sizes, e.g. nnz of Y_bus. Positive.
    times : array-like
        Times. Positive.

    Returns
    -------
    tuple of float
        (alpha, R^2).
    """
    sizes = np.asarray(sizes, dtype=float)
    times = np.asarray(times, dtype=float)
    if sizes.shape != times.shape or sizes.size < 2:
        msg = "Need at least two (size, time) pairs of equal length"
        raise ValueError(msg)
    if (sizes <= 0).any() or (times <= 0).any():
        msg = "Sizes and times should be positive"
        raise ValueError(msg)

    fit = linregress(np.log(sizes), np.log(times))
    return float(fit.slope), float(fit.rvalue**2)


def traced_peak_bytes(func, *args, **kwargs):
    """
    Call a function and measure its peak traced allocation.

    Parameters
    ----------
    func : callable
        Function to call.
    *args, **kwargs
        Arguments of `func`.

    Returns
    -------
    tuple
        (result of func, peak allocation above the starting level in bytes).
    """
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    tracemalloc.reset_peak()
    baseline, _ = tracemalloc.get_traced_memory()
    try:
        result = func(*args, **kwargs)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        if not was_tracing:
            tracemalloc.stop()
    return result, peak - baseline


def _run_cell(suite, name, problem, solver, batch_size, config):
    """Warm-up plus `suite.repeats` timed runs of one cell."""
    target = problem if batch_size == 1 else make_batch([problem] * batch_size)
    base = {
        "label": suite.label,
        "grid": name,
        "n_buses": target.n_buses,
        "nnz": target.y_bus.nnz,
        "solver": solver,
        "batch": batch_size,
        "seed": suite.seed,
    }

    records = []
    try:
        _solve(solver, target, batch_size, config)
        for _ in range(suite.repeats):
            t0 = time.perf_counter()
            iterations, final_loss, max_mismatch = _solve(solver, target, batch_size, config)
            wall_ms = 1e3 * (time.perf_counter() - t0)
            records.append(
                RunRecord(
                    iterations=iterations,
                    wall_ms=wall_ms,
                    per_iter_ms=wall_ms / iterations if iterations > 0 else float("nan"),
                    final_loss=final_loss,
                    max_mismatch=max_mismatch,
                    **base,
                )
            )
    except (RuntimeError, FloatingPointError, ValueError) as err:
        logger.error("%s / %s / batch %d failed: %s", name, solver, batch_size, err)
        return [*records, _failed_record(suite, name, solver, batch_size, str(err), base)]

    logger.info(
        "%s / %s / batch %d: median %.2f ms over %d runs",
        name,
        solver,
        batch_size,
        np.median([r.wall_ms for r in records]),
        len(records),
    )
    return records


def _solve(solver, target, batch_size, config):
    """Run one solver call and return (iterations, final_loss, max_mismatch)."""
    if solver == "dpf":
        if batch_size == 1:
            solutions = [solve_dpf(target, config)]
        else:
            solutions = solve_batch(target, config)
    elif solver == "nr":
        solutions = [solve_nr(target)]
    else:
        solutions = [evaluate_state(target, solve_dc(target), "dc", iterations=1)]

    return (
        max(s.iterations for s in solutions),
        max(s.final_loss for s in solutions),
        max(s.max_mismatch for s in solutions),
    )


def _failed_record(suite, name, solver, batch_size, error, base=None):
    base = base or {
        "label": suite.label,
        "grid": name,
        "n_buses": 0,
        "nnz": 0,
        "solver": solver,
        "batch": batch_size,
        "seed": suite.seed,
    }
    nan = float("nan")
    return RunRecord(
        iterations=0,
        wall_ms=nan,
        per_iter_ms=nan,
        final_loss=nan,
        max_mismatch=nan,
        error=error,
        **base,
    )
