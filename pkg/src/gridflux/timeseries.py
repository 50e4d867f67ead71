"""
Warm-started power flow over a sequence of similar injection scenarios.

Consecutive steps of a time series differ only slightly in their injections,
so the solution of one step is a good starting point for the next. The first
step is solved from flat start with the ts-first preset and every later step
from the previous solution with the ts-warm preset.

Main functions:
- generate_series: Seeded random-walk load scenarios on a fixed grid.
- solve_series: Solve all steps, warm-starting each from its predecessor.
- solution_distance: Infinity-norm distance between two voltage states.
- iterations_to_reach: First iteration at which a loss history reaches a target.
- series_frame: Tabulate the solutions of a series.
"""

import dataclasses
import logging

import numpy as np
import pandas as pd

from gridflux.grid_model import with_injections
from gridflux.solvers import DivergenceError, DpfConfig, solve_dpf
from gridflux.utils import max_abs_difference

logger = logging.getLogger(__name__)


class SeriesStepError(RuntimeError):
    """Solving one step of a series failed. `step` holds the step index."""

    def __init__(self, msg, step=None):
        super().__init__(msg)
        self.step = step


@dataclasses.dataclass(frozen=True, eq=False)
class InjectionSeries:
    """
    Injection scenarios on a fixed grid.

    Attributes
    ----------
    base : PowerFlowProblem
        Grid and base-case injections.
    steps : tuple of numpy.ndarray
        Net injection per step [p.u.], each of length N.
    loads : tuple of numpy.ndarray
        Demand per step [p.u.], each of length N.
    seed : int
        Seed the scenarios were drawn with.
    """

    base: object
    steps: tuple
    loads: tuple
    seed: int

    def __post_init__(self):
        n = self.base.n_buses
        if any(step.shape != (n,) for step in self.steps):
            msg = f"Every step should have {n} injections"
            raise ValueError(msg)

    @property
    def n_steps(self):
        """Number of steps."""
        return len(self.steps)

    def problem_at(self, t):
        """Power-flow problem of step `t`."""
        return with_injections(self.base, self.steps[t], self.loads[t])


def generate_series(problem, n_steps, rel_amplitude, seed=0):
    """
    Generate load scenarios as a multiplicative random walk.

    Step 0 holds the base injections. Step t multiplies each nonzero load of
    step t-1 by (1 + delta), with delta drawn per bus from a uniform
    distribution on [-rel_amplitude, rel_amplitude]. Generation is kept fixed.

    Parameters
    ----------
    problem : PowerFlowProblem
        Base problem.
    n_steps : int
        Number of steps, at least 1.
    rel_amplitude : float
        Relative amplitude of the per-step perturbation, in [0, 1).
    seed : int, optional
        Random seed. Default is 0.

    Returns
    -------
    InjectionSeries
        Series of `n_steps` injection vectors.
    """
    if n_steps < 1:
        msg = f"n_steps should be at least 1, got {n_steps}"
        raise ValueError(msg)
    if not 0 <= rel_amplitude < 1:
        msg = f"rel_amplitude should be in [0, 1), got {rel_amplitude}"
        raise ValueError(msg)

    rng = np.random.default_rng(seed)
    has_load = problem.s_load != 0
    factor = np.ones(problem.n_buses)

    steps = [problem.s_bus.copy()]
    loads = [problem.s_load.copy()]
    for _ in range(1, n_steps):
        delta = rng.uniform(-rel_amplitude, rel_amplitude, size=problem.n_buses)
        factor = np.where(has_load, factor * (1.0 + delta), 1.0)
        s_load = problem.s_load * factor
        steps.append(problem.s_gen - s_load)
        loads.append(s_load)

    logger.debug("Generated %d steps with amplitude %.3g (seed %d)", n_steps, rel_amplitude, seed)
    return InjectionSeries(base=problem, steps=tuple(steps), loads=tuple(loads), seed=seed)


def solve_series(series, first_config=None, warm_config=None):
    """
    Solve every step of a series, warm-starting from the previous solution.

    Parameters
    ----------
    series : InjectionSeries
        Scenarios.
    first_config : DpfConfig, optional
        Settings for step 0, solved from flat start. Default is the ts-first preset.
    warm_config : DpfConfig, optional
        Settings for later steps. Default is the ts-warm preset.

    Returns
    -------
    list of Solution
        One solution per step.

    Raises
    ------
    SeriesStepError
        If a step fails; the original error is chained.
    """
    first_config = DpfConfig.from_preset("ts-first") if first_config is None else first_config
    warm_config = DpfConfig.from_preset("ts-warm") if warm_config is None else warm_config

    solutions = []
    for t in range(series.n_steps):
        config = first_config if t == 0 else warm_config
        init = None if t == 0 else solutions[-1].state
        try:
            solution = solve_dpf(series.problem_at(t), config, init=init)
        except (DivergenceError, ValueError, FloatingPointError) as err:
            msg = f"Series step {t} failed: {err}"
            raise SeriesStepError(msg, step=t) from err

        logger.info(
            "Step %d: %s after %d iterations, max mismatch %.3e p.u.",
            t,
            "converged" if solution.converged else "not converged",
            solution.iterations,
            solution.max_mismatch,
        )
        solutions.append(solution)
    return solutions


def solution_distance(a, b):
    """
    Distance between two voltage states.

    Parameters
    ----------
    a, b : VoltageState
        States of the same grid.

    Returns
    -------
    float
        Infinity norm over the concatenated magnitudes [p.u.] and angles [rad].
    """
    return max_abs_difference(np.r_[a.vm, a.va], np.r_[b.vm, b.va])


def iterations_to_reach(loss_history, target):
    """
    First iteration whose loss is at or below a target.

    Parameters
    ----------
    loss_history : array-like
        Loss per iterate, starting with the initial state.
    target : float
        Target loss.

    Returns
    -------
    int or None
        Index of the first iterate reaching `target`, None if it is never reached.
    """
    reached = np.flatnonzero(np.asarray(loss_history) <= target)
    return int(reached[0]) if reached.size else None


def series_frame(solutions):
    """
    Tabulate the solutions of a series.

    Parameters
    ----------
    solutions : list of Solution
        Per-step solutions.

    Returns
    -------
    pandas.DataFrame
        Columns step, converged, iterations, final_loss, max_mismatch, wall_time_ms.
    """
    return pd.DataFrame({
        "step": np.arange(len(solutions)),
        "converged": [s.converged for s in solutions],
        "iterations": [s.iterations for s in solutions],
        "final_loss": [s.final_loss for s in solutions],
        "max_mismatch": [s.max_mismatch for s in solutions],
        "wall_time_ms": [1e3 * s.wall_time for s in solutions],
    })
