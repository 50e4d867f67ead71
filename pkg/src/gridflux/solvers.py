"""
Power-flow solvers: gradient-based DPF, Newton-Raphson and the DC approximation.

DPF minimizes the mean squared power mismatch with a first-order optimizer
over the packed parameter vector [theta at pv, pq; |V| at pq]. Setpoint
magnitudes and the slack angle are not part of the parameter vector and are
therefore never modified.

Several problems can be solved at once by stacking them into a
`BatchedProblem` with a block-diagonal admittance matrix. A batch shares one
forward and one backward pass per iteration. Convergence is judged per case;
converged cases are frozen while the others continue.

Main functions:
- solve_dpf: Gradient-descent power flow on one problem.
- solve_batch: Gradient-descent power flow on a batch of problems.
- solve_nr: Newton-Raphson with dense LU, initialized from the DC solution.
- solve_dc: Linear DC approximation of the voltage angles.
- make_batch: Stack problems into a block-diagonal batch.
- evaluate_state: Wrap any voltage state into an AC-evaluated Solution.
- solution_frame / solution_metadata: Tabular and JSON-ready solution output.
"""

import dataclasses
import logging
import time
from functools import cached_property

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from gridflux.grid_model import buses_connected_to_slack
from gridflux.optimizers import (
    NonFiniteGradientError,
    OptimizerConfig,
    SchedulerConfig,
    get_preset,
    init_optimizer_state,
    init_scheduler_state,
    optimizer_step,
    scheduler_step,
)
from gridflux.pf_core import (
    VoltageState,
    assemble_jacobian,
    calc_power,
    enforce_setpoints,
    flat_start,
    loss,
    loss_and_gradient,
    mismatch,
)
from gridflux.sparse_core import SingularMatrixError, block_diag, dense_lu_solve

logger = logging.getLogger(__name__)

# Loss above which a DPF run is considered divergent [p.u.^2]
DIVERGENCE_LOSS = 1e12
LOG_EVERY = 100


class DivergenceError(RuntimeError):
    """
    DPF run produced a non-finite or exploding loss or gradient.

    Attributes
    ----------
    state : VoltageState or None
        Last state with a finite loss.
    iteration : int or None
        Iteration at which the divergence was detected.
    """

    def __init__(self, msg, state=None, iteration=None):
        super().__init__(msg)
        self.state = state
        self.iteration = iteration


class SingularJacobianError(SingularMatrixError):
    """Newton-Raphson Jacobian is singular. `iteration` holds the failing iteration."""

    def __init__(self, msg, iteration=None):
        super().__init__(msg)
        self.iteration = iteration


@dataclasses.dataclass(frozen=True, eq=False)
class Solution:
    """
    Result of a power-flow run.

    Attributes
    ----------
    state : VoltageState
        Final voltages.
    converged : bool
        Whether the termination criterion holds at `state`.
    iterations : int
        Number of update steps applied.
    final_loss : float
        Loss at `state` [p.u.^2].
    max_mismatch : float
        Infinity norm of the mismatch at `state` [p.u.].
    loss_history : numpy.ndarray
        Loss per evaluated iterate, starting with the initial state. Empty when history is not recorded.
    lr_history : numpy.ndarray
        Learning rate used for each DPF step. Empty for other methods.
    wall_time : float
        Wall-clock time of the run [s]. Batched runs report the time of the whole batch.
    method : str
        "dpf", "nr", "dc" or a label passed to `evaluate_state`.
    """

    state: VoltageState
    converged: bool
    iterations: int
    final_loss: float
    max_mismatch: float
    loss_history: np.ndarray
    lr_history: np.ndarray
    wall_time: float
    method: str


@dataclasses.dataclass(frozen=True)
class DpfConfig:
    """
    Settings of a DPF run.

    Attributes
    ----------
    optimizer : OptimizerConfig
        Optimizer hyperparameters.
    scheduler : SchedulerConfig
        Learning-rate schedule.
    max_iter : int
        Maximum number of optimizer steps.
    loss_tol : float
        Stop when the loss falls below this value [p.u.^2].
    mismatch_tol : float
        Stop when the largest absolute mismatch falls below this value [p.u.].
    early_stop_lr : float
        Stop when the learning rate falls below this value.
    record_history : bool
        Keep the loss and learning-rate histories.
    """

    optimizer: OptimizerConfig = dataclasses.field(default_factory=OptimizerConfig)
    scheduler: SchedulerConfig = dataclasses.field(default_factory=SchedulerConfig)
    max_iter: int = 1000
    loss_tol: float = 1e-10
    mismatch_tol: float = 1e-6
    early_stop_lr: float = 0.0
    record_history: bool = True

    def __post_init__(self):
        if self.max_iter < 1:
            msg = f"max_iter should be at least 1, got {self.max_iter}"
            raise ValueError(msg)
        if self.loss_tol < 0 or self.mismatch_tol < 0 or self.early_stop_lr < 0:
            msg = "Tolerances should be non-negative"
            raise ValueError(msg)

    @classmethod
    def from_preset(cls, name, **overrides):
        """
        Build a configuration from a named preset.

        Parameters
        ----------
        name : str
            Preset name, see `gridflux.optimizers.PRESETS`.
        **overrides
            Fields replacing the preset values, e.g. ``max_iter=200``.

        Returns
        -------
        DpfConfig
            Configuration.
        """
        fields = dict(get_preset(name))
        fields.update(overrides)
        return cls(**fields)

    def to_dict(self):
        """JSON-ready representation."""
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True, eq=False)
class BatchedProblem:
    """
    Several power-flow problems stacked into one block-diagonal system.

    Bus k of case b has index k + offsets[b] in the stacked vectors.

    Attributes
    ----------
    y_bus : scipy.sparse.csr_matrix
        Block-diagonal admittance matrix.
    s_bus, vm_setpoint, bus_ids : numpy.ndarray
        Stacked per-bus vectors.
    pv, pq, slack : numpy.ndarray
        Offset index sets; `slack` holds one index per case.
    slack_angle : numpy.ndarray
        Slack angle per case [rad].
    branch_from, branch_to, branch_x : numpy.ndarray
        Stacked branch arrays with offset end indices.
    case_sizes : numpy.ndarray
        Number of buses per case.
    problems : tuple of PowerFlowProblem
        The stacked problems.
    """

    y_bus: sp.csr_matrix
    s_bus: np.ndarray
    pv: np.ndarray
    pq: np.ndarray
    slack: np.ndarray
    vm_setpoint: np.ndarray
    slack_angle: np.ndarray
    bus_ids: np.ndarray
    branch_from: np.ndarray
    branch_to: np.ndarray
    branch_x: np.ndarray
    case_sizes: np.ndarray
    problems: tuple

    @property
    def n_buses(self):
        """Total number of buses."""
        return self.y_bus.shape[0]

    @property
    def n_branches(self):
        """Total number of branches."""
        return len(self.branch_from)

    @property
    def n_cases(self):
        """Number of stacked cases B."""
        return len(self.case_sizes)

    @cached_property
    def offsets(self):
        """Index of the first bus of each case."""
        return np.r_[0, np.cumsum(self.case_sizes)[:-1]].astype(np.int64)

    @cached_property
    def case_of_bus(self):
        """Case number per stacked bus."""
        return np.repeat(np.arange(self.n_cases), self.case_sizes)

    @cached_property
    def pvpq(self):
        """PV indices followed by PQ indices."""
        return np.r_[self.pv, self.pq]

    @property
    def slack_indices(self):
        """Slack bus indices, one per case."""
        return self.slack

    @cached_property
    def n_residuals(self):
        """Number of mismatch components over all cases."""
        return len(self.pv) + 2 * len(self.pq)

    def split_state(self, state):
        """Split a stacked VoltageState into one state per case."""
        bounds = np.r_[self.offsets, self.n_buses]
        return [
            VoltageState(vm=state.vm[lo:hi].copy(), va=state.va[lo:hi].copy())
            for lo, hi in zip(bounds[:-1], bounds[1:], strict=True)
        ]


def make_batch(problems):
    """
    Stack problems into a block-diagonal batch.

    Parameters
    ----------
    problems : list of PowerFlowProblem
        Problems to stack; may differ in size.

    Returns
    -------
    BatchedProblem
        Stacked problem.
    """
    problems = tuple(problems)
    if len(problems) == 0:
        msg = "make_batch needs at least one problem"
        raise ValueError(msg)

    sizes = np.array([p.n_buses for p in problems], dtype=np.int64)
    offsets = np.r_[0, np.cumsum(sizes)[:-1]]

    def stack(attr, offset=False):
        return np.concatenate([
            np.asarray(getattr(p, attr)) + (off if offset else 0) for p, off in zip(problems, offsets, strict=True)
        ])

    batch = BatchedProblem(
        y_bus=block_diag([p.y_bus for p in problems]),
        s_bus=stack("s_bus"),
        pv=stack("pv", offset=True).astype(np.int64),
        pq=stack("pq", offset=True).astype(np.int64),
        slack=np.array([p.slack + off for p, off in zip(problems, offsets, strict=True)], dtype=np.int64),
        vm_setpoint=stack("vm_setpoint"),
        slack_angle=np.array([p.slack_angle for p in problems], dtype=float),
        bus_ids=stack("bus_ids"),
        branch_from=stack("branch_from", offset=True).astype(np.int64),
        branch_to=stack("branch_to", offset=True).astype(np.int64),
        branch_x=stack("branch_x"),
        case_sizes=sizes,
        problems=problems,
    )
    logger.debug("Stacked %d cases into %d buses, nnz %d", len(problems), batch.n_buses, batch.y_bus.nnz)
    return batch


def solve_dpf(problem, config=None, init=None):
    """
    Solve a power flow by gradient descent on the mean squared mismatch.

    Parameters
    ----------
    problem : PowerFlowProblem
        Problem.
    config : DpfConfig, optional
        Solver settings. Default is ``DpfConfig()``.
    init : VoltageState, optional
        Initial voltages, projected onto the setpoints. Default is the flat start.

    Returns
    -------
    Solution
        Final state with loss and learning-rate histories.

    Raises
    ------
    DivergenceError
        If the loss exceeds 1e12 or the loss or gradient becomes non-finite.
    """
    config = DpfConfig() if config is None else config
    start = flat_start(problem) if init is None else enforce_setpoints(init, problem)
    case_of_bus = np.zeros(problem.n_buses, dtype=np.int64)

    t0 = time.perf_counter()
    run = _run_dpf(problem, config, start, case_of_bus, n_cases=1)
    wall_time = time.perf_counter() - t0

    solution = _case_solution(run, 0, run["state"], wall_time)
    logger.info(
        "DPF %s after %d iterations: loss %.3e, max mismatch %.3e p.u., %.1f ms",
        "converged" if solution.converged else "stopped",
        solution.iterations,
        solution.final_loss,
        solution.max_mismatch,
        1e3 * wall_time,
    )
    return solution


def solve_batch(batch, config=None, inits=None):
    """
    Solve all cases of a batch with one stacked DPF run.

    The loss is the mean over all stacked mismatch components. A case is frozen
    (zero gradient, fixed parameters) once its own loss or mismatch meets the
    tolerances; the run ends when all cases are converged or a global stop
    criterion is met.

    Parameters
    ----------
    batch : BatchedProblem
        Stacked problems.
    config : DpfConfig, optional
        Solver settings. Default is ``DpfConfig()``.
    inits : list of VoltageState or None, optional
        Initial state per case; None entries, or None for all, use the flat start.

    Returns
    -------
    list of Solution
        One solution per case, in batch order.
    """
    config = DpfConfig() if config is None else config
    if inits is None:
        inits = [None] * batch.n_cases
    if len(inits) != batch.n_cases:
        msg = f"Got {len(inits)} initial states for {batch.n_cases} cases"
        raise ValueError(msg)

    states = [
        flat_start(p) if init is None else enforce_setpoints(init, p)
        for p, init in zip(batch.problems, inits, strict=True)
    ]
    start = VoltageState(vm=np.concatenate([s.vm for s in states]), va=np.concatenate([s.va for s in states]))

    t0 = time.perf_counter()
    run = _run_dpf(batch, config, start, batch.case_of_bus, n_cases=batch.n_cases)
    wall_time = time.perf_counter() - t0

    case_states = batch.split_state(run["state"])
    solutions = [_case_solution(run, b, case_states[b], wall_time) for b in range(batch.n_cases)]
    logger.info(
        "Batched DPF on %d cases: %d converged after %d iterations, %.1f ms",
        batch.n_cases,
        sum(s.converged for s in solutions),
        run["iterations"],
        1e3 * wall_time,
    )
    return solutions


def solve_nr(problem, tol=1e-8, max_iter=20, init=None):
    """
    Solve a power flow with the Newton-Raphson method.

    Each iteration solves J dx = -F with a dense LU decomposition and updates
    [theta at pv, pq; |V| at pq].

    Parameters
    ----------
    problem : PowerFlowProblem
        Problem.
    tol : float, optional
        Convergence threshold on the largest absolute mismatch [p.u.]. Default is 1e-8.
    max_iter : int, optional
        Maximum number of Newton steps. Default is 20.
    init : VoltageState, optional
        Initial voltages. Default is the DC solution, or the flat start if the DC solve fails.

    Returns
    -------
    Solution
        Final state; `converged` is False when `max_iter` is exhausted.

    Raises
    ------
    SingularJacobianError
        If the Jacobian is singular.
    """
    if max_iter < 0:
        msg = f"max_iter should be non-negative, got {max_iter}"
        raise ValueError(msg)

    t0 = time.perf_counter()
    if init is not None:
        state = enforce_setpoints(init, problem)
    else:
        try:
            state = solve_dc(problem)
        except (SingularMatrixError, ValueError) as err:
            logger.warning("DC initialization failed (%s), starting Newton-Raphson from flat start", err)
            state = flat_start(problem)

    n_angles = len(problem.pvpq)
    history = []
    converged = False
    iteration = 0
    while True:
        m = mismatch(state, problem)
        history.append(loss(m))
        max_abs = m.max_abs
        logger.debug("NR iteration %d: max mismatch %.3e p.u.", iteration, max_abs)

        if max_abs < tol:
            converged = True
            break
        if iteration >= max_iter or not np.isfinite(max_abs):
            break

        jacobian = assemble_jacobian(state, problem).assembled
        try:
            step = dense_lu_solve(jacobian, -m.stacked)
        except SingularMatrixError as err:
            msg = f"Jacobian is singular at Newton iteration {iteration}"
            raise SingularJacobianError(msg, iteration=iteration) from err

        vm = state.vm.copy()
        va = state.va.copy()
        va[problem.pvpq] += step[:n_angles]
        vm[problem.pq] += step[n_angles:]
        state = VoltageState(vm=vm, va=va)
        iteration += 1

    wall_time = time.perf_counter() - t0
    if converged:
        logger.info("NR converged in %d iterations: max mismatch %.3e p.u.", iteration, max_abs)
    else:
        logger.warning("NR did not converge in %d iterations: max mismatch %.3e p.u.", iteration, max_abs)

    return Solution(
        state=state,
        converged=converged,
        iterations=iteration,
        final_loss=history[-1],
        max_mismatch=max_abs,
        loss_history=np.asarray(history),
        lr_history=np.zeros(0),
        wall_time=wall_time,
        method="nr",
    )


def solve_dc(problem):
    """
    Solve the DC power-flow approximation.

    Solves B' theta = P on the non-slack buses, where B' has -1/x per branch
    off the diagonal and the negated row sums on the diagonal. Resistances,
    taps, phase shifts and reactive power are ignored.

    Parameters
    ----------
    problem : PowerFlowProblem or BatchedProblem
        Problem.

    Returns
    -------
    VoltageState
        Setpoint magnitudes at PV and slack buses, 1 p.u. at PQ buses, DC angles.

    Raises
    ------
    SingularMatrixError
        If some buses are not connected to a slack bus.
    """
    if (problem.branch_x == 0).any():
        msg = f"DC power flow needs nonzero reactances; {np.count_nonzero(problem.branch_x == 0)} branches have x = 0"
        raise ValueError(msg)

    connected = buses_connected_to_slack(problem)
    if not connected.all():
        msg = f"B' is singular: {np.count_nonzero(~connected)} buses are not connected to a slack bus"
        raise SingularMatrixError(msg)

    state = flat_start(problem)
    n = problem.n_buses
    free = np.ones(n, dtype=bool)
    free[problem.slack_indices] = False
    if not free.any():
        return state

    f, t = problem.branch_from, problem.branch_to
    b = 1.0 / problem.branch_x
    b_prime = sp.csr_matrix(
        (np.r_[b, b, -b, -b], (np.r_[f, t, f, t], np.r_[f, t, t, f])),
        shape=(n, n),
    )

    b_free = b_prime[free][:, free].tocsc()
    rhs = problem.s_bus.real[free] - b_prime[free][:, ~free] @ state.va[~free]
    try:
        theta = splu(b_free).solve(rhs)
    except RuntimeError as err:
        msg = f"B' is singular: {err}"
        raise SingularMatrixError(msg) from err

    state.va[free] = theta
    logger.debug("DC angles in [%.4f, %.4f] rad", theta.min(), theta.max())
    return state


def evaluate_state(problem, state, method="state", *, converged=True, iterations=0, wall_time=0.0):
    """
    Evaluate a voltage state on the AC equations.

    Parameters
    ----------
    problem : PowerFlowProblem
        Problem.
    state : VoltageState
        Voltages, e.g. the result of `solve_dc`.
    method : str, optional
        Label stored in the solution. Default is "state".
    converged : bool, optional
        Value of the `converged` flag. Default is True.
    iterations : int, optional
        Iteration count to report. Default is 0.
    wall_time : float, optional
        Wall-clock time to report [s]. Default is 0.

    Returns
    -------
    Solution
        Solution carrying the AC loss and maximum mismatch of `state`.
    """
    m = mismatch(state, problem)
    value = loss(m)
    return Solution(
        state=state,
        converged=converged,
        iterations=iterations,
        final_loss=value,
        max_mismatch=m.max_abs,
        loss_history=np.array([value]),
        lr_history=np.zeros(0),
        wall_time=wall_time,
        method=method,
    )


def solution_frame(problem, solution):
    """
    Tabulate a solution per bus.

    Parameters
    ----------
    problem : PowerFlowProblem
        Problem the solution belongs to.
    solution : Solution or VoltageState
        Solution or bare voltages.

    Returns
    -------
    pandas.DataFrame
        Columns bus_id, vm_pu, va_rad, p_calc_pu, q_calc_pu.
    """
    state = getattr(solution, "state", solution)
    s_calc = calc_power(state, problem.y_bus)
    return pd.DataFrame({
        "bus_id": problem.bus_ids,
        "vm_pu": state.vm,
        "va_rad": state.va,
        "p_calc_pu": s_calc.real,
        "q_calc_pu": s_calc.imag,
    })


def solution_metadata(solution, config=None):
    """
    Run metadata of a solution as a JSON-ready dict.

    Parameters
    ----------
    solution : Solution
        Solution.
    config : DpfConfig or dict, optional
        Configuration echoed in the metadata.

    Returns
    -------
    dict
        Keys method, converged, iterations, final_loss, max_mismatch, wall_time_ms, loss_history, config.
    """
    if isinstance(config, DpfConfig):
        config = config.to_dict()
    return {
        "method": solution.method,
        "converged": bool(solution.converged),
        "iterations": int(solution.iterations),
        "final_loss": float(solution.final_loss),
        "max_mismatch": float(solution.max_mismatch),
        "wall_time_ms": 1e3 * solution.wall_time,
        "loss_history": [float(v) for v in solution.loss_history],
        "config": config or {},
    }


def _run_dpf(problem, config, start, case_of_bus, n_cases):
    """
    Shared DPF loop over a single or stacked problem.

    Returns a dict with the final stacked state, global iteration count and
    per-case arrays: converged, iterations, loss, max_mismatch and the
    per-case loss history (n_evaluations x n_cases).
    """
    pvpq, pq = problem.pvpq, problem.pq
    n_angles = len(pvpq)
    case_of_p = case_of_bus[pvpq]
    case_of_q = case_of_bus[pq]
    case_of_param = np.r_[case_of_p, case_of_q]
    counts = np.bincount(case_of_p, minlength=n_cases) + np.bincount(case_of_q, minlength=n_cases)

    params = np.r_[start.va[pvpq], start.vm[pq]]
    base_vm = start.vm.copy()
    base_va = start.va.copy()

    def unpack(x):
        vm = base_vm.copy()
        va = base_va.copy()
        va[pvpq] = x[:n_angles]
        vm[pq] = x[n_angles:]
        return VoltageState(vm=vm, va=va)

    opt_state = init_optimizer_state(config.optimizer, params.size)
    sched_state = init_scheduler_state(config.scheduler, config.optimizer.lr)
    lr = sched_state.lr

    converged = np.zeros(n_cases, dtype=bool)
    case_iterations = np.zeros(n_cases, dtype=np.int64)
    loss_history = []
    lr_history = []
    last_finite = None
    iteration = 0

    while True:
        state = unpack(params)
        try:
            m, value, gradient = loss_and_gradient(state, problem)
        except ZeroDivisionError as err:
            msg = f"Voltage magnitude reached zero at iteration {iteration}"
            raise DivergenceError(msg, state=last_finite, iteration=iteration) from err

        if not np.isfinite(value) or value > DIVERGENCE_LOSS:
            msg = f"DPF diverged at iteration {iteration}: loss {value}"
            raise DivergenceError(msg, state=last_finite, iteration=iteration)
        last_finite = state

        sq = np.bincount(case_of_p, weights=m.dp * m.dp, minlength=n_cases) + np.bincount(
            case_of_q, weights=m.dq * m.dq, minlength=n_cases
        )
        case_loss = sq / np.maximum(counts, 1)
        case_max = np.zeros(n_cases)
        np.maximum.at(case_max, case_of_p, np.abs(m.dp))
        np.maximum.at(case_max, case_of_q, np.abs(m.dq))

        if config.record_history:
            loss_history.append(case_loss)

        newly = ~converged & ((case_loss < config.loss_tol) | (case_max < config.mismatch_tol))
        case_iterations[newly] = iteration
        converged |= newly

        if iteration % LOG_EVERY == 0:
            logger.debug(
                "DPF iteration %d: loss %.3e, lr %.3e, %d/%d cases converged",
                iteration,
                value,
                lr,
                converged.sum(),
                n_cases,
            )

        if converged.all() or iteration >= config.max_iter or lr < config.early_stop_lr:
            break

        grad = gradient.packed
        frozen = converged[case_of_param]
        grad[frozen] = 0.0
        try:
            new_params = optimizer_step(opt_state, config.optimizer, params, grad, lr)
        except NonFiniteGradientError as err:
            msg = f"DPF diverged at iteration {iteration}: {err}"
            raise DivergenceError(msg, state=last_finite, iteration=iteration) from err
        new_params[frozen] = params[frozen]
        params = new_params

        if config.record_history:
            lr_history.append(lr)
        lr = scheduler_step(sched_state, config.scheduler, value)
        iteration += 1

    case_iterations[~converged] = iteration
    n_hist = len(loss_history)
    return {
        "state": state,
        "iterations": iteration,
        "converged": converged,
        "case_iterations": case_iterations,
        "case_loss": case_loss,
        "case_max": case_max,
        "loss_history": np.asarray(loss_history).reshape(n_hist, n_cases),
        "lr_history": np.asarray(lr_history, dtype=float),
    }


def _case_solution(run, b, state, wall_time):
    n = int(run["case_iterations"][b])
    return Solution(
        state=state,
        converged=bool(run["converged"][b]),
        iterations=n,
        final_loss=float(run["case_loss"][b]),
        max_mismatch=float(run["case_max"][b]),
        loss_history=run["loss_history"][: n + 1, b].copy(),
        lr_history=run["lr_history"][:n].copy(),
        wall_time=wall_time,
        method="dpf",
    )
