"""
Power-balance equations, their loss, gradient and Jacobian.

With complex voltages V = |V| exp(j theta) and admittance matrix Y_bus the
calculated injections are S_calc = V * conj(Y_bus V). The mismatch collects
the active part at PV and PQ buses and the reactive part at PQ buses,

    F(V) = [P_calc - P at pv, pq ; Q_calc - Q at pq],

and the loss is its mean square over the m = |pv| + 2 |pq| components.

The gradient of the loss is (2/m) J^T F, where J is the power-flow Jacobian.
`grad_loss` evaluates it matrix-free: one product with Y_bus (shared with the
forward pass) and one product with its transpose. Apart from a few vectors of
length N no memory is allocated, and the cost is O(nnz(Y_bus)).

Main functions:
- calc_power: Calculated complex injections.
- mismatch / loss: Power mismatch at the constrained components and its mean square.
- partial_derivatives: Sparse dS/d|V| and dS/dtheta.
- grad_loss: Gradient of the loss with respect to the trainable voltages.
- assemble_jacobian: Dense power-flow Jacobian for Newton-Raphson.
"""

import dataclasses

import numpy as np
import scipy.sparse as sp

from gridflux.sparse_core import spmv, transpose_apply


@dataclasses.dataclass(frozen=True, eq=False)
class VoltageState:
    """
    Bus voltages in polar form.

    Attributes
    ----------
    vm : numpy.ndarray
        Voltage magnitudes [p.u.].
    va : numpy.ndarray
        Voltage angles [rad].
    """

    vm: np.ndarray
    va: np.ndarray

    @property
    def voltage(self):
        """Complex voltages vm exp(j va)."""
        return self.vm * np.exp(1j * self.va)

    def copy(self):
        """Independent copy of the state."""
        return VoltageState(vm=self.vm.copy(), va=self.va.copy())


@dataclasses.dataclass(frozen=True, eq=False)
class Mismatch:
    """
    Power mismatch at the constrained components.

    Attributes
    ----------
    dp : numpy.ndarray
        P_calc - P at the buses pv followed by pq [p.u.].
    dq : numpy.ndarray
        Q_calc - Q at the pq buses [p.u.].
    """

    dp: np.ndarray
    dq: np.ndarray

    @property
    def stacked(self):
        """Mismatch vector [dp; dq] in Jacobian row order."""
        return np.r_[self.dp, self.dq]

    @property
    def max_abs(self):
        """Infinity norm over dp and dq [p.u.]."""
        if self.dp.size + self.dq.size == 0:
            return 0.0
        return float(max(np.abs(self.dp).max(initial=0.0), np.abs(self.dq).max(initial=0.0)))


@dataclasses.dataclass(frozen=True, eq=False)
class Gradient:
    """
    Gradient of the loss with respect to the trainable voltages.

    Attributes
    ----------
    d_vm : numpy.ndarray
        Derivative with respect to |V| at the pq buses.
    d_va : numpy.ndarray
        Derivative with respect to theta at the buses pv followed by pq.
    """

    d_vm: np.ndarray
    d_va: np.ndarray

    @property
    def packed(self):
        """Gradient in parameter order [d_va; d_vm]."""
        return np.r_[self.d_va, self.d_vm]


@dataclasses.dataclass(frozen=True, eq=False)
class JacobianBlocks:
    """
    Partial derivatives and the assembled power-flow Jacobian.

    Attributes
    ----------
    dS_dvm, dS_dva : scipy.sparse.csr_matrix
        Complex partial derivatives of S_calc (N x N).
    assembled : numpy.ndarray
        Real Jacobian of the mismatch with rows [P at pv, pq; Q at pq] and
        columns [theta at pv, pq; |V| at pq].
    """

    dS_dvm: sp.csr_matrix
    dS_dva: sp.csr_matrix
    assembled: np.ndarray


def flat_start(problem):
    """
    Flat-start voltages: setpoint magnitudes at PV and slack buses, 1 p.u. at PQ buses, zero angles.

    Parameters
    ----------
    problem : PowerFlowProblem or BatchedProblem
        Problem providing the setpoints.

    Returns
    -------
    VoltageState
        Initial voltages.
    """
    vm = np.ones(problem.n_buses)
    controlled = np.r_[problem.pv, problem.slack_indices]
    vm[controlled] = problem.vm_setpoint[controlled]
    va = np.zeros(problem.n_buses)
    va[problem.slack_indices] = problem.slack_angle
    return VoltageState(vm=vm, va=va)


def enforce_setpoints(state, problem):
    """
    Project a state onto the fixed components of a problem.

    Sets |V| at PV and slack buses to their setpoints and the slack angle to its
    fixed value. The input is not modified.

    Parameters
    ----------
    state : VoltageState
        Voltages.
    problem : PowerFlowProblem or BatchedProblem
        Problem providing the setpoints.

    Returns
    -------
    VoltageState
        Projected copy.
    """
    if state.vm.shape != (problem.n_buses,) or state.va.shape != (problem.n_buses,):
        msg = f"Voltage state has {state.vm.shape[0]} buses, problem has {problem.n_buses}"
        raise ValueError(msg)

    out = state.copy()
    controlled = np.r_[problem.pv, problem.slack_indices]
    out.vm[controlled] = problem.vm_setpoint[controlled]
    out.va[problem.slack_indices] = problem.slack_angle
    return out


def calc_power(state, y_bus):
    """
    Compute the calculated complex injections S_calc = V * conj(Y_bus V).

    Parameters
    ----------
    state : VoltageState
        Voltages.
    y_bus : scipy.sparse.csr_matrix
        Admittance matrix.

    Returns
    -------
    numpy.ndarray
        Complex injection per bus [p.u.].
    """
    v = state.voltage
    return v * np.conj(spmv(y_bus, v))


def mismatch(state, problem):
    """
    Compute the power mismatch at the constrained components.

    Parameters
    ----------
    state : VoltageState
        Voltages.
    problem : PowerFlowProblem or BatchedProblem
        Problem.

    Returns
    -------
    Mismatch
        dp over pv followed by pq, dq over pq.
    """
    return _mismatch_from_power(calc_power(state, problem.y_bus), problem)


def loss(m):
    """
    Mean squared mismatch (sum dp^2 + sum dq^2) / (|dp| + |dq|).

    Parameters
    ----------
    m : Mismatch
        Power mismatch.

    Returns
    -------
    float
        Loss [p.u.^2]. Zero when there are no mismatch components.
    """
    n = m.dp.size + m.dq.size
    if n == 0:
        return 0.0
    return float((np.dot(m.dp, m.dp) + np.dot(m.dq, m.dq)) / n)


def partial_derivatives(state, y_bus):
    """
    Compute the sparse partial derivatives of S_calc with respect to |V| and theta.

    Off the diagonal dS_i/d|V_j| = V_i conj(Y_ij V_j) / |V_j| and
    dS_i/dtheta_j = -j V_i conj(Y_ij V_j); the diagonal adds (V_i / |V_i|) conj(I_i)
    and j V_i conj(I_i) respectively, with I = Y_bus V.

    Parameters
    ----------
    state : VoltageState
        Voltages, all magnitudes nonzero.
    y_bus : scipy.sparse.csr_matrix
        Admittance matrix with its full diagonal stored.

    Returns
    -------
    tuple of scipy.sparse.csr_matrix
        (dS_dvm, dS_dva), both with the pattern of Y_bus plus the diagonal.
    """
    if (state.vm == 0).any():
        msg = f"Voltage magnitude is zero at buses {np.flatnonzero(state.vm == 0).tolist()}"
        raise ZeroDivisionError(msg)

    v = state.voltage
    current = spmv(y_bus, v)
    diag_v = sp.diags(v, format="csr")
    diag_current = sp.diags(current, format="csr")
    diag_vnorm = sp.diags(v / state.vm, format="csr")

    ds_dvm = diag_v @ (y_bus @ diag_vnorm).conj() + diag_current.conj() @ diag_vnorm
    ds_dva = 1j * diag_v @ (diag_current - y_bus @ diag_v).conj()
    return ds_dvm.tocsr(), ds_dva.tocsr()


def grad_loss(state, problem, *, via_partials=False):
    """
    Compute the gradient of the loss with respect to the trainable voltages.

    The gradient equals (2/m) J^T F. With weights w = dP + j dQ on the
    constrained components (zero elsewhere) and u = Y_bus^T (w * conj(V)):

    - dL/dtheta_j = (2/m) Re(j conj(w_j) V_j conj(I_j) - j conj(V_j) conj(u_j))
    - dL/d|V_j| = (2/m) Re(conj(w_j) (V_j/|V_j|) conj(I_j) + (conj(V_j)/|V_j|) conj(u_j))

    Only angles at pv and pq and magnitudes at pq are returned.

    Parameters
    ----------
    state : VoltageState
        Voltages, all magnitudes nonzero.
    problem : PowerFlowProblem or BatchedProblem
        Problem.
    via_partials : bool, optional
        Transpose-apply the sparse partial-derivative matrices instead of the
        matrix-free form. Default is False.

    Returns
    -------
    Gradient
        Gradient over the trainable components.
    """
    if via_partials:
        ds_dvm, ds_dva = partial_derivatives(state, problem.y_bus)
        m = mismatch(state, problem)
        return _gradient_via_partials(m, ds_dvm, ds_dva, problem)

    _, _, gradient = loss_and_gradient(state, problem)
    return gradient


def loss_and_gradient(state, problem):
    """
    Evaluate mismatch, loss and gradient in one pass.

    Parameters
    ----------
    state : VoltageState
        Voltages, all magnitudes nonzero.
    problem : PowerFlowProblem or BatchedProblem
        Problem.

    Returns
    -------
    tuple
        (Mismatch, float loss, Gradient).
    """
    if (state.vm == 0).any():
        msg = f"Voltage magnitude is zero at buses {np.flatnonzero(state.vm == 0).tolist()}"
        raise ZeroDivisionError(msg)

    v = state.voltage
    current = spmv(problem.y_bus, v)
    m = _mismatch_from_power(v * np.conj(current), problem)
    value = loss(m)

    weights = np.zeros(problem.n_buses, dtype=complex)
    weights[problem.pvpq] = m.dp
    weights[problem.pq] += 1j * m.dq

    projected = np.conj(transpose_apply(problem.y_bus, weights * np.conj(v)))
    weighted_power = np.conj(weights) * v * np.conj(current)
    v_conj = np.conj(v)

    scale = 2.0 / max(m.dp.size + m.dq.size, 1)
    d_va = scale * np.real(1j * weighted_power - 1j * v_conj * projected)
    d_vm = scale * np.real((weighted_power + v_conj * projected) / state.vm)

    return m, value, Gradient(d_vm=d_vm[problem.pq], d_va=d_va[problem.pvpq])


def assemble_jacobian(state, problem):
    """
    Assemble the dense power-flow Jacobian.

    Parameters
    ----------
    state : VoltageState
        Voltages, all magnitudes nonzero.
    problem : PowerFlowProblem
        Problem.

    Returns
    -------
    JacobianBlocks
        Sparse partial derivatives and the dense (|pv| + 2|pq|) square Jacobian
        in the ordering [theta at pv, pq; |V| at pq].
    """
    ds_dvm, ds_dva = partial_derivatives(state, problem.y_bus)
    pvpq = problem.pvpq
    pq = problem.pq

    j11 = ds_dva[pvpq][:, pvpq].real.toarray()
    j12 = ds_dvm[pvpq][:, pq].real.toarray()
    j21 = ds_dva[pq][:, pvpq].imag.toarray()
    j22 = ds_dvm[pq][:, pq].imag.toarray()

    assembled = np.block([[j11, j12], [j21, j22]])
    return JacobianBlocks(dS_dvm=ds_dvm, dS_dva=ds_dva, assembled=assembled)


def _mismatch_from_power(s_calc, problem):
    delta = s_calc - problem.s_bus
    return Mismatch(dp=delta.real[problem.pvpq], dq=delta.imag[problem.pq])


def _gradient_via_partials(m, ds_dvm, ds_dva, problem):
    """(2/m) J^T F by transpose-applying the sparse partial-derivative blocks."""
    weights_p = np.zeros(problem.n_buses)
    weights_q = np.zeros(problem.n_buses)
    weights_p[problem.pvpq] = m.dp
    weights_q[problem.pq] = m.dq

    scale = 2.0 / max(m.dp.size + m.dq.size, 1)
    d_va = transpose_apply(ds_dva.real, weights_p) + transpose_apply(ds_dva.imag, weights_q)
    d_vm = transpose_apply(ds_dvm.real, weights_p) + transpose_apply(ds_dvm.imag, weights_q)
    return Gradient(d_vm=scale * d_vm[problem.pq], d_va=scale * d_va[problem.pvpq])
