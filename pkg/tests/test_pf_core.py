import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from gridflux.grid_model import GridCase, build_problem
from gridflux.pf_core import (
    Mismatch,
    VoltageState,
    assemble_jacobian,
    calc_power,
    enforce_setpoints,
    flat_start,
    grad_loss,
    loss,
    loss_and_gradient,
    mismatch,
    partial_derivatives,
)


def random_state(problem, rng):
    """Random voltages with setpoints enforced."""
    state = VoltageState(
        vm=rng.uniform(0.9, 1.1, size=problem.n_buses),
        va=rng.uniform(-0.3, 0.3, size=problem.n_buses),
    )
    return enforce_setpoints(state, problem)


def unpack(problem, base, params):
    vm = base.vm.copy()
    va = base.va.copy()
    n = len(problem.pvpq)
    va[problem.pvpq] = params[:n]
    vm[problem.pq] = params[n:]
    return VoltageState(vm=vm, va=va)


def test_flat_start(problem14):
    state = flat_start(problem14)

    assert_array_equal(state.va, 0.0)
    assert_array_equal(state.vm[problem14.pq], 1.0)
    assert state.vm[problem14.slack] == 1.06
    assert state.vm[2] == 1.01


def test_enforce_setpoints_projects_copy(problem14):
    state = VoltageState(vm=np.full(14, 0.95), va=np.full(14, 0.1))
    projected = enforce_setpoints(state, problem14)

    assert projected.va[problem14.slack] == 0.0
    assert_array_equal(projected.vm[problem14.pv], problem14.vm_setpoint[problem14.pv])
    assert_array_equal(projected.vm[problem14.pq], 0.95)
    assert_array_equal(state.vm, 0.95)

    with pytest.raises(ValueError, match="buses"):
        enforce_setpoints(VoltageState(vm=np.ones(3), va=np.zeros(3)), problem14)


def test_calc_power_flat_start_toy(active_load_toy):
    """Equal voltages on a shunt-free grid carry no power."""
    s_calc = calc_power(flat_start(active_load_toy), active_load_toy.y_bus)
    assert_allclose(s_calc, 0.0, atol=1e-15)


def test_mismatch_and_loss_toy(active_load_toy):
    m = mismatch(flat_start(active_load_toy), active_load_toy)

    assert_allclose(m.dp, [0.5])
    assert_allclose(m.dq, [0.0], atol=1e-15)
    assert m.max_abs == pytest.approx(0.5)
    assert loss(m) == pytest.approx(0.125)


def test_toy_exact_solution_has_zero_mismatch(active_load_toy, compensated_toy):
    exact = VoltageState(vm=np.array([1.0, 1 / np.sqrt(2)]), va=np.array([0.0, -np.pi / 4]))
    assert mismatch(exact, active_load_toy).max_abs < 1e-14

    exact = VoltageState(vm=np.array([1.0, 1.0]), va=np.array([0.0, -np.pi / 6]))
    assert mismatch(exact, compensated_toy).max_abs < 1e-12


def test_loss_of_empty_mismatch():
    assert loss(Mismatch(dp=np.zeros(0), dq=np.zeros(0))) == 0.0
    assert Mismatch(dp=np.zeros(0), dq=np.zeros(0)).max_abs == 0.0


def test_jacobian_toy_flat_start_is_identity(active_load_toy):
    jac = assemble_jacobian(flat_start(active_load_toy), active_load_toy).assembled
    assert_allclose(jac, np.eye(2), atol=1e-15)


def test_jacobian_shape(problem14):
    jac = assemble_jacobian(flat_start(problem14), problem14).assembled
    assert jac.shape == (problem14.n_residuals, problem14.n_residuals)


def test_partial_derivatives_match_finite_differences(problem14):
    rng = np.random.default_rng(1)
    state = random_state(problem14, rng)
    ds_dvm, ds_dva = partial_derivatives(state, problem14.y_bus)
    h = 1e-6

    def power(vm, va):
        return calc_power(VoltageState(vm=vm, va=va), problem14.y_bus)

    for j in (0, 4, 9):
        step = np.zeros(problem14.n_buses)
        step[j] = h
        fd_vm = (power(state.vm + step, state.va) - power(state.vm - step, state.va)) / (2 * h)
        fd_va = (power(state.vm, state.va + step) - power(state.vm, state.va - step)) / (2 * h)

        assert_allclose(ds_dvm[:, j].toarray().ravel(), fd_vm, rtol=0, atol=1e-7)
        assert_allclose(ds_dva[:, j].toarray().ravel(), fd_va, rtol=0, atol=1e-7)


def test_partial_derivatives_zero_magnitude(problem14):
    state = flat_start(problem14)
    state.vm[5] = 0.0
    with pytest.raises(ZeroDivisionError):
        partial_derivatives(state, problem14.y_bus)
    with pytest.raises(ZeroDivisionError):
        grad_loss(state, problem14)


def test_gradient_matches_central_differences(problem14):
    """Analytic gradient against central differences with h = 1e-6 at 50 random states."""
    rng = np.random.default_rng(42)
    h = 1e-6

    for _ in range(50):
        state = random_state(problem14, rng)
        gradient = grad_loss(state, problem14).packed
        params = np.r_[state.va[problem14.pvpq], state.vm[problem14.pq]]

        fd = np.empty_like(params)
        for i in range(params.size):
            up = params.copy()
            up[i] += h
            down = params.copy()
            down[i] -= h
            loss_up = loss(mismatch(unpack(problem14, state, up), problem14))
            loss_down = loss(mismatch(unpack(problem14, state, down), problem14))
            fd[i] = (loss_up - loss_down) / (2 * h)

        rel = np.abs(gradient - fd) / np.maximum(1.0, np.abs(gradient))
        assert rel.max() < 1e-5


@pytest.mark.parametrize("copies", [1, 8])
def test_gradient_equals_jacobian_transpose_product(scaled14, problem14, copies):
    """Matrix-free gradient equals (2/m) J^T F from the dense Jacobian."""
    problem = problem14 if copies == 1 else build_problem(scaled14(copies))
    rng = np.random.default_rng(copies)

    for _ in range(10):
        state = random_state(problem, rng)
        m, _, gradient = loss_and_gradient(state, problem)
        jac = assemble_jacobian(state, problem).assembled
        expected = 2.0 / problem.n_residuals * jac.T @ m.stacked

        scale = max(1.0, np.abs(expected).max())
        assert_allclose(gradient.packed, expected, rtol=0, atol=1e-11 * scale)


def test_gradient_via_partials_agrees(problem14):
    rng = np.random.default_rng(7)
    state = random_state(problem14, rng)

    direct = grad_loss(state, problem14)
    partials = grad_loss(state, problem14, via_partials=True)
    scale = max(1.0, np.abs(direct.packed).max())

    assert_allclose(partials.d_va, direct.d_va, rtol=0, atol=1e-11 * scale)
    assert_allclose(partials.d_vm, direct.d_vm, rtol=0, atol=1e-11 * scale)


def test_gradient_layout(problem14):
    gradient = grad_loss(flat_start(problem14), problem14)

    assert gradient.d_va.shape == (len(problem14.pvpq),)
    assert gradient.d_vm.shape == (len(problem14.pq),)
    assert_array_equal(gradient.packed, np.r_[gradient.d_va, gradient.d_vm])


def test_gradient_vanishes_at_solution(compensated_toy):
    exact = VoltageState(vm=np.array([1.0, 1.0]), va=np.array([0.0, -np.pi / 6]))
    assert_allclose(grad_loss(exact, compensated_toy).packed, 0.0, atol=1e-12)


def test_gradient_equals_jacobian_transpose_product_case118(problem118):
    rng = np.random.default_rng(118)

    for _ in range(10):
        state = random_state(problem118, rng)
        m, _, gradient = loss_and_gradient(state, problem118)
        jac = assemble_jacobian(state, problem118).assembled
        expected = 2.0 / problem118.n_residuals * jac.T @ m.stacked

        assert_allclose(gradient.packed, expected, rtol=0, atol=1e-12 * max(1.0, np.abs(expected).max()))


def test_lossless_network_conserves_active_power(case14):
    """Without resistance, shunts and phase shifts the injected active power sums to zero."""
    branches = case14.branches.assign(r=0.0, b=0.0, shift=0.0)
    buses = case14.buses.assign(gs=0.0, bs=0.0)
    problem = build_problem(GridCase(case14.base_mva, buses, case14.generators, branches, name="lossless14"))
    rng = np.random.default_rng(0)

    for _ in range(20):
        state = random_state(problem, rng)
        s_calc = calc_power(state, problem.y_bus)
        assert abs(s_calc.real.sum()) < 1e-10
