import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from gridflux.grid_model import PV, SLACK, build_problem, buses_connected_to_slack, parse_matpower
from gridflux.scaling import LINKS_PER_COPY, edge_scale, node_scale
from gridflux.solvers import solve_nr


def branch_pairs(case):
    f = case.branches["from_bus"].to_numpy()
    t = case.branches["to_bus"].to_numpy()
    return list(zip(np.minimum(f, t).tolist(), np.maximum(f, t).tolist(), strict=True))


def test_node_scale_one_copy(case14):
    scaled = node_scale(case14, 1)

    assert scaled.n_buses == case14.n_buses
    assert scaled.n_branches == case14.n_branches + LINKS_PER_COPY
    assert scaled.name == "case14_x1"


def test_node_scale_sizes(scaled14, case14):
    scaled = scaled14(4)

    assert scaled.n_buses == 4 * case14.n_buses
    assert scaled.n_branches == 4 * case14.n_branches + 4 * LINKS_PER_COPY
    assert len(scaled.generators) == 4 * len(case14.generators)
    assert scaled.buses["bus_id"].is_unique


def test_node_scale_single_slack(scaled14):
    scaled = scaled14(4)
    slack_ids = scaled.buses.loc[scaled.buses["bus_type"] == SLACK, "bus_id"]

    assert_array_equal(slack_ids, [1])
    # Former slacks of copies 1..3
    former = scaled.buses.set_index("bus_id").loc[[15, 29, 43], "bus_type"]
    assert (former == PV).all()


def test_node_scale_connected(scaled14):
    problem = build_problem(scaled14(4))
    assert buses_connected_to_slack(problem).all()


def test_node_scale_no_duplicates_or_self_loops(scaled14):
    pairs = branch_pairs(scaled14(8))

    assert len(pairs) == len(set(pairs))
    assert all(i != j for i, j in pairs)


def test_node_scale_links_join_copies(scaled14, case14):
    scaled = scaled14(4)
    links = scaled.branches.iloc[4 * case14.n_branches :]
    span = int(case14.buses["bus_id"].max())
    copy_from = (links["from_bus"].to_numpy() - 1) // span
    copy_to = (links["to_bus"].to_numpy() - 1) // span

    assert (copy_from != copy_to).all()
    assert (links["tap"] == 0).all()
    assert (links["shift"] == 0).all()


def test_node_scale_links_clone_existing_impedances(scaled14, case14):
    scaled = scaled14(4)
    links = scaled.branches.iloc[4 * case14.n_branches :]
    existing = set(zip(case14.branches["r"], case14.branches["x"], strict=True))

    assert set(zip(links["r"], links["x"], strict=True)) <= existing


def test_node_scale_copies_take_nr_slack_output(scaled14, case14, problem14):
    scaled = scaled14(2)
    solution = solve_nr(problem14)
    assert solution.converged

    pg_copy = scaled.generators.set_index("bus_id").loc[15, "pg"]
    pg_base = case14.generators.set_index("bus_id").loc[1, "pg"]

    # Slack output of the base case is close to but not equal to the file dispatch
    assert pg_copy == pytest.approx(pg_base, abs=1.0)
    assert pg_copy != pg_base


def test_node_scale_deterministic(case14):
    a = node_scale(case14, 3, seed=5)
    b = node_scale(case14, 3, seed=5)
    c = node_scale(case14, 3, seed=6)

    pd.testing.assert_frame_equal(a.branches, b.branches)
    assert not a.branches.equals(c.branches)


def test_node_scale_solvable(scaled14):
    problem = build_problem(scaled14(4))
    solution = solve_nr(problem)

    assert solution.converged
    assert solution.max_mismatch < 1e-8


def test_node_scale_invalid_k(case14):
    with pytest.raises(ValueError, match="at least 1"):
        node_scale(case14, 0)


def test_node_scale_ids_from_zero(two_bus_text):
    """Copies of a case with bus ids {0, 2} do not collide."""
    text = (
        two_bus_text(qd=-100.0 * (1.0 - np.cos(np.pi / 6)))
        .replace("    1   3", "    0   3")
        .replace("    1   0   0   100", "    0   0   0   100")
        .replace("    1   2   0   1.0", "    0   2   0   1.0")
    )
    case = parse_matpower(text, name="zero_based")
    scaled = node_scale(case, 2, links_per_copy=1)

    assert sorted(case.buses["bus_id"]) == [0, 2]
    assert scaled.n_buses == 4
    assert sorted(scaled.buses["bus_id"]) == [0, 2, 3, 5]
    assert (scaled.buses["bus_type"] == SLACK).sum() == 1


def test_edge_scale_zero_returns_case(case14):
    assert edge_scale(case14, 0) is case14


def test_edge_scale_grows_nnz(case14, problem14):
    n_extra = 10
    scaled = edge_scale(case14, n_extra, seed=2)
    problem = build_problem(scaled)

    assert scaled.n_branches == case14.n_branches + n_extra
    assert scaled.n_buses == case14.n_buses
    assert scaled.name == "case14_e10"
    assert problem.y_bus.nnz == problem14.y_bus.nnz + 2 * n_extra
    assert_allclose(problem.s_bus, problem14.s_bus)


def test_edge_scale_no_duplicates(case14):
    pairs = branch_pairs(edge_scale(case14, 30, seed=1))

    assert len(pairs) == len(set(pairs))
    assert all(i != j for i, j in pairs)


def test_edge_scale_deterministic(case14):
    a = edge_scale(case14, 12, seed=3)
    b = edge_scale(case14, 12, seed=3)

    pd.testing.assert_frame_equal(a.branches, b.branches)


def test_edge_scale_invalid(case14):
    with pytest.raises(ValueError, match="non-negative"):
        edge_scale(case14, -1)

    # A complete graph on 14 buses has 91 edges
    with pytest.raises(ValueError, match="without duplicates"):
        edge_scale(case14, 200)
