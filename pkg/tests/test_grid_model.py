import io
import logging

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from gridflux.grid_model import (
    CaseParseError,
    CaseValidationError,
    build_problem,
    buses_connected_to_slack,
    export_problem,
    format_matpower,
    injections_per_unit,
    parse_matpower,
    with_injections,
)


def dense_ybus_oracle(case):
    """Independent dense assembly with explicit loops."""
    ids = list(case.buses["bus_id"])
    n = len(ids)
    y = np.zeros((n, n), dtype=complex)
    for br in case.branches.itertuples(index=False):
        i, j = ids.index(br.from_bus), ids.index(br.to_bus)
        ys = 1 / complex(br.r, br.x)
        tau = br.tap if br.tap != 0 else 1.0
        a = tau * np.exp(1j * br.shift)
        y[i, i] += (ys + 0.5j * br.b) / tau**2
        y[j, j] += ys + 0.5j * br.b
        y[i, j] += -ys / np.conj(a)
        y[j, i] += -ys / a
    for k, bus in enumerate(case.buses.itertuples(index=False)):
        y[k, k] += complex(bus.gs, bus.bs) / case.base_mva
    return y


def test_parse_case14_sizes(case14):
    assert case14.name == "case14"
    assert case14.base_mva == 100.0
    assert case14.n_buses == 14
    assert len(case14.generators) == 5
    assert case14.n_branches == 20


def test_parse_case14_units(case14):
    """Angles are stored in radians."""
    bus14 = case14.buses.set_index("bus_id").loc[14]
    assert_allclose(bus14["va"], np.radians(-16.04))
    assert bus14["vm"] == 1.036
    assert case14.branches["tap"].max() == 0.978


def test_ybus_matches_dense_oracle(case14):
    problem = build_problem(case14)
    assert_allclose(problem.y_bus.toarray(), dense_ybus_oracle(case14), rtol=0, atol=1e-12)


def test_ybus_stores_full_diagonal(case14):
    problem = build_problem(case14)
    y = problem.y_bus
    for k in range(problem.n_buses):
        row = y.indices[y.indptr[k] : y.indptr[k + 1]]
        assert k in row


@pytest.mark.parametrize(
    ("bus_id", "expected"),
    [
        (1, 2.324 - 0.169j),
        (2, 0.183 + 0.297j),
        (3, -0.942 + 0.044j),
        (4, -0.478 + 0.039j),
        (9, -0.295 - 0.166j),
    ],
)
def test_injections_per_unit(case14, bus_id, expected):
    s_bus = injections_per_unit(case14)
    k = list(case14.buses["bus_id"]).index(bus_id)
    assert_allclose(s_bus[k], expected, rtol=0, atol=1e-12)


def test_bus_classification(problem14):
    assert problem14.slack == 0
    assert_array_equal(problem14.pv, [1, 2, 5, 7])
    assert_array_equal(problem14.pq, [3, 4, 6, 8, 9, 10, 11, 12, 13])
    assert_array_equal(problem14.pvpq, np.r_[problem14.pv, problem14.pq])
    assert problem14.n_residuals == 4 + 2 * 9


def test_voltage_setpoints(problem14):
    assert_allclose(problem14.vm_setpoint[[0, 1, 2, 5, 7]], [1.06, 1.045, 1.01, 1.07, 1.09])
    assert_array_equal(problem14.vm_setpoint[problem14.pq], 1.0)


def test_sbus_is_generation_minus_load(problem14):
    assert_allclose(problem14.s_bus, problem14.s_gen - problem14.s_load, rtol=0, atol=0)


def test_parse_from_stream(two_bus_text):
    case = parse_matpower(io.StringIO(two_bus_text()), name="stream")
    assert case.n_buses == 2


def test_out_of_service_elements_dropped(two_bus_text):
    text = two_bus_text().replace(
        "mpc.branch = [",
        "mpc.branch = [\n    1   2   0   0.5 0   0   0   0   0   0   0   -360    360;",
    )
    text = text.replace("mpc.gen = [", "mpc.gen = [\n    2   10  0   10  -10 1.0 100 0   100 0;")
    case = parse_matpower(text)

    assert case.n_branches == 1
    assert len(case.generators) == 1


def test_missing_section(two_bus_text):
    text = two_bus_text().split("mpc.gen")[0]
    with pytest.raises(CaseParseError, match="Missing required section mpc.gen"):
        parse_matpower(text)

    with pytest.raises(CaseParseError, match="mpc.baseMVA"):
        parse_matpower(two_bus_text().replace("mpc.baseMVA = 100;", ""))


def test_malformed_row_reports_line(two_bus_text):
    lines = two_bus_text().splitlines()
    row = next(i for i, line in enumerate(lines) if line.strip().startswith("1   2   0   1.0"))
    lines[row] = "    1   2   0   1.0;"
    with pytest.raises(CaseParseError, match=f"Malformed row in mpc.branch on line {row + 1}") as excinfo:
        parse_matpower("\n".join(lines))

    assert excinfo.value.line == row + 1


def test_unparsable_number(two_bus_text):
    with pytest.raises(CaseParseError, match="Cannot parse number"):
        parse_matpower(two_bus_text().replace("mpc.baseMVA = 100;", "mpc.baseMVA = abc;"))


def test_exactly_one_slack(two_bus_text):
    text = two_bus_text().replace("    2   1   50", "    2   3   50")
    with pytest.raises(CaseValidationError, match="exactly one slack"):
        parse_matpower(text)


def test_unknown_bus_reference(two_bus_text):
    text = two_bus_text().replace("    1   2   0   1.0", "    1   7   0   1.0")
    with pytest.raises(CaseValidationError, match="unknown buses"):
        parse_matpower(text)


def test_zero_impedance_branch(two_bus_text):
    case = parse_matpower(two_bus_text().replace("    1   2   0   1.0", "    1   2   0   0.0"))
    with pytest.raises(CaseValidationError, match="zero impedance"):
        build_problem(case)


def test_pv_without_generator_is_demoted(two_bus_text, caplog):
    case = parse_matpower(two_bus_text().replace("    2   1   50", "    2   2   50"))
    with caplog.at_level(logging.WARNING, logger="gridflux.grid_model"):
        problem = build_problem(case)

    assert_array_equal(problem.pv, [])
    assert_array_equal(problem.pq, [1])
    assert "no in-service generator" in caplog.text


def test_format_matpower_roundtrip(case14):
    again = parse_matpower(format_matpower(case14), name=case14.name)

    assert again.base_mva == case14.base_mva
    pd.testing.assert_frame_equal(again.buses, case14.buses)
    pd.testing.assert_frame_equal(again.generators, case14.generators)
    pd.testing.assert_frame_equal(again.branches, case14.branches)


def test_with_injections_shares_network(problem14):
    s_new = problem14.s_bus * 1.1
    other = with_injections(problem14, s_new)

    assert other.y_bus is problem14.y_bus
    assert_array_equal(other.s_bus, s_new)
    assert_allclose(other.s_gen - other.s_load, s_new)

    with pytest.raises(ValueError, match="shape"):
        with_injections(problem14, s_new[:-1])


def test_buses_connected_to_slack(problem14, two_bus_text):
    assert buses_connected_to_slack(problem14).all()

    isolated_bus = "    3   1   0   0   0   0   1   1.0 0   0   1   1.1 0.9;\n"
    text = two_bus_text().replace("    2   1   50", isolated_bus + "    2   1   50")
    problem = build_problem(parse_matpower(text))
    assert_array_equal(buses_connected_to_slack(problem), [True, False, True])


def test_export_problem(problem14, tmp_path):
    path = tmp_path / "case14.txt"
    export_problem(problem14, path)
    lines = path.read_text().splitlines()

    assert lines[1] == "N 14"
    assert lines[2] == "M 20"
    assert lines[6] == f"nnz {problem14.y_bus.nnz}"
    assert len(lines) == 7 + problem14.y_bus.nnz

    row, col, re, im = lines[7].split()
    y = problem14.y_bus.tocoo()
    assert (int(row), int(col)) == (y.row[0], y.col[0])
    assert complex(float(re), float(im)) == y.data[0]


def test_ybus_symmetric_without_shifts(case14):
    y = build_problem(case14).y_bus

    assert case14.branches["shift"].eq(0).all()
    assert abs(y - y.T).max() <= 1e-14


def test_ybus_nnz_bound(problem14):
    assert problem14.y_bus.nnz <= problem14.n_buses + 2 * problem14.n_branches


def test_two_bus_ybus(two_bus_text):
    problem = build_problem(parse_matpower(two_bus_text()))
    assert_array_equal(problem.y_bus.toarray(), [[-1j, 1j], [1j, -1j]])


def test_tap_ratio_ybus(two_bus_text):
    text = two_bus_text().replace("    1   2   0   1.0 0   0   0   0   0", "    1   2   0   1.0 0   0   0   0   2.0")
    y = build_problem(parse_matpower(text)).y_bus

    assert_allclose(y[0, 0], -0.25j, rtol=0, atol=1e-15)
    assert_allclose(y[0, 1], 0.5j, rtol=0, atol=1e-15)
    assert_allclose(y[1, 0], 0.5j, rtol=0, atol=1e-15)
    assert_allclose(y[1, 1], -1j, rtol=0, atol=1e-15)


def test_disagreeing_setpoints_warn(two_bus_text, caplog):
    second_gen = "    1   0   0   100 -100    1.02    100 1   100 0;\n"
    text = two_bus_text().replace("mpc.gen = [\n", "mpc.gen = [\n" + second_gen)
    with caplog.at_level(logging.WARNING, logger="gridflux.grid_model"):
        problem = build_problem(parse_matpower(text))

    assert "disagree on the voltage setpoint" in caplog.text
    assert problem.vm_setpoint[problem.slack] == 1.02


def test_parse_case118(case118):
    assert case118.n_buses == 118
    assert len(case118.generators) == 54
    assert case118.n_branches == 186


def test_ybus_matches_dense_oracle_case118(case118):
    problem = build_problem(case118)
    assert_allclose(problem.y_bus.toarray(), dense_ybus_oracle(case118), rtol=0, atol=1e-12)


def test_format_matpower_roundtrip_case118(case118):
    again = parse_matpower(format_matpower(case118), name=case118.name)
    pd.testing.assert_frame_equal(again.branches, case118.branches)
    pd.testing.assert_frame_equal(again.buses, case118.buses)


def test_parse_case300(case300):
    assert case300.n_buses == 300
    assert len(case300.generators) == 69
    assert case300.n_branches == 411
