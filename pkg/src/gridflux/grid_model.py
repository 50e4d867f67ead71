"""
Grid description and the numerical power-flow problem derived from it.

This module reads MATPOWER case files into a `GridCase`, a set of pandas
tables for buses, generators and branches, and turns a case into a
`PowerFlowProblem`: the sparse admittance matrix Y_bus, the net injections
S_bus in per-unit, and the PV/PQ/slack index sets with voltage setpoints.

Conventions:
- External bus ids are mapped to contiguous 0-based indices in file order.
- Out-of-service generators and branches are dropped while parsing.
- Angles are degrees in files and radians everywhere in memory.
- Generator reactive limits are read but not enforced.

Main functions:
- parse_matpower / load_case: Read a MATPOWER case.
- format_matpower: Emit the normalized MATPOWER text of a case.
- validate_case: Check the structural invariants of a case.
- build_problem: Assemble Y_bus, S_bus, index sets and setpoints.
- injections_per_unit: Net complex bus injections in per-unit.
- with_injections: Same network, different injections.
- export_problem: Text dump of a problem for cross-checking.
"""

import dataclasses
import logging
import re
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order

from gridflux.sparse_core import from_triplets

logger = logging.getLogger(__name__)

# Bus type codes
PQ = 1
PV = 2
SLACK = 3

# Columns kept in memory and their position in the MATPOWER matrices
BUS_LAYOUT = {"bus_id": 0, "bus_type": 1, "pd": 2, "qd": 3, "gs": 4, "bs": 5, "vm": 7, "va": 8}
GEN_LAYOUT = {"bus_id": 0, "pg": 1, "qg": 2, "qmax": 3, "qmin": 4, "vg": 5}
BRANCH_LAYOUT = {"from_bus": 0, "to_bus": 1, "r": 2, "x": 3, "b": 4, "tap": 8, "shift": 9}

GEN_STATUS_COLUMN = 7
BRANCH_STATUS_COLUMN = 10

MIN_COLUMNS = {"bus": 13, "gen": 8, "branch": 11}
INTEGER_COLUMNS = {"bus_id", "bus_type", "from_bus", "to_bus"}

SETPOINT_DISAGREEMENT_TOL = 1e-6

_ASSIGNMENT = re.compile(r"^\s*mpc\.(?P<name>\w+)\s*=\s*(?P<rest>.*)$")


class CaseParseError(ValueError):
    """Case text cannot be parsed."""

    def __init__(self, msg, section=None, line=None):
        super().__init__(msg)
        self.section = section
        self.line = line


class CaseValidationError(ValueError):
    """Case violates a structural invariant."""


@dataclasses.dataclass(frozen=True, eq=False)
class GridCase:
    """
    Static grid description.

    Attributes
    ----------
    base_mva : float
        System base power [MVA].
    buses : pandas.DataFrame
        Columns bus_id, bus_type, pd [MW], qd [MVAr], gs [MW], bs [MVAr], vm [p.u.], va [rad].
    generators : pandas.DataFrame
        In-service generators. Columns bus_id, pg [MW], qg [MVAr], qmax, qmin [MVAr], vg [p.u.].
    branches : pandas.DataFrame
        In-service branches. Columns from_bus, to_bus, r, x, b [p.u.], tap [-], shift [rad].
    name : str
        Case name.
    """

    base_mva: float
    buses: pd.DataFrame
    generators: pd.DataFrame
    branches: pd.DataFrame
    name: str = "case"

    @property
    def n_buses(self):
        """Number of buses N."""
        return len(self.buses)

    @property
    def n_branches(self):
        """Number of in-service branches M."""
        return len(self.branches)


@dataclasses.dataclass(frozen=True, eq=False)
class PowerFlowProblem:
    """
    Numerical power-flow problem.

    Attributes
    ----------
    y_bus : scipy.sparse.csr_matrix
        Admittance matrix (N x N) [p.u.].
    s_bus : numpy.ndarray
        Net complex injection per bus [p.u.].
    pv, pq : numpy.ndarray
        Sorted bus indices of PV and PQ buses.
    slack : int
        Index of the slack bus.
    vm_setpoint : numpy.ndarray
        Voltage magnitude setpoints [p.u.]. Meaningful at PV buses and the slack; 1.0 at PQ buses.
    slack_angle : float
        Voltage angle of the slack bus [rad].
    bus_ids : numpy.ndarray
        External bus id per internal index.
    branch_from, branch_to : numpy.ndarray
        Internal end-bus indices per in-service branch.
    branch_x : numpy.ndarray
        Series reactance per in-service branch [p.u.].
    s_gen, s_load : numpy.ndarray
        Generation and demand per bus [p.u.], s_bus = s_gen - s_load.
    name : str
        Name of the originating case.
    """

    y_bus: sp.csr_matrix
    s_bus: np.ndarray
    pv: np.ndarray
    pq: np.ndarray
    slack: int
    vm_setpoint: np.ndarray
    bus_ids: np.ndarray
    branch_from: np.ndarray
    branch_to: np.ndarray
    branch_x: np.ndarray
    s_gen: np.ndarray
    s_load: np.ndarray
    slack_angle: float = 0.0
    name: str = "case"

    @property
    def n_buses(self):
        """Number of buses N."""
        return self.y_bus.shape[0]

    @property
    def n_branches(self):
        """Number of in-service branches M."""
        return len(self.branch_from)

    @cached_property
    def pvpq(self):
        """PV indices followed by PQ indices; the ordering of angle unknowns and active mismatches."""
        return np.r_[self.pv, self.pq]

    @cached_property
    def n_residuals(self):
        """Number of mismatch components m = |pv| + 2 |pq|."""
        return len(self.pv) + 2 * len(self.pq)

    @cached_property
    def slack_indices(self):
        """Slack index as an array, the form shared with batched problems."""
        return np.atleast_1d(np.asarray(self.slack, dtype=np.int64))


def load_case(path):
    """
    Read a MATPOWER case file.

    Parameters
    ----------
    path : str or pathlib.Path
        Path to the ``.m`` file.

    Returns
    -------
    GridCase
        Parsed case named after the file stem.
    """
    path = Path(path)
    return parse_matpower(path.read_text(), name=path.stem)


def parse_matpower(text, name="case"):
    """
    Parse MATPOWER case text.

    Reads ``mpc.baseMVA``, ``mpc.bus``, ``mpc.gen`` and ``mpc.branch``; all other
    assignments and comments are ignored.

    Parameters
    ----------
    text : str or file-like
        Case text or a character stream.
    name : str, optional
        Name of the case. Default is "case".

    Returns
    -------
    GridCase
        Parsed and validated case.

    Raises
    ------
    CaseParseError
        A required section is missing or a row is malformed.
    CaseValidationError
        The case does not have exactly one slack bus, or references unknown buses.
    """
    if hasattr(text, "read"):
        text = text.read()

    base_mva = None
    sections = {}
    current = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("%", 1)[0]

        if current is None:
            match = _ASSIGNMENT.match(line)
            if match is None:
                continue

            key, rest = match["name"], match["rest"].strip()
            if key == "baseMVA":
                base_mva = _parse_number(rest.rstrip(";").strip(), section="mpc.baseMVA", line=lineno)
                continue

            if not rest.startswith("["):
                continue

            current = key
            sections[current] = []
            line = rest[1:]

        closed = "]" in line
        if current in MIN_COLUMNS:
            body = line.split("]", 1)[0]
            for chunk in body.split(";"):
                tokens = chunk.replace(",", " ").split()
                if tokens:
                    sections[current].append((lineno, tokens))

        if closed:
            current = None

    if base_mva is None:
        msg = "Missing required section mpc.baseMVA"
        raise CaseParseError(msg, section="mpc.baseMVA")

    tables = {}
    for section, layout in (("bus", BUS_LAYOUT), ("gen", GEN_LAYOUT), ("branch", BRANCH_LAYOUT)):
        if section not in sections:
            msg = f"Missing required section mpc.{section}"
            raise CaseParseError(msg, section=f"mpc.{section}")
        tables[section] = _rows_to_matrix(section, sections[section])

    bus_data = tables["bus"]
    gen_data = tables["gen"]
    branch_data = tables["branch"]

    gen_data = gen_data[gen_data[:, GEN_STATUS_COLUMN] > 0]
    branch_data = branch_data[branch_data[:, BRANCH_STATUS_COLUMN] > 0]

    buses = _matrix_to_frame(bus_data, BUS_LAYOUT)
    buses["va"] = np.radians(buses["va"])
    generators = _matrix_to_frame(gen_data, GEN_LAYOUT)
    branches = _matrix_to_frame(branch_data, BRANCH_LAYOUT)
    branches["shift"] = np.radians(branches["shift"])

    case = GridCase(base_mva=base_mva, buses=buses, generators=generators, branches=branches, name=name)
    validate_case(case)
    return case


def format_matpower(case):
    """
    Emit the normalized MATPOWER text of a case.

    Only the columns held by `GridCase` carry information; the remaining
    MATPOWER columns are filled with neutral values. Parsing the output yields
    the same case.

    Parameters
    ----------
    case : GridCase
        Case to format.

    Returns
    -------
    str
        MATPOWER case text.
    """

    def fmt(value):
        return repr(float(value))

    lines = [f"function mpc = {case.name}", "mpc.version = '2';", f"mpc.baseMVA = {fmt(case.base_mva)};", ""]

    lines.append("%% bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin")
    lines.append("mpc.bus = [")
    for row in case.buses.itertuples(index=False):
        values = [
            str(int(row.bus_id)),
            str(int(row.bus_type)),
            fmt(row.pd),
            fmt(row.qd),
            fmt(row.gs),
            fmt(row.bs),
            "1",
            fmt(row.vm),
            fmt(np.degrees(row.va)),
            "0",
            "1",
            "1.1",
            "0.9",
        ]
        lines.append("\t" + "\t".join(values) + ";")
    lines.extend(["];", ""])

    lines.append("%% bus Pg Qg Qmax Qmin Vg mBase status Pmax Pmin")
    lines.append("mpc.gen = [")
    for row in case.generators.itertuples(index=False):
        values = [
            str(int(row.bus_id)),
            fmt(row.pg),
            fmt(row.qg),
            fmt(row.qmax),
            fmt(row.qmin),
            fmt(row.vg),
            fmt(case.base_mva),
            "1",
            "0",
            "0",
        ]
        lines.append("\t" + "\t".join(values) + ";")
    lines.extend(["];", ""])

    lines.append("%% fbus tbus r x b rateA rateB rateC ratio angle status angmin angmax")
    lines.append("mpc.branch = [")
    for row in case.branches.itertuples(index=False):
        values = [
            str(int(row.from_bus)),
            str(int(row.to_bus)),
            fmt(row.r),
            fmt(row.x),
            fmt(row.b),
            "0",
            "0",
            "0",
            fmt(row.tap),
            fmt(np.degrees(row.shift)),
            "1",
            "-360",
            "360",
        ]
        lines.append("\t" + "\t".join(values) + ";")
    lines.extend(["];", ""])
    return "\n".join(lines)


def validate_case(case):
    """
    Check the structural invariants of a case.

    Parameters
    ----------
    case : GridCase
        Case to check.

    Raises
    ------
    CaseValidationError
        If the base power is not positive, the number of slack buses is not one,
        a bus type is unknown, bus ids are duplicated, or a generator or branch
        references an unknown bus.
    """
    if not case.base_mva > 0:
        msg = f"Base power should be positive, got {case.base_mva}"
        raise CaseValidationError(msg)

    bus_ids = case.buses["bus_id"]
    if bus_ids.duplicated().any():
        msg = f"Duplicate bus ids: {sorted(bus_ids[bus_ids.duplicated()].unique())}"
        raise CaseValidationError(msg)

    bus_types = case.buses["bus_type"]
    unknown_types = ~bus_types.isin([PQ, PV, SLACK])
    if unknown_types.any():
        msg = f"Unknown bus type at buses {bus_ids[unknown_types].tolist()}; expected 1 (PQ), 2 (PV) or 3 (slack)"
        raise CaseValidationError(msg)

    n_slack = int((bus_types == SLACK).sum())
    if n_slack != 1:
        msg = f"Case should have exactly one slack bus, found {n_slack}"
        raise CaseValidationError(msg)

    for column in ("from_bus", "to_bus"):
        unknown = ~case.branches[column].isin(bus_ids)
        if unknown.any():
            msg = f"Branches reference unknown buses: {case.branches.loc[unknown, column].unique().tolist()}"
            raise CaseValidationError(msg)

    unknown = ~case.generators["bus_id"].isin(bus_ids)
    if unknown.any():
        msg = f"Generators reference unknown buses: {case.generators.loc[unknown, 'bus_id'].unique().tolist()}"
        raise CaseValidationError(msg)

    if (case.generators["vg"] <= 0).any():
        msg = "Generator voltage setpoints should be positive"
        raise CaseValidationError(msg)


def injections_per_unit(case):
    """
    Compute the net complex bus injections in per-unit.

    S_bus = (sum of in-service generation - demand) / base_mva, per bus in file order.

    Parameters
    ----------
    case : GridCase
        Grid case.

    Returns
    -------
    numpy.ndarray
        Complex injection per bus [p.u.].
    """
    validate_case(case)
    s_gen, s_load = _generation_and_load(case)
    return s_gen - s_load


def build_problem(case):
    """
    Build the numerical power-flow problem of a case.

    Each branch with series admittance y_s = 1 / (r + jx), tap ratio tau (0 means 1)
    and phase shift theta contributes

    - Y_ff += (y_s + j b/2) / tau^2
    - Y_ft += -y_s / (tau exp(-j theta))
    - Y_tf += -y_s / (tau exp(+j theta))
    - Y_tt += y_s + j b/2

    and bus shunts add (Gs + j Bs) / base_mva to the diagonal. Parallel branches
    merge. PV buses without an in-service generator are treated as PQ buses.

    Parameters
    ----------
    case : GridCase
        Grid case.

    Returns
    -------
    PowerFlowProblem
        Problem with Y_bus, S_bus, index sets and voltage setpoints.

    Raises
    ------
    CaseValidationError
        If the case is invalid or an in-service branch has zero impedance.
    """
    validate_case(case)

    buses = case.buses
    branches = case.branches
    n = len(buses)
    bus_index = pd.Index(buses["bus_id"].to_numpy())

    f = bus_index.get_indexer(branches["from_bus"]).astype(np.int64)
    t = bus_index.get_indexer(branches["to_bus"]).astype(np.int64)

    r = branches["r"].to_numpy(dtype=float)
    x = branches["x"].to_numpy(dtype=float)
    zero_impedance = (r == 0) & (x == 0)
    if zero_impedance.any():
        pairs = list(zip(branches["from_bus"][zero_impedance], branches["to_bus"][zero_impedance], strict=True))
        msg = f"In-service branches with zero impedance: {pairs}"
        raise CaseValidationError(msg)

    ys = 1.0 / (r + 1j * x)
    charging = 1j * branches["b"].to_numpy(dtype=float) / 2.0
    ratio = branches["tap"].to_numpy(dtype=float)
    ratio = np.where(ratio == 0.0, 1.0, ratio)
    tap = ratio * np.exp(1j * branches["shift"].to_numpy(dtype=float))

    yff = (ys + charging) / ratio**2
    yft = -ys / np.conj(tap)
    ytf = -ys / tap
    ytt = ys + charging
    ysh = (buses["gs"].to_numpy(dtype=float) + 1j * buses["bs"].to_numpy(dtype=float)) / case.base_mva

    diag = np.arange(n)
    y_bus = from_triplets(
        rows=np.r_[f, f, t, t, diag],
        cols=np.r_[f, t, f, t, diag],
        values=np.r_[yff, yft, ytf, ytt, ysh],
        shape=(n, n),
    )

    s_gen, s_load = _generation_and_load(case)

    # Bus classification
    gen_bus = bus_index.get_indexer(case.generators["bus_id"])
    has_gen = np.zeros(n, dtype=bool)
    has_gen[gen_bus] = True
    bus_type = buses["bus_type"].to_numpy()

    demoted = (bus_type == PV) & ~has_gen
    if demoted.any():
        logger.warning(
            "%s: PV buses %s have no in-service generator and are treated as PQ",
            case.name,
            buses["bus_id"][demoted].tolist(),
        )

    pv = np.flatnonzero((bus_type == PV) & has_gen)
    pq = np.flatnonzero((bus_type == PQ) | demoted)
    slack = int(np.flatnonzero(bus_type == SLACK)[0])

    # Voltage setpoints from the first in-service generator per bus
    gens = pd.DataFrame({"bus": gen_bus, "vg": case.generators["vg"].to_numpy(dtype=float)})
    vg = gens.groupby("bus", sort=True)["vg"].agg(["first", "min", "max"])

    disagree = vg.index[(vg["max"] - vg["min"]) > SETPOINT_DISAGREEMENT_TOL]
    if len(disagree):
        logger.warning(
            "%s: generators at buses %s disagree on the voltage setpoint; using the first",
            case.name,
            buses["bus_id"].to_numpy()[disagree].tolist(),
        )

    vm_setpoint = np.ones(n)
    vm_setpoint[pv] = vg.loc[pv, "first"].to_numpy()
    vm_setpoint[slack] = vg.loc[slack, "first"] if has_gen[slack] else buses["vm"].iloc[slack]

    controlled = np.r_[pv, slack]
    if not (vm_setpoint[controlled] > 0).all():
        msg = f"Voltage setpoints should be positive at PV and slack buses of {case.name}"
        raise CaseValidationError(msg)

    return PowerFlowProblem(
        y_bus=y_bus,
        s_bus=s_gen - s_load,
        pv=pv,
        pq=pq,
        slack=slack,
        vm_setpoint=vm_setpoint,
        bus_ids=buses["bus_id"].to_numpy(),
        branch_from=f,
        branch_to=t,
        branch_x=x,
        s_gen=s_gen,
        s_load=s_load,
        name=case.name,
    )


def with_injections(problem, s_bus, s_load=None):
    """
    Return the same network with different injections.

    Y_bus and the index sets are shared with `problem`.

    Parameters
    ----------
    problem : PowerFlowProblem
        Base problem.
    s_bus : array-like
        New net injections [p.u.].
    s_load : array-like, optional
        New demand [p.u.]. If None, demand is derived as s_gen - s_bus.

    Returns
    -------
    PowerFlowProblem
        Problem with swapped injections.
    """
    s_bus = np.asarray(s_bus, dtype=complex)
    if s_bus.shape != (problem.n_buses,):
        msg = f"Injection vector has shape {s_bus.shape}, expected ({problem.n_buses},)"
        raise ValueError(msg)

    s_load = problem.s_gen - s_bus if s_load is None else np.asarray(s_load, dtype=complex)
    return dataclasses.replace(problem, s_bus=s_bus, s_load=s_load)


def buses_connected_to_slack(problem):
    """
    Flag the buses reachable from a slack bus through in-service branches.

    Parameters
    ----------
    problem : PowerFlowProblem or BatchedProblem
        Problem with branch end indices and slack index (or indices).

    Returns
    -------
    numpy.ndarray
        Boolean mask of length N.
    """
    n = problem.n_buses
    graph = sp.csr_matrix(
        (np.ones(problem.n_branches), (problem.branch_from, problem.branch_to)),
        shape=(n, n),
    )
    connected = np.zeros(n, dtype=bool)
    for slack in problem.slack_indices:
        order = breadth_first_order(graph, int(slack), directed=False, return_predecessors=False)
        connected[order] = True
    return connected


def export_problem(problem, path):
    """
    Write a text dump of a problem.

    The dump holds N, M, the index sets and the Y_bus triplets ``row col re im``,
    one per line.

    Parameters
    ----------
    problem : PowerFlowProblem
        Problem to dump.
    path : str or pathlib.Path
        Output file.
    """
    path = Path(path)
    y = problem.y_bus.tocoo()
    header = [
        f"# gridflux problem {problem.name}",
        f"N {problem.n_buses}",
        f"M {problem.n_branches}",
        f"slack {problem.slack}",
        "pv " + " ".join(map(str, problem.pv)),
        "pq " + " ".join(map(str, problem.pq)),
        f"nnz {y.nnz}",
    ]
    path.write_text("\n".join(header) + "\n")

    triplets = pd.DataFrame({"row": y.row, "col": y.col, "re": y.data.real, "im": y.data.imag})
    triplets.to_csv(path, mode="a", sep=" ", header=False, index=False, float_format="%.17g")


def _generation_and_load(case):
    """Per-unit generation and demand per bus, in file order."""
    bus_index = pd.Index(case.buses["bus_id"].to_numpy())
    gen_bus = bus_index.get_indexer(case.generators["bus_id"])

    s_gen = np.zeros(len(bus_index), dtype=complex)
    np.add.at(
        s_gen, gen_bus, case.generators["pg"].to_numpy(dtype=float) + 1j * case.generators["qg"].to_numpy(dtype=float)
    )
    s_load = case.buses["pd"].to_numpy(dtype=float) + 1j * case.buses["qd"].to_numpy(dtype=float)
    return s_gen / case.base_mva, s_load / case.base_mva


def _parse_number(token, section, line):
    try:
        return float(token)
    except ValueError:
        msg = f"Cannot parse number {token!r} in {section} on line {line}"
        raise CaseParseError(msg, section=section, line=line) from None


def _rows_to_matrix(section, rows):
    """Convert tokenized rows of a MATPOWER matrix to a float array, checking column counts."""
    if not rows:
        return np.zeros((0, MIN_COLUMNS[section]))

    n_columns = len(rows[0][1])
    data = []
    for lineno, tokens in rows:
        if len(tokens) < MIN_COLUMNS[section] or len(tokens) != n_columns:
            msg = (
                f"Malformed row in mpc.{section} on line {lineno}: {len(tokens)} columns, "
                f"expected {max(n_columns, MIN_COLUMNS[section])}"
            )
            raise CaseParseError(msg, section=f"mpc.{section}", line=lineno)
        data.append([_parse_number(token, f"mpc.{section}", lineno) for token in tokens])
    return np.asarray(data, dtype=float)


def _matrix_to_frame(data, layout):
    frame = pd.DataFrame({column: data[:, position] for column, position in layout.items()})
    for column in INTEGER_COLUMNS.intersection(layout):
        frame[column] = frame[column].astype(np.int64)
    return frame
