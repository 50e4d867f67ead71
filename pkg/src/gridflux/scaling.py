"""
Synthetic grid generators for scaling experiments.

- node_scale: k disjoint copies of a case joined by 20 k random branches.
- edge_scale: a case with additional random branches.

Inserted branches clone the series impedance and charging of a uniformly
chosen existing branch and never have taps or phase shifts. Duplicated
connections and self-loops are never inserted. All generators are
deterministic for a given seed.
"""

import logging

import numpy as np
import pandas as pd

from gridflux.grid_model import PV, SLACK, GridCase, build_problem, validate_case
from gridflux.pf_core import calc_power
from gridflux.solvers import solve_nr
from gridflux.sparse_core import SingularMatrixError

logger = logging.getLogger(__name__)

LINKS_PER_COPY = 20
MAX_DRAW_FACTOR = 100


def node_scale(case, k, seed=0, links_per_copy=LINKS_PER_COPY):
    """
    Build a grid of k copies of a case joined by random branches.

    Copy c has its bus ids shifted by c times the span of the base ids, so the
    copies never share an id whatever the smallest id is. Only the slack
    of copy 0 is kept; the slack buses of the other copies become PV buses
    whose generation is the slack output of the Newton-Raphson solution of the
    base case. With k > 1 the random branches connect buses of two different
    copies; with k = 1 they connect buses within the single copy.

    Parameters
    ----------
    case : GridCase
        Base case.
    k : int
        Number of copies, at least 1.
    seed : int, optional
        Random seed. Default is 0.
    links_per_copy : int, optional
        Random branches per copy. Default is 20.

    Returns
    -------
    GridCase
        Scaled case with k N buses and k M + links_per_copy k branches.
    """
    if k < 1:
        msg = f"k should be at least 1, got {k}"
        raise ValueError(msg)

    validate_case(case)
    rng = np.random.default_rng(seed)

    bus_ids = case.buses["bus_id"]
    id_span = int(bus_ids.max()) - int(bus_ids.min()) + 1
    slack_id = int(case.buses.loc[case.buses["bus_type"] == SLACK, "bus_id"].iloc[0])
    copy_gens = _demoted_slack_generators(case, slack_id) if k > 1 else case.generators

    buses, generators, branches = [], [], []
    for c in range(k):
        offset = c * id_span
        bus_copy = case.buses.copy()
        bus_copy["bus_id"] += offset
        gen_copy = (case.generators if c == 0 else copy_gens).copy()
        gen_copy["bus_id"] += offset
        branch_copy = case.branches.copy()
        branch_copy[["from_bus", "to_bus"]] += offset
        if c > 0:
            bus_copy.loc[bus_copy["bus_type"] == SLACK, "bus_type"] = PV
        buses.append(bus_copy)
        generators.append(gen_copy)
        branches.append(branch_copy)

    buses = pd.concat(buses, ignore_index=True)
    branches = pd.concat(branches, ignore_index=True)

    copy_of_bus = np.repeat(np.arange(k), case.n_buses)
    links = _random_links(
        branches=branches,
        templates=case.branches,
        bus_ids=buses["bus_id"].to_numpy(),
        n_links=links_per_copy * k,
        rng=rng,
        copy_of_bus=copy_of_bus if k > 1 else None,
    )

    scaled = GridCase(
        base_mva=case.base_mva,
        buses=buses,
        generators=pd.concat(generators, ignore_index=True),
        branches=pd.concat([branches, links], ignore_index=True),
        name=f"{case.name}_x{k}",
    )
    validate_case(scaled)
    logger.info(
        "node_scale: %s with k=%d has %d buses and %d branches", case.name, k, scaled.n_buses, scaled.n_branches
    )
    return scaled


def edge_scale(case, extra_edges, seed=0):
    """
    Add random branches between distinct, unconnected bus pairs.

    Parameters
    ----------
    case : GridCase
        Base case.
    extra_edges : int
        Number of branches to add, at least 0.
    seed : int, optional
        Random seed. Default is 0.

    Returns
    -------
    GridCase
        Case with `extra_edges` more branches; `case` itself when `extra_edges` is 0.
    """
    if extra_edges < 0:
        msg = f"extra_edges should be non-negative, got {extra_edges}"
        raise ValueError(msg)
    if extra_edges == 0:
        return case

    rng = np.random.default_rng(seed)
    links = _random_links(
        branches=case.branches,
        templates=case.branches,
        bus_ids=case.buses["bus_id"].to_numpy(),
        n_links=extra_edges,
        rng=rng,
    )
    scaled = GridCase(
        base_mva=case.base_mva,
        buses=case.buses.copy(),
        generators=case.generators.copy(),
        branches=pd.concat([case.branches, links], ignore_index=True),
        name=f"{case.name}_e{extra_edges}",
    )
    logger.info("edge_scale: added %d branches to %s", extra_edges, case.name)
    return scaled


def _demoted_slack_generators(case, slack_id):
    """Generators of a copy whose slack became PV: slack generation fixed at the base-case NR output."""
    generators = case.generators.copy()
    at_slack = np.flatnonzero(generators["bus_id"].to_numpy() == slack_id)
    if at_slack.size == 0:
        return generators

    problem = build_problem(case)
    try:
        solution = solve_nr(problem)
        converged = solution.converged
    except SingularMatrixError as err:
        logger.warning("node_scale: Newton-Raphson failed on %s (%s)", case.name, err)
        converged = False

    if not converged:
        logger.warning("node_scale: keeping the file generation at the slack of %s", case.name)
        return generators

    s_calc = calc_power(solution.state, problem.y_bus)
    total_gen_mw = (s_calc[problem.slack].real + problem.s_load[problem.slack].real) * case.base_mva
    others = generators["pg"].to_numpy()[at_slack[1:]].sum()
    generators.loc[generators.index[at_slack[0]], "pg"] = total_gen_mw - others
    return generators


def _random_links(branches, templates, bus_ids, n_links, rng, copy_of_bus=None):
    """
    Draw new branches between unconnected bus pairs.

    With `copy_of_bus` given, both ends lie in different copies. Each branch
    clones r, x and b of a random row of `templates`.
    """
    n = len(bus_ids)
    if n < 2:
        msg = "Random branches need at least two buses"
        raise ValueError(msg)

    index = pd.Index(bus_ids)
    f = index.get_indexer(branches["from_bus"])
    t = index.get_indexer(branches["to_bus"])
    existing = set(zip(np.minimum(f, t).tolist(), np.maximum(f, t).tolist(), strict=True))

    new_from, new_to, template_rows = [], [], []
    draws = 0
    while len(new_from) < n_links:
        draws += 1
        if draws > MAX_DRAW_FACTOR * n_links:
            msg = f"Could not place {n_links} random branches without duplicates among {n} buses"
            raise ValueError(msg)

        i, j = (int(v) for v in rng.integers(0, n, size=2))
        template = int(rng.integers(0, len(templates)))
        pair = (min(i, j), max(i, j))
        if i == j or pair in existing:
            continue
        if copy_of_bus is not None and copy_of_bus[i] == copy_of_bus[j]:
            continue

        existing.add(pair)
        new_from.append(i)
        new_to.append(j)
        template_rows.append(template)

    links = templates.iloc[template_rows].reset_index(drop=True).copy()
    links["from_bus"] = bus_ids[new_from]
    links["to_bus"] = bus_ids[new_to]
    links["tap"] = 0.0
    links["shift"] = 0.0
    return links
