from pathlib import Path

import numpy as np
import pytest

from gridflux.grid_model import build_problem, load_case, parse_matpower
from gridflux.optimizers import OptimizerConfig
from gridflux.scaling import node_scale
from gridflux.solvers import DpfConfig

DATA_DIR = Path(__file__).parent / "data"

# Reactive injection that moves the two-bus solution to |V2| = 1, theta2 = -pi/6
COMPENSATION_MVAR = 100.0 * (1.0 - np.cos(np.pi / 6))

TWO_BUS_TEMPLATE = """
function mpc = two_bus
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
    1   3   0   0   0   0   1   1.0 0   0   1   1.1 0.9;
    2   1   50  {qd}    0   0   1   1.0 0   0   1   1.1 0.9;
];
mpc.gen = [
    1   0   0   100 -100    1.0 100 1   100 0;
];
mpc.branch = [
    1   2   0   1.0 0   0   0   0   0   0   1   -360    360;
];
"""

ISOLATED_LOAD_BUS = "    3   1   10  0   0   0   1   1.0 0   0   1   1.1 0.9;\n"


def _two_bus_text(qd=0.0):
    return TWO_BUS_TEMPLATE.format(qd=repr(float(qd)))


def _load_data_case(name):
    path = DATA_DIR / f"{name}.m"
    if not path.exists():
        pytest.skip(f"{path.name} is not available in {DATA_DIR}")
    return load_case(path)


# Fixtures
@pytest.fixture(scope="session")
def case14_path():
    """Path of the IEEE 14-bus case file."""
    return DATA_DIR / "case14.m"


@pytest.fixture(scope="session")
def case14(case14_path):
    """IEEE 14-bus case."""
    return load_case(case14_path)


@pytest.fixture(scope="session")
def problem14(case14):
    """Power-flow problem of the IEEE 14-bus case."""
    return build_problem(case14)


@pytest.fixture(scope="session")
def case118():
    """IEEE 118-bus case, skipped when the data file is absent."""
    return _load_data_case("case118")


@pytest.fixture(scope="session")
def problem118(case118):
    return build_problem(case118)


@pytest.fixture(scope="session")
def case300():
    """IEEE 300-bus case, skipped when the data file is absent."""
    return _load_data_case("case300")


@pytest.fixture(scope="session")
def two_bus_text():
    """Factory of MATPOWER text of the lossless two-bus grid with a 0.5 p.u. active load at bus 2."""
    return _two_bus_text


@pytest.fixture(scope="session")
def isolated_load_text():
    """Two-bus toy plus an unconnected PQ bus carrying load."""
    return _two_bus_text().replace("    2   1   50", ISOLATED_LOAD_BUS + "    2   1   50")


@pytest.fixture
def active_load_toy():
    """Two-bus grid with an active load only; exact solution theta2 = -pi/4, |V2| = 1/sqrt(2)."""
    return build_problem(parse_matpower(_two_bus_text(), name="active_load_toy"))


@pytest.fixture
def compensated_toy():
    """Two-bus grid with reactive compensation at bus 2; exact solution theta2 = -pi/6, |V2| = 1."""
    return build_problem(parse_matpower(_two_bus_text(qd=-COMPENSATION_MVAR), name="compensated_toy"))


@pytest.fixture(scope="session")
def toy_config():
    """Plain gradient descent that solves the two-bus toys to 1e-9 p.u."""
    return DpfConfig(
        optimizer=OptimizerConfig(kind="sgd", lr=0.5),
        max_iter=4000,
        loss_tol=0.0,
        mismatch_tol=1e-9,
    )


@pytest.fixture(scope="session")
def scaled14(case14):
    """Cached node_scale copies of case14 keyed by the number of copies."""
    cache = {}

    def get(k, seed=0):
        if (k, seed) not in cache:
            cache[k, seed] = node_scale(case14, k, seed=seed)
        return cache[k, seed]

    return get
