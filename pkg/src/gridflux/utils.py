"""General utilities shared by the solvers, generators and command-line front end."""

import json
import logging
import os
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

SEED_ENV_VAR = "GRIDFLUX_SEED"


def resolve_seed(seed=None):
    """
    Resolve the random seed.

    Parameters
    ----------
    seed : int, optional
        Explicit seed. If None, the environment variable ``GRIDFLUX_SEED`` is used,
        falling back to 0.

    Returns
    -------
    int
        Seed.
    """
    if seed is not None:
        return int(seed)

    value = os.environ.get(SEED_ENV_VAR)
    if value is None or value.strip() == "":
        return 0

    try:
        return int(value)
    except ValueError:
        msg = f"{SEED_ENV_VAR} should be an integer, got {value!r}"
        raise ValueError(msg) from None


def max_abs_difference(a, b):
    """
    Infinity norm of the difference of two arrays.

    Parameters
    ----------
    a, b : array-like
        Arrays of equal shape.

    Returns
    -------
    float
        max |a - b|, zero for empty arrays.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        msg = f"Shapes differ: {a.shape} and {b.shape}"
        raise ValueError(msg)
    if a.size == 0:
        return 0.0
    return float(np.abs(a - b).max())


def write_json(data, path):
    """Write a JSON document with sorted keys, creating parent directories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    logger.debug("Wrote %s", path)
    return path
