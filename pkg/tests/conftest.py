"""Shared fixtures: a small four-region geometry and a synthetic twin setup."""

import datetime as dt

import numpy as np
import pytest

from epidiffuse import (
    ModelKind,
    ObjectiveWeights,
    ParameterVector,
    RateSchedule,
    union_mask,
)
from epidiffuse.cli_io import demo_geometry, demo_population, generate_synthetic, read_cases
from epidiffuse.estimate import Problem
from epidiffuse.objective import interpolate_data

START = dt.date(2020, 10, 1)


def make_twin(
    tmp_path,
    nx: int = 9,
    t_end: float = 20.0,
    tau: float = 0.1,
    kappa: float = 0.1,
    noise: float = 0.0,
    seed: int = 1,
    weights: ObjectiveWeights | None = None,
    betas=(0.2, 0.1, 0.1),
    breakpoints=(7.0, 14.0),
    delta: float = 0.5,
):
    """Generate twin data from a known truth and wrap it in a Problem."""
    grid, masks, pops = demo_geometry(nx, nx)
    population = demo_population(grid, masks, pops)
    district = union_mask(masks.values())
    schedule = RateSchedule(betas, breakpoints, t_end)
    truth = ParameterVector(
        schedule, kappa, delta,
        {"BA": 40.0, "BI": 30.0, "HR": 10.0, "IO": 120.0},
    )
    paths = generate_synthetic(
        truth, grid, masks, population, ModelKind.SEIR, t_end, tau, noise, seed, tmp_path
    )
    series = read_cases(paths["cases"], START, int(t_end), sorted(masks))
    data = interpolate_data(series, masks, grid, population)
    if weights is None:
        weights = ObjectiveWeights(1.0, 0.0, 0.0)
    problem = Problem(
        grid=grid, model=ModelKind.SEIR, masks=masks, district=district,
        population=population, t_end=t_end, tau=tau, weights=weights,
        data=data, initial=truth,
    )
    return problem, truth, paths


@pytest.fixture(scope="session")
def twin9(tmp_path_factory):
    """Zero-noise 9x9 twin with kappa=0.1, truth as the initial guess."""
    tmp = tmp_path_factory.mktemp("twin9")
    problem, truth, paths = make_twin(tmp)
    return {"problem": problem, "truth": truth, "paths": paths}


@pytest.fixture(scope="session")
def twin9_flat(tmp_path_factory):
    """Zero-noise kappa=0 twin; the data spatialization is then exact."""
    tmp = tmp_path_factory.mktemp("twin9flat")
    problem, truth, paths = make_twin(tmp, kappa=0.0)
    return {"problem": problem, "truth": truth, "paths": paths}
