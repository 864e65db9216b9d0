"""The least-squares objective J and the spatialization of reported case data.

J compares the model's detected incidence delta * beta(t) * u_S * u_I against
reported daily cases that exist only as one number per region per day.  The
reported count c_k(d) is turned into a per-cell field by

    v_k(d) = (c_k(d) / P_k) / (cells_k * hx * hy),

i.e. the detected fraction of region k's population, spread uniformly so that
region aggregation (region_total) returns exactly c_k(d) / P_k.  Between day
marks the field is linear in t.

The full objective is

    J = w0/2 * sum_d omega_d * ||g_d - v_d||^2_(L2)   (trapezoid in time,
                                                       midpoint in space)
      + w1/2 * |chi - chi_ref|^2
      + w2/2 * sum_j ||u_{j,0} - u0_ref_j||^2_(L2)

with g_d the detected-incidence field at day d and chi = (beta0, beta1,
beta2, kappa, delta).  Both estimators call the same evaluate_J, so their
reported objective values are directly comparable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from .errors import (
    AlignmentError,
    CaseDataError,
    ConfigError,
    DegenerateRegionError,
    ParameterError,
)
from .grid import GridSpec, RegionMask, region_total
from .models import ModelKind, ParameterVector, RateSchedule, beta_at, transmission_bilinear
from .solver_cn import Trajectory


@dataclass
class CaseSeries:
    """Daily new detected cases for one region over the study window.

    ``days`` are integer offsets from the window start and must be contiguous;
    gaps in the source file are zero-filled and recorded in ``filled_days``.
    """

    region: str
    days: np.ndarray
    new_cases: np.ndarray
    filled_days: tuple[int, ...] = ()

    def __post_init__(self):
        self.days = np.asarray(self.days, dtype=int)
        self.new_cases = np.asarray(self.new_cases, dtype=float)
        if self.days.shape != self.new_cases.shape:
            raise CaseDataError(
                f"region '{self.region}': {len(self.days)} days vs {len(self.new_cases)} counts"
            )
        if len(self.days) == 0:
            raise CaseDataError(f"region '{self.region}' has no observations")
        if (np.diff(self.days) != 1).any():
            raise CaseDataError(f"region '{self.region}': day indices must be contiguous")
        if not np.isfinite(self.new_cases).all() or (self.new_cases < 0).any():
            raise CaseDataError(f"region '{self.region}': case counts must be finite and >= 0")

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.new_cases)


class DataInterpolant:
    """Reported cases as a per-cell field, linear in t at fixed region value."""

    def __init__(
        self,
        grid: GridSpec,
        region_names: tuple[str, ...],
        masks: list[RegionMask],
        populations: np.ndarray,
        cases: np.ndarray,
        days: np.ndarray,
    ):
        self.grid = grid
        self.region_names = region_names
        self.masks = masks
        self.populations = populations
        self.cases = cases          # (n_regions, n_days) persons/day
        self.days = days            # integer day indices 0..D
        # fraction of the region population detected per day
        self.fractions = cases / populations[:, None]
        self._fields: np.ndarray | None = None

    @property
    def n_days(self) -> int:
        return len(self.days)

    @property
    def daily_fields(self) -> np.ndarray:
        """Per-cell data values, shape (n_days, ny, nx); assembled lazily."""
        if self._fields is None:
            out = np.zeros((self.n_days,) + self.grid.shape)
            for k, mask in enumerate(self.masks):
                values = self.fractions[k] / (mask.cell_count * self.grid.cell_area)
                out[:, mask.cells] += values[:, None]
            self._fields = out
        return self._fields

    def day_field(self, day: int) -> np.ndarray:
        pos = int(day) - int(self.days[0])
        if pos < 0 or pos >= self.n_days:
            raise AlignmentError(f"day {day} outside the data window {self.days[0]}..{self.days[-1]}")
        return self.daily_fields[pos]

    def field_at(self, t: float) -> np.ndarray:
        """Linear interpolation between the two bracketing day fields."""
        lo = int(np.floor(t))
        if t < self.days[0] - 1e-9 or t > self.days[-1] + 1e-9:
            raise AlignmentError(f"t={t} outside the data window {self.days[0]}..{self.days[-1]}")
        lo = min(max(lo, int(self.days[0])), int(self.days[-1]))
        w = t - lo
        if w <= 1e-12 or lo == int(self.days[-1]):
            return self.day_field(lo)
        return (1.0 - w) * self.day_field(lo) + w * self.day_field(lo + 1)

    def district_incidence_fraction(self) -> np.ndarray:
        """Detected daily cases over the whole district as a population fraction."""
        return self.cases.sum(axis=0) / self.populations.sum()


def interpolate_data(
    series: Mapping[str, CaseSeries],
    masks: Mapping[str, RegionMask],
    grid: GridSpec,
    population: np.ndarray,
) -> DataInterpolant:
    """Bundle per-region case series into the per-cell data function.

    Region populations are taken from the population field at t = 0.  Every
    series must cover the same contiguous day range.
    """
    missing = sorted(set(series) - set(masks))
    if missing:
        raise ConfigError(f"case data for regions without masks: {', '.join(missing)}")
    names = tuple(sorted(series))
    if not names:
        raise ConfigError("no case series given")
    base = series[names[0]]
    day0, day1 = int(base.days[0]), int(base.days[-1])
    mask_list, pops, rows = [], [], []
    for name in names:
        s = series[name]
        if int(s.days[0]) != day0 or int(s.days[-1]) != day1:
            raise AlignmentError(
                f"region '{name}' covers days {s.days[0]}..{s.days[-1]}, "
                f"expected {day0}..{day1}"
            )
        mask = masks[name]
        pop = region_total(population, mask, grid)
        if pop <= 0.0:
            raise DegenerateRegionError(f"region '{name}' has population {pop}")
        mask_list.append(mask)
        pops.append(pop)
        rows.append(s.new_cases)
    return DataInterpolant(
        grid, names, mask_list, np.array(pops), np.array(rows), base.days.copy()
    )


@dataclass
class ObjectiveWeights:
    """Weights and anchors of the three terms of J."""

    w0: float = 1.0
    w1: float = 0.0
    w2: float = 0.0
    chi_ref: np.ndarray | None = None
    u0_ref: np.ndarray | None = None

    def __post_init__(self):
        if self.w0 <= 0.0:
            raise ParameterError(f"w0 must be positive, got {self.w0}")
        if self.w1 < 0.0 or self.w2 < 0.0:
            raise ParameterError(f"w1 and w2 must be >= 0, got {self.w1}, {self.w2}")
        if self.chi_ref is not None:
            self.chi_ref = np.asarray(self.chi_ref, dtype=float)
            if self.chi_ref.shape != (5,):
                raise ParameterError(f"chi_ref needs 5 entries, got shape {self.chi_ref.shape}")
        elif self.w1 > 0.0:
            raise ConfigError("w1 > 0 requires a chi_ref anchor")


def incidence_field(
    u: np.ndarray, model: ModelKind, schedule: RateSchedule, delta: float, t: float
) -> np.ndarray:
    """Detected incidence delta * beta(t) * u_S * u_I per cell (fraction/day)."""
    return delta * beta_at(schedule, t) * transmission_bilinear(model, u)


def trapezoid_day_weights(n_days: int) -> np.ndarray:
    w = np.ones(n_days)
    if n_days > 1:
        w[0] = w[-1] = 0.5
    return w


class ObjectiveBreakdown(NamedTuple):
    misfit: float
    chi_reg: float
    init_reg: float

    @property
    def total(self) -> float:
        return self.misfit + self.chi_reg + self.init_reg


def evaluate_terms(
    traj: Trajectory,
    params: ParameterVector,
    weights: ObjectiveWeights,
    data: DataInterpolant,
) -> ObjectiveBreakdown:
    """The three terms of J separately; evaluate_J returns their sum."""
    idx = traj.daily_indices
    days = traj.days
    if len(days) == 0 or days[0] != 0:
        raise AlignmentError("trajectory carries no day-0 level; store daily states")
    if len(days) != data.n_days or days[0] != data.days[0] or days[-1] != data.days[-1]:
        raise AlignmentError(
            f"trajectory days {days[0]}..{days[-1]} ({len(days)}) do not match "
            f"data days {data.days[0]}..{data.days[-1]} ({data.n_days})"
        )
    area = traj.grid.cell_area
    omega = trapezoid_day_weights(len(days))
    misfit = 0.0
    for pos, (level, day) in enumerate(zip(idx, days)):
        g = incidence_field(traj.states[level], traj.model, params.schedule, params.delta, float(day))
        r = g - data.daily_fields[pos]
        misfit += omega[pos] * float((r * r).sum()) * area
    misfit *= 0.5 * weights.w0

    chi_reg = 0.0
    if weights.w1 > 0.0:
        diff = params.chi - weights.chi_ref
        chi_reg = 0.5 * weights.w1 * float(diff @ diff)

    init_reg = 0.0
    if weights.w2 > 0.0:
        u0 = traj.states[0]
        ref = weights.u0_ref if weights.u0_ref is not None else 0.0
        d = u0 - ref
        init_reg = 0.5 * weights.w2 * float((d * d).sum()) * area
    return ObjectiveBreakdown(misfit, chi_reg, init_reg)


def evaluate_J(
    traj: Trajectory,
    params: ParameterVector,
    weights: ObjectiveWeights,
    data: DataInterpolant,
) -> float:
    return evaluate_terms(traj, params, weights, data).total


def detected_daily_cases(
    traj: Trajectory,
    params: ParameterVector,
    masks: Mapping[str, RegionMask],
    populations: Mapping[str, float],
) -> dict[str, np.ndarray]:
    """Model-side detected cases per region per day, in persons.

    The model analogue of a reported count: c_k(d) = P_k * integral over
    region k of delta * beta(d) * u_S * u_I.
    """
    out: dict[str, np.ndarray] = {}
    idx = traj.daily_indices
    days = traj.days
    fields = [
        incidence_field(traj.states[level], traj.model, params.schedule, params.delta, float(day))
        for level, day in zip(idx, days)
    ]
    for name, mask in masks.items():
        out[name] = np.array(
            [populations[name] * region_total(f, mask, traj.grid) for f in fields]
        )
    return out
