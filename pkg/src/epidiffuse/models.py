"""Reduced compartment models and their time-dependent rates.

All models work on population fractions.  The removed compartment is
eliminated through S + I (+ E + R) = 1, which leaves

* SIS   -> one field  u = I/N          f(u) = beta (1 - u) u - gamma u
* SIR   -> (u1, u2) = (S, I)/N         f = (-beta u1 u2, beta u1 u2 - gamma u2)
* SEIR  -> (u1, u2, u3) = (S, E, I)/N  f = (-beta u1 u3, beta u1 u3 - theta u2,
                                            theta u2 - gamma u3)

The transmission rate is piecewise constant in time with two breakpoints
(three plateau values), mirroring the way contact restrictions change a
rate abruptly on known dates.  ``beta_at`` is right-continuous: the value
on [t0, t1) is betas[1].

``conserved_sum_rate`` reports d/dt of the sum of the retained fractions.
It vanishes for SIS (nobody leaves S + I) and equals the outflow into the
eliminated recovered compartment otherwise; solvers use it to cross-check
mass bookkeeping.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionError, NormalizationError, ParameterError
from .grid import GridSpec, RegionMask, distribute_uniform

DEFAULT_GAMMA = 0.1        # recovery rate, 1/days
DEFAULT_THETA = 1.0 / 3.0  # incubation rate, 1/days


class ModelKind(enum.Enum):
    SIS = "sis"
    SIR = "sir"
    SEIR = "seir"

    @property
    def n_compartments(self) -> int:
        """Number of retained (solved-for) compartments."""
        return {ModelKind.SIS: 1, ModelKind.SIR: 2, ModelKind.SEIR: 3}[self]

    @property
    def compartment_names(self) -> tuple[str, ...]:
        return {
            ModelKind.SIS: ("I",),
            ModelKind.SIR: ("S", "I"),
            ModelKind.SEIR: ("S", "E", "I"),
        }[self]

    @property
    def infected_index(self) -> int:
        return self.n_compartments - 1


@dataclass(frozen=True)
class RateSchedule:
    """Piecewise-constant transmission rate plus the fixed transition rates."""

    betas: tuple[float, float, float]
    breakpoints: tuple[float, float]
    t_end: float
    gamma: float = DEFAULT_GAMMA
    theta: float = DEFAULT_THETA

    def __post_init__(self):
        if len(self.betas) != 3:
            raise ParameterError(f"expected 3 plateau values, got {len(self.betas)}")
        if min(self.betas) <= 0.0:
            raise ParameterError(f"transmission rates must be positive, got {self.betas}")
        t0, t1 = self.breakpoints
        if not (0.0 < t0 < t1 < self.t_end):
            raise ParameterError(
                f"breakpoints must satisfy 0 < t0 < t1 < t_end, got t0={t0}, t1={t1}, t_end={self.t_end}"
            )
        if self.gamma <= 0.0 or self.theta <= 0.0:
            raise ParameterError(f"gamma and theta must be positive, got {self.gamma}, {self.theta}")

    def with_betas(self, betas) -> "RateSchedule":
        return replace(self, betas=tuple(float(b) for b in betas))


def beta_at(schedule: RateSchedule, t: float) -> float:
    """Transmission rate at time t (right-continuous at the breakpoints)."""
    if t < -1e-6 or t > schedule.t_end + 1e-6:
        raise ParameterError(f"t={t} outside the schedule window [0, {schedule.t_end}]")
    t0, t1 = schedule.breakpoints
    if t < t0:
        return schedule.betas[0]
    if t < t1:
        return schedule.betas[1]
    return schedule.betas[2]


def beta_interval(schedule: RateSchedule, t: float) -> int:
    """Index (0, 1 or 2) of the plateau active at time t."""
    t0, t1 = schedule.breakpoints
    return 0 if t < t0 else (1 if t < t1 else 2)


@dataclass(frozen=True)
class ParameterVector:
    """Everything the estimators search over.

    ``init_infected`` maps region names to initially infected person counts;
    they are spread uniformly over the region's cells at t = 0.
    """

    schedule: RateSchedule
    kappa: float
    delta: float
    init_infected: dict[str, float]

    def __post_init__(self):
        if not (0.0 <= self.kappa <= 1.0):
            raise ParameterError(f"kappa must lie in [0, 1], got {self.kappa}")
        if not (0.0 <= self.delta <= 1.0):
            raise ParameterError(f"delta must lie in [0, 1], got {self.delta}")
        for name, value in self.init_infected.items():
            if value < 0.0:
                raise ParameterError(f"initial infected in '{name}' must be >= 0, got {value}")

    @property
    def chi(self) -> np.ndarray:
        """The five smooth parameters (beta0, beta1, beta2, kappa, delta)."""
        return np.array([*self.schedule.betas, self.kappa, self.delta])

    def with_chi(self, chi) -> "ParameterVector":
        chi = np.asarray(chi, dtype=float)
        if chi.shape != (5,):
            raise DimensionError(f"chi must have 5 entries, got shape {chi.shape}")
        return replace(
            self,
            schedule=self.schedule.with_betas(chi[:3]),
            kappa=float(chi[3]),
            delta=float(chi[4]),
        )

    def with_seeds(self, seeds: dict[str, float]) -> "ParameterVector":
        return replace(self, init_infected=dict(seeds))


def _check_arity(model: ModelKind, u: np.ndarray):
    if u.shape[0] != model.n_compartments:
        raise DimensionError(
            f"{model.value} expects {model.n_compartments} compartment(s), got {u.shape[0]}"
        )


def reaction(model: ModelKind, u: np.ndarray, t: float, schedule: RateSchedule) -> np.ndarray:
    """Pointwise reaction term f(u, t); u has shape (m,) or (m, ...)."""
    u = np.asarray(u, dtype=float)
    _check_arity(model, u)
    b = beta_at(schedule, t)
    g, th = schedule.gamma, schedule.theta
    out = np.empty_like(u)
    if model is ModelKind.SIS:
        out[0] = b * (1.0 - u[0]) * u[0] - g * u[0]
    elif model is ModelKind.SIR:
        force = b * u[0] * u[1]
        out[0] = -force
        out[1] = force - g * u[1]
    else:
        force = b * u[0] * u[2]
        out[0] = -force
        out[1] = force - th * u[1]
        out[2] = th * u[1] - g * u[2]
    return out


def reaction_jacobian(model: ModelKind, u: np.ndarray, t: float, schedule: RateSchedule) -> np.ndarray:
    """Jacobian df/du, shape (m, m) plus any trailing field axes of u."""
    u = np.asarray(u, dtype=float)
    _check_arity(model, u)
    b = beta_at(schedule, t)
    g, th = schedule.gamma, schedule.theta
    m = model.n_compartments
    out = np.zeros((m,) + u.shape)
    if model is ModelKind.SIS:
        out[0, 0] = b * (1.0 - 2.0 * u[0]) - g
    elif model is ModelKind.SIR:
        out[0, 0] = -b * u[1]
        out[0, 1] = -b * u[0]
        out[1, 0] = b * u[1]
        out[1, 1] = b * u[0] - g
    else:
        out[0, 0] = -b * u[2]
        out[0, 2] = -b * u[0]
        out[1, 0] = b * u[2]
        out[1, 1] = -th
        out[1, 2] = b * u[0]
        out[2, 1] = th
        out[2, 2] = -g
    return out


def conserved_sum_rate(model: ModelKind, u: np.ndarray, schedule: RateSchedule) -> np.ndarray:
    """d/dt of the summed retained fractions: 0 (SIS) or -gamma * infected."""
    u = np.asarray(u, dtype=float)
    _check_arity(model, u)
    if model is ModelKind.SIS:
        return np.zeros_like(u[0])
    return -schedule.gamma * u[model.infected_index]


def transmission_bilinear(model: ModelKind, u: np.ndarray) -> np.ndarray:
    """The product of susceptible and infected fractions driving new cases."""
    u = np.asarray(u, dtype=float)
    _check_arity(model, u)
    if model is ModelKind.SIS:
        return (1.0 - u[0]) * u[0]
    return u[0] * u[model.infected_index]


def initial_fractions(
    model: ModelKind,
    grid: GridSpec,
    masks: dict[str, RegionMask],
    params: ParameterVector,
    population: np.ndarray,
) -> np.ndarray:
    """Build the t = 0 state from per-region infected counts.

    The infected persons are spread uniformly over each region and divided by
    the local population density.  For SEIR the initially exposed are taken as
    half the initially infected; recovered start at zero.  Outside the covered
    regions the state is disease free.
    """
    if population.shape != grid.shape:
        raise DimensionError(
            f"population shape {population.shape} does not match grid {grid.shape}"
        )
    if (population < 0.0).any():
        raise NormalizationError("population density must be non-negative")
    infected = np.zeros(grid.shape)
    for name, count in params.init_infected.items():
        if name not in masks:
            raise ParameterError(f"initial infected given for unknown region '{name}'")
        infected += distribute_uniform(count, masks[name], grid)
    covered = infected > 0.0
    if (population[covered] <= 0.0).any():
        raise NormalizationError("population must be positive wherever cases are placed")
    frac = np.zeros(grid.shape)
    frac[covered] = infected[covered] / population[covered]
    if (frac > 1.0).any():
        raise ParameterError("initial infected exceed the local population")

    m = model.n_compartments
    u0 = np.zeros((m,) + grid.shape)
    if model is ModelKind.SIS:
        u0[0] = frac
    elif model is ModelKind.SIR:
        u0[1] = frac
        u0[0] = 1.0 - frac
    else:
        u0[2] = frac
        u0[1] = 0.5 * frac
        u0[0] = 1.0 - u0[1] - u0[2]
    return u0
