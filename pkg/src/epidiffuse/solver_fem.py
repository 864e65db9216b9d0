"""Bilinear finite-element diffusion with Strang splitting, for cross-checks.

The grid cells double as Q1 quadrilateral elements with the four shape
functions per cell ordered

    phi_1 -> (x_left,  y_bottom),   phi_2 -> (x_left,  y_top),
    phi_3 -> (x_right, y_bottom),   phi_4 -> (x_right, y_top),

i.e. x-major, y fastest, which makes both element matrices Kronecker products
of the 1-D linear-element matrices.  Products of bilinear functions are
integrated exactly, so on a unit cell the element mass matrix is
(1/36) [[4,2,2,1],[2,4,1,2],[2,1,4,2],[1,2,2,4]].

One time step splits symmetrically: half-step diffusion, full-step reaction,
half-step diffusion.  Both subflows use the classical 4-stage Runge-Kutta
scheme; the diffusion half-steps substep internally so that
kappa * lambda_max * dt stays within the RK4 stability interval
(lambda_max of M^{-1} K comes from a power iteration at assembly).  The weak
form is the standard homogeneous-Neumann one (no boundary term), hence the
constant vector spans the stiffness null space and 1^T M u is conserved
exactly under pure diffusion.

This backend exists to cross-validate the finite-difference solver; the
adjoint machinery runs only on solver_cn.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import DimensionError, ParameterError, StabilityError
from .grid import FieldSet, GridSpec, RegionMask
from .models import (
    ModelKind,
    ParameterVector,
    RateSchedule,
    initial_fractions,
    reaction,
)
from .solver_cn import DEFAULT_MAX_TAU, NEGATIVITY_TOL, Trajectory, _resolve_steps

#: Upper bound for kappa * lambda_max * dt in one RK4 diffusion substep.
RK4_STABILITY_LIMIT = 2.5

NODE_ORDERING = "x-major: (left,bottom), (left,top), (right,bottom), (right,top)"


def _mass_1d(h: float) -> np.ndarray:
    return (h / 6.0) * np.array([[2.0, 1.0], [1.0, 2.0]])


def _stiffness_1d(h: float) -> np.ndarray:
    return (1.0 / h) * np.array([[1.0, -1.0], [-1.0, 1.0]])


def element_mass(hx: float, hy: float) -> np.ndarray:
    """Exact 4x4 mass matrix of one hx-by-hy cell."""
    return np.kron(_mass_1d(hx), _mass_1d(hy))


def element_stiffness(hx: float, hy: float) -> np.ndarray:
    """Exact 4x4 stiffness matrix of one hx-by-hy cell."""
    return np.kron(_stiffness_1d(hx), _mass_1d(hy)) + np.kron(_mass_1d(hx), _stiffness_1d(hy))


@dataclass
class FemAssembly:
    """Global mass/stiffness pair with the mass factorization and lambda_max."""

    grid: GridSpec
    mass: sp.csr_matrix
    stiffness: sp.csr_matrix
    lam_max: float
    node_ordering: str = NODE_ORDERING

    def __post_init__(self):
        self._mass_lu = splu(self.mass.tocsc())

    def mass_solve(self, rhs: np.ndarray) -> np.ndarray:
        return self._mass_lu.solve(rhs)


def _power_iteration(assembly_mass_lu, K: sp.csr_matrix, M: sp.csr_matrix, grid: GridSpec) -> float:
    """Largest eigenvalue of M^{-1} K; the checkerboard mode is a good start."""
    jj, ii = np.meshgrid(np.arange(grid.nx), np.arange(grid.ny))
    v = ((-1.0) ** (ii + jj)).ravel()
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(500):
        w = assembly_mass_lu(K @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        new = float((v @ (K @ v)) / (v @ (M @ v)))
        if abs(new - lam) <= 1e-10 * max(abs(new), 1.0):
            return new
        lam = new
    return lam


def assemble_fem(grid: GridSpec) -> FemAssembly:
    """Assemble global Q1 mass and stiffness matrices on the full window."""
    me = element_mass(grid.hx, grid.hy)
    ke = element_stiffness(grid.hx, grid.hy)
    nx, ny = grid.nx, grid.ny
    jj, ii = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1))
    base = (ii * nx + jj).ravel()
    # global node indices per element, in the phi_1..phi_4 order above
    gidx = np.stack([base, base + nx, base + 1, base + nx + 1], axis=1)
    rows = np.repeat(gidx, 4, axis=1).ravel()
    cols = np.tile(gidx, (1, 4)).ravel()
    n = grid.n_cells
    n_elem = len(base)
    M = sp.coo_matrix((np.tile(me.ravel(), n_elem), (rows, cols)), shape=(n, n)).tocsr()
    K = sp.coo_matrix((np.tile(ke.ravel(), n_elem), (rows, cols)), shape=(n, n)).tocsr()
    asm = FemAssembly(grid, M, K, 0.0)
    lam = _power_iteration(asm.mass_solve, K, M, grid)
    asm.lam_max = lam
    return asm


def _diffuse(asm: FemAssembly, u: np.ndarray, kappa: float, dt_total: float) -> np.ndarray:
    """RK4 subflow of M du/dt = -kappa K u over dt_total; u is (m, n_cells)."""
    if kappa == 0.0 or dt_total == 0.0:
        return u
    n_sub = max(1, int(np.ceil(kappa * asm.lam_max * dt_total / RK4_STABILITY_LIMIT)))
    dt = dt_total / n_sub
    v = u.T  # (n_cells, m), multi-RHS solves
    K = asm.stiffness

    def rhs(w):
        return -kappa * asm.mass_solve(K @ w)

    for _ in range(n_sub):
        k1 = rhs(v)
        k2 = rhs(v + 0.5 * dt * k1)
        k3 = rhs(v + 0.5 * dt * k2)
        k4 = rhs(v + dt * k3)
        v = v + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return v.T


def _react(
    u: np.ndarray, model: ModelKind, schedule: RateSchedule, t: float, tau: float
) -> np.ndarray:
    """Classical RK4 on the pointwise reaction ODE over [t, t + tau]."""
    k1 = reaction(model, u, t, schedule)
    k2 = reaction(model, u + 0.5 * tau * k1, t + 0.5 * tau, schedule)
    k3 = reaction(model, u + 0.5 * tau * k2, t + 0.5 * tau, schedule)
    k4 = reaction(model, u + tau * k3, t + tau, schedule)
    return u + (tau / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _strang_advance(
    asm: FemAssembly,
    u: np.ndarray,
    model: ModelKind,
    schedule: RateSchedule,
    kappa: float,
    tau: float,
    t: float,
) -> np.ndarray:
    u = _diffuse(asm, u, kappa, 0.5 * tau)
    u = _react(u, model, schedule, t, tau)
    u = _diffuse(asm, u, kappa, 0.5 * tau)
    low = float(u.min())
    if low < -NEGATIVITY_TOL:
        raise StabilityError(
            f"state went negative ({low:.3e}) at t={t + tau:.4f}; use a smaller tau"
        )
    if low < 0.0:
        np.clip(u, 0.0, None, out=u)
    return u


def strang_step(
    asm: FemAssembly,
    fields: FieldSet,
    model: ModelKind,
    schedule: RateSchedule,
    kappa: float,
    tau: float,
) -> FieldSet:
    """Advance a FieldSet by one split step of length tau."""
    fields.validate(asm.grid)
    if kappa < 0.0:
        raise ParameterError(f"kappa must be non-negative, got {kappa}")
    shape = fields.data.shape
    u = fields.data.reshape(shape[0], -1)
    new = _strang_advance(asm, u, model, schedule, kappa, tau, fields.time)
    return FieldSet(fields.names, new.reshape(shape), fields.time + tau)


def run_fem_from_state(
    grid: GridSpec,
    u0: np.ndarray,
    model: ModelKind,
    schedule: RateSchedule,
    kappa: float,
    t_end: float,
    tau: float,
    population: np.ndarray | None = None,
    store_every: int = 1,
    max_tau: float = DEFAULT_MAX_TAU,
) -> Trajectory:
    """Split-scheme counterpart of solver_cn.run_from_state."""
    if u0.shape != (model.n_compartments,) + grid.shape:
        raise DimensionError(
            f"u0 shape {u0.shape} does not match ({model.n_compartments},) + {grid.shape}"
        )
    if kappa < 0.0:
        raise ParameterError(f"kappa must be non-negative, got {kappa}")
    if not (0.0 < tau <= max_tau):
        raise ParameterError(f"tau must lie in (0, {max_tau}], got {tau}")
    steps = _resolve_steps(t_end, tau)
    if store_every < 1 or steps % store_every != 0:
        raise ParameterError(f"store_every={store_every} must divide the {steps} steps")
    asm = assemble_fem(grid)

    m = model.n_compartments
    u = u0.reshape(m, -1).astype(float)
    evolve_pop = population is not None
    if evolve_pop:
        pop = population.reshape(1, -1).astype(float)

    n_levels = steps // store_every + 1
    times = np.empty(n_levels)
    states = np.empty((n_levels, m) + grid.shape)
    pops = np.empty((n_levels,) + grid.shape) if evolve_pop else None
    times[0] = 0.0
    states[0] = u.reshape((m,) + grid.shape)
    if evolve_pop:
        pops[0] = pop.reshape(grid.shape)

    for n in range(steps):
        u = _strang_advance(asm, u, model, schedule, kappa, tau, n * tau)
        if evolve_pop:
            pop = _diffuse(asm, pop, kappa, tau)
        if (n + 1) % store_every == 0:
            k = (n + 1) // store_every
            times[k] = (n + 1) * tau
            states[k] = u.reshape((m,) + grid.shape)
            if evolve_pop:
                pops[k] = pop.reshape(grid.shape)

    return Trajectory(grid, model, tau, store_every, times, states, pops, backend="fem-split")


def run_forward_fem(
    grid: GridSpec,
    masks: dict[str, RegionMask],
    params: ParameterVector,
    model: ModelKind,
    t_end: float,
    tau: float,
    population: np.ndarray,
    store_every: int = 1,
    evolve_population: bool = True,
    max_tau: float = DEFAULT_MAX_TAU,
) -> Trajectory:
    """Full forward run on the FEM backend; mirrors solver_cn.run_forward."""
    u0 = initial_fractions(model, grid, masks, params, population)
    return run_fem_from_state(
        grid,
        u0,
        model,
        params.schedule,
        params.kappa,
        t_end,
        tau,
        population=population if evolve_population else None,
        store_every=store_every,
        max_tau=max_tau,
    )
