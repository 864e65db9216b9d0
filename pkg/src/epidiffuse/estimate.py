"""Parameter estimation: Metropolis random walk and adjoint-gradient descent.

Both engines minimize the same evaluate_J over

    chi = (beta0, beta1, beta2, kappa, delta)   and the per-region
    initially infected counts I0 (spread uniformly by distribute_uniform).

The Metropolis sampler proposes symmetric normal steps on the packed
parameter vector, rejects anything outside the admissible bounds, accepts
with probability min{1, exp((J_old^2 - J_new^2) / (2 sigma^2))}, and reports
means and standard deviations over the accepted post-burn-in draws.  Every
decision is logged so the rule can be re-checked offline.

The adjoint engine computes the exact gradient of the discrete objective.
The backward sweep uses solver_cn.step_backward with the source
p_n = (df/du)^T z_n + impulses of the data misfit at the daily marks; because
A and B are the same operators as in the forward step, the sweep is the exact
transpose of the linearized forward recursion and the gradient matches finite
differences to solver precision.  The search direction for chi comes from a
damped limited-memory BFGS (identity initialization); the initial-condition
direction follows the optimality-condition target u0_tilde = u0_ref - z(0)/w2.
A shared Armijo backtracking step is applied to both directions at once, and
accepted iterates are projected onto the bounds

    beta_j > 0,   0 <= kappa <= 1,   0 <= delta <= 1,   I0 >= 0.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    ParameterError,
    SequencingError,
)
from .grid import GridSpec, RegionMask, region_total
from .models import (
    ModelKind,
    ParameterVector,
    beta_interval,
    initial_fractions,
    reaction_jacobian,
    transmission_bilinear,
)
from .objective import (
    DataInterpolant,
    ObjectiveBreakdown,
    ObjectiveWeights,
    evaluate_terms,
    trapezoid_day_weights,
)
from .solver_cn import Trajectory, assemble, run_from_state, step_backward
from . import solver_fem

BETA_MIN = 1e-8

CHI_NAMES = ("beta0", "beta1", "beta2", "kappa", "delta")


@dataclass
class Problem:
    """Everything a fit needs: geometry, model, data, weights, and defaults."""

    grid: GridSpec
    model: ModelKind
    masks: dict[str, RegionMask]
    district: RegionMask
    population: np.ndarray
    t_end: float
    tau: float
    weights: ObjectiveWeights
    data: DataInterpolant | None
    initial: ParameterVector
    backend: str = "cn"
    corrected: bool = False

    def __post_init__(self):
        spd = 1.0 / self.tau
        if abs(spd - round(spd)) > 1e-8:
            raise ParameterError(f"tau={self.tau} must divide one day into whole steps")
        for name, mask in self.masks.items():
            if not mask.issubset(self.district):
                raise ParameterError(f"region '{name}' is not contained in the district mask")
        if self.backend not in ("cn", "fem-split"):
            raise ConfigError(f"unknown backend '{self.backend}'")
        if self.data is not None:
            last = int(self.data.days[-1])
            if self.data.days[0] != 0 or last != int(round(self.t_end)):
                raise ParameterError(
                    f"data days {self.data.days[0]}..{last} do not span 0..{int(round(self.t_end))}"
                )

    @property
    def steps_per_day(self) -> int:
        return int(round(1.0 / self.tau))

    @property
    def region_names(self) -> tuple[str, ...]:
        return tuple(sorted(self.masks))

    @property
    def n_params(self) -> int:
        return 5 + len(self.masks)

    @property
    def param_names(self) -> tuple[str, ...]:
        return CHI_NAMES + tuple(f"I0_{name}" for name in self.region_names)

    def pack(self, params: ParameterVector) -> np.ndarray:
        seeds = [params.init_infected.get(name, 0.0) for name in self.region_names]
        return np.concatenate([params.chi, seeds])

    def unpack(self, vec: np.ndarray) -> ParameterVector:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params,):
            raise ParameterError(f"expected {self.n_params} packed parameters, got {vec.shape}")
        seeds = dict(zip(self.region_names, vec[5:]))
        return self.initial.with_chi(vec[:5]).with_seeds(seeds)

    def in_bounds(self, vec: np.ndarray) -> bool:
        return bool(
            (vec[:3] > 0.0).all()
            and 0.0 <= vec[3] <= 1.0
            and 0.0 <= vec[4] <= 1.0
            and (vec[5:] >= 0.0).all()
        )

    def project_chi(self, chi: np.ndarray) -> np.ndarray:
        out = chi.copy()
        out[:3] = np.maximum(out[:3], BETA_MIN)
        out[3] = min(max(out[3], 0.0), 1.0)
        out[4] = min(max(out[4], 0.0), 1.0)
        return out

    def build_u0(self, params: ParameterVector) -> np.ndarray:
        return initial_fractions(self.model, self.grid, self.masks, params, self.population)

    def simulate(
        self,
        params: ParameterVector,
        store_every: int | None = None,
        evolve_population: bool = False,
        u0_override: np.ndarray | None = None,
    ) -> Trajectory:
        """Forward run; by default stores only the daily levels J needs."""
        u0 = u0_override if u0_override is not None else self.build_u0(params)
        if store_every is None:
            store_every = self.steps_per_day
        pop = self.population if evolve_population else None
        if self.backend == "fem-split":
            return solver_fem.run_fem_from_state(
                self.grid, u0, self.model, params.schedule, params.kappa,
                self.t_end, self.tau, population=pop, store_every=store_every,
            )
        return run_from_state(
            self.grid, u0, self.model, params.schedule, params.kappa,
            self.t_end, self.tau, population=pop, store_every=store_every,
            corrected=self.corrected,
        )

    def _require_data(self) -> DataInterpolant:
        if self.data is None:
            raise ConfigError("this problem was built without case data; cannot evaluate J")
        return self.data

    def objective_terms(
        self, params: ParameterVector, u0_override: np.ndarray | None = None
    ) -> ObjectiveBreakdown:
        traj = self.simulate(params, u0_override=u0_override)
        return evaluate_terms(traj, params, self.weights, self._require_data())

    def objective(self, params: ParameterVector, u0_override: np.ndarray | None = None) -> float:
        return self.objective_terms(params, u0_override=u0_override).total


@dataclass
class FitResult:
    """What both estimators return; see the module docstring for semantics."""

    params: ParameterVector
    init_fields: np.ndarray
    objective: float
    history: list[tuple[float, np.ndarray]]
    acceptance_rate: float | None = None
    posterior_std: dict[str, float] | None = None
    gradient_norms: list[float] | None = None
    n_evaluations: int = 0
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Metropolis sampler
# ---------------------------------------------------------------------------

@dataclass
class MetropolisConfig:
    draws: int = 2000
    step_scale: float | np.ndarray | None = None
    sigma: float | None = None
    seed: int = 0
    burn_in: float = 0.2
    stuck_window: int = 500

    def __post_init__(self):
        if self.draws < 1:
            raise ConfigError(f"draws must exceed the burn-in, got draws={self.draws}", key="draws")
        if not (0.0 <= self.burn_in < 1.0):
            raise ConfigError(f"burn_in must be a fraction in [0, 1), got {self.burn_in}", key="burn_in")
        if self.sigma is not None and self.sigma <= 0.0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}", key="sigma")


def default_sigma(problem: Problem) -> float:
    """Sample std of the district-level daily detected incidence fraction."""
    series = problem._require_data().district_incidence_fraction()
    sigma = float(np.std(series, ddof=1)) if len(series) > 1 else 0.0
    if not np.isfinite(sigma) or sigma <= 0.0:
        raise ConfigError("data give a degenerate default sigma; set sigma explicitly", key="sigma")
    return sigma


def default_step_scale(x0: np.ndarray) -> np.ndarray:
    """Per-parameter proposal std: value/100, floored for near-zero entries."""
    scale = np.abs(x0) / 100.0
    floor = np.concatenate([np.full(5, 1e-4), np.full(len(x0) - 5, 0.25)])
    return np.maximum(scale, floor)


def metropolis_fit(problem: Problem, config: MetropolisConfig) -> FitResult:
    """Random-walk Metropolis over (chi, I0) with bounds enforced by rejection."""
    rng = np.random.default_rng(config.seed)
    x = problem.pack(problem.initial)
    if not problem.in_bounds(x):
        raise ConfigError("initial parameters violate the bounds")
    dim = len(x)
    if config.step_scale is None:
        scale = default_step_scale(x)
    else:
        scale = np.broadcast_to(np.asarray(config.step_scale, dtype=float), (dim,)).copy()
        if (scale <= 0.0).any():
            raise ConfigError("step_scale must be positive componentwise", key="step_scale")
    sigma = config.sigma if config.sigma is not None else default_sigma(problem)

    j_cur = problem.objective(problem.unpack(x))
    n_eval = 1
    log = {
        "j_old": np.empty(config.draws),
        "j_new": np.full(config.draws, np.nan),
        "alpha": np.zeros(config.draws),
        "uniform": np.full(config.draws, np.nan),
        "accepted": np.zeros(config.draws, dtype=bool),
        "in_bounds": np.ones(config.draws, dtype=bool),
    }
    history: list[tuple[float, np.ndarray]] = []
    accepted_states: list[np.ndarray] = []
    accepted_draws: list[int] = []
    accepted_j: list[float] = []
    last_accept = -1
    warned_stuck = False

    for i in range(config.draws):
        log["j_old"][i] = j_cur
        prop = x + scale * rng.standard_normal(dim)
        if not problem.in_bounds(prop):
            log["in_bounds"][i] = False
        else:
            j_prop = problem.objective(problem.unpack(prop))
            n_eval += 1
            exponent = (j_cur ** 2 - j_prop ** 2) / (2.0 * sigma ** 2)
            alpha = 1.0 if exponent >= 0.0 else float(np.exp(max(exponent, -745.0)))
            u = rng.uniform()
            log["j_new"][i] = j_prop
            log["alpha"][i] = alpha
            log["uniform"][i] = u
            if u < alpha:
                x = prop
                j_cur = j_prop
                log["accepted"][i] = True
                accepted_states.append(x.copy())
                accepted_draws.append(i)
                accepted_j.append(j_cur)
                last_accept = i
        history.append((j_cur, x.copy()))
        if not warned_stuck and i - last_accept >= config.stuck_window:
            warnings.warn(
                f"no accepted proposal in {config.stuck_window} draws; "
                "check step_scale and sigma",
                RuntimeWarning,
            )
            warned_stuck = True

    burn = int(config.burn_in * config.draws)
    kept = [k for k, d in enumerate(accepted_draws) if d >= burn]
    diagnostics = {
        "decisions": log,
        "sigma": sigma,
        "step_scale": scale,
        "burn_in_draws": burn,
        "n_accepted": len(accepted_states),
        "stuck": warned_stuck,
    }
    if kept:
        sample = np.array([accepted_states[k] for k in kept])
        mean = sample.mean(axis=0)
        std = sample.std(axis=0, ddof=1) if len(kept) > 1 else np.zeros(dim)
        diagnostics["mean_accepted_J"] = float(np.mean([accepted_j[k] for k in kept]))
    else:
        warnings.warn("no accepted draws after burn-in; reporting the last chain state", RuntimeWarning)
        mean, std = x.copy(), np.full(dim, np.nan)
        diagnostics["empty_posterior"] = True
    if not problem.in_bounds(mean):
        # means of in-bounds draws can only leave the box through beta -> 0
        mean[:3] = np.maximum(mean[:3], BETA_MIN)
    params_hat = problem.unpack(mean)
    j_hat = problem.objective(params_hat)
    n_eval += 1
    return FitResult(
        params=params_hat,
        init_fields=problem.build_u0(params_hat),
        objective=j_hat,
        history=history,
        acceptance_rate=len(accepted_states) / config.draws,
        posterior_std=dict(zip(problem.param_names, std)),
        n_evaluations=n_eval,
        diagnostics=diagnostics,
    )


# ---------------------------------------------------------------------------
# Adjoint gradient
# ---------------------------------------------------------------------------

@dataclass
class AdjointGradient:
    """Gradient of J: the five chi components, per-region seed counts, z(0)."""

    chi: np.ndarray
    seeds: np.ndarray
    z0: np.ndarray
    breakdown: ObjectiveBreakdown

    @property
    def full(self) -> np.ndarray:
        return np.concatenate([self.chi, self.seeds])


def _bilinear_gradient(model: ModelKind, u: np.ndarray) -> np.ndarray:
    """d(u_S u_I)/du, shape (m,) + field shape."""
    out = np.zeros_like(u)
    if model is ModelKind.SIS:
        out[0] = 1.0 - 2.0 * u[0]
    else:
        out[0] = u[model.infected_index]
        out[model.infected_index] = u[0]
    return out


def _seed_basis(model: ModelKind, rho: np.ndarray) -> np.ndarray:
    """du0/dI0 for one region: rho is the per-cell fraction per seeded person."""
    out = np.zeros((model.n_compartments,) + rho.shape)
    if model is ModelKind.SIS:
        out[0] = rho
    elif model is ModelKind.SIR:
        out[1] = rho
        out[0] = -rho
    else:
        out[2] = rho
        out[1] = 0.5 * rho
        out[0] = -1.5 * rho
    return out


def adjoint_gradient(
    problem: Problem,
    params: ParameterVector,
    trajectory: Trajectory | None = None,
) -> AdjointGradient:
    """Exact gradient of the discrete J via one backward sweep.

    The trajectory must contain every time level (store_every == 1); the sweep
    applies solver_cn.step_backward with the adjoint source
    p_n = (df/du)^T z_n + data-misfit impulses at the daily marks, then closes
    with the q_0 chain rule for the seed gradients.
    """
    if problem.backend != "cn":
        raise ConfigError("adjoint gradients are only available on the cn backend")
    data = problem._require_data()
    weights = problem.weights
    if trajectory is None:
        trajectory = problem.simulate(params, store_every=1)
    if trajectory.store_every != 1:
        raise SequencingError(
            f"adjoint sweep needs every forward level, got store_every={trajectory.store_every}"
        )
    grid = problem.grid
    model = problem.model
    schedule = params.schedule
    area = grid.cell_area
    m = model.n_compartments
    n_cells = grid.n_cells
    states = trajectory.states.reshape(trajectory.n_levels, m, n_cells)
    n_steps = trajectory.n_levels - 1
    spd = problem.steps_per_day

    breakdown = evaluate_terms(trajectory, params, weights, data)

    # Daily residual pieces, reused by impulses and the direct beta/delta terms.
    days = trajectory.days
    omega = trapezoid_day_weights(len(days))
    betas_d = np.array([
        params.schedule.betas[beta_interval(schedule, float(d))] for d in days
    ])
    intervals_d = np.array([beta_interval(schedule, float(d)) for d in days])
    phi_d = np.empty((len(days), n_cells))
    resid_d = np.empty((len(days), n_cells))
    for pos, day in enumerate(days):
        u_day = states[day * spd]
        phi = transmission_bilinear(model, u_day)
        phi_d[pos] = phi
        resid_d[pos] = params.delta * betas_d[pos] * phi - data.daily_fields[pos].reshape(-1)

    w0a = weights.w0 * area
    coeff_d = w0a * omega * betas_d * params.delta          # (n_days,)
    g_beta = np.zeros(3)
    for k in range(3):
        sel = intervals_d == k
        g_beta[k] = (w0a * omega[sel] * params.delta) @ (phi_d[sel] * resid_d[sel]).sum(axis=1)
    g_delta = float((w0a * omega * betas_d) @ (phi_d * resid_d).sum(axis=1))
    g_kappa = 0.0

    def impulse(pos: int) -> np.ndarray:
        u_day = states[days[pos] * spd]
        return coeff_d[pos] * _bilinear_gradient(model, u_day) * resid_d[pos]

    ws = assemble(grid, params.kappa, problem.tau)
    tau = problem.tau
    L = ws.L
    z = np.zeros((m, n_cells))
    dfdb = np.zeros((m, n_cells))
    for n in range(n_steps, 0, -1):
        source = np.einsum("jic,jc->ic", reaction_jacobian(model, states[n], n * tau, schedule), z)
        if n % spd == 0:
            source += impulse(n // spd) / tau
        z = step_backward(ws, z, source)
        # z now equals the multiplier paired with the step q_{n-1} -> q_n
        t_prev = (n - 1) * tau
        u_prev = states[n - 1]
        g_kappa += 0.5 * tau * float((z * ((L @ (u_prev + states[n]).T).T)).sum())
        phi_prev = transmission_bilinear(model, u_prev)
        dfdb[:] = 0.0
        if model is ModelKind.SIS:
            dfdb[0] = phi_prev
        else:
            dfdb[0] = -phi_prev
            dfdb[model.infected_index if model is ModelKind.SIR else 1] = phi_prev
        g_beta[beta_interval(schedule, t_prev)] += tau * float((z * dfdb).sum())

    # close the chain at q_0: zeta_0 = total dJ/dq_0 (misfit part)
    zeta0 = ws.apply_B(z.T).T + tau * np.einsum(
        "jic,jc->ic", reaction_jacobian(model, states[0], 0.0, schedule), z
    )
    zeta0 += impulse(0)
    z0_field = (zeta0 / area).reshape((m,) + grid.shape)

    if weights.w1 > 0.0:
        reg = weights.w1 * (params.chi - weights.chi_ref)
        g_beta += reg[:3]
        g_kappa += reg[3]
        g_delta += reg[4]

    du0_weight = zeta0.reshape((m,) + grid.shape).copy()
    if weights.w2 > 0.0:
        ref = weights.u0_ref if weights.u0_ref is not None else 0.0
        du0_weight += weights.w2 * area * (trajectory.states[0] - ref)
    g_seeds = np.empty(len(problem.region_names))
    pop = problem.population
    for k, name in enumerate(problem.region_names):
        mask = problem.masks[name]
        rho = np.zeros(grid.shape)
        ok = mask.cells & (pop > 0.0)
        rho[ok] = 1.0 / (mask.cell_count * area * pop[ok])
        basis = _seed_basis(model, rho)
        g_seeds[k] = float((du0_weight * basis).sum())

    chi_grad = np.array([g_beta[0], g_beta[1], g_beta[2], g_kappa, g_delta])
    return AdjointGradient(chi_grad, g_seeds, z0_field, breakdown)


def gradient_check(
    problem: Problem,
    params: ParameterVector,
    rel_step: float = 1e-5,
    include_seeds: bool = False,
) -> dict:
    """Adjoint gradient vs central finite differences of evaluate_J.

    Returns per-component adjoint and FD values with their relative errors.
    Evaluation points must keep chi strictly inside the bounds so that the
    two-sided stencil stays admissible.
    """
    grad = adjoint_gradient(problem, params)
    x0 = problem.pack(params)
    names = list(CHI_NAMES)
    adjoint = list(grad.chi)
    if include_seeds:
        names += [f"I0_{r}" for r in problem.region_names]
        adjoint += list(grad.seeds)
    fd = []
    for i in range(len(names)):
        h = rel_step * max(abs(x0[i]), 1e-2)
        for sign in (+1.0, -1.0):
            trial = x0.copy()
            trial[i] += sign * h
            if not problem.in_bounds(trial):
                raise ParameterError(
                    f"FD stencil for '{names[i]}' leaves the bounds; move the evaluation point inward"
                )
        plus = problem.objective(problem.unpack(np.concatenate([x0[:i], [x0[i] + h], x0[i + 1:]])))
        minus = problem.objective(problem.unpack(np.concatenate([x0[:i], [x0[i] - h], x0[i + 1:]])))
        fd.append((plus - minus) / (2.0 * h))
    adjoint = np.array(adjoint)
    fd = np.array(fd)
    denom = np.maximum(np.abs(fd), 1e-12)
    return {
        "names": names,
        "adjoint": adjoint,
        "fd": fd,
        "rel_err": np.abs(adjoint - fd) / denom,
    }


# ---------------------------------------------------------------------------
# Adjoint fit (forward-backward sweep with L-BFGS + Armijo)
# ---------------------------------------------------------------------------

@dataclass
class AdjointConfig:
    tol: float = 1e-6
    gtol: float = 1e-12
    max_outer: int = 50
    armijo_c: float = 1e-3
    armijo_shrink: float = 0.5
    alpha_min: float = 1e-10
    bfgs_memory: int = 10
    optimize_initial: bool = False
    per_cell_initial: bool = False
    max_seed_step: float = 50.0       # persons, per-region mode
    max_initial_step: float = 0.05    # fraction units, per-cell mode

    def __post_init__(self):
        if not (0.0 < self.armijo_c < 1.0):
            raise ConfigError(f"armijo_c must lie in (0, 1), got {self.armijo_c}", key="armijo_c")
        if not (0.0 < self.armijo_shrink < 1.0):
            raise ConfigError(
                f"armijo_shrink must lie in (0, 1), got {self.armijo_shrink}", key="armijo_shrink"
            )
        if self.tol <= 0.0 or self.max_outer < 1:
            raise ConfigError("tol must be > 0 and max_outer >= 1")
        if self.gtol < 0.0:
            raise ConfigError(f"gtol must be >= 0, got {self.gtol}", key="gtol")


class _Lbfgs:
    """Two-loop limited-memory BFGS with identity init and Powell damping."""

    def __init__(self, memory: int):
        self.memory = memory
        self.s: list[np.ndarray] = []
        self.y: list[np.ndarray] = []
        self.rho: list[float] = []
        self.gamma = 1.0

    def direction(self, g: np.ndarray) -> np.ndarray:
        q = g.copy()
        alphas = []
        for s, y, r in zip(reversed(self.s), reversed(self.y), reversed(self.rho)):
            a = r * (s @ q)
            q -= a * y
            alphas.append(a)
        q *= self.gamma
        for (s, y, r), a in zip(zip(self.s, self.y, self.rho), reversed(alphas)):
            b = r * (y @ q)
            q += (a - b) * s
        return -q

    def update(self, s: np.ndarray, y: np.ndarray):
        ss = float(s @ s)
        if ss == 0.0:
            return
        sy = float(s @ y)
        s_bs = ss / self.gamma  # B approximated by its diagonal proxy I/gamma
        if sy < 0.2 * s_bs:
            theta = 0.8 * s_bs / (s_bs - sy)
            y = theta * y + (1.0 - theta) * (s / self.gamma)
            sy = float(s @ y)
        if sy <= 1e-16 * ss:
            return
        self.s.append(s.copy())
        self.y.append(y.copy())
        self.rho.append(1.0 / sy)
        if len(self.s) > self.memory:
            self.s.pop(0)
            self.y.pop(0)
            self.rho.pop(0)
        self.gamma = sy / float(y @ y)


def _seed_targets(problem: Problem, grad: AdjointGradient) -> np.ndarray:
    """Per-region person counts implied by the optimality condition on u0."""
    w2 = problem.weights.w2
    ref = problem.weights.u0_ref
    idx = problem.model.infected_index
    ref_i = ref[idx] if ref is not None else 0.0
    target_frac = ref_i - grad.z0[idx] / w2
    counts = np.array([
        region_total(target_frac * problem.population, problem.masks[name], problem.grid)
        for name in problem.region_names
    ])
    return np.maximum(counts, 0.0)


def adjoint_fit(problem: Problem, config: AdjointConfig) -> FitResult:
    """Forward-backward sweeps with L-BFGS on chi and Armijo backtracking.

    When ``optimize_initial`` is on (requires w2 > 0) the initial conditions
    move along s2 = u0_tilde - u0 in the same line search; per-region seed
    counts by default, the raw infected field with ``per_cell_initial``.
    """
    if config.optimize_initial and problem.weights.w2 <= 0.0:
        raise ConfigError("initial-condition optimization requires w2 > 0", key="w2")
    if config.per_cell_initial and not config.optimize_initial:
        raise ConfigError("per_cell_initial needs optimize_initial enabled", key="per_cell_initial")

    params = problem.initial
    per_cell = config.per_cell_initial
    u0_field = problem.build_u0(params) if per_cell else None
    idx_i = problem.model.infected_index

    traj = problem.simulate(params, store_every=1, u0_override=u0_field)
    terms = evaluate_terms(traj, params, problem.weights, problem._require_data())
    j_cur = terms.total
    grad = adjoint_gradient(problem, params, traj)
    n_eval = 1
    seeds = problem.pack(params)[5:]
    history = [(j_cur, problem.pack(params))]
    gnorms = [float(np.linalg.norm(grad.full))]
    diagnostics: dict = {"resets": 0, "line_search_failed": False, "stop": "max_outer"}
    lbfgs = _Lbfgs(config.bfgs_memory)

    for outer in range(config.max_outer):
        if gnorms[-1] <= config.gtol:
            diagnostics["stop"] = "stationary"
            break
        g_chi = grad.chi
        s1 = lbfgs.direction(g_chi)
        if float(s1 @ g_chi) >= 0.0:
            s1 = -g_chi
            diagnostics["resets"] += 1

        s2_seeds = np.zeros_like(seeds)
        s2_field = None
        slope = float(s1 @ g_chi)
        if config.optimize_initial:
            if per_cell:
                ref = problem.weights.u0_ref
                ref_i = ref[idx_i] if ref is not None else 0.0
                target = np.clip(ref_i - grad.z0[idx_i] / problem.weights.w2, 0.0, 1.0)
                s2_field = target - u0_field[idx_i]
                peak = float(np.abs(s2_field).max())
                if peak > config.max_initial_step:
                    s2_field *= config.max_initial_step / peak
                basis = _seed_basis(problem.model, s2_field)
                du0 = grad.z0 * problem.grid.cell_area
                if problem.weights.w2 > 0.0:
                    ref_full = ref if ref is not None else 0.0
                    du0 = du0 + problem.weights.w2 * problem.grid.cell_area * (
                        traj.states[0] - ref_full
                    )
                slope2 = float((du0 * basis).sum())
                if slope2 > 0.0:
                    s2_field = None
                else:
                    slope += slope2
            else:
                s2_seeds = _seed_targets(problem, grad) - seeds
                peak = float(np.abs(s2_seeds).max())
                if peak > config.max_seed_step:
                    s2_seeds *= config.max_seed_step / peak
                slope2 = float(s2_seeds @ grad.seeds)
                if slope2 > 0.0:
                    s2_seeds[:] = 0.0
                else:
                    slope += slope2

        alpha = 1.0
        accepted = False
        chi_cur = params.chi
        while alpha >= config.alpha_min:
            chi_t = problem.project_chi(chi_cur + alpha * s1)
            trial = params.with_chi(chi_t)
            u0_t = None
            if per_cell:
                u0_t = u0_field.copy()
                if s2_field is not None:
                    frac = np.clip(u0_field[idx_i] + alpha * s2_field, 0.0, 1.0)
                    u0_t = _rebuild_u0(problem.model, frac)
            else:
                seeds_t = np.maximum(seeds + alpha * s2_seeds, 0.0)
                trial = trial.with_seeds(dict(zip(problem.region_names, seeds_t)))
            j_t = problem.objective(trial, u0_override=u0_t)
            n_eval += 1
            if j_t <= j_cur + config.armijo_c * alpha * slope:
                accepted = True
                break
            alpha *= config.armijo_shrink
        if not accepted:
            diagnostics["line_search_failed"] = True
            diagnostics["stop"] = "line_search"
            break

        j_prev, chi_prev, g_prev = j_cur, chi_cur, g_chi
        params = trial
        if per_cell:
            u0_field = u0_t
        else:
            seeds = problem.pack(params)[5:]
        j_cur = j_t
        history.append((j_cur, problem.pack(params)))

        if abs(j_prev - j_cur) <= config.tol * max(abs(j_prev), 1e-300):
            diagnostics["stop"] = "tol"
            break

        traj = problem.simulate(params, store_every=1, u0_override=u0_field)
        grad = adjoint_gradient(problem, params, traj)
        gnorms.append(float(np.linalg.norm(grad.full)))
        lbfgs.update(params.chi - chi_prev, grad.chi - g_prev)

    if per_cell:
        counts = {
            name: region_total(u0_field[idx_i] * problem.population, problem.masks[name], problem.grid)
            for name in problem.region_names
        }
        params = params.with_seeds(counts)
        init_fields = u0_field
    else:
        init_fields = problem.build_u0(params)
    return FitResult(
        params=params,
        init_fields=init_fields,
        objective=j_cur,
        history=history,
        gradient_norms=gnorms,
        n_evaluations=n_eval,
        diagnostics=diagnostics,
    )


def _rebuild_u0(model: ModelKind, infected_frac: np.ndarray) -> np.ndarray:
    """Model-consistent initial stack from an infected-fraction field."""
    m = model.n_compartments
    u0 = np.zeros((m,) + infected_frac.shape)
    if model is ModelKind.SIS:
        u0[0] = infected_frac
    elif model is ModelKind.SIR:
        u0[1] = infected_frac
        u0[0] = 1.0 - infected_frac
    else:
        u0[2] = infected_frac
        u0[1] = 0.5 * infected_frac
        u0[0] = 1.0 - 1.5 * infected_frac
    return u0
