"""Run configs, mask/case file I/O, scenario assembly, and the CLI.

File formats
------------
Mask file: a text header ``nx ny Lx Ly`` followed by ny rows of nx space
separated 0/1 flags.  Row 0 is the southernmost row.  Anything other than
0 or 1 is a hard error.

Case file: delimiter-separated text with a ``date,region,new_cases`` header;
dates are ISO-8601.  Days missing inside the study window are zero-filled
and flagged, duplicates are rejected.

Run config: a YAML document (schema documented in the README) naming the
model variant, mask files with region populations, the study window and
breakpoints, rates, weights, solver settings, estimator blocks, output
directory, and seed.  All validation errors carry the config path and the
offending key.

Every command writes a ``summary.json`` embedding the config hash; outputs
contain no timestamps, so re-running with an unchanged config and seed
reproduces them bit-identically.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import (
    AlignmentError,
    CaseDataError,
    ConfigError,
    DegenerateRegionError,
    DimensionError,
    EpidiffuseError,
    MaskFormatError,
    NormalizationError,
    ParameterError,
    SequencingError,
    StabilityError,
)
from .grid import GridSpec, RegionMask, distribute_uniform, region_total, union_mask
from .models import (
    DEFAULT_GAMMA,
    DEFAULT_THETA,
    ModelKind,
    ParameterVector,
    RateSchedule,
)
from .objective import CaseSeries, ObjectiveWeights, detected_daily_cases, interpolate_data
from .solver_cn import (
    Trajectory,
    conservation_drift,
    run_forward,
    temporal_refinement_study,
)
from .solver_fem import run_forward_fem
from .estimate import (
    AdjointConfig,
    FitResult,
    MetropolisConfig,
    Problem,
    adjoint_fit,
    gradient_check,
    metropolis_fit,
)

#: Population split of the demo district (persons); the district totals 81,000.
DEMO_POPULATIONS = {"BA": 14500.0, "BI": 19000.0, "HR": 19500.0, "IO": 28000.0}
DEMO_EXTENT = (39.23, 56.05)  # km

_FLOAT_FMT = "%.12g"


# ---------------------------------------------------------------------------
# Mask and case files
# ---------------------------------------------------------------------------

def write_mask(path, grid: GridSpec, mask: RegionMask) -> None:
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"{grid.nx} {grid.ny} {grid.Lx!r} {grid.Ly!r}\n")
        for row in mask.cells:
            fh.write(" ".join("1" if v else "0" for v in row) + "\n")


def read_mask(path) -> tuple[GridSpec, RegionMask]:
    """Read one mask file; the region name is the file stem."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise MaskFormatError(f"{path}: cannot read mask file: {exc}") from exc
    if not lines:
        raise MaskFormatError(f"{path}: empty mask file")
    head = lines[0].split()
    if len(head) != 4:
        raise MaskFormatError(f"{path}: header must be 'nx ny Lx Ly', got {lines[0]!r}")
    try:
        nx, ny = int(head[0]), int(head[1])
        Lx, Ly = float(head[2]), float(head[3])
    except ValueError as exc:
        raise MaskFormatError(f"{path}: malformed header {lines[0]!r}") from exc
    rows = [ln for ln in lines[1:] if ln.strip()]
    if len(rows) != ny:
        raise MaskFormatError(f"{path}: expected {ny} mask rows, found {len(rows)}")
    cells = np.zeros((ny, nx), dtype=bool)
    for i, ln in enumerate(rows):
        vals = ln.split()
        if len(vals) != nx:
            raise MaskFormatError(f"{path}: row {i} has {len(vals)} entries, expected {nx}")
        for j, v in enumerate(vals):
            if v == "1":
                cells[i, j] = True
            elif v != "0":
                raise MaskFormatError(f"{path}: row {i} contains {v!r}; only 0/1 allowed")
    grid = GridSpec(nx, ny, Lx, Ly)
    return grid, RegionMask(path.stem, cells)


def write_cases(path, series: dict[str, CaseSeries], start: dt.date) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "region", "new_cases"])
        for name in sorted(series):
            s = series[name]
            for day, value in zip(s.days, s.new_cases):
                writer.writerow(
                    [(start + dt.timedelta(days=int(day))).isoformat(), name, _FLOAT_FMT % value]
                )


def read_cases(path, start: dt.date, n_days: int, regions) -> dict[str, CaseSeries]:
    """Parse a case file into per-region series over days 0..n_days.

    Records outside the window are ignored; missing days inside it are
    zero-filled and flagged in ``filled_days``.
    """
    path = Path(path)
    regions = list(regions)
    table = {name: {} for name in regions}
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise CaseDataError(f"{path}: cannot read case file: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:3]] != ["date", "region", "new_cases"]:
            raise CaseDataError(f"{path}: expected header 'date,region,new_cases', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) < 3:
                raise CaseDataError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            try:
                date = dt.date.fromisoformat(row[0].strip())
            except ValueError as exc:
                raise CaseDataError(f"{path}:{lineno}: bad date {row[0]!r}") from exc
            name = row[1].strip()
            if name not in table:
                raise CaseDataError(f"{path}:{lineno}: unknown region {name!r}; expected one of {regions}")
            try:
                value = float(row[2])
            except ValueError as exc:
                raise CaseDataError(f"{path}:{lineno}: bad case count {row[2]!r}") from exc
            if value < 0:
                raise CaseDataError(f"{path}:{lineno}: negative case count {value}")
            day = (date - start).days
            if day < 0 or day > n_days:
                continue
            if day in table[name]:
                raise CaseDataError(f"{path}:{lineno}: duplicate entry for {name} on {date}")
            table[name][day] = value
    out = {}
    for name in regions:
        seen = table[name]
        if not seen:
            raise CaseDataError(f"{path}: no records for region {name!r} inside the window")
        days = np.arange(n_days + 1)
        values = np.array([seen.get(d, 0.0) for d in days])
        filled = tuple(int(d) for d in days if d not in seen)
        out[name] = CaseSeries(name, days, values, filled_days=filled)
    return out


def sha256_of(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Validated run configuration; paths are resolved absolute."""

    path: str
    model: ModelKind
    region_masks: dict[str, str]
    populations: dict[str, float]
    district_mask: str | None
    cases: str | None
    start: dt.date
    n_days: int
    breakpoints: tuple[float, float]
    gamma: float
    theta: float
    weights: dict[str, float]
    backend: str
    tau: float
    corrected: bool
    estimator: str
    metropolis: dict
    adjoint: dict
    initial_betas: tuple[float, float, float]
    initial_kappa: float
    initial_delta: float
    initial_infected: dict[str, float] | None
    out_dir: str
    seed: int
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.raw, sort_keys=True, default=str)
        return hashlib.sha256(canonical.encode()).hexdigest()

    def date_of(self, day: int) -> str:
        return (self.start + dt.timedelta(days=int(day))).isoformat()


def _cfg_get(raw: dict, path: str, key: str, default=None, required: bool = False):
    cur = raw
    for part in key.split("."):
        if not isinstance(cur, dict) or part not in cur:
            if required:
                raise ConfigError("missing required key", path=path, key=key)
            return default
        cur = cur[part]
    return cur


def _as_date(value, path: str, key: str) -> dt.date:
    if isinstance(value, dt.date):
        return value
    try:
        return dt.date.fromisoformat(str(value))
    except ValueError as exc:
        raise ConfigError(f"expected an ISO date, got {value!r}", path=path, key=key) from exc


def load_config(path) -> RunConfig:
    """Read and validate a YAML run config."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", path=str(path))
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}", path=str(path))
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping", path=str(path))
    p = str(path)
    base = path.parent

    model_name = str(_cfg_get(raw, p, "model", default="seir")).lower()
    try:
        model = ModelKind(model_name)
    except ValueError:
        raise ConfigError(f"unknown model {model_name!r}", path=p, key="model")

    regions_cfg = _cfg_get(raw, p, "grid.regions", required=True)
    if not isinstance(regions_cfg, dict) or not regions_cfg:
        raise ConfigError("grid.regions must map region names to mask/population", path=p, key="grid.regions")
    region_masks, populations = {}, {}
    for name, entry in regions_cfg.items():
        if not isinstance(entry, dict) or "mask" not in entry or "population" not in entry:
            raise ConfigError("each region needs 'mask' and 'population'", path=p, key=f"grid.regions.{name}")
        mask_path = (base / str(entry["mask"])).resolve()
        if not mask_path.exists():
            raise ConfigError(f"mask file not found: {mask_path}", path=p, key=f"grid.regions.{name}.mask")
        pop = float(entry["population"])
        if pop <= 0:
            raise ConfigError(f"population must be positive, got {pop}", path=p, key=f"grid.regions.{name}.population")
        region_masks[str(name)] = str(mask_path)
        populations[str(name)] = pop

    district = _cfg_get(raw, p, "grid.district_mask")
    if district is not None:
        district = str((base / str(district)).resolve())
        if not Path(district).exists():
            raise ConfigError(f"mask file not found: {district}", path=p, key="grid.district_mask")

    start = _as_date(_cfg_get(raw, p, "window.start", required=True), p, "window.start")
    n_days = int(_cfg_get(raw, p, "window.days", required=True))
    if n_days < 2:
        raise ConfigError(f"window.days must be >= 2, got {n_days}", path=p, key="window.days")
    bps = _cfg_get(raw, p, "window.breakpoints", default=[32, 77])
    if not isinstance(bps, (list, tuple)) or len(bps) != 2:
        raise ConfigError("window.breakpoints must be a pair", path=p, key="window.breakpoints")
    resolved = []
    for i, b in enumerate(bps):
        if isinstance(b, (int, float)) and not isinstance(b, bool):
            resolved.append(float(b))
        else:
            resolved.append(float((_as_date(b, p, "window.breakpoints") - start).days))
    t0, t1 = resolved
    if not (0.0 < t0 < t1 < n_days):
        raise ConfigError(
            f"breakpoints must satisfy 0 < t0 < t1 < {n_days}, got {t0}, {t1}",
            path=p, key="window.breakpoints",
        )

    gamma = float(_cfg_get(raw, p, "rates.gamma", default=DEFAULT_GAMMA))
    theta = float(_cfg_get(raw, p, "rates.theta", default=DEFAULT_THETA))
    if gamma <= 0 or theta <= 0:
        raise ConfigError(f"rates must be positive, got gamma={gamma}, theta={theta}", path=p, key="rates")

    weights = {
        "w0": float(_cfg_get(raw, p, "weights.w0", default=1.0)),
        "w1": float(_cfg_get(raw, p, "weights.w1", default=0.0)),
        "w2": float(_cfg_get(raw, p, "weights.w2", default=0.0)),
    }

    cases = _cfg_get(raw, p, "data.cases")
    if cases is not None:
        cases = str((base / str(cases)).resolve())
        if not Path(cases).exists():
            raise ConfigError(f"case file not found: {cases}", path=p, key="data.cases")

    backend = str(_cfg_get(raw, p, "solver.backend", default="cn"))
    if backend not in ("cn", "fem-split"):
        raise ConfigError(f"backend must be 'cn' or 'fem-split', got {backend!r}", path=p, key="solver.backend")
    tau = float(_cfg_get(raw, p, "solver.tau", default=0.1))
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}", path=p, key="solver.tau")
    corrected = bool(_cfg_get(raw, p, "solver.corrected", default=False))

    estimator = str(_cfg_get(raw, p, "estimator.kind", default="simulate-only"))
    if estimator not in ("metropolis", "adjoint", "simulate-only"):
        raise ConfigError(f"unknown estimator {estimator!r}", path=p, key="estimator.kind")

    betas = _cfg_get(raw, p, "initial.betas", default=[0.1, 0.1, 0.1])
    if not isinstance(betas, (list, tuple)) or len(betas) != 3:
        raise ConfigError("initial.betas must list three values", path=p, key="initial.betas")
    betas = tuple(float(b) for b in betas)
    kappa = float(_cfg_get(raw, p, "initial.kappa", default=0.1))
    delta = float(_cfg_get(raw, p, "initial.delta", default=0.5))
    infected = _cfg_get(raw, p, "initial.infected")
    if infected is not None:
        bad = sorted(set(infected) - set(region_masks))
        if bad:
            raise ConfigError(f"initial.infected names unknown regions: {', '.join(bad)}",
                              path=p, key="initial.infected")
        infected = {str(k): float(v) for k, v in infected.items()}

    out_dir = str(_cfg_get(raw, p, "output", default="out"))
    if not Path(out_dir).is_absolute():
        out_dir = str((base / out_dir).resolve())
    seed = int(_cfg_get(raw, p, "seed", default=0))

    return RunConfig(
        path=p, model=model, region_masks=region_masks, populations=populations,
        district_mask=district, cases=cases, start=start, n_days=n_days,
        breakpoints=(t0, t1), gamma=gamma, theta=theta, weights=weights,
        backend=backend, tau=tau, corrected=corrected, estimator=estimator,
        metropolis=dict(_cfg_get(raw, p, "estimator.metropolis", default={}) or {}),
        adjoint=dict(_cfg_get(raw, p, "estimator.adjoint", default={}) or {}),
        initial_betas=betas, initial_kappa=kappa, initial_delta=delta,
        initial_infected=infected, out_dir=out_dir, seed=seed, raw=raw,
    )


def load_scenario(config: RunConfig) -> Problem:
    """Assemble the problem bundle a fit or simulation runs on."""
    grid = None
    masks: dict[str, RegionMask] = {}
    for name, mask_path in sorted(config.region_masks.items()):
        g, mask = read_mask(mask_path)
        mask = RegionMask(name, mask.cells)
        if grid is None:
            grid = g
        elif not grid.compatible(g):
            raise ConfigError(
                f"mask grids disagree: {name} has {g.nx}x{g.ny} on {g.Lx}x{g.Ly}",
                path=config.path, key=f"grid.regions.{name}.mask",
            )
        if mask.cell_count == 0:
            raise DegenerateRegionError(f"region '{name}' covers no cells")
        masks[name] = mask
    if config.district_mask is not None:
        g, district = read_mask(config.district_mask)
        if not grid.compatible(g):
            raise ConfigError("district mask grid disagrees with region masks",
                              path=config.path, key="grid.district_mask")
        district = RegionMask("district", district.cells)
        for name, mask in masks.items():
            if not mask.issubset(district):
                raise ConfigError(f"region '{name}' is not contained in the district mask",
                                  path=config.path, key="grid.district_mask")
    else:
        district = union_mask(masks.values())

    population = np.zeros(grid.shape)
    for name, mask in masks.items():
        population += distribute_uniform(config.populations[name], mask, grid)

    schedule = RateSchedule(
        betas=config.initial_betas,
        breakpoints=config.breakpoints,
        t_end=float(config.n_days),
        gamma=config.gamma,
        theta=config.theta,
    )

    data = None
    series = None
    if config.cases is not None:
        series = read_cases(config.cases, config.start, config.n_days, sorted(masks))
        data = interpolate_data(series, masks, grid, population)

    if config.initial_infected is not None:
        infected = {name: config.initial_infected.get(name, 0.0) for name in masks}
    elif series is not None:
        infected = {name: float(series[name].new_cases[0]) for name in masks}
    else:
        raise ConfigError(
            "initial.infected is required when no case data is configured",
            path=config.path, key="initial.infected",
        )

    initial = ParameterVector(
        schedule=schedule, kappa=config.initial_kappa, delta=config.initial_delta,
        init_infected=infected,
    )
    w = config.weights
    weights = ObjectiveWeights(
        w0=w["w0"], w1=w["w1"], w2=w["w2"],
        chi_ref=initial.chi if w["w1"] > 0 else None,
    )
    try:
        return Problem(
            grid=grid, model=config.model, masks=masks, district=district,
            population=population, t_end=float(config.n_days), tau=config.tau,
            weights=weights, data=data, initial=initial,
            backend=config.backend, corrected=config.corrected,
        )
    except EpidiffuseError as exc:
        raise ConfigError(str(exc), path=config.path) from exc


# ---------------------------------------------------------------------------
# Synthetic scenarios
# ---------------------------------------------------------------------------

def demo_geometry(nx: int = 101, ny: int = 101) -> tuple[GridSpec, dict[str, RegionMask], dict[str, float]]:
    """Four disjoint synthetic regions on the demo window (39.23 x 56.05 km).

    The shapes are latitude bands with diagonal trims; they only need to be
    irregular, disjoint, and of realistic relative size.  Populations follow
    the documented district split totalling 81,000.
    """
    grid = GridSpec(nx, ny, *DEMO_EXTENT)
    x = np.linspace(0.0, 1.0, nx)
    y = np.linspace(0.0, 1.0, ny)
    X, Y = np.meshgrid(x, y)
    south = Y < 0.40
    middle = (Y >= 0.40) & (Y < 0.62)
    north = Y >= 0.62
    masks = {
        "BI": RegionMask("BI", south & (X < 0.48) & (X + Y > 0.15)),
        "BA": RegionMask("BA", south & (X >= 0.48) & (X - 0.6 * Y < 0.92)),
        "IO": RegionMask("IO", middle & (X >= 0.15) & (X < 0.88) & (X + 0.3 * Y > 0.3)),
        "HR": RegionMask("HR", north & (X >= 0.10) & (X < 0.80) & (X + 0.5 * Y < 1.18)),
    }
    return grid, masks, dict(DEMO_POPULATIONS)


def demo_population(grid: GridSpec, masks: dict[str, RegionMask],
                    populations: dict[str, float]) -> np.ndarray:
    out = np.zeros(grid.shape)
    for name, mask in masks.items():
        out += distribute_uniform(populations[name], mask, grid)
    return out


def demo_scenario_path() -> Path:
    """Path of the bundled 101x101 demo scenario (synthetic case data)."""
    return Path(__file__).parent / "data" / "birkenfeld" / "scenario.yaml"


def generate_synthetic(
    truth: ParameterVector,
    grid: GridSpec,
    masks: dict[str, RegionMask],
    population: np.ndarray,
    model: ModelKind,
    t_end: float,
    tau: float,
    noise: float,
    seed: int,
    out_dir,
    start: dt.date = dt.date(2020, 10, 1),
    backend: str = "cn",
) -> dict[str, str]:
    """Forward-run the truth and write a case file plus a truth sidecar.

    Daily detected cases per region get multiplicative noise
    c -> c * (1 + noise * eta) with standard normal eta, clipped at zero.
    """
    if noise < 0:
        raise ParameterError(f"noise level must be >= 0, got {noise}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spd = 1.0 / tau
    if abs(spd - round(spd)) > 1e-8:
        raise ParameterError(f"tau={tau} must divide one day into whole steps")
    if backend == "fem-split":
        traj = run_forward_fem(grid, masks, truth, model, t_end, tau, population,
                               store_every=int(round(spd)), evolve_population=False)
    else:
        traj = run_forward(grid, masks, truth, model, t_end, tau, population,
                           store_every=int(round(spd)), evolve_population=False)
    populations = {name: region_total(population, mask, grid) for name, mask in masks.items()}
    cases = detected_daily_cases(traj, truth, masks, populations)
    rng = np.random.default_rng(seed)
    series = {}
    for name in sorted(masks):
        values = cases[name]
        if noise > 0:
            values = np.maximum(values * (1.0 + noise * rng.standard_normal(len(values))), 0.0)
        series[name] = CaseSeries(name, np.arange(len(values)), values)
    cases_path = out_dir / "cases.csv"
    write_cases(cases_path, series, start)
    truth_record = {
        "betas": [float(b) for b in truth.schedule.betas],
        "breakpoints": [float(b) for b in truth.schedule.breakpoints],
        "gamma": truth.schedule.gamma,
        "theta": truth.schedule.theta,
        "kappa": truth.kappa,
        "delta": truth.delta,
        "init_infected": {k: float(v) for k, v in sorted(truth.init_infected.items())},
        "model": model.value,
        "t_end": float(t_end),
        "tau": float(tau),
        "noise": float(noise),
        "seed": int(seed),
        "backend": backend,
        "start": start.isoformat(),
        "cases_sha256": sha256_of(cases_path),
    }
    truth_path = out_dir / "truth.yaml"
    truth_path.write_text(yaml.safe_dump(truth_record, sort_keys=True))
    return {"cases": str(cases_path), "truth": str(truth_path)}


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

def _write_table(path, header: list[str], rows) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def export_region_series(path, traj: Trajectory, params: ParameterVector,
                         masks: dict[str, RegionMask], population: np.ndarray,
                         config: RunConfig) -> None:
    """Daily per-region model outputs: detected cases and infected persons."""
    grid = traj.grid
    populations = {name: region_total(population, mask, grid) for name, mask in masks.items()}
    detected = detected_daily_cases(traj, params, masks, populations)
    names = sorted(masks)
    infected = {
        name: traj.infected_total(masks[name])[traj.daily_indices] * populations[name]
        / masks[name].area(grid)
        for name in names
    }
    header = ["day", "date"] + [f"detected_{n}" for n in names] + [f"infected_{n}" for n in names]
    rows = []
    for pos, day in enumerate(traj.days):
        row = [int(day), config.date_of(int(day))]
        row += [_FLOAT_FMT % detected[n][pos] for n in names]
        row += [_FLOAT_FMT % infected[n][pos] for n in names]
        rows.append(row)
    _write_table(path, header, rows)


def export_mass(path, traj: Trajectory, config: RunConfig) -> None:
    mass = traj.mass()
    rows = [
        [int(day), config.date_of(int(day)), _FLOAT_FMT % mass[level]]
        for level, day in zip(traj.daily_indices, traj.days)
    ]
    _write_table(path, ["day", "date", "total_population"], rows)


def export_case_tables(out_dir: Path, series: dict[str, CaseSeries], config: RunConfig) -> list[str]:
    """Daily new-case and cumulative tables, one column per region."""
    names = sorted(series)
    days = series[names[0]].days
    daily_rows, cum_rows = [], []
    cumulative = {n: series[n].cumulative for n in names}
    for pos, day in enumerate(days):
        stamp = [int(day), config.date_of(int(day))]
        daily_rows.append(stamp + [_FLOAT_FMT % series[n].new_cases[pos] for n in names])
        cum_rows.append(stamp + [_FLOAT_FMT % cumulative[n][pos] for n in names])
    daily = out_dir / "daily_cases.csv"
    cum = out_dir / "cumulative_cases.csv"
    _write_table(daily, ["day", "date"] + names, daily_rows)
    _write_table(cum, ["day", "date"] + names, cum_rows)
    return [str(daily), str(cum)]


def _params_record(problem: Problem, params: ParameterVector) -> dict:
    return {
        "beta0": params.schedule.betas[0],
        "beta1": params.schedule.betas[1],
        "beta2": params.schedule.betas[2],
        "kappa": params.kappa,
        "delta": params.delta,
        "init_infected": {k: float(v) for k, v in sorted(params.init_infected.items())},
    }


def write_fit_report(path, problem: Problem, result: FitResult, config: RunConfig,
                     estimator: str) -> None:
    """Structured fit report with config echo and provenance."""
    report = {
        "estimator": estimator,
        "objective": result.objective,
        "params": _params_record(problem, result.params),
        "acceptance_rate": result.acceptance_rate,
        "posterior_std": result.posterior_std,
        "gradient_norms": result.gradient_norms,
        "n_evaluations": result.n_evaluations,
        "iterations": len(result.history),
        "diagnostics": {
            k: v for k, v in result.diagnostics.items()
            if isinstance(v, (int, float, str, bool))
        },
        "provenance": {
            "config_path": config.path,
            "config_hash": config.config_hash,
            "config": config.raw,
            "data_sha256": sha256_of(config.cases) if config.cases else None,
            "grid": {"nx": problem.grid.nx, "ny": problem.grid.ny,
                     "Lx": problem.grid.Lx, "Ly": problem.grid.Ly},
            "backend": problem.backend,
            "seed": config.seed,
        },
    }
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True, default=str) + "\n")


def _write_history(path, problem: Problem, result: FitResult) -> None:
    header = ["iteration", "J"] + list(problem.param_names)
    rows = []
    for i, (j, packed) in enumerate(result.history):
        rows.append([i, _FLOAT_FMT % j] + [_FLOAT_FMT % v for v in packed])
    _write_table(path, header, rows)


# ---------------------------------------------------------------------------
# CLI commands
# ---------------------------------------------------------------------------

def _write_summary(out_dir: Path, command: str, config: RunConfig, outputs: list[str],
                   metrics: dict) -> None:
    summary = {
        "command": command,
        "config_path": config.path,
        "config_hash": config.config_hash,
        "seed": config.seed,
        "backend": config.backend,
        "outputs": sorted(str(Path(o).name) for o in outputs),
        "metrics": metrics,
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True, default=str) + "\n"
    )


def _cmd_simulate(config: RunConfig, out_dir: Path) -> dict:
    problem = load_scenario(config)
    traj = problem.simulate(problem.initial, evolve_population=True)
    series_path = out_dir / "region_series.csv"
    mass_path = out_dir / "mass.csv"
    export_region_series(series_path, traj, problem.initial, problem.masks,
                         problem.population, config)
    export_mass(mass_path, traj, config)
    drift = conservation_drift(traj)
    metrics = {
        "days": int(config.n_days),
        "population_drift": drift,
        "final_infected_total": float(
            traj.infected_total(problem.district)[-1]
        ),
    }
    return {"outputs": [str(series_path), str(mass_path)], "metrics": metrics}


def _cmd_fit(config: RunConfig, out_dir: Path) -> dict:
    problem = load_scenario(config)
    if problem.data is None:
        raise ConfigError("fitting requires data.cases", path=config.path, key="data.cases")
    estimator = config.estimator
    if estimator == "simulate-only":
        raise ConfigError("estimator.kind must be 'metropolis' or 'adjoint' for fit",
                          path=config.path, key="estimator.kind")
    try:
        if estimator == "metropolis":
            mcfg = MetropolisConfig(seed=config.seed, **config.metropolis)
            result = metropolis_fit(problem, mcfg)
        else:
            acfg = AdjointConfig(**config.adjoint)
            result = adjoint_fit(problem, acfg)
    except TypeError as exc:
        raise ConfigError(f"bad estimator options: {exc}", path=config.path,
                          key=f"estimator.{estimator}") from exc
    except ConfigError as exc:
        if exc.path is None:
            raise ConfigError(str(exc), path=config.path, key=f"estimator.{estimator}") from exc
        raise
    report_path = out_dir / "fit_report.json"
    history_path = out_dir / "fit_history.csv"
    write_fit_report(report_path, problem, result, config, estimator)
    _write_history(history_path, problem, result)
    metrics = {
        "estimator": estimator,
        "objective": result.objective,
        "acceptance_rate": result.acceptance_rate,
        "iterations": len(result.history),
    }
    return {"outputs": [str(report_path), str(history_path)], "metrics": metrics}


def _cmd_gradient_check(config: RunConfig, out_dir: Path) -> dict:
    problem = load_scenario(config)
    if problem.data is None:
        raise ConfigError("gradient-check requires data.cases", path=config.path, key="data.cases")
    check = gradient_check(problem, problem.initial)
    table_path = out_dir / "gradient_check.csv"
    rows = [
        [name, _FLOAT_FMT % a, _FLOAT_FMT % f, _FLOAT_FMT % r]
        for name, a, f, r in zip(check["names"], check["adjoint"], check["fd"], check["rel_err"])
    ]
    _write_table(table_path, ["component", "adjoint", "finite_difference", "rel_error"], rows)
    metrics = {"max_rel_error": float(check["rel_err"].max())}
    return {"outputs": [str(table_path)], "metrics": metrics}


def _cmd_convergence_study(config: RunConfig, out_dir: Path, kinds: list[str]) -> dict:
    problem = load_scenario(config)
    horizon = min(4.0, float(config.n_days))
    results = {}
    rows = []
    for kind in kinds:
        study = temporal_refinement_study(
            kind, problem.grid, problem.model, problem.initial.schedule,
            kappa=max(problem.initial.kappa, 0.05), t_end=horizon,
        )
        results[kind] = study
        for tau, err in zip(study["taus"], study["errors"]):
            rows.append([kind, _FLOAT_FMT % tau, _FLOAT_FMT % err])
    table_path = out_dir / "convergence.csv"
    _write_table(table_path, ["kind", "tau", "error"], rows)
    metrics = {f"{kind}_orders": [round(o, 3) for o in results[kind]["orders"]] for kind in kinds}
    return {"outputs": [str(table_path)], "metrics": metrics}


def _cmd_export_plots(config: RunConfig, out_dir: Path) -> dict:
    if config.cases is None:
        raise ConfigError("export-plots requires data.cases", path=config.path, key="data.cases")
    series = read_cases(config.cases, config.start, config.n_days, sorted(config.region_masks))
    outputs = export_case_tables(out_dir, series, config)
    metrics = {
        "regions": sorted(series),
        "total_cases": float(sum(s.new_cases.sum() for s in series.values())),
    }
    return {"outputs": outputs, "metrics": metrics}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="epidiffuse",
        description="Reaction-diffusion epidemic simulation and parameter estimation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="run config (YAML)")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--backend", choices=["cn", "fem-split"], default=None,
                        help="override the solver backend")
        sp.add_argument("--out", default=None, help="override the output directory")

    common(sub.add_parser("simulate", help="forward simulation and region tables"))
    fit = sub.add_parser("fit", help="parameter estimation")
    common(fit)
    fit.add_argument("--estimator", choices=["metropolis", "adjoint"], default=None,
                     help="override estimator.kind")
    fit.add_argument("--draws", type=int, default=None, help="override Metropolis draw count")
    common(sub.add_parser("gradient-check", help="adjoint gradient vs finite differences"))
    conv = sub.add_parser("convergence-study", help="temporal refinement orders")
    common(conv)
    conv.add_argument("--kind", choices=["diffusion", "coupled", "both"], default="both")
    common(sub.add_parser("export-plots", help="plot-ready case tables"))
    return parser


_EXIT_CONFIG = 2
_EXIT_NUMERICAL = 3
_EXIT_IO = 4

_CONFIG_ERRORS = (
    ConfigError, MaskFormatError, CaseDataError, ParameterError,
    DimensionError, NormalizationError, DegenerateRegionError, AlignmentError,
)
_NUMERICAL_ERRORS = (StabilityError, SequencingError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config.seed = args.seed
        if args.backend is not None:
            config.backend = args.backend
        if args.out is not None:
            config.out_dir = str(Path(args.out).resolve())
        if args.command == "fit":
            if args.estimator is not None:
                config.estimator = args.estimator
            if args.draws is not None:
                config.metropolis = dict(config.metropolis, draws=args.draws)
        out_dir = Path(config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

        if args.command == "simulate":
            result = _cmd_simulate(config, out_dir)
        elif args.command == "fit":
            result = _cmd_fit(config, out_dir)
        elif args.command == "gradient-check":
            result = _cmd_gradient_check(config, out_dir)
        elif args.command == "convergence-study":
            kinds = ["diffusion", "coupled"] if args.kind == "both" else [args.kind]
            result = _cmd_convergence_study(config, out_dir, kinds)
        else:
            result = _cmd_export_plots(config, out_dir)

        _write_summary(out_dir, args.command, config, result["outputs"], result["metrics"])
        print(f"{args.command}: ok ({out_dir / 'summary.json'})")
        return 0
    except _NUMERICAL_ERRORS as exc:
        print(f"error (numerical): {exc}", file=sys.stderr)
        return _EXIT_NUMERICAL
    except _CONFIG_ERRORS as exc:
        print(f"error (config/data): {exc}", file=sys.stderr)
        return _EXIT_CONFIG
    except OSError as exc:
        print(f"error (io): {exc}", file=sys.stderr)
        return _EXIT_IO
    except EpidiffuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
