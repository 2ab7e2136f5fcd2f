"""
levylab command line

Runs one experiment per configuration file, writes CSV results and a JSON
run manifest with SHA-256 digests of every result file.

    levylab run configs/density_cauchy.ini --out results
    levylab phase-diagram configs/phase.ini --threads 4
    levylab probe configs/homeomorphism.ini --seed 11
"""

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Callable, Dict, Any, List, Optional, Sequence, Tuple

import click
import numpy as np
import pandas as pd
from dotenv import load_dotenv

from density_engine import tabulate
from error_handlers import (
    EXIT_CONFIG_INVALID,
    EXIT_INVARIANT_VIOLATED,
    EXIT_OK,
    BoxExceeded,
    ConfigInvalid,
    LevyLabError,
    ThresholdNotReached,
    error_payload,
    exit_code_for,
    handle_stage_errors,
)
from experiment_config import ExperimentConfig, load_config
from lattice import Lattice
from nonlocal_calculus import ExtensionPolicy, GridFunction
from resolvent_solver import (
    GRADIENT_THRESHOLD,
    ResolventProblem,
    SolverSettings,
    gradient_decay_scan,
    residual,
    schauder_report,
    solve_hoelder_drift,
)
from sde_lab import (
    build_transform,
    conjugacy_error,
    derivative_flow,
    euler_integrate,
    finite_difference_flow,
    lipschitz_sweep,
    sample_levy_path,
)
from stable_model import characteristic_exponent
from utils import derive_seed, ensure_directory, file_digest, fixed_order_mean, safe_int

logger = logging.getLogger(__name__)

__version__ = "1.0.0"

SCHEMA_VERSION = 1
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DEFAULT_OUTPUT_ROOT = "results"
CSV_FLOAT_FORMAT = "%.12e"

CAUCHY_TOL = 1e-5
STABLE_GROWTH = 2.5
DIVERGING_GROWTH = 10.0
CONJUGACY_NOISE_FACTOR = 2.0
DERIVATIVE_FLOW_TOL = 1e-2


def configure_logging(output_root: str, verbose: bool = False) -> str:
    """
    File and console logging under <output_root>/logs/levylab.log.

    LEVYLAB_LOG_LEVEL sets the level unless --verbose asks for DEBUG.
    """
    logs_dir = ensure_directory(os.path.join(output_root, "logs"))
    log_path = os.path.join(logs_dir, "levylab.log")
    level_name = "DEBUG" if verbose else os.environ.get("LEVYLAB_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(log_path),
            logging.StreamHandler()
        ],
        force=True,
    )
    return log_path


# ============================================================================
# RUN MANIFEST
# ============================================================================

@dataclass
class RunManifest:
    """Config echo, seeds, result files with digests, invariant outcomes."""
    kind: str
    name: str
    config: Dict[str, Any]
    code_version: str = __version__
    schema_version: int = SCHEMA_VERSION
    started_at: str = ""
    wall_time: float = 0.0
    seeds: Dict[str, int] = field(default_factory=dict)
    files: List[Dict[str, Any]] = field(default_factory=list)
    invariants: Dict[str, bool] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)
    status: str = "pending"
    error: Optional[Dict[str, Any]] = None
    output_dir: str = ""

    def add_file(self, path: str, rows: Optional[int] = None):
        entry = {"path": os.path.relpath(path, self.output_dir), "sha256": file_digest(path)}
        if rows is not None:
            entry["rows"] = int(rows)
        self.files.append(entry)
        logger.info(f"wrote {path}")

    def check(self, name: str, passed: bool):
        self.invariants[name] = bool(passed)
        if not passed:
            logger.warning(f"invariant '{name}' violated")

    def violations(self) -> List[str]:
        return sorted(name for name, ok in self.invariants.items() if not ok)

    def exit_code(self) -> int:
        if self.error is not None:
            return self.error.get("exit_code", 1)
        return EXIT_INVARIANT_VIOLATED if self.violations() else EXIT_OK

    def digests(self) -> Dict[str, str]:
        return {f["path"]: f["sha256"] for f in self.files}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "kind": self.kind,
            "name": self.name,
            "code_version": self.code_version,
            "started_at": self.started_at,
            "wall_time": self.wall_time,
            "config": self.config,
            "seeds": self.seeds,
            "files": self.files,
            "invariants": self.invariants,
            "violations": self.violations(),
            "summary": self.summary,
            "status": self.status,
            "error": self.error,
        }

    def write(self) -> str:
        path = os.path.join(self.output_dir, "manifest.json")
        with open(path, "w") as handle:
            handle.write(json.dumps(self.to_dict(), sort_keys=True, indent=2, default=_json_default))
        return path


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def _write_table(manifest: RunManifest, frame: pd.DataFrame, filename: str) -> str:
    path = os.path.join(manifest.output_dir, filename)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    manifest.add_file(path, rows=len(frame))
    return path


# ============================================================================
# REGIMES
# ============================================================================

def regime_label(alpha: float, beta: float) -> str:
    """
    "uniqueness" for alpha >= 1 and beta > 1 - alpha/2, "tanaka" for
    alpha + beta < 1, "gap" otherwise.
    """
    if alpha >= 1.0 and beta > 1.0 - alpha / 2.0:
        return "uniqueness"
    if alpha + beta < 1.0:
        return "tanaka"
    return "gap"


def classify_growth(growth: float) -> str:
    if not math.isfinite(growth) or growth >= DIVERGING_GROWTH:
        return "DIVERGING"
    if growth < STABLE_GROWTH:
        return "STABLE"
    return "INCONCLUSIVE"


def monotonicity_violations(cells: Sequence[Dict[str, Any]]) -> List[Tuple[int, int]]:
    """
    Index pairs (i, j) where cell i is STABLE, cell j is DIVERGING and j
    dominates i (alpha_j >= alpha_i, beta_j >= beta_i, same drift preset).
    """
    bad = []
    for i, a in enumerate(cells):
        if a["classification"] != "STABLE":
            continue
        for j, b in enumerate(cells):
            if b["classification"] != "DIVERGING" or i == j:
                continue
            if a.get("drift") != b.get("drift"):
                continue
            if b["alpha"] >= a["alpha"] and b["beta"] >= a["beta"]:
                bad.append((i, j))
    return bad


# ============================================================================
# SHARED HELPERS
# ============================================================================

ROUGH_RESIDUAL_TOL = 1e-2
CLOSED_FORM_TOL = 1e-4
CONSTANT_SOURCE_TOL = 1e-8
SYMMETRY_TOL = 1e-8
ZERO_DRIFT_TOL = 1e-6


def _map(func: Callable, items: Sequence, workers: int) -> List:
    """Run func over items on a thread pool; results come back in item order."""
    if workers <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def _stage_seed(config: ExperimentConfig, *labels) -> int:
    return derive_seed(config.base_seed, config.kind, *labels)


def _build_source(config: ExperimentConfig, box: Lattice, drift_field: Optional[GridFunction]) -> GridFunction:
    num = config.numerics
    if num.source == "drift":
        if drift_field is None:
            raise ConfigInvalid("source 'drift' needs a drift preset other than zero", "numerics", "source")
        return drift_field
    if num.source == "constant":
        return GridFunction.constant(box, num.source_value, name="constant")
    w = num.frequency

    def wave(points):
        return np.cos(w * np.asarray(points, dtype=float)[:, 0])

    def slope(points):
        return -w * np.sin(w * np.asarray(points, dtype=float)[:, 0])

    extension = ExtensionPolicy.PERIODIC if num.extension == "periodic" else ExtensionPolicy.CALLBACK
    return GridFunction.from_callable(box, wave, extension, derivative=slope, name="cos")


def _problem_drift(config: ExperimentConfig, box: Lattice):
    """(drift for the problem, drift field or None) for the configured preset."""
    preset = config.drift.preset
    if preset == "zero":
        return None, None
    if preset == "constant":
        return np.asarray(config.drift.k, dtype=float), None
    field = config.build_drift_field(box)
    return field, field


def _solve_transform(config: ExperimentConfig, spec, beta: Optional[float] = None):
    """
    Solve lambda u - L u - b . Du = b and build psi = id + u.

    lambda starts at numerics.lam and walks up numerics.lambdas until
    ||Du||_0 < 1/3.
    """
    num = config.numerics
    box = config.build_lattice()
    field = config.build_drift_field(box, beta)
    beta = config.drift.beta if beta is None else beta
    if config.drift.preset in ("zero", "constant"):
        beta = 1.0
    settings = SolverSettings()
    candidates = [num.lam] + [lam for lam in num.lambdas if lam > num.lam]
    last = float("nan")
    for lam in candidates:
        problem = ResolventProblem(spec, lam, field, field, beta)
        solution = solve_hoelder_drift(problem, settings)
        last = solution.gradient_sup()
        if last < GRADIENT_THRESHOLD:
            return build_transform(solution, spec, lam, num.r), solution
        logger.info(f"lambda={lam}: ||Du||_0 = {last:.4f}, trying a larger lambda")
    raise ThresholdNotReached(f"||Du||_0 = {last:.4f} >= 1/3 for every lambda up to {candidates[-1]}")


def _sweep_frame(estimates, seed: int, **columns) -> pd.DataFrame:
    rows = []
    for est in estimates:
        row = dict(columns)
        row.update({
            "separation": est.separation,
            "estimate": est.estimate,
            "standard_error": est.standard_error,
            "seed": seed,
        })
        rows.append(row)
    return pd.DataFrame(rows)


def _growth(estimates) -> float:
    """Ratio at the smallest separation over the ratio at the largest."""
    ordered = sorted(estimates, key=lambda est: -est.separation)
    first, last = ordered[0].estimate, ordered[-1].estimate
    if first <= 0.0:
        return float("inf") if last > 0.0 else 1.0
    return float(last / first)


# ============================================================================
# PIPELINES
# ============================================================================

@handle_stage_errors("density-table")
def density_pipeline(config: ExperimentConfig, manifest: RunManifest, workers: int = 1):
    """Tabulate p_t and Dp_t; check mass, symmetry and the Cauchy oracle when it applies."""
    spec = config.build_spec()
    box = config.build_lattice()
    seed = _stage_seed(config, "table")
    manifest.seeds["table"] = seed
    table = tabulate(spec, config.numerics.t, box)
    frame = table.to_frame()

    mass, tail = table.mass(), table.tail_mass_estimate()
    manifest.summary.update({"mass": mass, "tail_mass_estimate": tail, "t": table.t})
    manifest.check("normalization", abs(1.0 - mass - tail) <= max(1e-3, 0.25 * tail))
    if not np.any(np.abs(box.center) > 1e-12):
        symmetry = table.symmetry_error()
        manifest.summary["symmetry_error"] = symmetry
        manifest.check("symmetry", symmetry <= SYMMETRY_TOL)

    if spec.dim == 1 and spec.alpha == 1.0:
        c = characteristic_exponent(spec, [1.0]) * table.t
        x = frame["x1"].to_numpy()
        frame["oracle"] = c / (math.pi * (c * c + x * x))
        error = float(np.max(np.abs(frame["p"].to_numpy() - frame["oracle"].to_numpy())))
        manifest.summary["cauchy_error"] = error
        manifest.check("cauchy_oracle", error <= CAUCHY_TOL)

    frame["seed"] = seed
    _write_table(manifest, frame, "density.csv")


@handle_stage_errors("resolvent")
def resolvent_pipeline(config: ExperimentConfig, manifest: RunManifest, workers: int = 1):
    """
    Solve the resolvent equation for the configured source and drift.

    Rough drifts also get the gradient decay scan over numerics.lambdas.
    """
    num = config.numerics
    spec = config.build_spec()
    box = config.build_lattice()
    if config.drift.preset == "tabulated":
        box = config.build_drift_field().box
    drift, field = _problem_drift(config, box)
    source = _build_source(config, box, field)
    beta = config.drift.beta if field is not None else 1.0
    seed = _stage_seed(config, "solve")
    manifest.seeds["solve"] = seed

    settings = SolverSettings()
    problem = ResolventProblem(spec, num.lam, source, drift, beta)
    solution = solve_hoelder_drift(problem, settings)
    gap = residual(solution, problem)
    report = schauder_report(solution, problem)
    margin = solution.diagnostics["max_principle_margin"]
    manifest.summary.update({
        "lambda": num.lam,
        "residual": gap,
        "max_principle_margin": margin,
        "gradient_sup": solution.gradient_sup(),
        "schauder": report.to_dict(),
    })
    manifest.check("max_principle", bool(solution.diagnostics["max_principle_ok"]))
    manifest.check("residual", gap <= (ROUGH_RESIDUAL_TOL if field is not None else settings.residual_tol))

    if field is None and num.source == "cos":
        w = np.zeros(spec.dim)
        w[0] = num.frequency
        speed = float(np.dot(np.broadcast_to(np.asarray(drift if drift is not None else 0.0), (spec.dim,)), w))
        symbol = characteristic_exponent(spec, w)
        x = box.points()[:, 0]
        # b . Du with u = Re(A e^{iwx}) shifts the phase by the drift speed
        expected = np.real(np.exp(1j * w[0] * x) / (num.lam + symbol - 1j * speed))
        error = float(np.max(np.abs(solution.u.values.reshape(-1) - expected)))
        manifest.summary["closed_form_error"] = error
        manifest.check("closed_form", error <= CLOSED_FORM_TOL)
    elif num.source == "constant":
        error = float(np.max(np.abs(solution.u.values - num.source_value / num.lam)))
        manifest.summary["closed_form_error"] = error
        manifest.check("closed_form", error <= CONSTANT_SOURCE_TOL)

    frame = solution.to_frame()
    frame["seed"] = seed
    _write_table(manifest, frame, "resolvent.csv")
    diagnostics_path = os.path.join(manifest.output_dir, "resolvent_diagnostics.json")
    with open(diagnostics_path, "w") as handle:
        record = {"schema_version": SCHEMA_VERSION, "problem": problem.to_dict(), "diagnostics": solution.diagnostics}
        handle.write(json.dumps(record, sort_keys=True, indent=2, default=_json_default))
    manifest.add_file(diagnostics_path)

    if field is not None and len(num.lambdas) > 1:
        scan = gradient_decay_scan(spec, field, source, num.lambdas, beta, settings)
        decay = scan.to_frame()
        decay["seed"] = seed
        _write_table(manifest, decay, "gradient_decay.csv")
        manifest.summary["decay"] = scan.to_dict()
        manifest.check("decay_monotone", scan.monotone)
        manifest.check("decay_slope", scan.slope_ok)


@handle_stage_errors("uniqueness-ratio")
def uniqueness_pipeline(config: ExperimentConfig, manifest: RunManifest, workers: int = 1):
    """Two-point Lipschitz ratio from x0 across the separation sweep."""
    num = config.numerics
    spec = config.build_spec()
    seed = _stage_seed(config, "sweep")
    manifest.seeds["sweep"] = seed
    estimates = lipschitz_sweep(
        spec, config.build_drift(), num.x0, config.phase.separations, num.p, num.horizon,
        num.n_paths, num.dt, num.eps, seed, policy=num.policy, workers=workers, label=config.kind,
    )
    frame = _sweep_frame(estimates, seed, alpha=spec.alpha, beta=config.drift.beta)
    _write_table(manifest, frame, "uniqueness_ratio.csv")
    growth = _growth(estimates)
    manifest.summary.update({
        "growth": growth,
        "classification": classify_growth(growth),
        "regime": regime_label(spec.alpha, config.drift.beta),
    })
    manifest.check("finite_ratios", bool(np.all(np.isfinite(frame["estimate"].to_numpy()))))


@handle_stage_errors("tanaka")
def tanaka_pipeline(config: ExperimentConfig, manifest: RunManifest, workers: int = 1):
    """
    Symmetric starts center +- delta/2 under the Tanaka drift, next to a
    zero-drift control on the same paths.

    One Euler scheme is deterministic given the noise, so non-uniqueness at
    the origin shows up as a two-point ratio that grows as delta shrinks.
    """
    num = config.numerics
    spec = config.build_spec()
    center = np.full(spec.dim, config.phase.center)
    seed = _stage_seed(config, "sweep")
    manifest.seeds["sweep"] = seed
    frames = []
    results = {}
    for label, drift in (("tanaka", config.build_drift()), ("zero", lambda pts: np.zeros_like(pts))):
        estimates = lipschitz_sweep(
            spec, drift, center, config.phase.separations, num.p, num.horizon, num.n_paths,
            num.dt, num.eps, seed, policy=num.policy, workers=workers, label=config.kind,
            symmetric=True,
        )
        results[label] = estimates
        frames.append(_sweep_frame(estimates, seed, drift=label, alpha=spec.alpha, beta=config.drift.beta))
    _write_table(manifest, pd.concat(frames, ignore_index=True), "tanaka.csv")

    growth = _growth(results["tanaka"])
    manifest.summary.update({
        "growth": growth,
        "classification": classify_growth(growth),
        "regime": regime_label(spec.alpha, config.drift.beta),
    })
    control = np.array([est.estimate for est in results["zero"]])
    manifest.summary["control_max_deviation"] = float(np.max(np.abs(control - 1.0)))
    manifest.check("zero_drift_control", bool(np.all(np.abs(control - 1.0) <= ZERO_DRIFT_TOL)))


def phase_diagram(config: ExperimentConfig, workers: int = 1) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Classify every (alpha, beta) cell by how the two-point ratio grows as
    the symmetric split around phase.center shrinks.

    Cells run concurrently; each cell's paths are seeded from its index, so
    the tables do not depend on the worker count.

    Returns:
        (cells, sweeps): one row per cell, one row per cell and separation
    """
    num = config.numerics
    cells = [(a, b) for a in config.phase.alphas for b in config.phase.betas]
    center = np.full(config.process.dim, config.phase.center)

    def run_cell(index):
        alpha, beta = cells[index]
        spec = config.build_spec(alpha)
        seed = _stage_seed(config, "cell", index)
        estimates = lipschitz_sweep(
            spec, config.build_drift(beta), center, config.phase.separations, num.p, num.horizon,
            num.n_paths, num.dt, num.eps, seed, policy=num.policy, label=config.kind, symmetric=True,
        )
        growth = _growth(estimates)
        measured = classify_growth(growth)
        regime = regime_label(alpha, beta)
        classification = "INCONCLUSIVE" if regime == "gap" else measured
        logger.info(f"cell {index} alpha={alpha} beta={beta}: growth {growth:.3g} -> {classification}")
        row = {
            "cell": index,
            "alpha": alpha,
            "beta": beta,
            "drift": config.drift.preset,
            "regime": regime,
            "growth": growth,
            "measured": measured,
            "classification": classification,
            "seed": seed,
        }
        return row, _sweep_frame(estimates, seed, cell=index, alpha=alpha, beta=beta)

    results = _map(run_cell, range(len(cells)), workers)
    cell_frame = pd.DataFrame([row for row, _ in results])
    sweep_frame = pd.concat([frame for _, frame in results], ignore_index=True)
    return cell_frame, sweep_frame


@handle_stage_errors("phase-diagram")
def phase_pipeline(config: ExperimentConfig, manifest: RunManifest, workers: int = 1):
    cell_frame, sweep_frame = phase_diagram(config, workers)
    for row in cell_frame.itertuples():
        manifest.seeds[f"cell_{row.cell}"] = int(row.seed)
    _write_table(manifest, cell_frame, "phase_cells.csv")
    _write_table(manifest, sweep_frame, "phase_sweeps.csv")
    violations = monotonicity_violations(cell_frame.to_dict("records"))
    manifest.summary.update({
        "classifications": {str(c): label for c, label in zip(cell_frame["cell"].tolist(), cell_frame["classification"].tolist())},
        "monotonicity_violations": [list(pair) for pair in violations],
    })
    manifest.check("phase_monotone", not violations)


@dataclass
class ProbeReport:
    """Order violations and flow composition residual of a common-noise probe."""
    n_paths: int
    n_initial: int
    horizon: float
    midpoint: float
    violations: int
    composition_residual: float
    rows: List[Dict[str, Any]] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_paths": self.n_paths,
            "n_initial": self.n_initial,
            "horizon": self.horizon,
            "midpoint": self.midpoint,
            "violations": self.violations,
            "composition_residual": self.composition_residual,
        }


def homeomorphism_probe(config: ExperimentConfig, n_initial: Optional[int] = None,
                        T: Optional[float] = None, workers: int = 1) -> ProbeReport:
    """
    Integrate a sorted grid of starts on common noise and count crossings.

    For x_i < x_j a violation is X_T(x_i) >= X_T(x_j).  The composition
    residual compares X_(0,T)(x) with X_(s,T)(X_(0,s)(x)) at the grid time
    s closest to probe.midpoint * T.
    """
    num = config.numerics
    probe = config.probe
    spec = config.build_spec()
    if spec.dim != 1:
        raise ConfigInvalid("the homeomorphism probe orders points and needs dim = 1", "process", "dim")
    n_initial = probe.n_initial if n_initial is None else int(n_initial)
    horizon = num.horizon if T is None else float(T)
    if n_initial < 2:
        raise ConfigInvalid("n_initial must be at least 2", "probe", "n_initial")
    x0 = float(num.x0[0])
    starts = np.linspace(x0 - probe.spread, x0 + probe.spread, n_initial).reshape(-1, 1)
    b = config.build_drift()
    upper = np.triu(np.ones((n_initial, n_initial), dtype=bool), k=1)

    def run_path(index):
        seed = _stage_seed(config, "path", index)
        path = sample_levy_path(spec, horizon, num.dt, num.eps, seed, num.policy)
        grid = path.grid()
        s = float(grid[int(round(probe.midpoint * path.n_steps))])
        full = euler_integrate(b, starts, path)
        final = full.final().reshape(-1)
        crossings = int(np.sum((final[:, None] >= final[None, :]) & upper))
        middle = full.at(s).reshape(-1, 1)
        restarted = euler_integrate(b, middle, path, t_start=s).final().reshape(-1)
        composition = float(np.max(np.abs(restarted - final)))
        return {"path_id": index, "seed": seed, "violations": crossings,
                "composition_residual": composition, "split_time": s,
                "spread_final": float(final.max() - final.min())}

    rows = _map(run_path, range(num.n_paths), workers)
    report = ProbeReport(
        n_paths=num.n_paths,
        n_initial=n_initial,
        horizon=horizon,
        midpoint=probe.midpoint,
        violations=int(sum(row["violations"] for row in rows)),
        composition_residual=float(max(row["composition_residual"] for row in rows)),
        rows=rows,
    )
    logger.info(f"probe: {report.violations} order violations over {report.n_paths} paths")
    return report


@handle_stage_errors("homeomorphism")
def homeomorphism_pipeline(config: ExperimentConfig, manifest: RunManifest, workers: int = 1):
    report = homeomorphism_probe(config, workers=workers)
    manifest.seeds["first_path"] = _stage_seed(config, "path", 0)
    _write_table(manifest, report.to_frame(), "homeomorphism.csv")
    manifest.summary.update(report.to_dict())
    manifest.summary["regime"] = regime_label(config.process.alpha, config.drift.beta)
    manifest.check("order_preserved", report.violations == 0)
    manifest.check("flow_composition", report.composition_residual <= 1e-12)


@handle_stage_errors("derivative-flow")
def derivative_flow_pipeline(config: ExperimentConfig, manifest: RunManifest, workers: int = 1):
    """H_T from the transformed equation against common-noise central differences."""
    num = config.numerics
    spec = config.build_spec()
    transform, _ = _solve_transform(config, spec)
    y0 = transform.psi(np.asarray(num.x0, dtype=float).reshape(1, -1))[0]

    def run_path(index):
        seed = _stage_seed(config, "path", index)
        path = sample_levy_path(spec, num.horizon, num.dt, num.eps, seed, num.policy)
        try:
            flow = derivative_flow(transform, path, y0, num.compensate_small).final()
            reference = finite_difference_flow(transform, path, y0, compensate_small=num.compensate_small)
        except BoxExceeded as error:
            logger.warning(f"path {index} skipped: {error.message}")
            return None
        scale = max(float(np.linalg.norm(reference)), 1e-300)
        return {"path_id": index, "seed": seed,
                "h": float(np.linalg.norm(flow)), "fd": float(np.linalg.norm(reference)),
                "relative_error": float(np.linalg.norm(flow - reference)) / scale}

    rows = [row for row in _map(run_path, range(num.n_paths), workers) if row is not None]
    if not rows:
        raise BoxExceeded("every path left the lattice box; widen numerics.half_width")
    frame = pd.DataFrame(rows)
    _write_table(manifest, frame, "derivative_flow.csv")
    mean_error = fixed_order_mean(frame["relative_error"])
    manifest.seeds["first_path"] = _stage_seed(config, "path", 0)
    manifest.summary.update({
        "lambda": transform.lam,
        "contraction": transform.contraction,
        "paths_used": len(rows),
        "paths_skipped": num.n_paths - len(rows),
        "mean_relative_error": mean_error,
    })
    manifest.check("derivative_flow", mean_error <= DERIVATIVE_FLOW_TOL)


@handle_stage_errors("conjugacy")
def conjugacy_pipeline(config: ExperimentConfig, manifest: RunManifest, workers: int = 1):
    """
    sup_t |psi(X_t) - Y_t| averaged over paths, at every (dt, eps) level.

    The mean error must not grow from one level to the next by more than
    twice the combined Monte Carlo standard error.
    """
    num = config.numerics
    spec = config.build_spec()
    transform, _ = _solve_transform(config, spec)
    b = config.build_drift()
    x0 = np.asarray(num.x0, dtype=float)

    frames, means, errors = [], [], []
    for level, (dt, eps) in enumerate(num.levels):
        def run_path(index, dt=dt, eps=eps):
            seed = _stage_seed(config, "path", index)
            path = sample_levy_path(spec, num.horizon, dt, eps, seed, num.policy)
            try:
                value = conjugacy_error(transform, b, x0, path, num.compensate_small)
            except BoxExceeded as error:
                logger.warning(f"level {level} path {index} skipped: {error.message}")
                return None
            return {"level": level, "dt": dt, "eps": eps, "path_id": index, "seed": seed, "error": value}

        rows = [row for row in _map(run_path, range(num.n_paths), workers) if row is not None]
        if len(rows) < 2:
            raise BoxExceeded(f"level {level}: fewer than two paths stayed inside the lattice box")
        frame = pd.DataFrame(rows)
        values = frame["error"].to_numpy()
        means.append(fixed_order_mean(values))
        errors.append(float(np.std(values, ddof=1) / math.sqrt(len(values))))
        frames.append(frame)
        logger.info(f"conjugacy level {level} (dt={dt}, eps={eps}): mean error {means[-1]:.4e}")

    _write_table(manifest, pd.concat(frames, ignore_index=True), "conjugacy.csv")
    manifest.seeds["first_path"] = _stage_seed(config, "path", 0)
    manifest.summary.update({
        "lambda": transform.lam,
        "levels": [list(level) for level in num.levels],
        "mean_errors": means,
        "standard_errors": errors,
    })
    monotone = all(
        means[k + 1] <= means[k] + CONJUGACY_NOISE_FACTOR * math.hypot(errors[k], errors[k + 1])
        for k in range(len(means) - 1)
    )
    manifest.check("conjugacy_monotone", monotone)


PIPELINES: Dict[str, Callable[[ExperimentConfig, RunManifest, int], None]] = {
    "density-table": density_pipeline,
    "resolvent": resolvent_pipeline,
    "uniqueness-ratio": uniqueness_pipeline,
    "tanaka": tanaka_pipeline,
    "phase-diagram": phase_pipeline,
    "homeomorphism": homeomorphism_pipeline,
    "derivative-flow": derivative_flow_pipeline,
    "conjugacy": conjugacy_pipeline,
}


# ============================================================================
# RUNNER
# ============================================================================

def output_root(out: Optional[str] = None) -> str:
    """--out, else LEVYLAB_OUTPUT_ROOT, else ./results."""
    return out or os.environ.get("LEVYLAB_OUTPUT_ROOT") or DEFAULT_OUTPUT_ROOT


def default_threads(threads: Optional[int] = None) -> int:
    if threads is not None:
        return max(1, int(threads))
    return max(1, safe_int(os.environ.get("LEVYLAB_THREADS"), 1))


def run(config: ExperimentConfig, out_root: Optional[str] = None, dry_run: bool = False,
        threads: Optional[int] = None) -> RunManifest:
    """
    Execute the configured pipeline and write its results and manifest.

    Results land in <out_root>/<run name>/.  Errors do not escape: they are
    recorded in the manifest, whose exit_code() reports them.

    Args:
        config: validated experiment
        out_root: output root (see output_root)
        dry_run: validate and report the plan without computing or writing
        threads: worker count for cells and paths

    Returns:
        RunManifest
    """
    root = output_root(out_root)
    workers = default_threads(threads)
    manifest = RunManifest(
        kind=config.kind,
        name=config.run_name,
        config=config.to_dict(),
        started_at=datetime.now(timezone.utc).isoformat(),
        output_dir=os.path.join(root, config.run_name),
    )
    manifest.seeds["base"] = int(config.base_seed)
    if dry_run:
        manifest.status = "dry-run"
        logger.info(f"dry run: {config.kind} would write to {manifest.output_dir} with {workers} worker(s)")
        return manifest

    ensure_directory(manifest.output_dir)
    started = time.perf_counter()
    logger.info(f"running {config.kind} '{config.run_name}' (seed {config.base_seed}, {workers} worker(s))")
    try:
        PIPELINES[config.kind](config, manifest, workers)
        manifest.status = "invariant-violated" if manifest.violations() else "ok"
    except LevyLabError as error:
        manifest.error = dict(error_payload(error), exit_code=exit_code_for(error))
        manifest.status = "failed"
        logger.error(f"run failed: {error.message}")
    manifest.wall_time = time.perf_counter() - started
    path = manifest.write()
    logger.info(f"manifest written to {path} (status {manifest.status})")
    return manifest


# ============================================================================
# COMMAND LINE
# ============================================================================

def _run_options(func):
    func = click.option("--dry-run", is_flag=True, help="Validate the config and show the plan only.")(func)
    func = click.option("--threads", type=click.IntRange(min=1), default=None,
                        help="Worker threads (default: LEVYLAB_THREADS or 1).")(func)
    func = click.option("--seed", type=click.IntRange(min=0), default=None,
                        help="Override the config's base seed.")(func)
    func = click.option("--out", "out", type=click.Path(file_okay=False), default=None,
                        help="Output root (default: LEVYLAB_OUTPUT_ROOT or ./results).")(func)
    func = click.argument("config_file", type=click.Path(exists=True, dir_okay=False))(func)
    return func


def _load(ctx: click.Context, config_file: str, out: Optional[str], seed: Optional[int],
          kind: Optional[str] = None) -> ExperimentConfig:
    configure_logging(output_root(out), ctx.obj.get("verbose", False))
    try:
        config = load_config(config_file)
        if kind is not None and config.kind != kind:
            config = config.with_kind(kind)
    except ConfigInvalid as error:
        click.echo(f"invalid config {config_file}: {error.message}", err=True)
        ctx.exit(EXIT_CONFIG_INVALID)
    if seed is not None:
        config = config.with_seed(seed)
    return config


def _finish(ctx: click.Context, manifest: RunManifest):
    if manifest.status == "dry-run":
        click.echo(f"{manifest.kind}: config valid, output would go to {manifest.output_dir}")
        ctx.exit(EXIT_OK)
    click.echo(f"{manifest.kind} '{manifest.name}': {manifest.status} in {manifest.wall_time:.1f}s")
    for entry in manifest.files:
        click.echo(f"  {entry['path']}  {entry['sha256'][:16]}")
    if manifest.violations():
        click.echo(f"  violated: {', '.join(manifest.violations())}", err=True)
    if manifest.error:
        click.echo(f"  error: {manifest.error['error']}", err=True)
    ctx.exit(manifest.exit_code())


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Log at DEBUG level.")
@click.version_option(__version__, prog_name="levylab")
@click.pass_context
def cli(ctx: click.Context, verbose: bool):
    """Numerical experiments for SDEs driven by symmetric stable noise."""
    load_dotenv()
    ctx.ensure_object(dict)
    ctx.obj["verbose"] = verbose


@cli.command("run")
@_run_options
@click.pass_context
def run_command(ctx, config_file, out, seed, threads, dry_run):
    """Run the experiment described by CONFIG_FILE."""
    config = _load(ctx, config_file, out, seed)
    _finish(ctx, run(config, out, dry_run, threads))


@cli.command("phase-diagram")
@_run_options
@click.pass_context
def phase_diagram_command(ctx, config_file, out, seed, threads, dry_run):
    """Classify the (alpha, beta) grid of CONFIG_FILE."""
    config = _load(ctx, config_file, out, seed, kind="phase-diagram")
    _finish(ctx, run(config, out, dry_run, threads))


@cli.command("probe")
@_run_options
@click.option("--n-initial", type=click.IntRange(min=2), default=None, help="Number of sorted starts.")
@click.option("--horizon", type=click.FloatRange(min=0, min_open=True), default=None, help="Probe horizon T.")
@click.pass_context
def probe_command(ctx, config_file, out, seed, threads, dry_run, n_initial, horizon):
    """Homeomorphism probe: order violations and flow composition."""
    config = _load(ctx, config_file, out, seed, kind="homeomorphism")
    if n_initial is not None or horizon is not None:
        probe = replace(config.probe, n_initial=n_initial or config.probe.n_initial)
        numerics = replace(config.numerics, horizon=horizon or config.numerics.horizon)
        config = replace(config, probe=probe, numerics=numerics)
    _finish(ctx, run(config, out, dry_run, threads))


def main():
    cli(obj={})


if __name__ == "__main__":
    main()
