"""
Resolvent Solver

Solves  lambda u - L u - b . Du = g  on a lattice.

Constant drift uses the semigroup representation
    u(x) = int_0^inf e^(-lambda t) P_t g(x + t k) dt
with a geometric time rule; Hoelder drift is handled by Picard iteration
u_(n+1) = R_lambda[g + b . Du_n] on top of the drift-free solver.
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, Any, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.signal import fftconvolve

from density_engine import get_profile, kernel_quadrature, semigroup_pair
from error_handlers import (
    InvalidParameter,
    NoContraction,
    QuadratureBudgetExceeded,
    ThresholdNotReached,
    UnsupportedRegime,
)
from lattice import Lattice
from nonlocal_calculus import (
    ExtensionPolicy,
    GridFunction,
    apply_generator_many,
    hoelder_seminorm,
)
from stable_model import StableSpec
from utils import ensure_directory

logger = logging.getLogger(__name__)

# Time quadrature
TIME_PANEL_RATIO = 4.0
TIME_ORDER = 6
TIME_TAIL = 1e-12
MAX_T_MIN = 1e-4
T_MIN_CELLS = 16.0
MAX_TIME_NODES = 2000

# d = 1 lattice convolution
CELL_ORDER = 6
CELL_SWITCH = 2.0
MIN_EXTENSION = 4.0
FAR_SAMPLES = 16
PERIODIC_WRAPS = 64
PERIODIC_SCALE_REACH = 50.0

# Picard iteration
PICARD_TOL = 1e-8
MAX_PICARD_STEPS = 200
DIVERGENCE_STREAK = 3
FALLBACK_STAGES = (0.25, 0.5, 0.75, 1.0)
FALLBACK_RELAXATION = 0.5

RESIDUAL_MARGIN = 1.0
RESIDUAL_TOL = 1e-3
MAX_PRINCIPLE_SLACK = 1e-6
GRADIENT_THRESHOLD = 1.0 / 3.0
MONOTONE_SLACK = 1e-6
SLOPE_TOLERANCE = 0.3
# keeps the Schauder exponent alpha + beta - 1 inside (0, 1)
BETA_CEILING_GAP = 0.05


@dataclass(frozen=True)
class SolverSettings:
    """Numerical knobs of the resolvent solver."""
    time_ratio: float = TIME_PANEL_RATIO
    time_order: int = TIME_ORDER
    time_tail: float = TIME_TAIL
    t_min: Optional[float] = None
    max_time_nodes: int = MAX_TIME_NODES
    cell_order: int = CELL_ORDER
    cell_switch: float = CELL_SWITCH
    near_width: float = 0.5
    far_reach: float = 1e4
    half_steps: int = 40
    picard_tol: float = PICARD_TOL
    max_picard_steps: int = MAX_PICARD_STEPS
    residual_tol: float = RESIDUAL_TOL
    residual_margin: float = RESIDUAL_MARGIN

    def refined(self) -> "SolverSettings":
        """Twice as many time nodes per panel."""
        return replace(self, time_order=2 * self.time_order)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


DriftSpec = Union[np.ndarray, Sequence[float], GridFunction]


@dataclass(frozen=True, eq=False)
class ResolventProblem:
    """
    lambda u - L u - b . Du = g.

    drift is either a constant vector k or an R^d-valued GridFunction b on
    the same lattice as the source; a vector source is solved componentwise.
    """
    spec: StableSpec
    lam: float
    source: GridFunction
    drift: DriftSpec = None
    beta: float = 1.0

    def __post_init__(self):
        if not self.lam > 0:
            raise InvalidParameter(f"lambda must be positive, got {self.lam}")
        if self.source.dim != self.spec.dim:
            raise InvalidParameter(f"source lives in R^{self.source.dim}, spec in R^{self.spec.dim}")
        if not 0.0 < self.beta <= 1.0:
            raise InvalidParameter(f"beta must lie in (0, 1], got {self.beta}")
        drift = self.drift
        if drift is None:
            drift = np.zeros(self.spec.dim)
        if isinstance(drift, GridFunction):
            if drift.box.shape != self.source.box.shape or drift.box.h != self.source.box.h:
                raise InvalidParameter("drift field and source must share a lattice")
            if drift.arity != self.spec.dim:
                raise InvalidParameter(f"drift field must be R^{self.spec.dim}-valued")
            if self.spec.alpha + self.beta <= 1.0:
                raise UnsupportedRegime(
                    f"alpha + beta = {self.spec.alpha + self.beta:.3f} <= 1: no solvability for Hoelder drift"
                )
        else:
            drift = np.asarray(drift, dtype=float).reshape(self.spec.dim)
            drift.setflags(write=False)
        object.__setattr__(self, "drift", drift)

    @property
    def box(self) -> Lattice:
        return self.source.box

    @property
    def has_field_drift(self) -> bool:
        return isinstance(self.drift, GridFunction)

    @property
    def effective_beta(self) -> float:
        """
        Hoelder exponent used for the Schauder quantities.

        A bounded beta-Hoelder function on the lattice is beta'-Hoelder for
        every beta' < beta, so beta is lowered until alpha + beta < 2.
        """
        return min(self.beta, 2.0 - self.spec.alpha - BETA_CEILING_GAP)

    def with_source(self, source: GridFunction) -> "ResolventProblem":
        return ResolventProblem(self.spec, self.lam, source, self.drift, self.beta)

    def with_lambda(self, lam: float) -> "ResolventProblem":
        return ResolventProblem(self.spec, lam, self.source, self.drift, self.beta)

    def to_dict(self) -> Dict[str, Any]:
        drift = self.drift.to_dict() if self.has_field_drift else {"constant": self.drift.tolist()}
        return {
            "spec": self.spec.to_dict(),
            "lambda": self.lam,
            "beta": self.beta,
            "source": self.source.to_dict(),
            "drift": drift,
        }


@dataclass
class ResolventSolution:
    """
    u and Du on the problem lattice.

    Du has shape box.shape + (d,) for a scalar source and
    box.shape + (q, d) for an R^q-valued one.
    """
    u: GridFunction
    Du: GridFunction
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @property
    def box(self) -> Lattice:
        return self.u.box

    def gradient_values(self) -> np.ndarray:
        shape = self.box.shape
        if self.u.is_vector:
            return self.Du.values.reshape(shape + (self.u.arity, self.box.dim))
        return self.Du.values.reshape(shape + (self.box.dim,))

    def gradient_sup(self) -> float:
        """sup |Du| (Frobenius norm pointwise for vector u)."""
        flat = self.gradient_values().reshape(self.box.size, -1)
        return float(np.max(np.linalg.norm(flat, axis=1)))

    def to_frame(self) -> pd.DataFrame:
        pts = self.box.points()
        d = self.box.dim
        data = {f"x{i + 1}": pts[:, i] for i in range(d)}
        u = self.u.values.reshape(self.box.size, -1)
        for j in range(u.shape[1]):
            data["u" if u.shape[1] == 1 else f"u{j + 1}"] = u[:, j]
        grads = self.gradient_values().reshape(self.box.size, u.shape[1], d)
        for j in range(u.shape[1]):
            for i in range(d):
                name = f"du_dx{i + 1}" if u.shape[1] == 1 else f"du{j + 1}_dx{i + 1}"
                data[name] = grads[:, j, i]
        return pd.DataFrame(data)


# ============================================================================
# TIME RULE
# ============================================================================

@dataclass(frozen=True)
class TimeRule:
    """
    Nodes and weights for int_(t_min)^inf e^(-lambda t) F(t) dt.

    Weights are rescaled so they integrate constants exactly; the part
    below t_min is added analytically by the solver.
    """
    nodes: np.ndarray
    weights: np.ndarray
    t_min: float
    t_max: float
    lam: float

    @property
    def head_weight(self) -> float:
        """int_0^t_min e^(-lambda t) dt."""
        return -math.expm1(-self.lam * self.t_min) / self.lam

    @property
    def size(self) -> int:
        return int(self.nodes.shape[0])

    def to_dict(self) -> Dict[str, Any]:
        return {"t_min": self.t_min, "t_max": self.t_max, "nodes": self.size, "lambda": self.lam}


def default_t_min(spec: StableSpec, h: float) -> float:
    """Below this time p_t is narrower than the lattice can resolve."""
    return min(MAX_T_MIN, (h / T_MIN_CELLS) ** spec.alpha)


def build_time_rule(spec: StableSpec, lam: float, h: float, g_sup: float = 1.0,
                    settings: Optional[SolverSettings] = None) -> TimeRule:
    """
    Geometric Gauss-Legendre panels on [t_min, t_max].

    t_max solves e^(-lambda t) max(||g||_0, 1) / lambda = time_tail.

    Raises:
        QuadratureBudgetExceeded: if more than max_time_nodes are needed
    """
    settings = settings or SolverSettings()
    t_min = settings.t_min if settings.t_min is not None else default_t_min(spec, h)
    t_max = math.log(max(g_sup, 1.0) / (lam * settings.time_tail)) / lam
    t_max = max(t_max, 2.0 * t_min)
    ratio = settings.time_ratio
    n_panels = int(math.ceil(math.log(t_max / t_min) / math.log(ratio)))
    n_nodes = n_panels * settings.time_order
    if n_nodes > settings.max_time_nodes:
        raise QuadratureBudgetExceeded(
            f"time rule needs {n_nodes} nodes, budget is {settings.max_time_nodes}"
        )
    breaks = t_min * ratio ** np.arange(n_panels + 1, dtype=float)
    breaks[-1] = max(breaks[-1], t_max)
    x, w = np.polynomial.legendre.leggauss(settings.time_order)
    left, right = breaks[:-1, None], breaks[1:, None]
    nodes = (0.5 * (right - left) * x[None, :] + 0.5 * (right + left)).reshape(-1)
    weights = (0.5 * (right - left) * w[None, :]).reshape(-1) * np.exp(-lam * nodes)
    weights *= math.exp(-lam * t_min) / lam / weights.sum()
    logger.debug(f"time rule: {nodes.size} nodes on [{t_min:.3e}, {breaks[-1]:.3e}] for lambda={lam}")
    return TimeRule(nodes, weights, t_min, float(breaks[-1]), lam)


# ============================================================================
# SEMIGROUP ENGINE
# ============================================================================

class SemigroupEngine:
    """
    P_t g and DP_t g on the lattice points of one box.

    Short times use the scaled kernel rule of density_engine.  In d = 1,
    once t^(1/alpha) exceeds cell_switch * h, the integral is taken cell by
    cell against the tabulated density (Gauss nodes inside each lattice
    cell), which stays accurate for rough g at large t.  Every P_t is a
    positive rule of total mass one, so constants are reproduced exactly.
    """

    def __init__(self, spec: StableSpec, box: Lattice, settings: Optional[SolverSettings] = None):
        if spec.dim != box.dim:
            raise InvalidParameter(f"lattice lives in R^{box.dim}, spec in R^{spec.dim}")
        self.spec = spec
        self.box = box
        self.settings = settings or SolverSettings()
        self.points = box.points()
        if spec.dim == 1:
            self.rule = kernel_quadrature(spec, near_width=self.settings.near_width,
                                          far_reach=self.settings.far_reach)
            self.profile = get_profile(spec)
            x, w = np.polynomial.legendre.leggauss(self.settings.cell_order)
            self._xi = 0.5 * (x + 1.0)
            self._wq = 0.5 * w
        else:
            self.rule = kernel_quadrature(spec, half_steps=self.settings.half_steps)
            self.profile = None
        self._cells: Dict[int, "_CellData"] = {}

    def uses_cells(self, t: float) -> bool:
        return self.profile is not None and t ** (1.0 / self.spec.alpha) > self.settings.cell_switch * self.box.h

    def pair(self, g: GridFunction, t: float, k: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(P_t g, DP_t g) at the lattice points for a scalar g; DP has shape (m, d)."""
        if self.uses_cells(t):
            cells = self._cells.get(id(g))
            if cells is None or cells.g is not g:
                cells = _CellData(self, g)
                self._cells = {id(g): cells}
            return cells.pair(t, float(k[0]))
        return semigroup_pair(self.spec, g, t, self.points, k, self.rule)


class _CellData:
    """Source samples at the Gauss nodes of every lattice cell, d = 1."""

    def __init__(self, engine: SemigroupEngine, g: GridFunction):
        self.engine = engine
        self.g = g
        box = engine.box
        h = box.h
        self.n = box.shape[0]
        self.lower = float(box.lower[0])
        width = float(box.upper[0] - box.lower[0])
        self.periodic = g.extension is ExtensionPolicy.PERIODIC
        if self.periodic:
            n_cells = self.n - 1
            self.ext = 0
            self.period = width
        elif g.extension is ExtensionPolicy.CONSTANT:
            self.ext = 0
            n_cells = self.n - 1
        else:
            self.ext = int(math.ceil(max(MIN_EXTENSION, width) / h))
            n_cells = self.n - 1 + 2 * self.ext
        left = self.lower - self.ext * h + h * np.arange(n_cells)
        nodes = (left[:, None] + h * engine._xi[None, :]).reshape(-1, 1)
        self.samples = np.asarray(g(nodes), dtype=float).reshape(n_cells, -1)
        self.n_cells = n_cells
        self.edge_left = self.lower - self.ext * h
        self.edge_right = self.lower + (self.n - 1 + self.ext) * h
        if self.periodic:
            mean = float(np.sum(self.samples * engine._wq[None, :]) / n_cells)
            self.far_left = self.far_right = mean
        elif g.extension is ExtensionPolicy.CONSTANT:
            self.far_left = float(g.values[0])
            self.far_right = float(g.values[-1])
        else:
            span = max(MIN_EXTENSION, width)
            probe_left = np.linspace(self.edge_left - span, self.edge_left, FAR_SAMPLES)[:, None]
            probe_right = np.linspace(self.edge_right, self.edge_right + span, FAR_SAMPLES)[:, None]
            self.far_left = float(np.mean(g(probe_left)))
            self.far_right = float(np.mean(g(probe_right)))

    def _kernels(self, offsets: np.ndarray, t: float, shift: float) -> Tuple[np.ndarray, np.ndarray]:
        engine = self.engine
        h = engine.box.h
        y = (offsets[:, None] + engine._xi[None, :]) * h - shift
        weights = h * engine._wq[None, :]
        mass = np.maximum(weights * engine.profile.pt(t, y), 0.0)
        slope = weights * engine.profile.dpt(t, y)
        return mass, slope

    def pair(self, t: float, k: float) -> Tuple[np.ndarray, np.ndarray]:
        if self.periodic:
            return self._periodic_pair(t, k)
        return self._line_pair(t, k)

    def _line_pair(self, t: float, k: float) -> Tuple[np.ndarray, np.ndarray]:
        engine = self.engine
        n, c = self.n, self.n_cells
        h = engine.box.h
        shift = t * k
        offsets = np.arange(-self.ext - (n - 1), n - 1 + self.ext, dtype=float)
        mass, slope = self._kernels(offsets, t, shift)

        corr = np.zeros(n)
        corr_d = np.zeros(n)
        for q in range(mass.shape[1]):
            column = self.samples[::-1, q]
            corr += fftconvolve(mass[:, q], column, mode="valid")
            corr_d += fftconvolve(slope[:, q], column, mode="valid")
        corr, corr_d = corr[::-1], corr_d[::-1]

        def window_sums(kernel: np.ndarray) -> np.ndarray:
            cs = np.concatenate([[0.0], np.cumsum(kernel.sum(axis=1))])
            r = np.arange(n)
            return (cs[r + c] - cs[r])[::-1]

        interior = window_sums(mass)
        interior_d = window_sums(slope)

        x = engine.points[:, 0]
        lo = self.edge_left - x - shift
        hi = self.edge_right - x - shift
        lump_left = engine.profile.cdft(t, lo)
        lump_right = 1.0 - engine.profile.cdft(t, hi)
        inner = np.maximum(1.0 - lump_left - lump_right, 0.0)
        scale = np.divide(inner, interior, out=np.zeros(n), where=interior > 0)
        values = scale * corr + lump_left * self.far_left + lump_right * self.far_right

        p_lo = engine.profile.pt(t, lo)
        p_hi = engine.profile.pt(t, hi)
        reference = np.asarray(self.g(engine.points + shift), dtype=float).reshape(-1)
        raw = corr_d + p_lo * self.far_left - p_hi * self.far_right
        total = interior_d + p_lo - p_hi
        grads = -(raw - reference * total)
        return values, grads[:, None]

    def _periodic_pair(self, t: float, k: float) -> Tuple[np.ndarray, np.ndarray]:
        engine = self.engine
        n_cells = self.n_cells
        h = engine.box.h
        shift = t * k
        s = t ** (1.0 / engine.spec.alpha)
        wraps = max(PERIODIC_WRAPS, int(math.ceil(PERIODIC_SCALE_REACH * s / self.period)))
        reach = wraps * n_cells
        offsets = np.arange(-reach, reach, dtype=float)
        mass, slope = self._kernels(offsets, t, shift)
        # fold offsets onto one period: offset m acts like m mod n_cells
        residues = np.mod(np.arange(-reach, reach), n_cells)
        folded = np.zeros((n_cells, mass.shape[1]))
        folded_d = np.zeros_like(folded)
        np.add.at(folded, residues, mass)
        np.add.at(folded_d, residues, slope)

        lo = -reach * h - shift
        hi = reach * h - shift
        lump = float(engine.profile.cdft(t, np.array([lo]))[0] + 1.0 - engine.profile.cdft(t, np.array([hi]))[0])
        interior = float(mass.sum())
        scale = max(1.0 - lump, 0.0) / interior if interior > 0 else 0.0

        spectrum = np.fft.rfft(self.samples, axis=0)
        corr = np.fft.irfft(spectrum * np.conj(np.fft.rfft(folded, axis=0)), n=n_cells, axis=0).sum(axis=1)
        corr_d = np.fft.irfft(spectrum * np.conj(np.fft.rfft(folded_d, axis=0)), n=n_cells, axis=0).sum(axis=1)
        corr = np.append(corr, corr[0])
        corr_d = np.append(corr_d, corr_d[0])

        values = scale * corr + lump * self.far_left
        p_lo = float(engine.profile.pt(t, np.array([lo]))[0])
        p_hi = float(engine.profile.pt(t, np.array([hi]))[0])
        reference = np.asarray(self.g(engine.points + shift), dtype=float).reshape(-1)
        raw = corr_d + (p_lo - p_hi) * self.far_left
        total = float(slope.sum()) + p_lo - p_hi
        grads = -(raw - reference * total)
        return values, grads[:, None]


# ============================================================================
# CONSTANT DRIFT
# ============================================================================

def _components(g: GridFunction) -> List[GridFunction]:
    return [g.component(i) for i in range(g.arity)] if g.is_vector else [g]


def _solve_scalar(engine: SemigroupEngine, g: GridFunction, k: np.ndarray,
                  rule: TimeRule) -> Tuple[np.ndarray, np.ndarray]:
    head = rule.head_weight
    u = head * np.asarray(g.values, dtype=float).reshape(-1)
    _, du_head = engine.pair(g, rule.t_min, k)
    du = head * du_head
    for t, c in zip(rule.nodes, rule.weights):
        values, grads = engine.pair(g, float(t), k)
        u += c * values
        du += c * grads
    return u, du


def _solution_extension(problem: ResolventProblem) -> ExtensionPolicy:
    periodic = problem.source.extension is ExtensionPolicy.PERIODIC
    if problem.has_field_drift:
        periodic = periodic and problem.drift.extension is ExtensionPolicy.PERIODIC
    return ExtensionPolicy.PERIODIC if periodic else ExtensionPolicy.CONSTANT


def _assemble(problem: ResolventProblem, u_parts: List[np.ndarray],
              du_parts: List[np.ndarray], diagnostics: Dict[str, Any]) -> ResolventSolution:
    box = problem.box
    d = box.dim
    vector = problem.source.is_vector
    if vector:
        u_vals = np.stack(u_parts, axis=-1).reshape(box.shape + (len(u_parts),))
        du_vals = np.stack(du_parts, axis=1).reshape(box.shape + (len(u_parts) * d,))
        deriv = None
        if d == 1:
            deriv = np.stack([p[:, 0] for p in du_parts], axis=-1).reshape(u_vals.shape)
    else:
        u_vals = u_parts[0].reshape(box.shape)
        du_vals = du_parts[0].reshape(box.shape + (d,))
        deriv = du_parts[0][:, 0].reshape(box.shape) if d == 1 else None
    extension = _solution_extension(problem)
    name = problem.source.name or "g"
    u = GridFunction(box, u_vals, extension, None, deriv, f"R[{name}]")
    du = GridFunction(box, du_vals, extension, None, None, f"DR[{name}]")
    solution = ResolventSolution(u, du, diagnostics)
    solution.diagnostics["max_principle_margin"] = maximum_principle_margin(solution, problem)
    solution.diagnostics["max_principle_ok"] = bool(
        solution.diagnostics["max_principle_margin"] >= -MAX_PRINCIPLE_SLACK * problem.source.sup_norm()
    )
    return solution


def solve_constant_drift(problem: ResolventProblem, settings: Optional[SolverSettings] = None,
                         engine: Optional[SemigroupEngine] = None) -> ResolventSolution:
    """
    u = int_0^inf e^(-lambda t) P_t g(. + t k) dt by time quadrature.

    Args:
        problem: problem with a constant drift vector
        settings: solver knobs
        engine: reusable semigroup engine for the problem lattice

    Returns:
        ResolventSolution with the maximum principle margin filled in

    Raises:
        QuadratureBudgetExceeded: if the time rule is too large
        DegenerateMeasure: if the process measure is degenerate
    """
    if problem.has_field_drift:
        raise InvalidParameter("field drift needs solve_hoelder_drift")
    settings = settings or SolverSettings()
    spec = problem.spec
    spec.c_alpha  # raises DegenerateMeasure
    engine = engine or SemigroupEngine(spec, problem.box, settings)
    rule = build_time_rule(spec, problem.lam, problem.box.h, problem.source.sup_norm(), settings)
    k = np.asarray(problem.drift, dtype=float)

    u_parts, du_parts = [], []
    for g in _components(problem.source):
        u, du = _solve_scalar(engine, g, k, rule)
        u_parts.append(u)
        du_parts.append(du)

    diagnostics = {
        "method": "semigroup",
        "time_rule": rule.to_dict(),
        "kernel": dict(engine.rule.metadata),
        "residual_tolerance": settings.residual_tol,
    }
    solution = _assemble(problem, u_parts, du_parts, diagnostics)
    logger.debug(f"constant-drift solve lambda={problem.lam} margin={solution.diagnostics['max_principle_margin']:.3e}")
    return solution


# ============================================================================
# HOELDER DRIFT
# ============================================================================

def _drift_source(problem: ResolventProblem, g: GridFunction, gradient: GridFunction,
                  delta: float) -> GridFunction:
    """g + delta b . Du as a grid function on the problem lattice."""
    b = problem.drift
    periodic = g.extension is ExtensionPolicy.PERIODIC and b.extension is ExtensionPolicy.PERIODIC

    def combined(points, g=g, b=b, gradient=gradient):
        pts = np.asarray(points, dtype=float).reshape(-1, problem.spec.dim)
        drift = np.asarray(b(pts), dtype=float).reshape(pts.shape)
        grad = np.asarray(gradient(pts), dtype=float).reshape(pts.shape)
        return np.asarray(g(pts), dtype=float).reshape(-1) + delta * np.einsum("md,md->m", drift, grad)

    if periodic:
        return GridFunction.from_callable(problem.box, combined, ExtensionPolicy.PERIODIC, name="g+b.Du")
    return GridFunction.from_callable(problem.box, combined, ExtensionPolicy.CALLBACK, name="g+b.Du")


def _picard(problem: ResolventProblem, engine: SemigroupEngine, rule: TimeRule,
            settings: SolverSettings, delta: float, relaxation: float,
            start: Optional[List[np.ndarray]] = None):
    """
    Iterate u <- R_lambda[g + delta b . Du] componentwise.

    Returns:
        (u parts, Du parts, trace) where trace holds one dict per step

    Raises:
        NoContraction: after DIVERGENCE_STREAK consecutive ratios above one,
            or when max_picard_steps is exhausted
    """
    box = problem.box
    d = box.dim
    zero_k = np.zeros(d)
    sources = _components(problem.source)
    du_parts = [np.zeros((box.size, d)) for _ in sources] if start is None else [p.copy() for p in start]
    u_parts: List[np.ndarray] = [np.zeros(box.size) for _ in sources]
    trace: List[Dict[str, Any]] = []
    ratios: List[float] = []
    previous_change = None
    streak = 0

    for step in range(1, settings.max_picard_steps + 1):
        new_u, new_du = [], []
        for g, du in zip(sources, du_parts):
            gradient = GridFunction(box, du.reshape(box.shape + (d,)), ExtensionPolicy.CONSTANT)
            source = _drift_source(problem, g, gradient, delta)
            u, grad = _solve_scalar(engine, source, zero_k, rule)
            if step > 1 and relaxation != 1.0:
                grad = relaxation * grad + (1.0 - relaxation) * du
            new_u.append(u)
            new_du.append(grad)

        change = max(float(np.max(np.linalg.norm(a - b, axis=1))) for a, b in zip(new_du, du_parts))
        ratio = change / previous_change if previous_change else float("nan")
        trace.append({"step": step, "delta": delta, "change": change, "ratio": ratio})
        logger.debug(f"picard step {step} delta={delta} change={change:.3e} ratio={ratio:.3f}")
        u_parts, du_parts = new_u, new_du

        if change < settings.picard_tol:
            return u_parts, du_parts, trace
        if previous_change:
            ratios.append(ratio)
            streak = streak + 1 if ratio > 1.0 else 0
            if streak >= DIVERGENCE_STREAK:
                raise NoContraction(
                    f"Picard differences grew for {streak} consecutive steps at lambda={problem.lam}; "
                    f"raise lambda",
                    ratios,
                )
        previous_change = change

    raise NoContraction(
        f"Picard iteration did not reach {settings.picard_tol:.1e} in {settings.max_picard_steps} steps",
        ratios,
    )


def solve_hoelder_drift(problem: ResolventProblem, settings: Optional[SolverSettings] = None,
                        engine: Optional[SemigroupEngine] = None) -> ResolventSolution:
    """
    Fixed point of u = R_lambda[g + b . Du] for a bounded Hoelder field b.

    The full drift is tried first.  If the differences stop contracting,
    the drift is switched on in stages with a relaxed update, each stage
    warm-started from the previous one.

    Raises:
        UnsupportedRegime: for alpha < 1 or alpha + beta <= 1
        NoContraction: if the staged fallback fails as well
    """
    settings = settings or SolverSettings()
    spec = problem.spec
    if not problem.has_field_drift:
        return solve_constant_drift(problem, settings, engine)
    if spec.alpha < 1.0:
        raise UnsupportedRegime(f"Hoelder drift needs alpha >= 1, got alpha={spec.alpha}")
    if problem.effective_beta < problem.beta:
        logger.info(
            f"alpha + beta = {spec.alpha + problem.beta:.3f} >= 2: "
            f"using Hoelder exponent {problem.effective_beta:.3f} for the drift"
        )

    spec.c_alpha  # raises DegenerateMeasure
    engine = engine or SemigroupEngine(spec, problem.box, settings)
    g_sup = problem.source.sup_norm()
    rule = build_time_rule(spec, problem.lam, problem.box.h, g_sup, settings)

    try:
        u_parts, du_parts, trace = _picard(problem, engine, rule, settings, 1.0, 1.0)
        stages = [1.0]
    except NoContraction as error:
        logger.warning(f"{error.message}; retrying with staged drift")
        trace, start, stages = [], None, []
        for delta in FALLBACK_STAGES:
            try:
                u_parts, du_parts, stage_trace = _picard(
                    problem, engine, rule, settings, delta, FALLBACK_RELAXATION, start
                )
            except NoContraction as stage_error:
                raise NoContraction(
                    f"staged Picard iteration failed at delta={delta}: {stage_error.message}",
                    error.ratios + stage_error.ratios,
                )
            trace.extend(stage_trace)
            stages.append(delta)
            start = du_parts

    diagnostics = {
        "method": "picard",
        "time_rule": rule.to_dict(),
        "kernel": dict(engine.rule.metadata),
        "residual_tolerance": settings.residual_tol,
        "iterations": len(trace),
        "stages": stages,
        "trace": trace,
        "contraction_ratios": [row["ratio"] for row in trace[1:]],
    }
    solution = _assemble(problem, u_parts, du_parts, diagnostics)
    logger.info(f"hoelder-drift solve lambda={problem.lam}: {len(trace)} Picard steps")
    return solution


# ============================================================================
# DIAGNOSTICS
# ============================================================================

def maximum_principle_margin(solution: ResolventSolution, problem: ResolventProblem) -> float:
    """||g||_0 - lambda ||u||_0; nonnegative up to round-off for a valid solve."""
    return problem.source.sup_norm() - problem.lam * solution.u.sup_norm()


def _drift_at(problem: ResolventProblem, mask: np.ndarray) -> np.ndarray:
    d = problem.spec.dim
    if problem.has_field_drift:
        return problem.drift.values.reshape(-1, d)[mask]
    return np.broadcast_to(problem.drift, (int(mask.sum()), d))


def residual(solution: ResolventSolution, problem: ResolventProblem,
             margin: Optional[float] = None) -> float:
    """
    sup over interior lattice points of |lambda u - L u - b . Du - g|.

    L u comes from apply_generator on the interpolated solution, not from
    the solver's kernel.  The value is also stored in
    solution.diagnostics["residual"].
    """
    margin = RESIDUAL_MARGIN if margin is None else margin
    box = problem.box
    mask = box.interior_mask(margin).reshape(-1)
    if not np.any(mask):
        raise InvalidParameter(f"lattice has no points at distance {margin} from its boundary")
    pts = box.points()[mask]
    drift = _drift_at(problem, mask)
    grads = solution.gradient_values().reshape(box.size, -1, box.dim)[mask]
    u_parts = _components(solution.u)
    g_values = problem.source.values.reshape(box.size, -1)[mask]

    worst = 0.0
    for j, u in enumerate(u_parts):
        generator = apply_generator_many(problem.spec, u, pts)
        u_values = u.values.reshape(-1)[mask]
        transport = np.einsum("md,md->m", drift, grads[:, j, :])
        gap = problem.lam * u_values - generator - transport - g_values[:, j]
        worst = max(worst, float(np.max(np.abs(gap))))
    solution.diagnostics["residual"] = worst
    solution.diagnostics["residual_margin"] = margin
    return worst


@dataclass(frozen=True)
class SchauderReport:
    """Left-hand quantities of the Schauder estimate and their ratio to ||g||_beta."""
    lam: float
    beta: float
    scaled_sup: float
    scaled_gradient: float
    gradient_seminorm: float
    source_norm: float

    @property
    def total(self) -> float:
        return self.scaled_sup + self.scaled_gradient + self.gradient_seminorm

    @property
    def ratio(self) -> float:
        if self.source_norm == 0.0:
            return 0.0 if self.total == 0.0 else float("inf")
        return self.total / self.source_norm

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lambda": self.lam,
            "beta": self.beta,
            "lambda_sup_u": self.scaled_sup,
            "scaled_sup_du": self.scaled_gradient,
            "du_seminorm": self.gradient_seminorm,
            "source_norm": self.source_norm,
            "ratio": self.ratio,
        }


def schauder_report(solution: ResolventSolution, problem: ResolventProblem) -> SchauderReport:
    """
    lambda ||u||_0, lambda^((alpha+beta-1)/alpha) ||Du||_0 and [Du]_(alpha+beta-1)
    against ||g||_0 + [g]_beta.  Reports an empirical constant only.
    """
    alpha = problem.spec.alpha
    beta = problem.effective_beta
    gamma = alpha + beta - 1.0
    grad_sup = solution.gradient_sup()
    seminorm = hoelder_seminorm(solution.Du, gamma) if 0.0 < gamma < 1.0 else 0.0
    source_norm = problem.source.sup_norm() + hoelder_seminorm(problem.source, beta)
    report = SchauderReport(
        lam=problem.lam,
        beta=beta,
        scaled_sup=problem.lam * solution.u.sup_norm(),
        scaled_gradient=problem.lam ** (gamma / alpha) * grad_sup,
        gradient_seminorm=seminorm,
        source_norm=source_norm,
    )
    solution.diagnostics["schauder"] = report.to_dict()
    return report


@dataclass
class DecayScan:
    """||Du_lambda||_0 over an increasing list of lambdas."""
    lambdas: List[float]
    gradient_sups: List[float]
    threshold_lambda: float
    fitted_slope: float
    predicted_slope: float
    violations: List[int] = field(default_factory=list)

    @property
    def slope_band(self) -> Tuple[float, float]:
        """Accepted fitted slopes: the predicted exponent within 30%."""
        return ((1.0 + SLOPE_TOLERANCE) * self.predicted_slope, (1.0 - SLOPE_TOLERANCE) * self.predicted_slope)

    @property
    def slope_ok(self) -> bool:
        # a scan without a fitted slope cannot confirm the rate
        if not np.isfinite(self.fitted_slope):
            return False
        low, high = self.slope_band
        return low <= self.fitted_slope <= high

    @property
    def monotone(self) -> bool:
        return not self.violations

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "lambda": self.lambdas,
            "grad_sup": self.gradient_sups,
            "below_threshold": [v < GRADIENT_THRESHOLD for v in self.gradient_sups],
        })

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lambdas": self.lambdas,
            "gradient_sups": self.gradient_sups,
            "threshold_lambda": self.threshold_lambda,
            "fitted_slope": self.fitted_slope,
            "predicted_slope": self.predicted_slope,
            "slope_band": list(self.slope_band),
            "slope_ok": self.slope_ok,
            "violations": self.violations,
        }



def gradient_decay_scan(
    spec: StableSpec,
    b: Optional[DriftSpec],
    g: GridFunction,
    lambdas: Sequence[float],
    beta: float,
    settings: Optional[SolverSettings] = None,
) -> DecayScan:
    """
    Solve for every lambda and tabulate ||Du_lambda||_0.

    Args:
        spec: process model
        b: drift field, constant vector or None
        g: source
        lambdas: strictly increasing
        beta: Hoelder exponent of g and b

    Returns:
        DecayScan with the first lambda below 1/3 and the log-log slope

    Raises:
        ThresholdNotReached: if no lambda gets ||Du||_0 below 1/3
    """
    lambdas = [float(v) for v in lambdas]
    if not lambdas or any(b2 <= a for a, b2 in zip(lambdas, lambdas[1:])):
        raise InvalidParameter("lambdas must be a non-empty increasing list")
    settings = settings or SolverSettings()
    engine = SemigroupEngine(spec, g.box, settings)

    sups = []
    for lam in lambdas:
        problem = ResolventProblem(spec, lam, g, b, beta)
        solution = solve_hoelder_drift(problem, settings, engine)
        sups.append(solution.gradient_sup())
        logger.info(f"decay scan lambda={lam}: ||Du||_0 = {sups[-1]:.6e}")

    violations = [
        i for i in range(1, len(sups))
        if sups[i] > sups[i - 1] * (1.0 + MONOTONE_SLACK) + MONOTONE_SLACK * settings.picard_tol
    ]
    if violations:
        logger.warning(f"decay scan not monotone at indices {violations}")

    below = [lam for lam, v in zip(lambdas, sups) if v < GRADIENT_THRESHOLD]
    if not below:
        raise ThresholdNotReached(
            f"||Du||_0 stayed above 1/3 for every lambda up to {lambdas[-1]} (last {sups[-1]:.4f})"
        )

    usable = [(lam, v) for lam, v in zip(lambdas, sups) if v > 1e-12]
    slope = float("nan")
    if len(usable) >= 2:
        xs, ys = np.log([u[0] for u in usable]), np.log([u[1] for u in usable])
        slope = float(np.polyfit(xs, ys, 1)[0])
    predicted = -(spec.alpha + beta - 1.0) / (spec.alpha + beta)
    scan = DecayScan(lambdas, sups, below[0], slope, predicted, violations)
    if not scan.slope_ok:
        low, high = scan.slope_band
        logger.warning(f"decay scan slope {slope:.3f} outside [{low:.3f}, {high:.3f}] around the predicted {predicted:.3f}")
    return scan


def resolvent_identity_check(
    spec: StableSpec,
    g: GridFunction,
    lam1: float,
    lam2: float,
    settings: Optional[SolverSettings] = None,
) -> float:
    """sup |u_1 - u_2 - (lambda_2 - lambda_1) R_(lambda_1)[u_2]| for the drift-free resolvent."""
    if lam1 == lam2:
        raise InvalidParameter("resolvent identity needs two different lambdas")
    settings = settings or SolverSettings()
    engine = SemigroupEngine(spec, g.box, settings)
    u1 = solve_constant_drift(ResolventProblem(spec, lam1, g), settings, engine).u
    u2 = solve_constant_drift(ResolventProblem(spec, lam2, g), settings, engine).u
    source = GridFunction(g.box, u2.values, u2.extension, None, u2.derivative, "u2")
    w = solve_constant_drift(ResolventProblem(spec, lam1, source), settings, engine).u
    gap = u1.values - u2.values - (lam2 - lam1) * w.values
    return float(np.max(np.abs(gap)))


def export_solution(solution: ResolventSolution, problem: ResolventProblem,
                    directory: str, stem: str = "resolvent") -> Dict[str, str]:
    """
    Write <stem>.csv (coordinates, u, Du) and <stem>.json (diagnostics).

    Returns:
        Mapping of "table" and "diagnostics" to the written paths
    """
    ensure_directory(directory)
    table_path = os.path.join(directory, f"{stem}.csv")
    json_path = os.path.join(directory, f"{stem}.json")
    solution.to_frame().to_csv(table_path, index=False, float_format="%.12e")
    record = {
        "schema_version": 1,
        "problem": problem.to_dict(),
        "diagnostics": solution.diagnostics,
    }
    with open(json_path, "w") as handle:
        handle.write(json.dumps(record, sort_keys=True, indent=2, default=_json_default))
    logger.info(f"wrote {table_path} and {json_path}")
    return {"table": table_path, "diagnostics": json_path}


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def tanaka_drift(beta: float) -> Callable[[np.ndarray], np.ndarray]:
    """x -> sign(x) (|x|^beta ^ 1) on (m, 1) arrays."""
    if not 0.0 < beta <= 1.0:
        raise InvalidParameter(f"beta must lie in (0, 1], got {beta}")

    def drift(points):
        x = np.asarray(points, dtype=float).reshape(-1)
        return np.sign(x) * np.minimum(np.abs(x) ** beta, 1.0)

    drift.beta = beta
    return drift
