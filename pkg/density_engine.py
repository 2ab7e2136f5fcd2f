"""
Transition densities of symmetric stable processes by Fourier inversion.

    p_t(x) = (2 pi)^(-d) int cos(<x, z>) exp(-t psi(z)) dz

is evaluated with composite Gauss-Legendre rules on the frequency box
|z_k| <= R.  Panels are graded geometrically towards z = 0 (where
psi has its |z|^alpha cusp) and have bounded width elsewhere so that
cos(<x, z>) is resolved for every requested x.  In one dimension the
integrand is even and only the half line is integrated.

On lattices in d >= 2 the transform is separable, one matrix product per
axis, so a whole table costs a handful of dense products.
"""

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Dict, Any, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import special
from scipy.interpolate import CubicHermiteSpline, CubicSpline

from error_handlers import CutoffTooSmall, InvalidParameter
from lattice import Lattice
from stable_model import StableSpec, characteristic_exponent, levy_tail_mass

logger = logging.getLogger(__name__)

# Frequency quadrature
TAIL_BOUND = 1e-12
MAX_PANEL_WIDTH = 2.0
PHASE_PER_PANEL = 6.0
PANEL_ORDER = 16
GRADED_ORDER = 8
GRADING_START = 1e-7
GRADING_RATIO = 4.0
MAX_AXIS_NODES = 400_000
MAX_TENSOR_NODES = 20_000_000
CHUNK_ELEMENTS = 4_000_000

# Far field (d = 1)
FAR_FIELD_ETA = 25.0
SERIES_TERMS = 40

NEGATIVE_TOL = 1e-8
BOX_RATIO_TARGET = 1e-10


# ============================================================================
# FREQUENCY RULES
# ============================================================================

@dataclass(frozen=True)
class FrequencyRule:
    """Gauss-Legendre rule on the half line [0, R] (mirrored for full lines)."""
    nodes: np.ndarray
    weights: np.ndarray
    cutoff: float
    step: float

    @property
    def n_nodes(self) -> int:
        return int(self.nodes.shape[0])

    def full_line(self) -> Tuple[np.ndarray, np.ndarray]:
        return (
            np.concatenate([-self.nodes[::-1], self.nodes]),
            np.concatenate([self.weights[::-1], self.weights]),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {"cutoff": self.cutoff, "step": self.step, "n_nodes": self.n_nodes}


def _gauss_panels(breaks: np.ndarray, order: int) -> Tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(order)
    a, b = breaks[:-1], breaks[1:]
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    nodes = (mid[:, None] + half[:, None] * x[None, :]).reshape(-1)
    weights = (half[:, None] * w[None, :]).reshape(-1)
    return nodes, weights


def frequency_cutoff(spec: StableSpec, t: float, tail: float = TAIL_BOUND) -> float:
    """R with exp(-t C R^alpha) < tail, C the nondegeneracy constant."""
    return (math.log(1.0 / tail) / (t * spec.c_alpha)) ** (1.0 / spec.alpha)


def build_frequency_rule(
    spec: StableSpec,
    t: float,
    xmax: float,
    max_nodes: int = MAX_AXIS_NODES,
) -> FrequencyRule:
    """
    Half-line rule for exp(-t psi) against cos(x z), |x| <= xmax.

    Raises:
        CutoffTooSmall: if the rule would need more than max_nodes nodes
    """
    if not t > 0:
        raise InvalidParameter(f"t must be positive, got {t}")
    cutoff = frequency_cutoff(spec, t)
    width = min(MAX_PANEL_WIDTH, PHASE_PER_PANEL / max(xmax, 1e-9))

    graded_top = min(1.0, cutoff)
    n_graded = max(1, int(math.ceil(math.log(graded_top / GRADING_START) / math.log(GRADING_RATIO))))
    graded = np.concatenate([[0.0], graded_top * GRADING_RATIO ** np.arange(-n_graded + 1, 1)])
    graded = np.unique(np.minimum(graded, graded_top))

    n_uniform = int(math.ceil(max(cutoff - graded_top, 0.0) / width))
    required = (len(graded) - 1) * GRADED_ORDER + n_uniform * PANEL_ORDER
    if required > max_nodes:
        raise CutoffTooSmall(
            f"frequency rule needs {required} nodes (cutoff {cutoff:.4g}, panel {width:.3g}) "
            f"> limit {max_nodes}",
            required_nodes=required,
        )

    nodes_g, weights_g = _gauss_panels(graded, GRADED_ORDER)
    if n_uniform:
        uniform = np.linspace(graded_top, cutoff, n_uniform + 1)
        nodes_u, weights_u = _gauss_panels(uniform, PANEL_ORDER)
        nodes = np.concatenate([nodes_g, nodes_u])
        weights = np.concatenate([weights_g, weights_u])
    else:
        nodes, weights = nodes_g, weights_g
    return FrequencyRule(nodes, weights, cutoff, width)


# ============================================================================
# FAR FIELD SERIES (d = 1)
# ============================================================================

def _series_coefficients(spec: StableSpec, t: float, terms: int):
    if spec.dim != 1:
        raise InvalidParameter("the tail series is only available in one dimension")
    c = t * spec.scale * spec.total_weight
    k = np.arange(1, terms + 1, dtype=float)
    log_coef = special.gammaln(spec.alpha * k + 1.0) - special.gammaln(k + 1.0) + k * math.log(c)
    sign = np.where(k % 2 == 1, 1.0, -1.0) * np.sin(k * math.pi * spec.alpha / 2.0)
    return k, log_coef, sign


def stable_tail_series(
    spec: StableSpec,
    x,
    t: float = 1.0,
    terms: int = SERIES_TERMS,
    derivative: bool = False,
) -> np.ndarray:
    """
    Far-field expansion of p_t (or its derivative) in one dimension:

        p_t(x) = (1/pi) sum_k (-1)^(k+1) Gamma(alpha k + 1)/k! (t c)^k sin(k pi alpha/2) |x|^(-alpha k - 1)

    with c = scale * sum(w).  Convergent for alpha < 1, asymptotic for
    alpha > 1; accurate for |x| >= FAR_FIELD_ETA (t c)^(1/alpha).
    """
    k, log_coef, sign = _series_coefficients(spec, t, terms)
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    ax = np.abs(xs)[:, None]
    powers = spec.alpha * k[None, :] + 1.0
    terms_arr = sign[None, :] * np.exp(log_coef[None, :] - powers * np.log(ax))
    if derivative:
        values = -(terms_arr * powers).sum(axis=1) / (math.pi * ax[:, 0]) * np.sign(xs)
    else:
        values = terms_arr.sum(axis=1) / math.pi
    return values


def stable_tail_mass(spec: StableSpec, level: float, t: float = 1.0, terms: int = SERIES_TERMS) -> float:
    """P(X_t > level) for level in the far field, by integrating the series termwise."""
    k, log_coef, sign = _series_coefficients(spec, t, terms)
    ak = spec.alpha * k
    return float((sign * np.exp(log_coef - ak * math.log(level)) / ak).sum() / math.pi)


def far_field_start(spec: StableSpec, t: float = 1.0) -> float:
    return FAR_FIELD_ETA * (t * spec.scale * spec.total_weight) ** (1.0 / spec.alpha)


# ============================================================================
# FOURIER INVERTER
# ============================================================================

class FourierInverter:
    """
    Evaluates p_t and Dp_t for one spec.

    Rules are cached by (t, panel width); the instance is safe to share
    between threads.
    """

    def __init__(self, spec: StableSpec, max_axis_nodes: int = MAX_AXIS_NODES):
        self.spec = spec
        self.max_axis_nodes = max_axis_nodes
        self._rules: Dict[Tuple[float, float], FrequencyRule] = {}
        self._lock = threading.Lock()
        # raises DegenerateMeasure before any quadrature
        self.c_alpha = spec.c_alpha

    def rule(self, t: float, xmax: float) -> FrequencyRule:
        width = min(MAX_PANEL_WIDTH, PHASE_PER_PANEL / max(xmax, 1e-9))
        # bucket widths to powers of two so nearby requests share a rule
        bucket = 2.0 ** math.floor(math.log2(width))
        key = (float(t), bucket)
        with self._lock:
            cached = self._rules.get(key)
        if cached is not None:
            return cached
        rule = build_frequency_rule(self.spec, t, PHASE_PER_PANEL / bucket, self.max_axis_nodes)
        with self._lock:
            self._rules[key] = rule
        return rule

    # -- one dimension -----------------------------------------------------

    def _line(self, x: np.ndarray, t: float):
        values = np.zeros_like(x)
        grads = np.zeros_like(x)
        rule = None
        far = np.abs(x) >= far_field_start(self.spec, t)
        if np.any(far):
            values[far] = stable_tail_series(self.spec, x[far], t)
            grads[far] = stable_tail_series(self.spec, x[far], t, derivative=True)
        near = ~far
        if np.any(near):
            xn = x[near]
            rule = self.rule(t, float(np.max(np.abs(xn))))
            c = self.spec.scale * self.spec.total_weight
            damp = rule.weights * np.exp(-t * c * rule.nodes ** self.spec.alpha)
            chunk = max(1, CHUNK_ELEMENTS // rule.n_nodes)
            out_v = np.empty_like(xn)
            out_g = np.empty_like(xn)
            for start in range(0, xn.shape[0], chunk):
                phase = np.outer(xn[start:start + chunk], rule.nodes)
                out_v[start:start + chunk] = np.cos(phase) @ damp
                out_g[start:start + chunk] = -(np.sin(phase) @ (damp * rule.nodes))
            values[near] = out_v / math.pi
            grads[near] = out_g / math.pi
        return values, grads, rule

    # -- general dimension, scattered points --------------------------------

    def _scattered(self, points: np.ndarray, t: float) -> Tuple[np.ndarray, np.ndarray]:
        d = self.spec.dim
        rule = self.rule(t, float(np.max(np.abs(points))) if points.size else 1.0)
        z1, q1 = rule.full_line()
        total = z1.shape[0] ** d
        if total > MAX_TENSOR_NODES:
            raise CutoffTooSmall(
                f"tensor frequency grid has {total} nodes > limit {MAX_TENSOR_NODES}",
                required_nodes=total,
            )
        mesh = np.meshgrid(*([z1] * d), indexing="ij")
        z = np.stack([m.reshape(-1) for m in mesh], axis=1)
        q = np.ones(total)
        for qm in np.meshgrid(*([q1] * d), indexing="ij"):
            q = q * qm.reshape(-1)
        damp = q * np.exp(-t * characteristic_exponent(self.spec, z))
        keep = damp > 0
        z, damp = z[keep], damp[keep]

        norm = (2.0 * math.pi) ** (-d)
        values = np.empty(points.shape[0])
        grads = np.empty_like(points)
        chunk = max(1, CHUNK_ELEMENTS // max(z.shape[0], 1))
        for start in range(0, points.shape[0], chunk):
            phase = points[start:start + chunk] @ z.T
            values[start:start + chunk] = np.cos(phase) @ damp * norm
            grads[start:start + chunk] = -(np.sin(phase) * damp) @ z * norm
        return values, grads

    # -- lattices -------------------------------------------------------------

    def _separable(self, axes: List[np.ndarray], t: float, want_gradient: bool):
        d = self.spec.dim
        xmax = max(float(np.max(np.abs(a))) for a in axes)
        rule = self.rule(t, xmax)
        z1, q1 = rule.full_line()
        n = z1.shape[0]
        if n ** d > MAX_TENSOR_NODES:
            raise CutoffTooSmall(
                f"tensor frequency grid has {n ** d} nodes > limit {MAX_TENSOR_NODES}",
                required_nodes=n ** d,
            )
        mesh = np.meshgrid(*([z1] * d), indexing="ij")
        z = np.stack([m.reshape(-1) for m in mesh], axis=1)
        spectrum = np.exp(-t * characteristic_exponent(self.spec, z)).reshape((n,) * d)
        for k in range(d):
            shape = [1] * d
            shape[k] = n
            spectrum = spectrum * q1.reshape(shape)
        kernels = [np.exp(-1j * np.outer(a, z1)) for a in axes]

        def transform(deriv_axis: Optional[int]) -> np.ndarray:
            arr = spectrum.astype(complex)
            for k in range(d):
                kern = kernels[k] * (-1j * z1)[None, :] if k == deriv_axis else kernels[k]
                arr = np.moveaxis(np.tensordot(kern, arr, axes=([1], [k])), 0, k)
            return arr.real * (2.0 * math.pi) ** (-d)

        values = transform(None)
        gradient = np.stack([transform(k) for k in range(d)], axis=-1) if want_gradient else None
        return values, gradient, rule

    # -- public ------------------------------------------------------------

    def evaluate(self, points, t: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
        """Raw (unclamped) density and gradient at an (m, d) array of points."""
        if not t > 0:
            raise InvalidParameter(f"t must be positive, got {t}")
        pts = np.asarray(points, dtype=float).reshape(-1, self.spec.dim)
        if self.spec.dim == 1:
            values, grads, _ = self._line(pts[:, 0], t)
            return values, grads[:, None]
        return self._scattered(pts, t)

    def evaluate_lattice(self, box: Lattice, t: float = 1.0, want_gradient: bool = True):
        """Raw density (lattice shape) and gradient (shape + (d,)) on a lattice."""
        if box.dim != self.spec.dim:
            raise InvalidParameter(f"lattice has dim {box.dim}, spec has dim {self.spec.dim}")
        if self.spec.dim == 1:
            axis = box.axes()[0]
            values, grads, rule = self._line(axis, t)
            quad = rule.to_dict() if rule is not None else {"cutoff": None, "step": None, "n_nodes": 0}
            quad["far_field_start"] = far_field_start(self.spec, t)
            return values, grads[:, None], quad
        values, gradient, rule = self._separable(box.axes(), t, want_gradient)
        return values, gradient, rule.to_dict()

    def p1(self, x) -> np.ndarray:
        return self.evaluate(x, 1.0)[0]

    def dp1(self, x) -> np.ndarray:
        return self.evaluate(x, 1.0)[1]


_inverters: Dict[str, FourierInverter] = {}
_inverters_lock = threading.Lock()


def get_inverter(spec: StableSpec) -> FourierInverter:
    """Shared per-spec inverter (memory cache keyed by spec fingerprint)."""
    key = spec.fingerprint
    with _inverters_lock:
        inverter = _inverters.get(key)
    if inverter is None:
        inverter = FourierInverter(spec)
        with _inverters_lock:
            inverter = _inverters.setdefault(key, inverter)
    return inverter


def clear_inverter_cache() -> int:
    with _inverters_lock:
        count = len(_inverters)
        _inverters.clear()
    return count


# ============================================================================
# POINT EVALUATION
# ============================================================================

def _as_point(spec: StableSpec, x) -> np.ndarray:
    pt = np.atleast_1d(np.asarray(x, dtype=float)).reshape(-1)
    if pt.shape[0] != spec.dim:
        raise InvalidParameter(f"expected a point in R^{spec.dim}, got {pt.shape[0]} coordinates")
    if not np.all(np.isfinite(pt)):
        raise InvalidParameter("point must be finite")
    return pt


def density_with_diagnostics(spec: StableSpec, t: float, x) -> Tuple[float, Dict[str, Any]]:
    """Clamped density plus the raw quadrature value and frequency cutoff."""
    pt = _as_point(spec, x)
    values, _ = get_inverter(spec).evaluate(pt[None, :], t)
    raw = float(values[0])
    if raw < -NEGATIVE_TOL:
        logger.warning(f"density quadrature returned {raw:.3e} at x={pt.tolist()}, t={t}")
    diagnostics = {"raw": raw, "cutoff": frequency_cutoff(spec, t), "clamped": raw < 0}
    return max(raw, 0.0), diagnostics


def density(spec: StableSpec, t: float, x) -> float:
    """
    Transition density p_t(x).

    Raises:
        DegenerateMeasure: if psi vanishes somewhere on the sphere
        CutoffTooSmall: if the frequency rule exceeds its node budget
    """
    return density_with_diagnostics(spec, t, x)[0]


def density_gradient(spec: StableSpec, t: float, x) -> np.ndarray:
    """
    Dp_t(x) = -(2 pi)^(-d) int z sin(<x, z>) exp(-t psi(z)) dz.
    """
    pt = _as_point(spec, x)
    _, grads = get_inverter(spec).evaluate(pt[None, :], t)
    return np.asarray(grads[0], dtype=float)


# ============================================================================
# DENSITY TABLES
# ============================================================================

@dataclass(frozen=True, eq=False)
class DensityTable:
    """p_t and Dp_t sampled on a lattice, immutable once built."""
    spec: StableSpec
    t: float
    box: Lattice
    values: np.ndarray
    gradient: np.ndarray
    quad: Dict[str, Any]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.values.setflags(write=False)
        self.gradient.setflags(write=False)

    def mass(self) -> float:
        """Lattice Riemann sum of p_t."""
        return float(self.values.sum() * self.box.cell_volume)

    def tail_mass_estimate(self) -> float:
        """t * nu(|y| > L), L the smallest half width: heavy-tail mass outside the box."""
        level = float(np.min(self.box.half_widths))
        if level <= 0:
            return 1.0
        return min(1.0, self.t * levy_tail_mass(self.spec, level))

    def captures(self, fraction: float = 0.9999) -> bool:
        return 1.0 - self.tail_mass_estimate() >= fraction

    def symmetry_error(self) -> float:
        """sup |p(x) - p(-x)| on a lattice centred at the origin."""
        if np.any(np.abs(self.box.center) > 1e-12):
            raise InvalidParameter("symmetry check needs a lattice centred at 0")
        mirrored = self.values[tuple(slice(None, None, -1) for _ in range(self.values.ndim))]
        return float(np.max(np.abs(self.values - mirrored)))

    def to_frame(self) -> pd.DataFrame:
        points = self.box.points()
        data = {f"x{k + 1}": points[:, k] for k in range(self.box.dim)}
        data["p"] = self.values.reshape(-1)
        grad = self.gradient.reshape(-1, self.box.dim)
        for k in range(self.box.dim):
            data[f"dp{k + 1}"] = grad[:, k]
        return pd.DataFrame(data)

    def export_csv(self, path: str) -> str:
        self.to_frame().to_csv(path, index=False, float_format="%.12e")
        logger.info(f"density table written to {path}")
        return path

    def describe(self) -> Dict[str, Any]:
        return {
            "t": self.t,
            "box": self.box.to_dict(),
            "quad": self.quad,
            "mass": self.mass(),
            "tail_mass_estimate": self.tail_mass_estimate(),
            **self.metadata,
        }


def tabulate(spec: StableSpec, t: float, box: Lattice, method: str = "scaled") -> DensityTable:
    """
    Tabulate p_t and Dp_t on a lattice.

    With method="scaled" the inversion runs once at t = 1 on the lattice
    scaled by t^(-1/alpha) and the scaling law

        p_t(x) = t^(-d/alpha) p_1(t^(-1/alpha) x)

    carries it to t.  method="direct" inverts at t itself.
    """
    if not t > 0:
        raise InvalidParameter(f"t must be positive, got {t}")
    if method not in ("scaled", "direct"):
        raise InvalidParameter(f"unknown tabulation method {method!r}")
    inverter = get_inverter(spec)
    d, a = spec.dim, spec.alpha

    if method == "scaled":
        factor = t ** (-1.0 / a)
        base, base_grad, quad = inverter.evaluate_lattice(box.scaled(factor), 1.0)
        raw = base * t ** (-d / a)
        grad = base_grad * t ** (-(d + 1.0) / a)
        metadata = {"scaling": "p_t(x) = t^(-d/alpha) p_1(t^(-1/alpha) x)", "base_t": 1.0}
    else:
        raw, grad, quad = inverter.evaluate_lattice(box, t)
        metadata = {"scaling": None, "base_t": t}

    raw_min = float(raw.min())
    if raw_min < -NEGATIVE_TOL:
        logger.warning(f"tabulated density dips to {raw_min:.3e} below zero")
    metadata["raw_min"] = raw_min
    metadata["method"] = method
    values = np.maximum(raw, 0.0).reshape(box.shape)
    gradient = np.asarray(grad).reshape(box.shape + (d,))
    table = DensityTable(spec, float(t), box, values, gradient, quad, metadata)
    logger.debug(f"tabulated p_t at t={t} on {box.shape} lattice, mass {table.mass():.8f}")
    return table


def select_box(
    spec: StableSpec,
    t: float,
    h: float,
    ratio: float = BOX_RATIO_TARGET,
    start: float = 4.0,
    max_points: int = 200_001,
) -> Lattice:
    """
    Grow a centred cube until the boundary density drops below ratio * p_t(0).

    Heavy tails make the target unreachable for small alpha within
    max_points; the achieved ratio is logged.
    """
    peak = density(spec, t, np.zeros(spec.dim))
    half = start * t ** (1.0 / spec.alpha)
    achieved = 1.0
    while True:
        edge = np.zeros(spec.dim)
        edge[0] = half
        achieved = density(spec, t, edge) / peak
        if achieved < ratio:
            break
        if (2 * int(round(2 * half / h)) + 1) ** spec.dim > max_points:
            logger.info(
                f"box selection stopped at half width {half:.4g}: boundary ratio {achieved:.3e}"
            )
            break
        half *= 2.0
    return Lattice.cube(spec.dim, half, h)


# ============================================================================
# GRADIENT L1 CONSTANT
# ============================================================================

def grad_l1_norm(spec: StableSpec, h: Optional[float] = None, half_width: Optional[float] = None) -> float:
    """
    c_0 = ||Dp_1||_{L^1}, the constant in ||DP_t f||_0 <= c_0 t^(-1/alpha) ||f||_0.

    In d = 1 the Riemann sum over [-L, L] is completed by the exact tail
    2 p_1(L) (p_1 is monotone beyond the mode).  In d >= 2 sums over boxes
    L and 2L are extrapolated with the |x|^(-alpha-1) tail law.
    """
    d, a = spec.dim, spec.alpha
    inverter = get_inverter(spec)
    if d == 1:
        c_scale = (spec.scale * spec.total_weight) ** (1.0 / a)
        h = 0.01 * c_scale if h is None else h
        half_width = 20.0 * c_scale if half_width is None else half_width
        box = Lattice.cube(1, half_width, h)
        _, grad, _ = inverter.evaluate_lattice(box, 1.0)
        riemann = float(np.abs(grad).sum() * h)
        tail = 2.0 * float(inverter.p1(np.array([[box.half_widths[0]]]))[0])
        total = riemann + tail
    else:
        reach = spec.c_alpha ** (-1.0 / a)
        h = 0.05 * reach if h is None else h
        half_width = 6.0 * reach if half_width is None else half_width
        outer = Lattice.cube(d, 2.0 * half_width, h)
        _, grad, _ = inverter.evaluate_lattice(outer, 1.0)
        norms = np.linalg.norm(grad, axis=-1)
        inner_mask = outer.interior_mask(half_width)
        big = float(norms.sum() * outer.cell_volume)
        small = float(norms[inner_mask].sum() * outer.cell_volume)
        q = 2.0 ** (-(a + 1.0))
        total = big + (big - small) * q / (1.0 - q)
    if not total > 0:
        raise CutoffTooSmall("gradient L1 estimate is not positive; refine the lattice")
    logger.debug(f"c_0 estimate {total:.8f}")
    return total


# ============================================================================
# ONE-DIMENSIONAL PROFILE
# ============================================================================

class DensityProfile:
    """
    Spline of p_1 and Dp_1 on [0, far field] plus the tail series beyond.

    One Fourier inversion per spec; afterwards p_t at any point is a
    spline lookup through the scaling law.  One dimension only.
    """

    def __init__(self, spec: StableSpec, n_knots: int = 4001):
        if spec.dim != 1:
            raise InvalidParameter("density profiles are one-dimensional")

        self.spec = spec
        self.far = far_field_start(spec, 1.0)
        eta = np.linspace(0.0, self.far, n_knots)
        values, grads = get_inverter(spec).evaluate(eta[:, None], 1.0)
        grads = grads[:, 0]
        grads[0] = 0.0
        self._p = CubicHermiteSpline(eta, values, grads)
        self._dp = CubicSpline(eta, grads)
        self._mass = self._p.antiderivative()
        self.knots = n_knots

    def p1(self, eta) -> np.ndarray:
        eta = np.asarray(eta, dtype=float)
        ax = np.abs(eta)
        out = np.empty_like(ax)
        near = ax < self.far
        out[near] = self._p(ax[near])
        if np.any(~near):
            out[~near] = stable_tail_series(self.spec, ax[~near])
        return out

    def dp1(self, eta) -> np.ndarray:
        eta = np.asarray(eta, dtype=float)
        ax = np.abs(eta)
        out = np.empty_like(ax)
        near = ax < self.far
        out[near] = self._dp(ax[near])
        if np.any(~near):
            out[~near] = stable_tail_series(self.spec, ax[~near], derivative=True)
        return out * np.sign(eta)

    def cdf(self, eta) -> np.ndarray:
        """P(X_1 <= eta), from the spline antiderivative and the tail series."""
        eta = np.asarray(eta, dtype=float)
        ax = np.abs(eta)
        half = np.empty_like(ax)
        near = ax < self.far
        half[near] = self._mass(ax[near])
        for i in np.flatnonzero(~near):
            half.flat[i] = 0.5 - stable_tail_mass(self.spec, float(ax.flat[i]))
        return 0.5 + np.sign(eta) * np.clip(half, 0.0, 0.5)

    def pt(self, t: float, x) -> np.ndarray:
        s = t ** (1.0 / self.spec.alpha)
        return self.p1(np.asarray(x, dtype=float) / s) / s

    def dpt(self, t: float, x) -> np.ndarray:
        s = t ** (1.0 / self.spec.alpha)
        return self.dp1(np.asarray(x, dtype=float) / s) / (s * s)

    def cdft(self, t: float, x) -> np.ndarray:
        s = t ** (1.0 / self.spec.alpha)
        return self.cdf(np.asarray(x, dtype=float) / s)


_profiles: Dict[str, DensityProfile] = {}
_profiles_lock = threading.Lock()


def get_profile(spec: StableSpec) -> DensityProfile:
    key = spec.fingerprint
    with _profiles_lock:
        profile = _profiles.get(key)
    if profile is None:
        profile = DensityProfile(spec)
        with _profiles_lock:
            profile = _profiles.setdefault(key, profile)
    return profile


# ============================================================================
# KERNEL QUADRATURE AND SEMIGROUP
# ============================================================================

@dataclass(frozen=True, eq=False)
class KernelQuadrature:
    """
    Nodes eta_j with weights a_j ~ p_1(eta_j) dq_j and b_j ~ Dp_1(eta_j) dq_j.

    Integrals against p_t and Dp_t follow from y = t^(1/alpha) eta.
    The mass weights are nonnegative and sum to one exactly.
    """
    nodes: np.ndarray
    mass_weights: np.ndarray
    gradient_weights: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return int(self.nodes.shape[0])


def _line_kernel(spec: StableSpec, near_width: float, far_reach: float) -> KernelQuadrature:
    profile = get_profile(spec)
    c_scale = (spec.scale * spec.total_weight) ** (1.0 / spec.alpha)
    near = profile.far
    n_near = int(math.ceil(near / (near_width * c_scale)))
    near_breaks = np.linspace(0.0, near, n_near + 1)
    reach = far_reach * c_scale
    far_breaks = near * 1.5 ** np.arange(0, int(math.ceil(math.log(reach / near) / math.log(1.5))) + 1)
    nodes_n, q_n = _gauss_panels(near_breaks, 8)
    nodes_f, q_f = _gauss_panels(far_breaks, 8)
    half_nodes = np.concatenate([nodes_n, nodes_f])
    half_q = np.concatenate([q_n, q_f])
    top = float(far_breaks[-1])

    a_half = np.maximum(half_q * profile.p1(half_nodes), 0.0)
    b_half = half_q * profile.dp1(half_nodes)
    tail = max(stable_tail_mass(spec, top), 0.0)
    atom = top * 2.0 ** (1.0 / spec.alpha)
    p_top = float(profile.p1(np.array([top]))[0])

    nodes = np.concatenate([[-atom], -half_nodes[::-1], half_nodes, [atom]])
    a = np.concatenate([[tail], a_half[::-1], a_half, [tail]])
    # integral of Dp_1 over (top, inf) is -p_1(top); over (-inf, -top) it is +p_1(top)
    b = np.concatenate([[p_top], -b_half[::-1], b_half, [-p_top]])
    raw_mass = float(a.sum())
    a = a / raw_mass
    metadata = {
        "kind": "line",
        "near_reach": near,
        "far_reach": top,
        "tail_mass": tail,
        "mass_defect": 1.0 - raw_mass,
        "size": int(nodes.shape[0]),
    }
    return KernelQuadrature(nodes[:, None], a, b[:, None], metadata)


def _box_kernel(spec: StableSpec, half_steps: int) -> KernelQuadrature:
    d, a = spec.dim, spec.alpha
    reach = 12.0 * spec.c_alpha ** (-1.0 / a)
    box = Lattice.cube(d, reach, reach / half_steps)
    values, gradient, _ = get_inverter(spec).evaluate_lattice(box, 1.0)
    vol = box.cell_volume
    nodes = box.points()
    mass = np.maximum(values.reshape(-1), 0.0) * vol
    grad = gradient.reshape(-1, d) * vol

    # mass outside the box goes to one far atom per spectral direction
    defect = max(0.0, 1.0 - float(mass.sum()))
    directions = spec.measure.directions
    radii = reach / np.max(np.abs(directions), axis=1) * 2.0 ** (1.0 / a)
    share = spec.measure.weights / spec.measure.weights.sum()
    nodes = np.vstack([nodes, directions * radii[:, None]])
    mass = np.concatenate([mass, defect * share])
    grad = np.vstack([grad, np.zeros((directions.shape[0], d))])
    mass = mass / mass.sum()
    metadata = {"kind": "box", "reach": reach, "mass_defect": defect, "size": int(nodes.shape[0])}
    return KernelQuadrature(nodes, mass, grad, metadata)


_kernels: Dict[Tuple[str, Any], KernelQuadrature] = {}
_kernels_lock = threading.Lock()


def kernel_quadrature(
    spec: StableSpec,
    near_width: float = 0.25,
    far_reach: float = 1e4,
    half_steps: int = 40,
) -> KernelQuadrature:
    """Cached node/weight rule for integrating against p_1 and Dp_1."""
    key = (spec.fingerprint, (near_width, far_reach) if spec.dim == 1 else half_steps)
    with _kernels_lock:
        rule = _kernels.get(key)
    if rule is not None:
        return rule
    if spec.dim == 1:
        rule = _line_kernel(spec, near_width, far_reach)
    else:
        rule = _box_kernel(spec, half_steps)
    logger.debug(f"kernel quadrature built: {rule.metadata}")
    with _kernels_lock:
        rule = _kernels.setdefault(key, rule)
    return rule


def _shifted_evaluations(g, points: np.ndarray, offsets: np.ndarray, chunk_elements: int = CHUNK_ELEMENTS):
    """Yield (slice, values) with values[j, m] = g(points[m] + offsets[j])."""
    m, d = points.shape
    step = max(1, chunk_elements // max(m, 1))
    for start in range(0, offsets.shape[0], step):
        block = offsets[start:start + step]
        query = (points[None, :, :] + block[:, None, :]).reshape(-1, d)
        values = np.asarray(g(query), dtype=float).reshape(block.shape[0], m)
        yield slice(start, start + block.shape[0]), values


def semigroup_apply(
    spec: StableSpec,
    g,
    t: float,
    points,
    k=None,
    rule: Optional[KernelQuadrature] = None,
) -> np.ndarray:
    """
    P_t g(x) = int g(x + y + t k) p_t(y) dy at each point.

    Args:
        spec: process model
        g: scalar callable on (m, d) arrays
        t: time
        points: (m, d) evaluation points
        k: constant drift vector (default 0)
        rule: kernel quadrature (default cached rule for spec)
    """
    if not t > 0:
        raise InvalidParameter(f"t must be positive, got {t}")
    rule = rule or kernel_quadrature(spec)
    pts = np.asarray(points, dtype=float).reshape(-1, spec.dim)
    shift = np.zeros(spec.dim) if k is None else np.asarray(k, dtype=float).reshape(spec.dim) * t
    s = t ** (1.0 / spec.alpha)
    out = np.zeros(pts.shape[0])
    for sl, values in _shifted_evaluations(g, pts + shift, s * rule.nodes):
        out += rule.mass_weights[sl] @ values
    return out


def semigroup_gradient(
    spec: StableSpec,
    g,
    t: float,
    points,
    k=None,
    rule: Optional[KernelQuadrature] = None,
) -> np.ndarray:
    """
    DP_t g(x) = -t^(-1/alpha) sum_j b_j [g(x + s eta_j + t k) - g(x + t k)].
    """
    if not t > 0:
        raise InvalidParameter(f"t must be positive, got {t}")
    rule = rule or kernel_quadrature(spec)
    pts = np.asarray(points, dtype=float).reshape(-1, spec.dim)
    shift = np.zeros(spec.dim) if k is None else np.asarray(k, dtype=float).reshape(spec.dim) * t
    s = t ** (1.0 / spec.alpha)
    base = np.asarray(g(pts + shift), dtype=float).reshape(-1)
    out = np.zeros((pts.shape[0], spec.dim))
    for sl, values in _shifted_evaluations(g, pts + shift, s * rule.nodes):
        out += (values - base[None, :]).T @ rule.gradient_weights[sl]
    return -out / s


def semigroup_pair(
    spec: StableSpec,
    g,
    t: float,
    points,
    k=None,
    rule: Optional[KernelQuadrature] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """P_t g and DP_t g from one set of shifted evaluations."""
    if not t > 0:
        raise InvalidParameter(f"t must be positive, got {t}")
    rule = rule or kernel_quadrature(spec)
    pts = np.asarray(points, dtype=float).reshape(-1, spec.dim)
    shift = np.zeros(spec.dim) if k is None else np.asarray(k, dtype=float).reshape(spec.dim) * t
    s = t ** (1.0 / spec.alpha)
    base = np.asarray(g(pts + shift), dtype=float).reshape(-1)
    values_out = np.zeros(pts.shape[0])
    grads_out = np.zeros((pts.shape[0], spec.dim))
    for sl, values in _shifted_evaluations(g, pts + shift, s * rule.nodes):
        values_out += rule.mass_weights[sl] @ values
        grads_out += (values - base[None, :]).T @ rule.gradient_weights[sl]
    return values_out, -grads_out / s


def chapman_kolmogorov_gap(spec: StableSpec, s: float, t: float, box: Lattice) -> float:
    """sup |p_s * p_t - p_(s+t)| on a one-dimensional lattice (Riemann convolution)."""
    if spec.dim != 1:
        raise InvalidParameter("Chapman-Kolmogorov check is implemented for d = 1")
    left = tabulate(spec, s, box).values
    right = tabulate(spec, t, box).values
    both = tabulate(spec, s + t, box).values
    conv = np.convolve(left, right, mode="same") * box.h
    return float(np.max(np.abs(conv - both)))
