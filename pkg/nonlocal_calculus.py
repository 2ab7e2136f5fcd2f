"""
Lattice functions, the nonlocal generator and discrete Hoelder norms.

GridFunction is the computational stand-in for every field the solver
touches (sources, drifts, solutions, their gradients).  The generator

    L f(x) = int [f(x+y) - f(x) - 1_{|y|<=1} <y, Df(x)>] nu(dy)

is evaluated atom pair by atom pair: for the pair (xi, -xi) the
compensator cancels and the radial integrand becomes the second
difference f(x + r xi) + f(x - r xi) - 2 f(x).
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Any, Iterable, List, Optional, Tuple

import numpy as np
from scipy.interpolate import CubicHermiteSpline, CubicSpline, RegularGridInterpolator

from error_handlers import InvalidParameter, NonIntegrableAtOrigin, NotApplicable
from lattice import Lattice
from stable_model import StableSpec

logger = logging.getLogger(__name__)

CALLBACK_TOL = 1e-12
FD_STEP = 1e-5

# Radial quadrature
R_MIN = 1e-6
N_LOG_POINTS = 48
RADIAL_ORDER = 8
MAX_MIDDLE_PANEL = 0.5
PERIODIC_REACH = 64
CALLBACK_REACH = 256.0
REMAINDER_TOL = 1e-6

# Hoelder scans
EXACT_PAIR_LIMIT = 4096
RANDOM_OFFSETS = 256
SUBSAMPLE_SEED = 1729


class ExtensionPolicy(Enum):
    CONSTANT = "constant"
    CALLBACK = "callback"
    PERIODIC = "periodic"


# ============================================================================
# GRID FUNCTIONS
# ============================================================================

@dataclass(frozen=True, eq=False)
class GridFunction:
    """
    Scalar or R^q-valued samples on a lattice with an extension policy.

    Attributes:
        box: the lattice
        values: array of shape box.shape (scalar) or box.shape + (q,)
        extension: how the function continues outside the box
        callback: analytic function on (m, d) arrays, for CALLBACK extension
        derivative: optional lattice samples of f' (d = 1), used for Hermite interpolation
    """
    box: Lattice
    values: np.ndarray
    extension: ExtensionPolicy = ExtensionPolicy.CONSTANT
    callback: Optional[Callable[[np.ndarray], np.ndarray]] = None
    derivative: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        shape = self.box.shape
        if values.shape[:len(shape)] != shape or values.ndim > len(shape) + 1:
            raise InvalidParameter(f"values of shape {values.shape} do not fit lattice {shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidParameter("grid function values must be finite")
        if self.extension is ExtensionPolicy.CALLBACK:
            if self.callback is None:
                raise InvalidParameter("callback extension needs a callback")
            expected = np.asarray(self.callback(self.box.points()), dtype=float)
            gap = np.max(np.abs(expected.reshape(values.shape) - values))
            if gap > CALLBACK_TOL * max(1.0, float(np.max(np.abs(values)))):
                raise InvalidParameter(f"lattice values differ from callback by {gap:.3e}")
        if self.extension is ExtensionPolicy.PERIODIC:
            for k in range(self.box.dim):
                first = np.take(values, 0, axis=k)
                last = np.take(values, -1, axis=k)
                if np.max(np.abs(first - last)) > 1e-9 * max(1.0, float(np.max(np.abs(values)))):
                    raise InvalidParameter("periodic extension needs equal values on opposite faces")
                index = [slice(None)] * values.ndim
                index[k] = -1
                values[tuple(index)] = first
        derivative = None
        if self.derivative is not None:
            if self.box.dim != 1:
                raise InvalidParameter("lattice derivatives are only supported in d = 1")
            derivative = np.array(self.derivative, dtype=float).reshape(values.shape)
            derivative.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "derivative", derivative)
        object.__setattr__(self, "_interpolant", self._build_interpolant())

    # -- construction -------------------------------------------------------

    @classmethod
    def from_callable(
        cls,
        box: Lattice,
        func: Callable[[np.ndarray], np.ndarray],
        extension: ExtensionPolicy = ExtensionPolicy.CALLBACK,
        derivative: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        name: str = "",
    ) -> "GridFunction":
        points = box.points()
        sample = np.asarray(func(points), dtype=float)
        values = sample.reshape(box.shape + sample.shape[1:])
        deriv = None
        if derivative is not None and box.dim == 1:
            deriv = np.asarray(derivative(points), dtype=float).reshape(values.shape)
        callback = func if extension is ExtensionPolicy.CALLBACK else None
        return cls(box, values, extension, callback, deriv, name)

    @classmethod
    def constant(cls, box: Lattice, value, name: str = "") -> "GridFunction":
        value = np.asarray(value, dtype=float)
        values = np.broadcast_to(value, box.shape + value.shape).copy()
        return cls(box, values, ExtensionPolicy.CONSTANT, None, None, name)

    def with_values(self, values: np.ndarray, name: Optional[str] = None) -> "GridFunction":
        """Same lattice, constant extension, new samples."""
        return GridFunction(self.box, values, ExtensionPolicy.CONSTANT, None, None, name or self.name)

    def component(self, i: int) -> "GridFunction":
        if not self.is_vector:
            raise InvalidParameter("scalar grid function has no components")
        callback = None
        if self.callback is not None:
            parent = self.callback
            callback = lambda pts, parent=parent, i=i: np.asarray(parent(pts)).reshape(len(pts), -1)[:, i]
        deriv = None if self.derivative is None else self.derivative[..., i]
        return GridFunction(self.box, self.values[..., i], self.extension, callback, deriv, f"{self.name}[{i}]")

    # -- shape --------------------------------------------------------------

    @property
    def dim(self) -> int:
        return self.box.dim

    @property
    def is_vector(self) -> bool:
        return self.values.ndim == self.box.dim + 1

    @property
    def arity(self) -> int:
        return int(self.values.shape[-1]) if self.is_vector else 1

    # -- interpolation --------------------------------------------------------

    def _build_interpolant(self):
        axes = self.box.axes()
        if self.box.dim == 1:
            x = axes[0]
            if x.shape[0] < 2:
                raise InvalidParameter("lattice needs at least two points")
            if self.derivative is not None:
                return CubicHermiteSpline(x, self.values, self.derivative, axis=0)
            bc = "periodic" if self.extension is ExtensionPolicy.PERIODIC else "not-a-knot"
            if x.shape[0] < 4:
                bc = "natural" if bc != "periodic" else bc
            return CubicSpline(x, self.values, axis=0, bc_type=bc)
        method = "cubic" if min(self.box.shape) >= 4 else "linear"
        return RegularGridInterpolator(axes, self.values, method=method, bounds_error=False, fill_value=None)

    def _wrap(self, points: np.ndarray) -> np.ndarray:
        period = self.box.upper - self.box.lower
        return self.box.lower + np.mod(points - self.box.lower, period)

    def _clamp(self, points: np.ndarray) -> np.ndarray:
        return np.clip(points, self.box.lower, self.box.upper)

    def _interpolate(self, points: np.ndarray) -> np.ndarray:
        if self.box.dim == 1:
            return np.asarray(self._interpolant(points[:, 0]))
        return np.asarray(self._interpolant(points))

    def __call__(self, points) -> np.ndarray:
        """Evaluate at an (m, d) array; returns (m,) or (m, q)."""
        pts = np.asarray(points, dtype=float).reshape(-1, self.dim)
        if self.extension is ExtensionPolicy.PERIODIC:
            return self._interpolate(self._wrap(pts))
        inside = self.box.contains(pts)
        if self.extension is ExtensionPolicy.CONSTANT or np.all(inside):
            return self._interpolate(self._clamp(pts))
        out = np.empty((pts.shape[0],) + self.values.shape[self.box.dim:])
        if np.any(inside):
            out[inside] = self._interpolate(pts[inside])
        outside = ~inside
        out[outside] = np.asarray(self.callback(pts[outside]), dtype=float).reshape(out[outside].shape)
        return out

    def gradient(self, points) -> np.ndarray:
        """Df at (m, d) points; shape (m, d) or (m, q, d)."""
        pts = np.asarray(points, dtype=float).reshape(-1, self.dim)
        if self.box.dim == 1:
            x = pts[:, 0]
            if self.extension is ExtensionPolicy.PERIODIC:
                x = self._wrap(pts)[:, 0]
                return np.asarray(self._interpolant(x, 1))[..., None]
            inside = self.box.contains(pts)
            grad = np.asarray(self._interpolant(np.clip(x, self.box.lower[0], self.box.upper[0]), 1))
            grad = np.array(grad, dtype=float)
            if np.any(~inside):
                if self.extension is ExtensionPolicy.CONSTANT:
                    grad[~inside] = 0.0
                else:
                    grad[~inside] = self._central_difference(pts[~inside])[..., 0]
            return grad[..., None]
        return self._central_difference(pts)

    def _central_difference(self, pts: np.ndarray) -> np.ndarray:
        cols = []
        for k in range(self.dim):
            e = np.zeros(self.dim)
            e[k] = FD_STEP
            cols.append((self(pts + e) - self(pts - e)) / (2.0 * FD_STEP))
        return np.stack(cols, axis=-1)

    def lattice_gradient(self) -> np.ndarray:
        """Df on the lattice, shape box.shape + (d,) or box.shape + (q, d)."""
        if self.box.dim == 1:
            grad = np.asarray(self._interpolant(self.box.axes()[0], 1))
            return grad[..., None]
        parts = np.gradient(self.values, self.box.h, axis=tuple(range(self.dim)))
        return np.stack(parts, axis=-1)

    def gradient_function(self) -> "GridFunction":
        """Df as a (vector-valued) grid function with constant extension."""
        grad = self.lattice_gradient()
        if self.is_vector:
            grad = grad.reshape(self.box.shape + (-1,))
        return GridFunction(self.box, grad, ExtensionPolicy.CONSTANT, None, None, f"D{self.name}")

    def sup_norm(self) -> float:
        if self.is_vector:
            return float(np.max(np.linalg.norm(self.values, axis=-1)))
        return float(np.max(np.abs(self.values)))

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "box": self.box.to_dict(), "extension": self.extension.value, "arity": self.arity}


def compensation_remainder(f: GridFunction, x, y) -> float:
    """|f(x+y) - f(x) - <y, Df(x)>| for a scalar grid function."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    y = np.asarray(y, dtype=float).reshape(1, -1)
    grad = f.gradient(x)[0]
    return float(abs(f(x + y)[0] - f(x)[0] - float(np.dot(y[0], grad))))


# ============================================================================
# GENERATOR
# ============================================================================

def _gauss(breaks: np.ndarray, order: int = RADIAL_ORDER) -> Tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(order)
    a, b = breaks[:-1], breaks[1:]
    half = 0.5 * (b - a)
    nodes = (0.5 * (a + b))[:, None] + half[:, None] * x[None, :]
    return nodes.reshape(-1), (half[:, None] * w[None, :]).reshape(-1)


def _second_differences(f: GridFunction, points: np.ndarray, fx: np.ndarray, direction: np.ndarray,
                        radii: np.ndarray, chunk: int = 2_000_000) -> np.ndarray:
    """S[j, m] = f(x_m + r_j xi) + f(x_m - r_j xi) - 2 f(x_m)."""
    m = points.shape[0]
    out = np.empty((radii.shape[0],) + fx.shape)
    step = max(1, chunk // max(m, 1))
    for start in range(0, radii.shape[0], step):
        r = radii[start:start + step]
        disp = r[:, None] * direction[None, :]
        plus = f((points[None, :, :] + disp[:, None, :]).reshape(-1, f.dim))
        minus = f((points[None, :, :] - disp[:, None, :]).reshape(-1, f.dim))
        out[start:start + step] = (plus + minus).reshape((r.shape[0],) + fx.shape) - 2.0 * fx[None]
    return out


def _middle_reach(f: GridFunction, points: np.ndarray, direction: np.ndarray) -> float:
    moving = np.abs(direction) > 1e-15
    if f.extension is ExtensionPolicy.PERIODIC:
        period = float(np.max((f.box.upper - f.box.lower)[moving]))
        return PERIODIC_REACH * period
    step = np.abs(direction[moving])
    up = (f.box.upper[moving] - points[:, moving]) / step
    down = (points[:, moving] - f.box.lower[moving]) / step
    exit_reach = float(np.max(np.maximum(up, down))) if points.size else 1.0
    if f.extension is ExtensionPolicy.CALLBACK:
        return max(exit_reach, CALLBACK_REACH)
    return max(exit_reach, 1.0)


def _far_values(f: GridFunction, points: np.ndarray, direction: np.ndarray, reach: float) -> np.ndarray:
    """Mean of f(x + r xi) + f(x - r xi) for r beyond reach (periodic or constant extension)."""
    if f.extension is ExtensionPolicy.PERIODIC:
        trimmed = f.values[tuple(slice(0, -1) for _ in range(f.dim))]
        mean = trimmed.reshape((-1,) + f.values.shape[f.dim:]).mean(axis=0)
        return np.broadcast_to(2.0 * mean, (points.shape[0],) + mean.shape)
    far = points + 4.0 * reach * direction
    near = points - 4.0 * reach * direction
    return f(far) + f(near)


def pair_ray_integral(
    spec: StableSpec,
    f: GridFunction,
    points,
    direction,
    r0: float = 0.0,
    radial_grid: Tuple[float, int] = (R_MIN, N_LOG_POINTS),
) -> np.ndarray:
    """
    int_{r0}^inf [f(x + r xi) + f(x - r xi) - 2 f(x)] r^(-1-alpha) dr for each point.

    With r0 = 0 the part below r_min is the analytic remainder
    S(r_min) r_min^(-alpha) / (q - alpha), q the local exponent of S.

    Raises:
        NonIntegrableAtOrigin: if S decays no faster than r^alpha at 0
    """
    alpha = spec.alpha
    pts = np.asarray(points, dtype=float).reshape(-1, f.dim)
    xi = np.asarray(direction, dtype=float).reshape(f.dim)
    fx = np.asarray(f(pts), dtype=float)
    r_min, n_log = radial_grid
    total = np.zeros(fx.shape)

    if r0 < 1.0:
        start = max(r0, r_min)
        breaks = np.geomspace(start, 1.0, max(2, int(n_log)))
        nodes, weights = _gauss(breaks)
        s = _second_differences(f, pts, fx, xi, nodes)
        total += np.tensordot(weights * nodes ** (-1.0 - alpha), s, axes=(0, 0))
        if r0 < r_min:
            total += _small_remainder(f, pts, fx, xi, alpha, r_min)

    lower = max(r0, 1.0)
    reach = max(_middle_reach(f, pts, xi), lower)
    width = min(MAX_MIDDLE_PANEL, 4.0 * f.box.h)
    if reach > lower:
        n_panels = int(math.ceil((reach - lower) / width))
        nodes, weights = _gauss(np.linspace(lower, reach, n_panels + 1))
        s = _second_differences(f, pts, fx, xi, nodes)
        total += np.tensordot(weights * nodes ** (-1.0 - alpha), s, axes=(0, 0))

    if f.extension is ExtensionPolicy.CALLBACK:
        total += _fitted_tail(f, pts, fx, xi, alpha, reach, width)
    else:
        far = _far_values(f, pts, xi, reach) - 2.0 * fx
        total += far * reach ** (-alpha) / alpha
    return total


def _fitted_tail(f: GridFunction, pts: np.ndarray, fx: np.ndarray, xi: np.ndarray,
                 alpha: float, reach: float, width: float) -> np.ndarray:
    """
    int_reach^inf S(r) r^(-1-alpha) dr for an analytic extension.

    The partial integrals I(T) over [reach, T] behave like
    I_inf - m (reach / T)^alpha plus an oscillation with zero mean, so I_inf
    is the least-squares intercept over the panel breaks T in [reach, 2 reach].
    """
    n_panels = int(math.ceil(reach / width))
    breaks = np.linspace(reach, 2.0 * reach, n_panels + 1)
    nodes, weights = _gauss(breaks)
    s = _second_differences(f, pts, fx, xi, nodes)
    scaled = (weights * nodes ** (-1.0 - alpha)).reshape((n_panels, RADIAL_ORDER) + (1,) * fx.ndim)
    panels = (scaled * s.reshape((n_panels, RADIAL_ORDER) + fx.shape)).sum(axis=1)
    partial = np.concatenate([np.zeros((1,) + fx.shape), np.cumsum(panels, axis=0)])
    basis = np.stack([np.ones_like(breaks), (reach / breaks) ** alpha], axis=1)
    coef, *_ = np.linalg.lstsq(basis, partial.reshape(breaks.shape[0], -1), rcond=None)
    return coef[0].reshape(fx.shape)


def _small_remainder(f, pts, fx, xi, alpha, r_min) -> np.ndarray:
    s1 = _second_differences(f, pts, fx, xi, np.array([r_min]))[0]
    s2 = _second_differences(f, pts, fx, xi, np.array([10.0 * r_min]))[0]
    noise = 64.0 * np.finfo(float).eps * (np.abs(fx) + 1.0)
    remainder = np.zeros(fx.shape)
    live = (np.abs(s1) > noise) & (np.abs(s2) > noise)
    if not np.any(live):
        return remainder
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.log(np.abs(s2[live]) / np.abs(s1[live])) / math.log(10.0)
    # second differences of C^2 functions scale like r^2
    q = np.where(np.abs(q - 2.0) < 0.05, 2.0, q)
    if np.any(q <= alpha + 1e-3):
        worst = float(np.min(q))
        raise NonIntegrableAtOrigin(
            f"second differences decay like r^{worst:.3f} <= r^alpha (alpha={alpha}); "
            "the compensated integral diverges at the origin",
            remainder=math.inf,
        )
    remainder[live] = s1[live] * r_min ** (-alpha) / (q - alpha)
    return remainder


def apply_generator_many(
    spec: StableSpec,
    f: GridFunction,
    points,
    radial_grid: Tuple[float, int] = (R_MIN, N_LOG_POINTS),
) -> np.ndarray:
    """L f at each of an (m, d) array of points."""
    if spec.dim != f.dim:
        raise InvalidParameter(f"function lives in R^{f.dim}, spec in R^{spec.dim}")
    pts = np.asarray(points, dtype=float).reshape(-1, f.dim)
    total = None
    measure = spec.measure
    for i in measure.half_atoms():
        part = measure.weights[i] * pair_ray_integral(spec, f, pts, measure.directions[i], 0.0, radial_grid)
        total = part if total is None else total + part
    return spec.levy_factor * total


def apply_generator(
    spec: StableSpec,
    f: GridFunction,
    x,
    radial_grid: Tuple[float, int] = (R_MIN, N_LOG_POINTS),
) -> float:
    """
    L f(x) by compensated radial quadrature.

    Raises:
        NonIntegrableAtOrigin: if 1 + (Hoelder exponent of Df) <= alpha near x
    """
    value = apply_generator_many(spec, f, np.asarray(x, dtype=float).reshape(1, -1), radial_grid)
    return float(np.asarray(value).reshape(-1)[0]) if not f.is_vector else np.asarray(value)[0]


def large_jump_integral(spec: StableSpec, f: GridFunction, points, r: float) -> np.ndarray:
    """int_{|z| > r} [f(x + z) - f(x)] nu(dz) at each point."""
    pts = np.asarray(points, dtype=float).reshape(-1, f.dim)
    total = None
    measure = spec.measure
    for i in measure.half_atoms():
        part = measure.weights[i] * pair_ray_integral(spec, f, pts, measure.directions[i], r)
        total = part if total is None else total + part
    return spec.levy_factor * total


# ============================================================================
# HOELDER NORMS
# ============================================================================

def _offsets(shape: Tuple[int, ...]) -> np.ndarray:
    """Index offsets o != 0 with first nonzero component positive."""
    d = len(shape)
    total = int(np.prod(shape))
    if total <= EXACT_PAIR_LIMIT:
        ranges = [np.arange(-(n - 1), n) for n in shape]
        grid = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, d)
    else:
        rng = np.random.default_rng(SUBSAMPLE_SEED)
        candidates = [np.stack(np.meshgrid(*([np.arange(-4, 5)] * d), indexing="ij"), axis=-1).reshape(-1, d)]
        dyadic = []
        longest = max(shape) - 1
        j = 1
        while j <= longest:
            for k in range(d):
                e = np.zeros(d, dtype=int)
                e[k] = j
                dyadic.append(e)
            dyadic.append(np.full(d, j))
            if d > 1:
                diag = np.full(d, j)
                diag[1:] *= -1
                dyadic.append(diag)
            j *= 2
        for k in range(d):
            e = np.zeros(d, dtype=int)
            e[k] = shape[k] - 1
            dyadic.append(e)
        candidates.append(np.array(dyadic))
        limits = np.array(shape) - 1
        candidates.append(rng.integers(-limits, limits + 1, size=(RANDOM_OFFSETS, d)))
        grid = np.vstack(candidates)
    grid = np.unique(grid, axis=0)
    nonzero = np.any(grid != 0, axis=1)
    grid = grid[nonzero]
    first = grid[np.arange(grid.shape[0]), np.argmax(grid != 0, axis=1)]
    grid = grid[first > 0]
    inside = np.all(np.abs(grid) < np.array(shape), axis=1)
    return grid[inside]


def _pair_scan(values: np.ndarray, h: float, beta: float, spatial_dims: int) -> float:
    """max |v(i+o) - v(i)| / (h |o|)^beta over the offset set."""
    shape = values.shape[:spatial_dims]
    best = 0.0
    for off in _offsets(shape):
        a = [slice(None)] * spatial_dims
        b = [slice(None)] * spatial_dims
        for k, o in enumerate(off):
            if o >= 0:
                a[k], b[k] = slice(o, None), slice(0, shape[k] - o)
            else:
                a[k], b[k] = slice(0, shape[k] + o), slice(-o, None)
        diff = values[tuple(a)] - values[tuple(b)]
        if diff.size == 0:
            continue
        if values.ndim > spatial_dims:
            mags = np.sqrt((diff.reshape(diff.shape[:spatial_dims] + (-1,)) ** 2).sum(axis=-1))
        else:
            mags = np.abs(diff)
        dist = h * float(np.linalg.norm(off))
        best = max(best, float(mags.max()) / dist ** beta)
    return best


def _sup(values: np.ndarray, spatial_dims: int) -> float:
    if values.ndim > spatial_dims:
        flat = values.reshape(values.shape[:spatial_dims] + (-1,))
        return float(np.max(np.sqrt((flat ** 2).sum(axis=-1))))
    return float(np.max(np.abs(values)))


def hoelder_seminorm(f: GridFunction, beta: float) -> float:
    """
    Discrete [f]_beta on the lattice.

    beta = 0 gives the sup norm, beta in (0, 1) the pair scan (exact below
    EXACT_PAIR_LIMIT points, stratified and seed-deterministic above),
    beta = 1 gives ||Df||_0 and beta in (1, 2) gives [Df]_(beta - 1).
    """
    if f.box.size < 2:
        raise InvalidParameter("lattice needs at least two points")
    if beta < 0 or beta >= 2:
        raise InvalidParameter(f"beta must lie in [0, 2), got {beta}")
    d = f.dim
    if beta == 0:
        return _sup(f.values, d)
    if beta < 1:
        return _pair_scan(f.values, f.box.h, beta, d)
    grad = f.lattice_gradient()
    if beta == 1:
        return _sup(grad, d)
    return _pair_scan(grad, f.box.h, beta - 1.0, d)


def second_derivative_sup(f: GridFunction) -> float:
    """sup |D^2 f| (operator norm bounded by Frobenius) on the lattice."""
    return hoelder_seminorm(f.gradient_function(), 1.0)


@dataclass(frozen=True)
class HoelderReport:
    sup_norm: float
    grad_sup_norm: Optional[float]
    seminorms: Dict[float, float] = field(default_factory=dict)
    diameter: float = 1.0

    def ladder_violations(self, slack: float = 1e-12) -> List[Tuple[float, float]]:
        """Pairs beta < beta' (both < 1) with [f]_beta > [f]_beta' diam^(beta'-beta)."""
        bad = []
        betas = sorted(b for b in self.seminorms if 0 < b < 1)
        for i, lo in enumerate(betas):
            for hi in betas[i + 1:]:
                bound = self.seminorms[hi] * self.diameter ** (hi - lo)
                if self.seminorms[lo] > bound * (1.0 + slack) + slack:
                    bad.append((lo, hi))
        return bad

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sup_norm": self.sup_norm,
            "grad_sup_norm": self.grad_sup_norm,
            "seminorms": {str(k): v for k, v in sorted(self.seminorms.items())},
            "diameter": self.diameter,
        }


def hoelder_report(f: GridFunction, betas: Iterable[float] = (0.25, 0.5, 0.75)) -> HoelderReport:
    diameter = float(np.linalg.norm(f.box.upper - f.box.lower))
    seminorms = {float(b): hoelder_seminorm(f, float(b)) for b in betas}
    try:
        grad_sup = hoelder_seminorm(f, 1.0)
    except InvalidParameter:
        grad_sup = None
    return HoelderReport(hoelder_seminorm(f, 0.0), grad_sup, seminorms, diameter)


def norm_1_plus_gamma(f: GridFunction, gamma: float) -> float:
    """||f||_0 + ||Df||_0 + [Df]_gamma (no seminorm term at gamma = 0)."""
    if not 0.0 <= gamma <= 1.0:
        raise InvalidParameter(f"gamma must lie in [0, 1], got {gamma}")
    total = hoelder_seminorm(f, 0.0) + hoelder_seminorm(f, 1.0)
    if gamma == 1.0:
        total += second_derivative_sup(f)
    elif gamma > 0.0:
        total += hoelder_seminorm(f, 1.0 + gamma)
    return total


# ============================================================================
# INTERPOLATION DIAGNOSTICS
# ============================================================================

def _check_interpolation_args(s: float, t: float, r: float):
    if not (0.0 <= s <= r <= 1.0 and 0.0 < r):
        raise InvalidParameter(f"need 0 <= s <= r <= 1 and r > 0, got s={s}, r={r}")
    if not (0.0 <= t < 1.0) or r + t >= 2.0:
        raise InvalidParameter(f"need 0 <= t < 1 and r + t < 2, got t={t}")


def interpolation_diagnostic(f: GridFunction, s: float, t: float, r: float) -> float:
    """
    [f]_(s+t) / ([f]_(r+t)^(s/r) [f]_t^(1-s/r)): an empirical lower bound
    on the interpolation constant.

    Raises:
        NotApplicable: if a denominator seminorm with positive exponent vanishes
    """
    _check_interpolation_args(s, t, r)
    theta = s / r
    top = hoelder_seminorm(f, s + t)
    upper = hoelder_seminorm(f, r + t)
    lower = hoelder_seminorm(f, t)
    tiny = 1e-300
    if (theta > 0 and upper <= tiny) or (theta < 1 and lower <= tiny):
        raise NotApplicable("denominator seminorm vanishes; the ratio is undefined")
    return top / (upper ** theta * lower ** (1.0 - theta))


def interpolation_epsilon_diagnostic(f: GridFunction, s: float, t: float, r: float) -> float:
    """
    [f]_(s+t) / inf_eps (eps^(r-s) [f]_(r+t) + eps^(-s) [f]_t), the additive form.
    """
    _check_interpolation_args(s, t, r)
    top = hoelder_seminorm(f, s + t)
    a = hoelder_seminorm(f, r + t)
    b = hoelder_seminorm(f, t)
    if s == 0:
        best = b
    elif s == r:
        best = a
    else:
        if a <= 0 or b <= 0:
            raise NotApplicable("denominator seminorm vanishes; the ratio is undefined")
        eps = (s * b / ((r - s) * a)) ** (1.0 / r)
        best = eps ** (r - s) * a + eps ** (-s) * b
    if best <= 1e-300:
        raise NotApplicable("denominator vanishes; the ratio is undefined")
    return top / best


# ============================================================================
# SHIFT DIFFERENCES
# ============================================================================

def shift_constant(gamma: float) -> float:
    """c_gamma = 3^(1-gamma) 2^gamma"""
    return 3.0 ** (1.0 - gamma) * 2.0 ** gamma


@dataclass(frozen=True)
class ShiftDifferenceReport:
    gamma: float
    c_gamma: float
    norm: float
    samples: int
    max_ratio: float
    violations: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "gamma": self.gamma,
            "c_gamma": self.c_gamma,
            "norm": self.norm,
            "samples": self.samples,
            "max_ratio": self.max_ratio,
            "violations": self.violations,
            "passed": self.passed,
        }


def shift_difference_check(
    f: GridFunction,
    gamma: float,
    samples: int,
    seed: int = 0,
    tolerance: float = 1e-9,
) -> ShiftDifferenceReport:
    """
    Sample |f(u+x) - f(u) - f(v+x) + f(v)| / (c_gamma ||f||_(1+gamma) |u-v| |x|^gamma)
    over random u, v in the box shrunk by one and |x| <= 1.
    """
    if f.is_vector:
        raise InvalidParameter("shift differences are checked for scalar functions")
    if samples < 1:
        raise InvalidParameter("samples must be positive")
    lo = f.box.lower + 1.0
    hi = f.box.upper - 1.0
    if np.any(hi <= lo):
        raise InvalidParameter("box half widths must exceed 1 for unit shifts")
    rng = np.random.default_rng(seed)
    d = f.dim
    u = rng.uniform(lo, hi, size=(samples, d))
    v = rng.uniform(lo, hi, size=(samples, d))
    direction = rng.standard_normal((samples, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    x = direction * rng.uniform(0.0, 1.0, size=(samples, 1)) ** (1.0 / d)

    c_gamma = shift_constant(gamma)
    norm = norm_1_plus_gamma(f, gamma)
    lhs = np.abs(f(u + x) - f(u) - f(v + x) + f(v))
    scale = c_gamma * norm * np.linalg.norm(u - v, axis=1) * np.linalg.norm(x, axis=1) ** gamma
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(scale > 0, lhs / scale, 0.0)
    max_ratio = float(np.max(ratio))
    violations = int(np.sum(ratio > 1.0 + tolerance))
    if violations:
        logger.warning(f"shift-difference bound violated on {violations} of {samples} samples")
    return ShiftDifferenceReport(gamma, c_gamma, norm, samples, max_ratio, violations, tolerance)
