"""
Symmetric alpha-stable process models.

A process is described by its index alpha, the dimension and a finite,
symmetric, atomic spectral measure on the unit sphere.  Every integral
against the Levy measure then reduces to closed-form radial integrals,
one per atom.

Normalization used throughout the package:

    nu(dy) = (scale / K_alpha) * sum_i w_i delta_{xi_i}(dtheta) dr / r^(1+alpha)

with K_alpha = int_0^inf (1 - cos s) s^(-1-alpha) ds, so that the
Levy-Khintchine symbol of nu is exactly

    psi(u) = scale * sum_i w_i |<u, xi_i>|^alpha.

With scale = K_alpha the factor in front of the Levy measure is one.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Any, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate, optimize, special

from error_handlers import DegenerateMeasure, DivergentIntegral, InvalidParameter

logger = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-12
DEGENERACY_THRESHOLD = 1e-10
DEFAULT_SEARCH_DIRECTIONS = 720
PICARD_QUADRATURE_RTOL = 1e-8


# ============================================================================
# SPECTRAL MEASURE
# ============================================================================

@dataclass(frozen=True, eq=False)
class SpectralMeasure:
    """
    Finite symmetric atomic measure on the unit sphere.

    Attributes:
        directions: (n_atoms, dim) array of unit vectors
        weights: (n_atoms,) array of positive weights
    """
    directions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        directions = np.array(self.directions, dtype=float)
        if directions.ndim == 1:
            directions = directions.reshape(-1, 1)
        weights = np.array(self.weights, dtype=float).reshape(-1)

        if directions.ndim != 2 or directions.shape[0] == 0:
            raise InvalidParameter("spectral measure needs at least one atom")
        if weights.shape[0] != directions.shape[0]:
            raise InvalidParameter(
                f"{directions.shape[0]} directions but {weights.shape[0]} weights"
            )
        if not np.all(np.isfinite(directions)) or not np.all(np.isfinite(weights)):
            raise InvalidParameter("atoms must be finite")

        norms = np.linalg.norm(directions, axis=1)
        bad = np.abs(norms - 1.0) > UNIT_NORM_TOL
        if np.any(bad):
            raise InvalidParameter(
                f"atom direction {int(np.argmax(bad))} has norm {norms[bad][0]!r}, expected 1"
            )
        if np.any(weights <= 0):
            raise InvalidParameter("atom weights must be strictly positive")

        partner = _negation_partners(directions, weights)
        if partner is None:
            raise InvalidParameter(
                "atoms are not closed under negation with equal weights; "
                "pass every direction together with its negative"
            )

        directions.setflags(write=False)
        weights.setflags(write=False)
        partner.setflags(write=False)
        object.__setattr__(self, "directions", directions)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "_partner", partner)

    @classmethod
    def from_atoms(cls, atoms: Iterable[Tuple[Sequence[float], float]]) -> "SpectralMeasure":
        """Build from (direction, weight) pairs; the set must already be symmetric."""
        atoms = list(atoms)
        if not atoms:
            raise InvalidParameter("spectral measure needs at least one atom")
        directions = [np.atleast_1d(np.asarray(d, dtype=float)) for d, _ in atoms]
        weights = [float(w) for _, w in atoms]
        return cls(np.vstack(directions), np.asarray(weights))

    @property
    def dim(self) -> int:
        return int(self.directions.shape[1])

    @property
    def n_atoms(self) -> int:
        return int(self.directions.shape[0])

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    def half_atoms(self) -> np.ndarray:
        """Indices of one representative atom per symmetric pair."""
        idx = np.arange(self.n_atoms)
        return idx[idx < self._partner]

    def second_moment(self) -> np.ndarray:
        """sum_i w_i xi_i xi_i^T"""
        return np.einsum("i,ij,ik->jk", self.weights, self.directions, self.directions)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "directions": self.directions.tolist(),
            "weights": self.weights.tolist(),
        }


def _negation_partners(directions: np.ndarray, weights: np.ndarray) -> Optional[np.ndarray]:
    n = directions.shape[0]
    partner = np.full(n, -1, dtype=int)
    for i in range(n):
        if partner[i] >= 0:
            continue
        gaps = np.max(np.abs(directions + directions[i]), axis=1)
        candidates = np.where((gaps <= 2 * UNIT_NORM_TOL) & (partner < 0))[0]
        candidates = candidates[candidates != i]
        match = None
        for j in candidates:
            if abs(weights[j] - weights[i]) <= 1e-12 * max(weights[i], 1.0):
                match = j
                break
        if match is None:
            return None
        partner[i] = match
        partner[match] = i
    return partner


# ============================================================================
# MEASURE CONSTRUCTORS
# ============================================================================

def axes_measure(dim: int, weight: float = 1.0) -> SpectralMeasure:
    """Atoms at +-e_1, ..., +-e_d: independent one-dimensional coordinates."""
    if dim < 1:
        raise InvalidParameter("dim must be >= 1")
    eye = np.eye(dim)
    directions = np.vstack([eye, -eye])
    return SpectralMeasure(directions, np.full(2 * dim, float(weight)))


def isotropic_measure(dim: int, n_directions: int = 64) -> SpectralMeasure:
    """
    Quasi-uniform symmetric atoms approximating the rotation-invariant measure.

    The total mass is one.  In d=1 the atoms are +-1 with weight 1/2; in d=2
    they are n equally spaced angles; in d>=3 a Fibonacci (d=3) or seeded
    Gaussian (d>3) point set completed by negation.  n_directions is the
    angular-discretization knob.
    """
    if dim < 1:
        raise InvalidParameter("dim must be >= 1")
    if dim == 1:
        return SpectralMeasure(np.array([[1.0], [-1.0]]), np.array([0.5, 0.5]))
    if n_directions < 2 * dim or n_directions % 2:
        raise InvalidParameter("n_directions must be even and at least 2*dim")

    half = n_directions // 2
    if dim == 2:
        theta = np.pi * np.arange(half) / half
        base = np.column_stack([np.cos(theta), np.sin(theta)])
    elif dim == 3:
        base = _fibonacci_hemisphere(half)
    else:
        rng = np.random.default_rng(20240611 + dim)
        base = rng.standard_normal((half, dim))
    base = base / np.linalg.norm(base, axis=1, keepdims=True)
    directions = np.vstack([base, -base])
    # renormalize so the negated rows match to the last bit
    directions = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    return SpectralMeasure(directions, np.full(2 * half, 1.0 / (2 * half)))


def _fibonacci_hemisphere(n: int) -> np.ndarray:
    golden = (1.0 + 5.0 ** 0.5) / 2.0
    k = np.arange(n)
    z = (k + 0.5) / n
    rho = np.sqrt(np.maximum(0.0, 1.0 - z ** 2))
    phi = 2.0 * np.pi * k / golden
    return np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])


def fibonacci_sphere(n: int) -> np.ndarray:
    """n quasi-uniform unit vectors on S^2."""
    golden = (1.0 + 5.0 ** 0.5) / 2.0
    k = np.arange(n)
    z = 1.0 - 2.0 * (k + 0.5) / n
    rho = np.sqrt(np.maximum(0.0, 1.0 - z ** 2))
    phi = 2.0 * np.pi * k / golden
    return np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])


def direction_grid(dim: int, n_directions: int) -> np.ndarray:
    """Quasi-uniform search grid of unit vectors in R^dim."""
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    if dim == 2:
        theta = 2.0 * np.pi * np.arange(n_directions) / n_directions
        return np.column_stack([np.cos(theta), np.sin(theta)])
    if dim == 3:
        return fibonacci_sphere(n_directions)
    rng = np.random.default_rng(977 + dim)
    points = rng.standard_normal((n_directions, dim))
    return points / np.linalg.norm(points, axis=1, keepdims=True)


# ============================================================================
# PROCESS SPECIFICATION
# ============================================================================

def levy_khintchine_constant(alpha: float) -> float:
    """K_alpha = int_0^inf (1 - cos s) s^(-1-alpha) ds = pi / (2 Gamma(1+alpha) sin(pi alpha / 2))."""
    if not 0.0 < alpha < 2.0:
        raise InvalidParameter(f"alpha must lie in (0, 2), got {alpha}")
    return math.pi / (2.0 * special.gamma(1.0 + alpha) * math.sin(math.pi * alpha / 2.0))


@dataclass(frozen=True, eq=False)
class StableSpec:
    """
    Symmetric alpha-stable process model.

    Attributes:
        alpha: stability index in (0, 2)
        dim: space dimension
        measure: spectral measure with atoms in R^dim
        scale: constant multiplying the characteristic exponent
    """
    alpha: float
    dim: int
    measure: SpectralMeasure
    scale: float = 1.0
    degeneracy_threshold: float = field(default=DEGENERACY_THRESHOLD)

    def __post_init__(self):
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "scale", float(self.scale))
        if not 0.0 < self.alpha < 2.0:
            raise InvalidParameter(f"alpha must lie in (0, 2), got {self.alpha}")
        if int(self.dim) != self.dim or self.dim < 1:
            raise InvalidParameter(f"dim must be a positive integer, got {self.dim}")
        object.__setattr__(self, "dim", int(self.dim))
        if self.measure.dim != self.dim:
            raise InvalidParameter(
                f"measure atoms live in R^{self.measure.dim}, spec has dim {self.dim}"
            )
        if not self.scale > 0 or not math.isfinite(self.scale):
            raise InvalidParameter(f"scale must be positive, got {self.scale}")

    @classmethod
    def from_measure(cls, alpha: float, measure: SpectralMeasure, scale: float = 1.0) -> "StableSpec":
        return cls(alpha=alpha, dim=measure.dim, measure=measure, scale=scale)

    @property
    def total_weight(self) -> float:
        return self.measure.total_weight

    @cached_property
    def levy_factor(self) -> float:
        """scale / K_alpha, the constant in front of the Levy measure."""
        return self.scale / levy_khintchine_constant(self.alpha)

    @cached_property
    def c_alpha(self) -> float:
        """Cached nondegeneracy constant (raises DegenerateMeasure)."""
        return nondegeneracy_constant(self, DEFAULT_SEARCH_DIRECTIONS)

    @cached_property
    def fingerprint(self) -> str:
        """Stable content hash, used as a cache key."""
        sha = hashlib.sha256()
        sha.update(np.float64(self.alpha).tobytes())
        sha.update(np.float64(self.scale).tobytes())
        sha.update(np.int64(self.dim).tobytes())
        sha.update(np.ascontiguousarray(self.measure.directions).tobytes())
        sha.update(np.ascontiguousarray(self.measure.weights).tobytes())
        return sha.hexdigest()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "alpha": self.alpha,
            "dim": self.dim,
            "scale": self.scale,
            "measure": self.measure.to_dict(),
        }


# ============================================================================
# OPERATIONS
# ============================================================================

def characteristic_exponent(spec: StableSpec, u: Union[Sequence[float], np.ndarray]) -> Union[float, np.ndarray]:
    """
    psi(u) = scale * sum_i w_i |<u, xi_i>|^alpha.

    Args:
        spec: process model
        u: a vector in R^d, or an (m, d) array of vectors

    Returns:
        float for a single vector, (m,) array otherwise
    """
    arr = np.asarray(u, dtype=float)
    single = arr.ndim <= 1
    points = arr.reshape(1, -1) if single else arr.reshape(-1, spec.dim)
    if points.shape[1] != spec.dim:
        raise InvalidParameter(f"expected vectors in R^{spec.dim}, got shape {arr.shape}")
    proj = np.abs(points @ spec.measure.directions.T)
    values = spec.scale * (proj ** spec.alpha) @ spec.measure.weights
    return float(values[0]) if single else values


def is_nondegenerate(spec: StableSpec) -> bool:
    """True when the atom directions span R^d."""
    return int(np.linalg.matrix_rank(spec.measure.directions, tol=1e-9)) == spec.dim


def _search_candidates(spec: StableSpec, n_directions: int) -> np.ndarray:
    grid = direction_grid(spec.dim, n_directions)
    extra: List[np.ndarray] = [grid, spec.measure.directions]
    reps = spec.measure.directions[spec.measure.half_atoms()]
    if spec.dim == 2:
        perp = np.column_stack([-reps[:, 1], reps[:, 0]])
        extra.extend([perp, -perp])
    elif spec.dim == 3 and len(reps) > 1:
        i, j = np.triu_indices(len(reps), k=1)
        cross = np.cross(reps[i], reps[j])
        norms = np.linalg.norm(cross, axis=1)
        cross = cross[norms > 1e-12] / norms[norms > 1e-12, None]
        extra.append(cross)
    candidates = np.vstack(extra)
    return candidates / np.linalg.norm(candidates, axis=1, keepdims=True)


def _refine_minimum(spec: StableSpec, start: np.ndarray) -> float:
    if spec.dim == 1:
        return float(characteristic_exponent(spec, start))

    def objective(v):
        norm = np.linalg.norm(v)
        if norm == 0:
            return np.inf
        return characteristic_exponent(spec, v / norm)

    result = optimize.minimize(
        objective, start, method="Nelder-Mead",
        options={"xatol": 1e-11, "fatol": 1e-14, "maxiter": 2000},
    )
    return float(min(result.fun, objective(start)))


def nondegeneracy_constant(
    spec: StableSpec,
    n_directions: int = DEFAULT_SEARCH_DIRECTIONS,
    threshold: Optional[float] = None,
) -> float:
    """
    Minimum of psi over the unit sphere, certifying psi(u) >= C |u|^alpha.

    The search grid (uniform angles in d=2, Fibonacci points in d=3, +-1 in
    d=1) is augmented with the directions where the minimum of a sum of
    |cos|^alpha cusps can sit (atoms, their perpendiculars, pairwise
    cross products) and the best candidates are refined locally.

    Args:
        spec: process model
        n_directions: size of the angular search grid (>= 2d)
        threshold: degeneracy threshold, default spec.degeneracy_threshold

    Returns:
        The constant C

    Raises:
        InvalidParameter: if n_directions < 2d
        DegenerateMeasure: if the atoms do not span R^d or the minimum is below threshold
    """
    if n_directions < 2 * spec.dim:
        raise InvalidParameter(f"n_directions must be >= {2 * spec.dim}")
    threshold = spec.degeneracy_threshold if threshold is None else threshold

    if not is_nondegenerate(spec):
        raise DegenerateMeasure(
            f"spectral measure is contained in a proper subspace of R^{spec.dim}", minimum=0.0
        )

    candidates = _search_candidates(spec, n_directions)
    values = characteristic_exponent(spec, candidates)
    best = float(values.min())
    for idx in np.argsort(values)[:6]:
        best = min(best, _refine_minimum(spec, candidates[idx]))

    logger.debug(f"nondegeneracy constant {best:.6g} over {len(candidates)} directions")
    if best < threshold:
        raise DegenerateMeasure(
            f"min psi on the sphere is {best:.3e} < threshold {threshold:.1e}", minimum=best
        )
    return best


def levy_radial_integral(spec: StableSpec, sigma: float, r0: float, r1: float) -> float:
    """
    |y|^sigma moment of nu restricted to the annulus r0 < |y| < r1.

    Closed form: levy_factor * W * int_{r0}^{r1} r^(sigma-1-alpha) dr.

    Raises:
        DivergentIntegral: near zero when sigma <= alpha and r0 = 0, at
            infinity when sigma >= alpha and r1 = inf
    """
    if r0 < 0:
        raise InvalidParameter("r0 must be >= 0")
    if r1 < r0:
        raise InvalidParameter("r1 must be >= r0")
    alpha = spec.alpha
    if not (sigma > alpha or r0 > 0):
        raise DivergentIntegral(f"|y|^{sigma} is not nu-integrable near 0 for alpha={alpha}")
    if not (sigma < alpha or math.isfinite(r1)):
        raise DivergentIntegral(f"|y|^{sigma} is not nu-integrable at infinity for alpha={alpha}")
    if r1 == r0:
        return 0.0

    e = sigma - alpha
    if e == 0:
        radial = math.log(r1 / r0)
    else:
        upper = 0.0 if not math.isfinite(r1) else r1 ** e
        lower = 0.0 if r0 == 0 else r0 ** e
        radial = (upper - lower) / e
    return spec.levy_factor * spec.total_weight * radial


def levy_tail_mass(spec: StableSpec, eps: float) -> float:
    """nu(|y| > eps)"""
    return levy_radial_integral(spec, 0.0, eps, math.inf)


def small_jump_covariance(spec: StableSpec, eps: float) -> np.ndarray:
    """int_{|y|<=eps} y y^T nu(dy)"""
    if eps <= 0:
        raise InvalidParameter("eps must be positive")
    radial = eps ** (2.0 - spec.alpha) / (2.0 - spec.alpha)
    return spec.levy_factor * radial * spec.measure.second_moment()


# ============================================================================
# PICARD CONDITION
# ============================================================================

@dataclass(frozen=True)
class PicardReport:
    value: float
    quadrature_value: float
    relative_gap: float
    verified: bool

    def to_dict(self) -> Dict[str, Any]:
        return {
            "value": self.value,
            "quadrature_value": self.quadrature_value,
            "relative_gap": self.relative_gap,
            "verified": self.verified,
        }


def _check_unit(spec: StableSpec, u) -> np.ndarray:
    vec = np.asarray(u, dtype=float).reshape(-1)
    if vec.shape[0] != spec.dim:
        raise InvalidParameter(f"u must lie in R^{spec.dim}")
    if abs(np.linalg.norm(vec) - 1.0) > 1e-10:
        raise InvalidParameter("u must be a unit vector")
    return vec


def picard_functional(spec: StableSpec, u, rho: float) -> float:
    """
    int_{|<u,y>| <= rho} <u,y>^2 nu(dy), in closed form:

        levy_factor * rho^(2-alpha) / (2-alpha) * sum_i w_i |<u, xi_i>|^alpha
    """
    vec = _check_unit(spec, u)
    if rho <= 0:
        raise InvalidParameter("rho must be positive")
    proj = np.abs(spec.measure.directions @ vec)
    return float(
        spec.levy_factor * rho ** (2.0 - spec.alpha) / (2.0 - spec.alpha)
        * np.dot(spec.measure.weights, proj ** spec.alpha)
    )


def picard_quadrature(spec: StableSpec, u, rho: float) -> float:
    """Same integral by direct radial quadrature, atom by atom."""
    vec = _check_unit(spec, u)
    total = 0.0
    for direction, weight in zip(spec.measure.directions, spec.measure.weights):
        c = float(np.dot(direction, vec))
        if c == 0.0:
            continue
        reach = rho / abs(c)
        # integrand c^2 r^(1-alpha) on [0, rho/|c|], algebraic weight at 0
        value, _ = integrate.quad(
            lambda r: c * c, 0.0, reach, weight="alg", wvar=(1.0 - spec.alpha, 0.0),
            epsabs=0.0, epsrel=1e-13,
        )
        total += weight * value
    return spec.levy_factor * total


def picard_report(spec: StableSpec, u, rho: float, rtol: float = PICARD_QUADRATURE_RTOL) -> PicardReport:
    """Closed form plus the quadrature verification flag."""
    value = picard_functional(spec, u, rho)
    quad_value = picard_quadrature(spec, u, rho)
    gap = abs(value - quad_value) / max(abs(value), 1e-300)
    if gap > rtol:
        logger.warning(f"Picard closed form {value:.12g} vs quadrature {quad_value:.12g}")
    return PicardReport(value, quad_value, gap, gap <= rtol)
