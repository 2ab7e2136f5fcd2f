"""
SDE Lab

Levy path sampling, Euler integration of dX = b(X) dt + dL with common
noise, the drift-removing transform psi(x) = x + u(x), derivative flows and
Monte Carlo Lipschitz ratios.
"""

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, Any, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from error_handlers import (
    BoxExceeded,
    ContractionViolated,
    DegenerateInput,
    InvalidParameter,
)
from nonlocal_calculus import ExtensionPolicy, GridFunction, large_jump_integral
from resolvent_solver import ResolventSolution
from stable_model import StableSpec, levy_tail_mass, small_jump_covariance
from utils import derive_seed, ensure_directory, fixed_order_mean

logger = logging.getLogger(__name__)

SMALL_JUMP_POLICIES = ("gaussian", "drop")
GRID_TOL = 1e-9

CONTRACTION_LIMIT = 1.0 / 3.0
INVERSE_TOL = 1e-10
INVERSE_MAX_STEPS = 60
INJECTIVITY_PAIRS = 2000
INJECTIVITY_SEED = 4242

MIN_PATHS = 100
FD_DELTA = 1e-4


# ============================================================================
# LEVY PATHS
# ============================================================================

@dataclass(frozen=True, eq=False)
class LevyPath:
    """
    One sample of L on [0, T]: small-jump increments per grid step plus the
    jumps larger than eps at their exact times.
    """
    spec: StableSpec
    horizon: float
    dt: float
    eps: float
    increments: np.ndarray
    jump_times: np.ndarray
    jump_sizes: np.ndarray
    seed: int
    policy: str = "gaussian"

    @property
    def n_steps(self) -> int:
        return int(self.increments.shape[0])

    @property
    def n_jumps(self) -> int:
        return int(self.jump_times.shape[0])

    @property
    def dim(self) -> int:
        return self.spec.dim

    def grid(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def terminal(self) -> np.ndarray:
        """L_T as the sum of all increments and jumps."""
        return self.increments.sum(axis=0) + self.jump_sizes.sum(axis=0)

    def events(self, t_start: float = 0.0, t_end: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
        """
        Times and sizes of every kick in (t_start, t_end], in order.

        Jumps come at their own times; the small-jump increment of a grid
        step is applied at the step's right end, after any jump at the same
        instant.
        """
        t_end = self.horizon if t_end is None else t_end
        grid_times = self.grid()[1:]
        times = np.concatenate([self.jump_times, grid_times])
        sizes = np.concatenate([self.jump_sizes, self.increments])
        rank = np.concatenate([np.zeros(self.n_jumps), np.ones(self.n_steps)])
        order = np.lexsort((rank, times))
        times, sizes = times[order], sizes[order]
        keep = (times > t_start) & (times <= t_end + GRID_TOL * self.dt)
        return times[keep], sizes[keep]

    def trajectory(self) -> "Trajectory":
        """L_t at time zero and after every kick."""
        times, sizes = self.events()
        states = np.vstack([np.zeros((1, self.dim)), np.cumsum(sizes, axis=0)])
        return Trajectory(np.concatenate([[0.0], times]), states)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "horizon": self.horizon,
            "dt": self.dt,
            "eps": self.eps,
            "seed": self.seed,
            "policy": self.policy,
            "n_jumps": self.n_jumps,
            "terminal": self.terminal().tolist(),
        }


def sample_levy_path(
    spec: StableSpec,
    T: float,
    dt: float,
    eps: float,
    seed: int,
    policy: str = "gaussian",
) -> LevyPath:
    """
    Sample L on [0, T] by the Levy-Ito decomposition truncated at eps.

    Jumps above eps form a compound Poisson process with intensity
    nu(|z| > eps): direction xi_i with probability w_i / sum(w), radius
    eps U^(-1/alpha).  Below eps the compensator vanishes by symmetry; the
    small jumps are either dropped or replaced by a Gaussian increment with
    the covariance of the truncated measure.

    Args:
        spec: process model
        T: horizon
        dt: grid step, must divide T
        eps: small-jump threshold in (0, 1]
        seed: 64-bit seed
        policy: "gaussian" or "drop"

    Returns:
        LevyPath, bit-identical for identical arguments
    """
    if not 0.0 < eps <= 1.0:
        raise InvalidParameter(f"eps must lie in (0, 1], got {eps}")
    if not (T > 0 and dt > 0):
        raise InvalidParameter("T and dt must be positive")
    n_steps = int(round(T / dt))
    if n_steps < 1 or abs(n_steps * dt - T) > GRID_TOL * T:
        raise InvalidParameter(f"dt={dt} does not divide T={T}")
    if policy not in SMALL_JUMP_POLICIES:
        raise InvalidParameter(f"unknown small-jump policy '{policy}'")

    rng = np.random.default_rng(int(seed))
    d = spec.dim
    intensity = levy_tail_mass(spec, eps)
    count = int(rng.poisson(intensity * T))
    times = np.sort(T - T * rng.random(count))
    measure = spec.measure
    atoms = rng.choice(measure.n_atoms, size=count, p=measure.weights / measure.total_weight)
    radii = eps * (1.0 - rng.random(count)) ** (-1.0 / spec.alpha)
    sizes = radii[:, None] * measure.directions[atoms]

    if policy == "gaussian":
        cov = small_jump_covariance(spec, eps) * dt
        increments = rng.multivariate_normal(np.zeros(d), cov, size=n_steps, method="cholesky")
    else:
        increments = np.zeros((n_steps, d))

    for array in (times, sizes, increments):
        array.setflags(write=False)
    return LevyPath(spec, float(T), float(dt), float(eps), increments, times, sizes, int(seed), policy)


# ============================================================================
# TRAJECTORIES
# ============================================================================

@dataclass(frozen=True, eq=False)
class Trajectory:
    """States at time zero and after every kick; shape (K,) and (K, d) or (K, m, d)."""
    times: np.ndarray
    states: np.ndarray

    def final(self) -> np.ndarray:
        return self.states[-1]

    def at(self, t: float) -> np.ndarray:
        """State at time t (right-continuous)."""
        index = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.states[max(index, 0)]

    def sup_distance(self, other: "Trajectory") -> float:
        if self.times.shape != other.times.shape:
            raise InvalidParameter("trajectories live on different event grids")
        gap = self.states - other.states
        return float(np.max(np.linalg.norm(gap.reshape(gap.shape[0], -1), axis=1)))

    def to_frame(self, path_id: int = 0) -> pd.DataFrame:
        states = self.states.reshape(self.states.shape[0], -1)
        data = {"path_id": np.full(self.times.shape[0], path_id), "time": self.times}
        for i in range(states.shape[1]):
            data[f"x{i + 1}"] = states[:, i]
        return pd.DataFrame(data)


def _as_field(func: Callable, dim: int) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap a drift so it maps (m, d) to (m, d)."""
    def wrapped(points):
        pts = np.asarray(points, dtype=float).reshape(-1, dim)
        return np.asarray(func(pts), dtype=float).reshape(pts.shape)
    return wrapped


def _walk(path: LevyPath, advance, kick, state, snapshot, t_start: float = 0.0,
          t_end: Optional[float] = None):
    """
    Event-driven Euler loop: advance(state, t, h) between kicks,
    kick(state, z, t) at every jump and grid increment.
    """
    times, sizes = path.events(t_start, t_end)
    current = t_start
    record_t = [t_start]
    record_x = [snapshot(state)]
    for t, z in zip(times, sizes):
        if t > current:
            state = advance(state, current, t - current)
            current = t
        state = kick(state, z, t)
        record_t.append(t)
        record_x.append(snapshot(state))
    return np.asarray(record_t), record_x


def euler_integrate(
    b: Callable[[np.ndarray], np.ndarray],
    x0,
    path: LevyPath,
    t_start: float = 0.0,
    t_end: Optional[float] = None,
) -> Trajectory:
    """
    X_t = x0 + int b(X_s) ds + L_t - L_(t_start) by Euler steps split at jump times.

    Several initial points may be passed as an (m, d) array; they share the
    path.  The scheme is exact for constant drift.
    """
    d = path.dim
    drift = _as_field(b, d)
    start = np.asarray(x0, dtype=float)
    many = start.ndim == 2
    state = start.reshape(-1, d).copy()

    def advance(x, t, h):
        return x + drift(x) * h

    def kick(x, z, t):
        return x + z

    times, states = _walk(path, advance, kick, state, lambda x: x.copy(), t_start, t_end)
    states = np.stack(states)
    return Trajectory(times, states if many else states[:, 0, :])


# ============================================================================
# DRIFT-REMOVING TRANSFORM
# ============================================================================

class TanakaTransform:
    """
    psi(x) = x + u(x) for u solving lambda u - L u - b . Du = b.

    The transformed drift b~(y) = lambda u(x) - int_{|z|>r} [u(x+z) - u(x)] nu(dz),
    x = psi^{-1}(y), is tabulated on the lattice of u.  Jumps z of the
    original noise act on y as y -> psi(psi^{-1}(y) + z).
    """

    def __init__(self, spec: StableSpec, lam: float, u: GridFunction, r: float,
                 contraction: float, inverse_bound: float):
        self.spec = spec
        self.lam = float(lam)
        self.u = u
        self.r = float(r)
        self.contraction = float(contraction)
        self.inverse_bound = float(inverse_bound)
        self._drifts: Dict[float, GridFunction] = {}
        self.drift_tilde = self.drift_for(self.r)

    @property
    def box(self):
        return self.u.box

    @property
    def dim(self) -> int:
        return self.spec.dim

    def u_at(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, self.dim)
        return np.asarray(self.u(pts), dtype=float).reshape(pts.shape)

    def du_at(self, points) -> np.ndarray:
        """Jacobian of u, shape (m, d, d)."""
        pts = np.asarray(points, dtype=float).reshape(-1, self.dim)
        return np.asarray(self.u.gradient(pts), dtype=float).reshape(-1, self.dim, self.dim)

    def psi(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, self.dim)
        return pts + self.u_at(pts)

    def inverse(self, points) -> np.ndarray:
        """
        psi^{-1} by x <- y - u(x), a contraction with ratio ||Du||_0.

        Raises:
            ContractionViolated: if INVERSE_MAX_STEPS steps do not reach INVERSE_TOL
        """
        y = np.asarray(points, dtype=float).reshape(-1, self.dim)
        x = y - self.u_at(y)
        for _ in range(INVERSE_MAX_STEPS):
            nxt = y - self.u_at(x)
            change = float(np.max(np.abs(nxt - x))) if x.size else 0.0
            x = nxt
            if change < INVERSE_TOL:
                return x
        raise ContractionViolated(
            f"inverse iteration did not converge in {INVERSE_MAX_STEPS} steps (last change {change:.3e})",
            bound=self.contraction,
        )

    def inverse_jacobian(self, points) -> np.ndarray:
        """D psi^{-1}(y) = [I + Du(psi^{-1}(y))]^{-1}."""
        x = self.inverse(points)
        eye = np.eye(self.dim)
        return np.linalg.inv(eye[None] + self.du_at(x))

    def drift_for(self, radius: float) -> GridFunction:
        """b~ with the large-jump integral taken over |z| > radius, tabulated on the lattice."""
        key = float(radius)
        cached = self._drifts.get(key)
        if cached is not None:
            return cached
        y = self.box.points()
        x = self.inverse(y)
        jumps = np.asarray(large_jump_integral(self.spec, self.u, x, key), dtype=float).reshape(x.shape)
        values = self.lam * self.u_at(x) - jumps
        shape = self.box.shape + ((self.dim,) if self.u.is_vector else ())
        table = GridFunction(self.box, values.reshape(shape), ExtensionPolicy.CONSTANT, name=f"b~(r={key:g})")
        self._drifts[key] = table
        return table

    def jump(self, y, z) -> np.ndarray:
        """y + g(y, z) = psi(psi^{-1}(y) + z)."""
        x = self.inverse(y)
        return self.psi(x + np.asarray(z, dtype=float))

    def jump_coefficient(self, y, z) -> np.ndarray:
        """g(y, z) = u(psi^{-1}(y) + z) + z - u(psi^{-1}(y))."""
        y = np.asarray(y, dtype=float).reshape(-1, self.dim)
        return self.jump(y, z) - y

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lambda": self.lam,
            "r": self.r,
            "contraction": self.contraction,
            "inverse_bound": self.inverse_bound,
            "box": self.box.to_dict(),
        }


def build_transform(solution: ResolventSolution, spec: StableSpec, lam: float, r: float) -> TanakaTransform:
    """
    Transform from the solution of lambda u - L u - b . Du = b.

    Raises:
        InvalidParameter: if r is not in (0, 1)
        ContractionViolated: if ||Du||_0 >= 1/3 or psi fails the injectivity scan
    """
    if not 0.0 < r < 1.0:
        raise InvalidParameter(f"small-jump radius r must lie in (0, 1), got {r}")
    u = solution.u
    if u.is_vector and u.arity != spec.dim:
        raise InvalidParameter(f"u must be R^{spec.dim}-valued")
    if not u.is_vector and spec.dim != 1:
        raise InvalidParameter("a scalar u only defines a transform in one dimension")

    box = u.box
    pts = box.points()
    jac = np.asarray(u.gradient(pts), dtype=float).reshape(-1, spec.dim, spec.dim)
    contraction = max(solution.gradient_sup(), float(np.max(np.linalg.norm(jac, axis=(1, 2)))))
    if contraction >= CONTRACTION_LIMIT:
        raise ContractionViolated(
            f"||Du||_0 = {contraction:.4f} >= 1/3; increase lambda (see the gradient decay scan)",
            bound=contraction,
        )

    inverse_norms = np.linalg.norm(np.linalg.inv(np.eye(spec.dim)[None] + jac), ord=2, axis=(1, 2))
    inverse_bound = float(np.max(inverse_norms))

    rng = np.random.default_rng(INJECTIVITY_SEED)
    n_pairs = min(INJECTIVITY_PAIRS, box.size * (box.size - 1) // 2)
    i = rng.integers(0, box.size, n_pairs)
    j = rng.integers(0, box.size, n_pairs)
    distinct = i != j
    vals = np.asarray(u(pts), dtype=float).reshape(pts.shape)
    image = pts + vals
    near = np.linalg.norm(pts[i[distinct]] - pts[j[distinct]], axis=1)
    far = np.linalg.norm(image[i[distinct]] - image[j[distinct]], axis=1)
    if np.any(far < (1.0 - contraction) * near * (1.0 - 1e-9)):
        raise ContractionViolated("psi is not injective on the lattice sample", bound=contraction)

    transform = TanakaTransform(spec, lam, u, r, contraction, inverse_bound)
    logger.info(f"transform built: lambda={lam} r={r} c_lambda={contraction:.4f}")
    return transform


def _check_inside(transform: TanakaTransform, y: np.ndarray, t: float):
    if not np.all(transform.box.contains(y)):
        raise BoxExceeded(f"transformed state left the lattice box at t={t:.6f}", time=float(t))


def integrate_transformed(
    transform: TanakaTransform,
    y0,
    path: LevyPath,
    compensate_small: bool = True,
) -> Trajectory:
    """
    Y_t = y0 + int b~(Y_s) ds + sum of jumps g(Y_-, z).

    With compensate_small the drift also carries the compensator of the
    jumps with eps < |z| <= r, i.e. the large-jump integral is taken over
    |z| > eps.

    Raises:
        InvalidParameter: if the path's eps exceeds r
        BoxExceeded: if Y leaves the lattice box
    """
    if path.eps > transform.r:
        raise InvalidParameter(f"path eps={path.eps} exceeds the transform radius r={transform.r}")
    d = transform.dim
    table = transform.drift_for(path.eps if compensate_small else transform.r)
    drift = _as_field(table, d)
    start = np.asarray(y0, dtype=float)
    many = start.ndim == 2
    state = start.reshape(-1, d).copy()
    _check_inside(transform, state, 0.0)

    def advance(y, t, h):
        out = y + drift(y) * h
        _check_inside(transform, out, t + h)
        return out

    def kick(y, z, t):
        out = transform.jump(y, z)
        _check_inside(transform, out, t)
        return out

    times, states = _walk(path, advance, kick, state, lambda y: y.copy())
    states = np.stack(states)
    return Trajectory(times, states if many else states[:, 0, :])


@dataclass(frozen=True, eq=False)
class MatrixTrajectory:
    """H_t at time zero and after every kick, shape (K, d, d)."""
    times: np.ndarray
    matrices: np.ndarray

    def final(self) -> np.ndarray:
        return self.matrices[-1]


def derivative_flow(
    transform: TanakaTransform,
    path: LevyPath,
    y0,
    compensate_small: bool = True,
) -> MatrixTrajectory:
    """
    H = DY/dy along the transformed Euler scheme.

    Drift steps multiply by I + Db~(Y) h; a kick z multiplies by
    I + [Du(x + z) - Du(x)] D psi^{-1}(y), x = psi^{-1}(y).

    Raises:
        BoxExceeded: if Y leaves the lattice box
    """
    d = transform.dim
    table = transform.drift_for(path.eps if compensate_small else transform.r)
    eye = np.eye(d)
    y_start = np.asarray(y0, dtype=float).reshape(1, d)
    _check_inside(transform, y_start, 0.0)

    def advance(state, t, h):
        y, H = state
        grad = np.asarray(table.gradient(y), dtype=float).reshape(d, d)
        y_next = y + np.asarray(table(y), dtype=float).reshape(1, d) * h
        _check_inside(transform, y_next, t + h)
        return y_next, (eye + grad * h) @ H

    def kick(state, z, t):
        y, H = state
        x = transform.inverse(y)
        inv = np.linalg.inv(eye + transform.du_at(x)[0])
        shifted = x + z
        factor = eye + (transform.du_at(shifted)[0] - transform.du_at(x)[0]) @ inv
        y_next = transform.psi(shifted)
        _check_inside(transform, y_next, t)
        return y_next, factor @ H

    times, matrices = _walk(path, advance, kick, (y_start, eye.copy()), lambda s: s[1].copy())
    return MatrixTrajectory(times, np.stack(matrices))


def finite_difference_flow(
    transform: TanakaTransform,
    path: LevyPath,
    y0,
    delta: float = FD_DELTA,
    compensate_small: bool = True,
) -> np.ndarray:
    """Central differences (Y_T^{y+delta e_k} - Y_T^{y-delta e_k}) / 2 delta on one path."""
    d = transform.dim
    y = np.asarray(y0, dtype=float).reshape(d)
    starts = []
    for k in range(d):
        e = np.zeros(d)
        e[k] = delta
        starts.extend([y + e, y - e])
    final = integrate_transformed(transform, np.vstack(starts), path, compensate_small).final()
    columns = [(final[2 * k] - final[2 * k + 1]) / (2.0 * delta) for k in range(d)]
    return np.stack(columns, axis=1)


def conjugacy_error(
    transform: TanakaTransform,
    b: Callable[[np.ndarray], np.ndarray],
    x0,
    path: LevyPath,
    compensate_small: bool = True,
) -> float:
    """sup_t |psi(X_t^x) - Y_t^{psi(x)}| on a shared path."""
    x_traj = euler_integrate(b, x0, path)
    y0 = transform.psi(np.asarray(x0, dtype=float).reshape(1, -1))[0]
    y_traj = integrate_transformed(transform, y0, path, compensate_small)
    mapped = transform.psi(x_traj.states.reshape(-1, transform.dim))
    return float(np.max(np.linalg.norm(mapped - y_traj.states.reshape(-1, transform.dim), axis=1)))


# ============================================================================
# ENSEMBLES AND LIPSCHITZ RATIOS
# ============================================================================

@dataclass(frozen=True, eq=False)
class FlowEnsemble:
    """
    Trajectories of several initial points on several shared paths.

    states has shape (paths, points, grid times, d); trajectory (i, x) and
    (i, y) are driven by the same path i.
    """
    paths: List[LevyPath]
    initial_points: np.ndarray
    times: np.ndarray
    states: np.ndarray

    def trajectory(self, path_index: int, point_index: int) -> Trajectory:
        return Trajectory(self.times, self.states[path_index, point_index])

    def summary(self) -> Dict[str, Any]:
        final = self.states[:, :, -1, :]
        return {
            "n_paths": len(self.paths),
            "n_points": int(self.initial_points.shape[0]),
            "horizon": float(self.times[-1]),
            "seeds": [p.seed for p in self.paths],
            "mean_final": final.mean(axis=0).tolist(),
        }

    def to_frame(self) -> pd.DataFrame:
        frames = []
        for i in range(self.states.shape[0]):
            for j in range(self.states.shape[1]):
                frame = self.trajectory(i, j).to_frame(path_id=i)
                frame.insert(1, "point_id", j)
                frames.append(frame)
        return pd.concat(frames, ignore_index=True)


def _on_grid(trajectory: Trajectory, grid: np.ndarray) -> np.ndarray:
    """States at the grid times (last event at or before each time)."""
    index = np.searchsorted(trajectory.times, grid + GRID_TOL * (grid[1] - grid[0]), side="right") - 1
    return trajectory.states[np.maximum(index, 0)]


def integrate_ensemble(
    b: Callable[[np.ndarray], np.ndarray],
    initial_points,
    paths: Sequence[LevyPath],
    workers: int = 1,
) -> FlowEnsemble:
    """Integrate every initial point on every path; results in path order."""
    if not paths:
        raise InvalidParameter("ensemble needs at least one path")
    grid = paths[0].grid()
    if any(p.n_steps != paths[0].n_steps or p.dt != paths[0].dt for p in paths):
        raise InvalidParameter("ensemble paths must share one time grid")
    points = np.atleast_2d(np.asarray(initial_points, dtype=float))

    def run(path):
        return _on_grid(euler_integrate(b, points, path), grid)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(run, paths))
    states = np.stack([np.transpose(r, (1, 0, 2)) for r in results])
    return FlowEnsemble(list(paths), points, grid, states)


@dataclass(frozen=True)
class LipschitzEstimate:
    separation: float
    estimate: float
    standard_error: float

    def to_dict(self) -> Dict[str, Any]:
        return {"separation": self.separation, "estimate": self.estimate, "standard_error": self.standard_error}


def _path_seed(base_seed: int, index: int, label: str) -> int:
    return derive_seed(base_seed, label, index)


def lipschitz_sweep(
    spec: StableSpec,
    b: Callable[[np.ndarray], np.ndarray],
    x,
    separations: Sequence[float],
    p: float,
    T: float,
    n_paths: int,
    dt: float,
    eps: float,
    base_seed: int,
    direction=None,
    policy: str = "gaussian",
    workers: int = 1,
    label: str = "lipschitz",
    symmetric: bool = False,
) -> List[LipschitzEstimate]:
    """
    E[sup_t |X^x_t - X^y_t|^p] / |x - y|^p for y = x + s e over several s,
    all on the same n_paths paths.

    With symmetric=True each pair is split around x instead: x - s e / 2
    against x + s e / 2.
    """
    if p < 1:
        raise InvalidParameter(f"p must be >= 1, got {p}")
    if n_paths < MIN_PATHS:
        raise InvalidParameter(f"n_paths must be >= {MIN_PATHS}, got {n_paths}")
    seps = [float(s) for s in separations]
    if any(s <= 0 for s in seps):
        raise DegenerateInput("separations must be positive")
    d = spec.dim
    start = np.asarray(x, dtype=float).reshape(d)
    e = np.zeros(d)
    e[0] = 1.0
    if direction is not None:
        e = np.asarray(direction, dtype=float).reshape(d)
        e = e / np.linalg.norm(e)
    if symmetric:
        lower = np.vstack([start - 0.5 * s * e for s in seps])
        upper = np.vstack([start + 0.5 * s * e for s in seps])
    else:
        lower = np.vstack([start for _ in seps])
        upper = np.vstack([start + s * e for s in seps])
    actual = np.linalg.norm(upper - lower, axis=1)
    if np.any(actual == 0):
        raise DegenerateInput("x and y coincide in floating point")
    points = np.vstack([lower, upper])
    n = len(seps)

    def run(index):
        path = sample_levy_path(spec, T, dt, eps, _path_seed(base_seed, index, label), policy)
        traj = euler_integrate(b, points, path)
        gaps = np.linalg.norm(traj.states[:, n:, :] - traj.states[:, :n, :], axis=2)
        return (gaps.max(axis=0) / actual) ** p

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        samples = np.stack(list(pool.map(run, range(n_paths))))

    estimates = []
    for k, s in enumerate(seps):
        column = samples[:, k]
        mean = fixed_order_mean(column)
        stderr = float(np.std(column, ddof=1) / math.sqrt(n_paths))
        estimates.append(LipschitzEstimate(s, mean, stderr))
    return estimates


def lipschitz_ratio(
    spec: StableSpec,
    b: Callable[[np.ndarray], np.ndarray],
    x,
    y,
    p: float,
    T: float,
    n_paths: int,
    dt: float,
    eps: float,
    base_seed: int,
    policy: str = "gaussian",
    workers: int = 1,
) -> Tuple[float, float]:
    """
    Monte Carlo E[sup_(s<=T) |X^x_s - X^y_s|^p] / |x - y|^p on common noise.

    Returns:
        (estimate, standard error)

    Raises:
        DegenerateInput: if x == y
    """
    start = np.asarray(x, dtype=float).reshape(spec.dim)
    other = np.asarray(y, dtype=float).reshape(spec.dim)
    gap = other - start
    distance = float(np.linalg.norm(gap))
    if distance == 0.0:
        raise DegenerateInput("lipschitz ratio needs x != y")
    result = lipschitz_sweep(spec, b, start, [distance], p, T, n_paths, dt, eps, base_seed,
                             direction=gap, policy=policy, workers=workers)[0]
    return result.estimate, result.standard_error


# ============================================================================
# EXPORT
# ============================================================================

def export_paths(paths: Sequence[LevyPath], path: str) -> str:
    """CSV of L_t per path: path_id, time, x1.."""
    frames = [p.trajectory().to_frame(path_id=i) for i, p in enumerate(paths)]
    ensure_directory(os.path.dirname(path) or ".")
    pd.concat(frames, ignore_index=True).to_csv(path, index=False, float_format="%.12e")
    return path


def export_trajectories(trajectories: Sequence[Trajectory], path: str) -> str:
    frames = [t.to_frame(path_id=i) for i, t in enumerate(trajectories)]
    ensure_directory(os.path.dirname(path) or ".")
    pd.concat(frames, ignore_index=True).to_csv(path, index=False, float_format="%.12e")
    return path


def export_ensemble(ensemble: FlowEnsemble, directory: str, stem: str = "ensemble") -> Dict[str, str]:
    ensure_directory(directory)
    table = os.path.join(directory, f"{stem}.csv")
    summary = os.path.join(directory, f"{stem}.json")
    ensemble.to_frame().to_csv(table, index=False, float_format="%.12e")
    with open(summary, "w") as handle:
        handle.write(json.dumps(ensemble.summary(), sort_keys=True, indent=2))
    logger.info(f"wrote ensemble {table}")
    return {"table": table, "summary": summary}
