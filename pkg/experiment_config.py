"""
Experiment Configuration

Reads one experiment per INI file into frozen dataclasses.  Every problem
is reported as ConfigInvalid naming the section and key.

Example:

    [experiment]
    kind = phase-diagram
    base_seed = 7

    [process]
    alpha = 1.5
    measure = isotropic

    [drift]
    preset = tanaka
    beta = 0.8
"""

import configparser
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Any, Optional, Tuple

import numpy as np
import pandas as pd

from error_handlers import ConfigInvalid, LevyLabError
from lattice import Lattice
from nonlocal_calculus import ExtensionPolicy, GridFunction
from resolvent_solver import tanaka_drift
from stable_model import SpectralMeasure, StableSpec, axes_measure, isotropic_measure
from utils import parse_float_list, parse_vector_list

logger = logging.getLogger(__name__)

EXPERIMENT_KINDS = (
    "density-table",
    "resolvent",
    "uniqueness-ratio",
    "tanaka",
    "phase-diagram",
    "homeomorphism",
    "derivative-flow",
    "conjugacy",
)
MONTE_CARLO_KINDS = ("uniqueness-ratio", "tanaka", "phase-diagram", "homeomorphism", "derivative-flow", "conjugacy")
DRIFT_PRESETS = ("zero", "constant", "tanaka", "tabulated")
SOURCE_PRESETS = ("drift", "cos", "constant")
SMALL_JUMP_POLICIES = ("gaussian", "drop")
SOURCE_EXTENSIONS = ("callback", "periodic")

PHASE_ALPHA_RANGE = (0.4, 1.9)
MIN_PATHS = 100


@dataclass(frozen=True)
class ProcessConfig:
    alpha: float = 1.5
    dim: int = 1
    measure: str = "isotropic"
    n_directions: int = 64
    atoms: Tuple[Tuple[float, ...], ...] = ()
    atom_weights: Tuple[float, ...] = ()
    scale: float = 1.0


@dataclass(frozen=True)
class DriftConfig:
    preset: str = "zero"
    beta: float = 0.8
    k: Tuple[float, ...] = ()
    table: str = ""


@dataclass(frozen=True)
class NumericsConfig:
    lam: float = 10.0
    lambdas: Tuple[float, ...] = (2.0, 5.0, 10.0, 20.0, 50.0, 100.0)
    t: float = 1.0
    horizon: float = 1.0
    dt: float = 1e-2
    eps: float = 1e-1
    r: float = 0.5
    half_width: float = 8.0
    h: float = 0.05
    n_paths: int = 200
    p: float = 2.0
    x0: Tuple[float, ...] = (0.0,)
    policy: str = "gaussian"
    compensate_small: bool = True
    source: str = "drift"
    frequency: float = 1.0
    source_value: float = 1.0
    levels: Tuple[Tuple[float, float], ...] = ((1e-2, 1e-1), (5e-3, 5e-2), (2.5e-3, 2.5e-2))
    extension: str = "callback"


@dataclass(frozen=True)
class PhaseConfig:
    alphas: Tuple[float, ...] = (0.5, 1.5)
    betas: Tuple[float, ...] = (0.3, 0.8)
    separations: Tuple[float, ...] = (1e-2, 1e-3, 1e-4, 1e-5)
    center: float = 0.0


@dataclass(frozen=True)
class ProbeConfig:
    n_initial: int = 64
    spread: float = 1.0
    midpoint: float = 0.5


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: what to run, on which process, with which knobs."""
    kind: str
    base_seed: int = 0
    name: str = ""
    process: ProcessConfig = field(default_factory=ProcessConfig)
    drift: DriftConfig = field(default_factory=DriftConfig)
    numerics: NumericsConfig = field(default_factory=NumericsConfig)
    phase: PhaseConfig = field(default_factory=PhaseConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    source_path: str = ""

    @property
    def run_name(self) -> str:
        return self.name or self.kind

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, base_seed=int(seed))

    def with_kind(self, kind: str) -> "ExperimentConfig":
        if kind not in EXPERIMENT_KINDS:
            raise ConfigInvalid(f"unknown experiment kind '{kind}'", "experiment", "kind")
        return replace(self, kind=kind)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    # -- builders -------------------------------------------------------------

    def build_spec(self, alpha: Optional[float] = None) -> StableSpec:
        """StableSpec from the [process] section, optionally at another alpha."""
        proc = self.process
        try:
            if proc.measure == "isotropic":
                measure = isotropic_measure(proc.dim, proc.n_directions)
            elif proc.measure == "axes":
                measure = axes_measure(proc.dim)
            else:
                measure = SpectralMeasure(np.asarray(proc.atoms, dtype=float), np.asarray(proc.atom_weights))
            return StableSpec.from_measure(proc.alpha if alpha is None else alpha, measure, proc.scale)
        except LevyLabError as error:
            raise ConfigInvalid(error.message, "process", "measure")

    def build_lattice(self) -> Lattice:
        num = self.numerics
        if num.extension == "periodic":
            # whole half-periods of the source, spacing adjusted to fit
            half_period = np.pi / num.frequency if num.source == "cos" else num.half_width
            half = half_period * max(1, round(num.half_width / half_period))
            cells = max(4, round(half / num.h))
            return Lattice.cube(self.process.dim, half, half / cells)
        return Lattice.cube(self.process.dim, num.half_width, num.h)

    def build_drift(self, beta: Optional[float] = None):
        """Drift callable on (m, d) arrays returning (m, d)."""
        preset = self.drift
        d = self.process.dim
        if preset.preset == "zero":
            return lambda pts: np.zeros((len(pts), d))
        if preset.preset == "constant":
            k = np.asarray(preset.k, dtype=float)
            return lambda pts: np.broadcast_to(k, (len(pts), d)).copy()
        if preset.preset == "tanaka":
            base = tanaka_drift(preset.beta if beta is None else beta)
            return lambda pts: base(pts).reshape(-1, 1)
        table = self.build_drift_field()
        return lambda pts: np.asarray(table(pts), dtype=float).reshape(-1, d)

    def build_drift_field(self, box: Optional[Lattice] = None, beta: Optional[float] = None) -> GridFunction:
        """The drift as a grid function on the lattice (tabulated presets use their own grid)."""
        preset = self.drift
        if preset.preset == "tabulated":
            return load_drift_table(preset.table)
        box = box or self.build_lattice()
        if preset.preset == "tanaka":
            return GridFunction.from_callable(box, tanaka_drift(preset.beta if beta is None else beta),
                                              ExtensionPolicy.CALLBACK, name="tanaka")
        drift = self.build_drift()
        return GridFunction.from_callable(box, drift, ExtensionPolicy.CALLBACK, name=preset.preset)


def load_drift_table(path: str) -> GridFunction:
    """
    Read a one-dimensional drift table with columns x, b on a uniform grid.

    Raises:
        ConfigInvalid: if the file is missing or the grid is not uniform
    """
    if not os.path.exists(path):
        raise ConfigInvalid(f"drift table '{path}' not found", "drift", "table")
    frame = pd.read_csv(path)
    if not {"x", "b"} <= set(frame.columns):
        raise ConfigInvalid("drift table needs columns x and b", "drift", "table")
    x = frame["x"].to_numpy(dtype=float)
    steps = np.diff(x)
    if x.size < 4 or np.any(steps <= 0) or np.ptp(steps) > 1e-9 * steps.mean():
        raise ConfigInvalid("drift table grid must be uniform and increasing", "drift", "table")
    h = float(steps.mean())
    box = Lattice(np.array([0.5 * (x[0] + x[-1])]), np.array([0.5 * (x[-1] - x[0])]), h)
    if box.shape[0] != x.size:
        raise ConfigInvalid("drift table grid must be symmetric about its center", "drift", "table")
    return GridFunction(box, frame["b"].to_numpy(dtype=float), ExtensionPolicy.CONSTANT, name="table")


# ============================================================================
# PARSING
# ============================================================================

class _Reader:
    """Typed access to one configparser section with ConfigInvalid errors."""

    def __init__(self, parser: configparser.ConfigParser, section: str):
        self.section = section
        self.data = parser[section] if parser.has_section(section) else {}

    def _raw(self, key: str):
        return self.data.get(key) if self.data else None

    def text(self, key: str, default: str) -> str:
        value = self._raw(key)
        return default if value is None else value.strip()

    def real(self, key: str, default: float) -> float:
        value = self._raw(key)
        if value is None:
            return default
        try:
            return float(value)
        except ValueError:
            raise ConfigInvalid(f"expected a number, got '{value}'", self.section, key)

    def integer(self, key: str, default: int) -> int:
        value = self._raw(key)
        if value is None:
            return default
        try:
            return int(value)
        except ValueError:
            raise ConfigInvalid(f"expected an integer, got '{value}'", self.section, key)

    def flag(self, key: str, default: bool) -> bool:
        value = self._raw(key)
        if value is None:
            return default
        lowered = value.strip().lower()
        if lowered in ("1", "yes", "true", "on"):
            return True
        if lowered in ("0", "no", "false", "off"):
            return False
        raise ConfigInvalid(f"expected yes/no, got '{value}'", self.section, key)

    def reals(self, key: str, default: Tuple[float, ...]) -> Tuple[float, ...]:
        value = self._raw(key)
        if value is None:
            return default
        try:
            return tuple(parse_float_list(value))
        except ValueError:
            raise ConfigInvalid(f"expected a list of numbers, got '{value}'", self.section, key)

    def vectors(self, key: str, default) -> Tuple[Tuple[float, ...], ...]:
        value = self._raw(key)
        if value is None:
            return default
        try:
            return tuple(tuple(v) for v in parse_vector_list(value))
        except ValueError:
            raise ConfigInvalid(f"expected vectors 'a b; c d', got '{value}'", self.section, key)


def _require(condition: bool, message: str, section: str, key: str):
    if not condition:
        raise ConfigInvalid(message, section, key)


def _parse_measure(reader: _Reader) -> Tuple[str, int]:
    raw = reader.text("measure", "isotropic")
    if raw.startswith("isotropic-"):
        try:
            return "isotropic", int(raw.split("-", 1)[1])
        except ValueError:
            raise ConfigInvalid(f"bad isotropic direction count in '{raw}'", "process", "measure")
    _require(raw in ("isotropic", "axes", "custom"), f"unknown measure preset '{raw}'", "process", "measure")
    return raw, reader.integer("n_directions", 64)


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    """
    Parse INI text into a validated ExperimentConfig.

    Raises:
        ConfigInvalid: on the first invalid or out-of-range entry
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as error:
        raise ConfigInvalid(f"unreadable config: {error}")
    _require(parser.has_section("experiment"), "missing [experiment] section", "experiment", "kind")

    exp = _Reader(parser, "experiment")
    kind = exp.text("kind", "")
    _require(kind in EXPERIMENT_KINDS, f"unknown experiment kind '{kind}'", "experiment", "kind")
    base_seed = exp.integer("base_seed", 0)
    _require(0 <= base_seed < 2 ** 63, "base_seed must be a non-negative 63-bit integer", "experiment", "base_seed")

    proc = _Reader(parser, "process")
    measure, n_directions = _parse_measure(proc)
    process = ProcessConfig(
        alpha=proc.real("alpha", 1.5),
        dim=proc.integer("dim", 1),
        measure=measure,
        n_directions=n_directions,
        atoms=proc.vectors("atoms", ()),
        atom_weights=proc.reals("atom_weights", ()),
        scale=proc.real("scale", 1.0),
    )
    _require(0.0 < process.alpha < 2.0, "alpha must lie in (0, 2)", "process", "alpha")
    _require(process.dim >= 1, "dim must be >= 1", "process", "dim")
    _require(process.scale > 0, "scale must be positive", "process", "scale")
    if measure == "custom":
        _require(len(process.atoms) > 0, "custom measure needs atoms", "process", "atoms")
        _require(len(process.atoms) == len(process.atom_weights),
                 "one weight per atom is required", "process", "atom_weights")
        _require(all(len(a) == process.dim for a in process.atoms),
                 f"atoms must have {process.dim} coordinates", "process", "atoms")

    dr = _Reader(parser, "drift")
    drift = DriftConfig(
        preset=dr.text("preset", "zero"),
        beta=dr.real("beta", 0.8),
        k=dr.reals("k", ()),
        table=dr.text("table", ""),
    )
    _require(drift.preset in DRIFT_PRESETS, f"unknown drift preset '{drift.preset}'", "drift", "preset")
    _require(0.0 < drift.beta <= 1.0, "beta must lie in (0, 1]", "drift", "beta")
    if drift.preset == "tanaka":
        _require(process.dim == 1, "the tanaka drift is one-dimensional", "process", "dim")
    if drift.preset == "constant":
        _require(len(drift.k) == process.dim, f"k needs {process.dim} components", "drift", "k")
    if drift.preset == "tabulated":
        _require(process.dim == 1, "tabulated drifts are one-dimensional", "process", "dim")
        table = drift.table
        if table and not os.path.isabs(table) and source not in ("<string>", ""):
            table = os.path.join(os.path.dirname(os.path.abspath(source)), table)
        _require(bool(table), "tabulated drift needs a table path", "drift", "table")
        drift = replace(drift, table=table)

    num = _Reader(parser, "numerics")
    defaults = NumericsConfig()
    numerics = NumericsConfig(
        lam=num.real("lambda", defaults.lam),
        lambdas=num.reals("lambdas", defaults.lambdas),
        t=num.real("t", defaults.t),
        horizon=num.real("horizon", defaults.horizon),
        dt=num.real("dt", defaults.dt),
        eps=num.real("eps", defaults.eps),
        r=num.real("r", defaults.r),
        half_width=num.real("half_width", defaults.half_width),
        h=num.real("h", defaults.h),
        n_paths=num.integer("n_paths", defaults.n_paths),
        p=num.real("p", defaults.p),
        x0=num.reals("x0", tuple([0.0] * process.dim)),
        policy=num.text("policy", defaults.policy),
        compensate_small=num.flag("compensate_small", defaults.compensate_small),
        source=num.text("source", defaults.source),
        frequency=num.real("frequency", defaults.frequency),
        source_value=num.real("source_value", defaults.source_value),
        levels=tuple(tuple(v) for v in num.vectors("levels", defaults.levels)),
        extension=num.text("extension", defaults.extension),
    )
    _validate_numerics(numerics, process, kind)

    ph = _Reader(parser, "phase")
    phase = PhaseConfig(
        alphas=ph.reals("alphas", PhaseConfig.alphas),
        betas=ph.reals("betas", PhaseConfig.betas),
        separations=ph.reals("separations", PhaseConfig.separations),
        center=ph.real("center", 0.0),
    )
    if kind == "phase-diagram":
        _require(process.dim == 1, "phase diagrams are one-dimensional", "process", "dim")
        lo, hi = PHASE_ALPHA_RANGE
        _require(len(phase.alphas) > 0 and all(lo <= a <= hi for a in phase.alphas),
                 f"alphas must lie in [{lo}, {hi}]", "phase", "alphas")
        _require(len(phase.betas) > 0 and all(0.0 < b < 1.0 for b in phase.betas),
                 "betas must lie in (0, 1)", "phase", "betas")
    _require(len(phase.separations) >= 2 and all(s > 0 for s in phase.separations),
             "need at least two positive separations", "phase", "separations")

    pr = _Reader(parser, "probe")
    probe = ProbeConfig(
        n_initial=pr.integer("n_initial", 64),
        spread=pr.real("spread", 1.0),
        midpoint=pr.real("midpoint", 0.5),
    )
    _require(probe.n_initial >= 2, "n_initial must be >= 2", "probe", "n_initial")
    _require(probe.spread > 0, "spread must be positive", "probe", "spread")
    _require(0.0 < probe.midpoint < 1.0, "midpoint must lie in (0, 1)", "probe", "midpoint")
    if kind == "homeomorphism":
        _require(process.dim == 1, "the order-based probe is one-dimensional", "process", "dim")

    name = exp.text("name", "")
    config = ExperimentConfig(kind, base_seed, name, process, drift, numerics, phase, probe, source)
    logger.debug(f"parsed {kind} config from {source}")
    return config


def _validate_numerics(num: NumericsConfig, process: ProcessConfig, kind: str):
    s = "numerics"
    _require(num.lam > 0, "lambda must be positive", s, "lambda")
    _require(len(num.lambdas) > 0 and all(b > a for a, b in zip(num.lambdas, num.lambdas[1:]))
             and num.lambdas[0] > 0, "lambdas must be positive and increasing", s, "lambdas")
    _require(num.t > 0, "t must be positive", s, "t")
    _require(num.horizon > 0, "horizon must be positive", s, "horizon")
    _require(num.dt > 0, "dt must be positive", s, "dt")
    steps = num.horizon / num.dt
    _require(abs(steps - round(steps)) <= 1e-9 * steps, "dt must divide horizon", s, "dt")
    _require(0.0 < num.eps <= 1.0, "eps must lie in (0, 1]", s, "eps")
    _require(0.0 < num.r < 1.0, "r must lie in (0, 1)", s, "r")
    _require(num.h > 0 and num.half_width >= 2 * num.h, "need h > 0 and half_width >= 2h", s, "h")
    _require(num.p >= 1.0, "p must be >= 1", s, "p")
    _require(len(num.x0) == process.dim, f"x0 needs {process.dim} components", s, "x0")
    _require(num.policy in SMALL_JUMP_POLICIES, f"unknown small-jump policy '{num.policy}'", s, "policy")
    _require(num.source in SOURCE_PRESETS, f"unknown source preset '{num.source}'", s, "source")
    _require(num.frequency > 0, "frequency must be positive", s, "frequency")
    _require(num.extension in SOURCE_EXTENSIONS, f"unknown source extension '{num.extension}'", s, "extension")
    _require(num.extension == "callback" or num.source != "drift",
             "periodic extension needs a cos or constant source", s, "extension")
    _require(all(len(level) == 2 and level[0] > 0 and 0 < level[1] <= 1 for level in num.levels),
             "levels must be 'dt eps' pairs", s, "levels")
    if kind in MONTE_CARLO_KINDS:
        _require(num.n_paths >= MIN_PATHS, f"n_paths must be >= {MIN_PATHS}", s, "n_paths")
    if kind in ("derivative-flow", "conjugacy"):
        _require(num.eps <= num.r, "eps must not exceed r", s, "eps")
        _require(all(level[1] <= num.r for level in num.levels), "level eps must not exceed r", s, "levels")


def load_config(path: str) -> ExperimentConfig:
    """
    Read and validate an experiment file.

    Raises:
        ConfigInvalid: if the file is missing or invalid
    """
    if not os.path.exists(path):
        raise ConfigInvalid(f"config file '{path}' not found")
    with open(path, "r", encoding="utf-8") as handle:
        return parse_config(handle.read(), source=path)
