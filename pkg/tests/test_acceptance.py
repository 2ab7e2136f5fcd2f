"""
End-to-end checks of the numerical claims on small problems.

Marked slow: run with `pytest -m slow`.
"""

import math
import os

import numpy as np
import pytest

from density_engine import tabulate
from experiment_cli import phase_diagram, homeomorphism_probe, run
from experiment_config import load_config, parse_config
from lattice import Lattice
from nonlocal_calculus import ExtensionPolicy, GridFunction, apply_generator
from resolvent_solver import (
    GRADIENT_THRESHOLD,
    ResolventProblem,
    gradient_decay_scan,
    residual,
    solve_hoelder_drift,
    tanaka_drift,
)
from stable_model import characteristic_exponent

CONFIGS = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")

PHASE = """
[experiment]
kind = phase-diagram
base_seed = 6

[drift]
preset = tanaka

[numerics]
horizon = 1.0
dt = 0.01
eps = 0.1
n_paths = 200

[phase]
alphas = 0.5, 1.5
betas = 0.3, 0.8
separations = 1e-2, 1e-3, 1e-4, 1e-5
"""


@pytest.fixture
def tanaka_field(line_box):
    return GridFunction.from_callable(line_box, tanaka_drift(0.8), ExtensionPolicy.CALLBACK, name="tanaka")


@pytest.mark.slow
def test_cauchy_table_matches_closed_form(cauchy_spec, line_box):
    table = tabulate(cauchy_spec, 1.0, line_box)
    x = line_box.points()[:, 0]
    assert np.max(np.abs(table.values.reshape(-1) - 1.0 / (math.pi * (1.0 + x * x)))) < 1e-5


@pytest.mark.slow
def test_symbol_identity_on_the_plane(axes_spec_2d, rng):
    box = Lattice.cube(2, 2.0, 0.025)
    magnitudes = rng.uniform(0.5, 1.5, size=(20, 2))
    signs = rng.choice([-1.0, 1.0], size=(20, 2))
    for u in magnitudes * signs:
        f = GridFunction.from_callable(box, lambda pts, u=u: np.cos(pts @ u))
        value = apply_generator(axes_spec_2d, f, [0.0, 0.0])
        expected = -characteristic_exponent(axes_spec_2d, u)
        assert value == pytest.approx(expected, rel=1e-4)


@pytest.mark.slow
def test_tanaka_resolvent_residual(spec_15, tanaka_field):
    problem = ResolventProblem(spec_15, 10.0, tanaka_field, tanaka_field, 0.8)
    solution = solve_hoelder_drift(problem)
    assert solution.diagnostics["method"] == "picard"
    assert solution.diagnostics["max_principle_ok"]
    assert residual(solution, problem) <= 1e-2


@pytest.mark.slow
def test_gradient_decay(spec_15, tanaka_field):
    scan = gradient_decay_scan(spec_15, tanaka_field, tanaka_field, [2, 5, 10, 20, 50, 100], 0.8)
    assert scan.monotone
    assert scan.gradient_sups[-1] < GRADIENT_THRESHOLD
    assert scan.threshold_lambda <= 100
    assert scan.predicted_slope == pytest.approx(-1.3 / 2.3)
    assert scan.fitted_slope < 0.0
    low, high = scan.slope_band
    assert scan.slope_ok == (low <= scan.fitted_slope <= high)


@pytest.mark.slow
def test_phase_diagram_extremes():
    config = load_config(os.path.join(CONFIGS, "phase_diagram.ini"))
    assert config.numerics.n_paths == 1000
    cells, sweeps = phase_diagram(config, workers=4)
    labels = {(row.alpha, row.beta): row.classification for row in cells.itertuples()}
    assert labels[(1.5, 0.8)] == "STABLE"
    assert labels[(0.5, 0.3)] == "DIVERGING"
    assert labels[(0.5, 0.8)] == "INCONCLUSIVE"
    assert labels[(1.0, 0.3)] == "INCONCLUSIVE"
    assert len(sweeps) == 6 * 4


@pytest.mark.slow
def test_phase_diagram_ignores_worker_count():
    config = parse_config(PHASE.replace("alphas = 0.5, 1.5", "alphas = 1.5").replace("n_paths = 200", "n_paths = 100"))
    serial, _ = phase_diagram(config, workers=1)
    threaded, _ = phase_diagram(config, workers=3)
    assert serial.equals(threaded)


@pytest.mark.slow
def test_flow_keeps_order():
    config = load_config(os.path.join(CONFIGS, "homeomorphism.ini"))
    report = homeomorphism_probe(config, workers=4)
    assert (report.n_initial, report.n_paths) == (64, 1000)
    assert report.violations == 0
    assert report.composition_residual == 0.0


@pytest.mark.slow
@pytest.mark.integration
def test_tanaka_resolvent_run(tmp_path):
    manifest = run(load_config(os.path.join(CONFIGS, "resolvent_tanaka.ini")), str(tmp_path))
    assert manifest.error is None
    assert manifest.invariants["decay_monotone"]
    assert manifest.invariants["decay_slope"] == manifest.summary["decay"]["slope_ok"]
    assert ("decay_slope" in manifest.violations()) == (not manifest.summary["decay"]["slope_ok"])
    assert os.path.exists(os.path.join(manifest.output_dir, "gradient_decay.csv"))


@pytest.mark.slow
@pytest.mark.integration
@pytest.mark.parametrize("name", ["derivative_flow.ini", "conjugacy.ini"])
def test_transform_runs_complete(tmp_path, name):
    config = load_config(os.path.join(CONFIGS, name))
    manifest = run(config, str(tmp_path), threads=4)
    assert manifest.error is None
    assert manifest.summary["lambda"] >= config.numerics.lam
    assert manifest.files
