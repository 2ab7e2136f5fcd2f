"""
tests/unit/test_resolvent_solver.py

Unit tests for the resolvent solver:
- Time rule and quadrature budget
- Closed forms for constant and Fourier-mode sources
- Maximum principle, residual and resolvent identity
- Regime checks for Hoelder drifts
"""

import json
import math
import os
import shutil
import sys
import tempfile
import unittest

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(__file__))))

from error_handlers import InvalidParameter, QuadratureBudgetExceeded, UnsupportedRegime
from lattice import Lattice
from nonlocal_calculus import ExtensionPolicy, GridFunction
from resolvent_solver import (
    DecayScan,
    ResolventProblem,
    SolverSettings,
    build_time_rule,
    export_solution,
    gradient_decay_scan,
    residual,
    resolvent_identity_check,
    schauder_report,
    solve_constant_drift,
    solve_hoelder_drift,
    tanaka_drift,
)
from stable_model import StableSpec, characteristic_exponent, isotropic_measure


def spec_for(alpha):
    return StableSpec.from_measure(alpha, isotropic_measure(1))


def cosine_source(box):
    return GridFunction.from_callable(
        box,
        lambda pts: np.cos(pts[:, 0]),
        ExtensionPolicy.CALLBACK,
        derivative=lambda pts: -np.sin(pts[:, 0]),
        name="cos",
    )


class TestTimeRule(unittest.TestCase):

    def test_rule_integrates_constants(self):
        rule = build_time_rule(spec_for(1.5), 2.0, 0.05)
        self.assertAlmostEqual(rule.weights.sum() + rule.head_weight, 0.5, places=12)
        self.assertGreater(rule.t_max, rule.t_min)

    def test_budget(self):
        settings = SolverSettings(max_time_nodes=5)
        with self.assertRaises(QuadratureBudgetExceeded):
            build_time_rule(spec_for(1.5), 2.0, 0.05, settings=settings)

    def test_refined_settings(self):
        settings = SolverSettings()
        self.assertEqual(settings.refined().time_order, 2 * settings.time_order)


class TestResolventProblem(unittest.TestCase):

    def setUp(self):
        self.box = Lattice.cube(1, 2.0, 0.1)

    def test_lambda_must_be_positive(self):
        with self.assertRaises(InvalidParameter):
            ResolventProblem(spec_for(1.5), 0.0, GridFunction.constant(self.box, 1.0))

    def test_no_solvability_below_one(self):
        field = GridFunction.from_callable(self.box, tanaka_drift(0.3))
        with self.assertRaises(UnsupportedRegime):
            ResolventProblem(spec_for(0.6), 1.0, field, field, 0.3)

    def test_hoelder_drift_needs_alpha_one(self):
        field = GridFunction.from_callable(self.box, tanaka_drift(0.5))
        problem = ResolventProblem(spec_for(0.8), 1.0, field, field, 0.5)
        with self.assertRaises(UnsupportedRegime):
            solve_hoelder_drift(problem)

    def test_effective_beta_stays_below_two(self):
        problem = ResolventProblem(spec_for(1.5), 1.0, GridFunction.constant(self.box, 1.0), None, 1.0)
        self.assertAlmostEqual(problem.effective_beta, 0.45)

    def test_tanaka_drift_is_capped(self):
        drift = tanaka_drift(0.5)
        np.testing.assert_allclose(drift(np.array([[-4.0], [0.25], [0.0]])), [-1.0, 0.5, 0.0])


class TestClosedForms(unittest.TestCase):

    def test_constant_source(self):
        box = Lattice.cube(1, 3.0, 0.1)
        problem = ResolventProblem(spec_for(1.5), 2.0, GridFunction.constant(box, 3.0))
        solution = solve_constant_drift(problem)
        np.testing.assert_allclose(solution.u.values, 1.5, atol=1e-8)
        self.assertLess(solution.gradient_sup(), 1e-8)

    def test_fourier_mode(self):
        spec = spec_for(1.5)
        box = Lattice.cube(1, 6.0, 0.05)
        problem = ResolventProblem(spec, 2.0, cosine_source(box))
        solution = solve_constant_drift(problem)
        expected = np.cos(box.points()[:, 0]) / (2.0 + characteristic_exponent(spec, [1.0]))
        self.assertLess(np.max(np.abs(solution.u.values - expected)), 1e-4)
        self.assertTrue(solution.diagnostics["max_principle_ok"])

    def test_periodic_mode_residual(self):
        spec = spec_for(1.5)
        box = Lattice.cube(1, math.pi, math.pi / 60)
        g = GridFunction.from_callable(
            box,
            lambda pts: np.cos(pts[:, 0]),
            ExtensionPolicy.PERIODIC,
            derivative=lambda pts: -np.sin(pts[:, 0]),
        )
        problem = ResolventProblem(spec, 2.0, g)
        solution = solve_constant_drift(problem)
        self.assertIs(solution.u.extension, ExtensionPolicy.PERIODIC)
        self.assertLess(residual(solution, problem), 1e-3)
        self.assertLess(solution.diagnostics["residual"], 1e-3)

    def test_fourier_mode_with_constant_drift(self):
        spec = spec_for(1.5)
        box = Lattice.cube(1, 6.0, 0.05)
        k = 0.5
        problem = ResolventProblem(spec, 2.0, cosine_source(box), [k])
        solution = solve_hoelder_drift(problem)
        x = box.points()[:, 0]
        expected = np.real(np.exp(1j * x) / (2.0 + characteristic_exponent(spec, [1.0]) - 1j * k))
        self.assertLess(np.max(np.abs(solution.u.values - expected)), 1e-4)
        self.assertEqual(solution.diagnostics["method"], "semigroup")

    def test_resolvent_identity(self):
        box = Lattice.cube(1, math.pi, math.pi / 50)
        g = GridFunction.from_callable(
            box,
            lambda pts: np.cos(pts[:, 0]),
            ExtensionPolicy.PERIODIC,
            derivative=lambda pts: -np.sin(pts[:, 0]),
        )
        self.assertLess(resolvent_identity_check(spec_for(1.5), g, 1.0, 3.0), 1e-3)
        with self.assertRaises(InvalidParameter):
            resolvent_identity_check(spec_for(1.5), g, 1.0, 1.0)


class TestReports(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.box = Lattice.cube(1, 4.0, 0.05)
        cls.problem = ResolventProblem(spec_for(1.5), 2.0, cosine_source(cls.box))
        cls.solution = solve_constant_drift(cls.problem)

    def test_schauder_report(self):
        report = schauder_report(self.solution, self.problem)
        self.assertGreater(report.source_norm, 1.0)
        self.assertTrue(math.isfinite(report.ratio))
        self.assertIn("schauder", self.solution.diagnostics)

    def test_frame_columns(self):
        frame = self.solution.to_frame()
        self.assertEqual(list(frame.columns), ["x1", "u", "du_dx1"])
        self.assertEqual(len(frame), self.box.size)

    def test_export(self):
        directory = tempfile.mkdtemp()
        try:
            paths = export_solution(self.solution, self.problem, directory)
            self.assertTrue(os.path.exists(paths["table"]))
            with open(paths["diagnostics"]) as handle:
                record = json.load(handle)
            self.assertEqual(record["schema_version"], 1)
            self.assertEqual(record["problem"]["lambda"], 2.0)
        finally:
            shutil.rmtree(directory)


class TestDecayScan(unittest.TestCase):

    def test_lambdas_must_increase(self):
        box = Lattice.cube(1, 2.0, 0.1)
        g = GridFunction.constant(box, 1.0)
        with self.assertRaises(InvalidParameter):
            gradient_decay_scan(spec_for(1.5), None, g, [5.0, 2.0], 1.0)

    def test_slope_band(self):
        scan = DecayScan([1.0, 10.0], [0.5, 0.1], 10.0, -0.6, -0.5)
        self.assertTrue(scan.slope_ok)
        self.assertTrue(scan.monotone)
        low, high = scan.slope_band
        self.assertAlmostEqual(low, -0.65)
        self.assertAlmostEqual(high, -0.35)
        self.assertEqual(list(scan.to_frame()["below_threshold"]), [False, True])

    def test_slope_outside_band_is_reported(self):
        predicted = -(1.5 + 0.8 - 1.0) / (1.5 + 0.8)
        sups = [0.562, 0.253, 0.136, 0.072, 0.031, 0.0166]
        steep = DecayScan([2.0, 5.0, 10.0, 20.0, 50.0, 100.0], sups, 5.0, -0.902, predicted)
        self.assertFalse(steep.slope_ok)
        self.assertFalse(steep.to_dict()["slope_ok"])
        shallow = DecayScan([1.0, 10.0], [0.5, 0.4], 10.0, -0.1, -0.5)
        self.assertFalse(shallow.slope_ok)
        unfitted = DecayScan([1.0], [0.2], 1.0, float("nan"), -0.5)
        self.assertFalse(unfitted.slope_ok)


if __name__ == '__main__':
    unittest.main()
