"""
tests/unit/test_nonlocal_calculus.py

Unit tests for lattices, grid functions and the nonlocal generator:
- Symbol identity L cos(u x) = -psi(u) cos(u x)
- Extension policies and interpolation
- Hoelder seminorms, interpolation and shift-difference diagnostics
"""

import math
import os
import sys
import unittest

import numpy as np
from scipy import integrate

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(__file__))))

from error_handlers import InvalidParameter, NonIntegrableAtOrigin, NotApplicable
from lattice import Lattice
from nonlocal_calculus import (
    ExtensionPolicy,
    GridFunction,
    apply_generator,
    apply_generator_many,
    compensation_remainder,
    hoelder_report,
    hoelder_seminorm,
    interpolation_diagnostic,
    interpolation_epsilon_diagnostic,
    large_jump_integral,
    norm_1_plus_gamma,
    shift_constant,
    shift_difference_check,
)
from stable_model import StableSpec, characteristic_exponent, isotropic_measure


def cosine_mode(box, u, extension=ExtensionPolicy.CALLBACK):
    return GridFunction.from_callable(
        box,
        lambda pts: np.cos(u * np.asarray(pts)[:, 0]),
        extension,
        derivative=lambda pts: -u * np.sin(u * np.asarray(pts)[:, 0]),
        name="cos",
    )


class TestLattice(unittest.TestCase):

    def test_half_width_snaps_to_spacing(self):
        box = Lattice.cube(1, 1.03, 0.1)
        self.assertAlmostEqual(float(box.half_widths[0]), 1.0)
        self.assertEqual(box.shape, (21,))

    def test_points_and_interior(self):
        box = Lattice.cube(2, 1.0, 0.5, center=[1.0, -1.0])
        self.assertEqual(box.size, 25)
        np.testing.assert_allclose(box.points()[0], [0.0, -2.0])
        mask = box.interior_mask(0.5)
        self.assertEqual(int(mask.sum()), 9)
        self.assertEqual(box.index_of([1.0, -1.0]), (2, 2))

    def test_scaled_and_refined(self):
        box = Lattice.cube(1, 2.0, 0.1)
        self.assertAlmostEqual(box.scaled(2.0).h, 0.2)
        self.assertEqual(box.refined().shape, (81,))

    def test_invalid_spacing(self):
        with self.assertRaises(InvalidParameter):
            Lattice.cube(1, 1.0, 0.0)


class TestGridFunction(unittest.TestCase):

    def setUp(self):
        self.box = Lattice.cube(1, 2.0, 0.05)

    def test_callback_must_match_values(self):
        values = np.zeros(self.box.shape)
        with self.assertRaises(InvalidParameter):
            GridFunction(self.box, values, ExtensionPolicy.CALLBACK, lambda pts: np.ones(len(pts)))

    def test_constant_extension_clamps(self):
        f = GridFunction.from_callable(self.box, lambda pts: pts[:, 0], ExtensionPolicy.CONSTANT)
        np.testing.assert_allclose(f(np.array([[5.0], [-7.0], [0.5]])), [2.0, -2.0, 0.5], atol=1e-12)
        np.testing.assert_allclose(f.gradient(np.array([[5.0]])), [[0.0]])

    def test_callback_extension_outside(self):
        f = GridFunction.from_callable(self.box, lambda pts: pts[:, 0] ** 2)
        self.assertAlmostEqual(float(f(np.array([[3.0]]))[0]), 9.0)

    def test_periodic_extension_wraps(self):
        box = Lattice.cube(1, math.pi, math.pi / 50)
        f = cosine_mode(box, 1.0, ExtensionPolicy.PERIODIC)
        self.assertAlmostEqual(float(f(np.array([[2.0 * math.pi + 0.3]]))[0]), math.cos(0.3), places=6)

    def test_periodic_faces_must_agree(self):
        with self.assertRaises(InvalidParameter):
            GridFunction.from_callable(self.box, lambda pts: pts[:, 0], ExtensionPolicy.PERIODIC)

    def test_vector_components(self):
        f = GridFunction.from_callable(self.box, lambda pts: np.column_stack([pts[:, 0], 2 * pts[:, 0]]))
        self.assertTrue(f.is_vector)
        self.assertEqual(f.arity, 2)
        np.testing.assert_allclose(f.component(1).values, 2 * self.box.points()[:, 0])
        self.assertAlmostEqual(f.sup_norm(), math.sqrt(5.0) * 2.0)

    def test_compensation_remainder_of_quadratic(self):
        f = GridFunction.from_callable(self.box, lambda pts: pts[:, 0] ** 2)
        self.assertAlmostEqual(compensation_remainder(f, [0.5], [0.3]), 0.09, places=8)


class TestGenerator(unittest.TestCase):
    """L cos(u x) = -psi(u) cos(u x) with the scale-adjusted Levy measure"""

    def setUp(self):
        self.box = Lattice.cube(1, 4.0, 0.02)

    def test_symbol_identity_at_origin(self):
        rng = np.random.default_rng(7)
        for alpha in (1.0, 1.5):
            spec = StableSpec.from_measure(alpha, isotropic_measure(1))
            magnitudes = rng.uniform(0.5, 2.0, size=20)
            signs = rng.choice([-1.0, 1.0], size=20)
            for u in signs * magnitudes:
                with self.subTest(alpha=alpha, u=u):
                    value = apply_generator(spec, cosine_mode(self.box, u), [0.0])
                    expected = -characteristic_exponent(spec, [u])
                    self.assertAlmostEqual(value / expected, 1.0, delta=1e-4)

    def test_cauchy_tail_off_the_origin(self):
        # alpha = 1 has the slowest far-field decay r^-2
        spec = StableSpec.from_measure(1.0, isotropic_measure(1))
        pts = np.array([[-2.3], [0.4], [3.1]])
        for u in (0.5, 0.9, 1.7):
            with self.subTest(u=u):
                values = apply_generator_many(spec, cosine_mode(self.box, u), pts)
                expected = -abs(u) * np.cos(u * pts[:, 0])
                np.testing.assert_allclose(values, expected, atol=1e-4 * abs(u))

    def test_symbol_identity_many_points(self):
        spec = StableSpec.from_measure(1.5, isotropic_measure(1), scale=2.0)
        pts = np.array([[-1.0], [0.37], [1.5]])
        values = apply_generator_many(spec, cosine_mode(self.box, 1.0), pts)
        expected = -characteristic_exponent(spec, [1.0]) * np.cos(pts[:, 0])
        np.testing.assert_allclose(values, expected, atol=2e-4)

    def test_periodic_mode(self):
        spec = StableSpec.from_measure(1.5, isotropic_measure(1))
        box = Lattice.cube(1, math.pi, math.pi / 100)
        value = apply_generator(spec, cosine_mode(box, 1.0, ExtensionPolicy.PERIODIC), [0.0])
        self.assertAlmostEqual(value, -1.0, delta=1e-3)

    def test_constant_is_harmonic(self):
        spec = StableSpec.from_measure(0.7, isotropic_measure(1))
        f = GridFunction.constant(self.box, 3.0)
        self.assertAlmostEqual(apply_generator(spec, f, [0.5]), 0.0, places=10)

    def test_kink_not_integrable(self):
        spec = StableSpec.from_measure(1.5, isotropic_measure(1))
        far_box = Lattice.cube(1, 1.0, 0.1, center=5.0)
        f = GridFunction.from_callable(far_box, lambda pts: np.abs(pts[:, 0]))
        with self.assertRaises(NonIntegrableAtOrigin):
            apply_generator(spec, f, [0.0])

    def test_large_jump_integral_of_cosine(self):
        alpha, r, x = 1.5, 0.5, 0.3
        spec = StableSpec.from_measure(alpha, isotropic_measure(1))
        oscillating, _ = integrate.quad(lambda z: z ** (-1.0 - alpha), r, np.inf, weight="cos", wvar=1.0)
        radial = oscillating - r ** (-alpha) / alpha
        expected = spec.levy_factor * radial * math.cos(x)
        value = large_jump_integral(spec, cosine_mode(self.box, 1.0), np.array([[x]]), r)[0]
        self.assertAlmostEqual(value, expected, delta=1e-4)

    def test_dimension_mismatch(self):
        spec = StableSpec.from_measure(1.5, isotropic_measure(2, 8))
        with self.assertRaises(InvalidParameter):
            apply_generator_many(spec, cosine_mode(self.box, 1.0), [[0.0, 0.0]])


class TestHoelderNorms(unittest.TestCase):

    def setUp(self):
        self.box = Lattice.cube(1, 1.0, 0.05)
        self.linear = GridFunction.from_callable(self.box, lambda pts: pts[:, 0], ExtensionPolicy.CONSTANT)

    def test_linear_function(self):
        self.assertAlmostEqual(hoelder_seminorm(self.linear, 0.0), 1.0)
        self.assertAlmostEqual(hoelder_seminorm(self.linear, 0.5), 2.0 ** 0.5, places=10)
        self.assertAlmostEqual(hoelder_seminorm(self.linear, 1.0), 1.0, places=8)

    def test_beta_range(self):
        with self.assertRaises(InvalidParameter):
            hoelder_seminorm(self.linear, 2.0)

    def test_ladder_is_consistent(self):
        f = cosine_mode(self.box, 3.0)
        report = hoelder_report(f)
        self.assertEqual(report.ladder_violations(), [])
        self.assertIn("0.5", report.to_dict()["seminorms"])

    def test_norm_1_plus_gamma(self):
        self.assertAlmostEqual(norm_1_plus_gamma(self.linear, 0.0), 2.0, places=8)
        with self.assertRaises(InvalidParameter):
            norm_1_plus_gamma(self.linear, 1.5)

    def test_interpolation_diagnostics(self):
        f = cosine_mode(self.box, 2.0)
        self.assertGreater(interpolation_diagnostic(f, 0.3, 0.2, 0.6), 0.0)
        self.assertGreater(interpolation_epsilon_diagnostic(f, 0.3, 0.2, 0.6), 0.0)
        flat = GridFunction.constant(self.box, 1.0)
        with self.assertRaises(NotApplicable):
            interpolation_diagnostic(flat, 0.3, 0.2, 0.6)


class TestShiftDifferences(unittest.TestCase):

    def test_constant(self):
        self.assertAlmostEqual(shift_constant(0.0), 3.0)
        self.assertAlmostEqual(shift_constant(1.0), 2.0)

    def test_sine_satisfies_bound(self):
        box = Lattice.cube(1, 4.0, 0.01)
        f = GridFunction.from_callable(
            box, lambda pts: np.sin(pts[:, 0]), derivative=lambda pts: np.cos(pts[:, 0]), name="sin"
        )
        for gamma in (0.0, 0.5, 1.0):
            report = shift_difference_check(f, gamma, 10_000, seed=3)
            self.assertTrue(report.passed, report.to_dict())
            self.assertLessEqual(report.max_ratio, 1.0 + 1e-9)


if __name__ == '__main__':
    unittest.main()
