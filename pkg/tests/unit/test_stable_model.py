"""
tests/unit/test_stable_model.py

Unit tests for the process model:
- Spectral measure validation
- Characteristic exponent and nondegeneracy constant
- Radial moments of the Levy measure
- Picard condition closed form against quadrature
"""

import math
import os
import sys
import unittest

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(__file__))))

from error_handlers import DegenerateMeasure, DivergentIntegral, InvalidParameter
from stable_model import (
    SpectralMeasure,
    StableSpec,
    axes_measure,
    characteristic_exponent,
    isotropic_measure,
    levy_khintchine_constant,
    levy_radial_integral,
    levy_tail_mass,
    nondegeneracy_constant,
    picard_functional,
    picard_quadrature,
    picard_report,
    small_jump_covariance,
)


class TestSpectralMeasure(unittest.TestCase):
    """Validation of atomic spectral measures"""

    def test_isotropic_line_has_unit_mass(self):
        measure = isotropic_measure(1)
        self.assertEqual(measure.n_atoms, 2)
        self.assertAlmostEqual(measure.total_weight, 1.0)

    def test_isotropic_plane_is_symmetric(self):
        measure = isotropic_measure(2, 32)
        self.assertEqual(measure.n_atoms, 32)
        self.assertEqual(len(measure.half_atoms()), 16)
        np.testing.assert_allclose(np.linalg.norm(measure.directions, axis=1), 1.0)

    def test_asymmetric_atoms_rejected(self):
        with self.assertRaises(InvalidParameter):
            SpectralMeasure(np.array([[1.0], [-1.0]]), np.array([1.0, 2.0]))

    def test_non_unit_direction_rejected(self):
        with self.assertRaises(InvalidParameter):
            SpectralMeasure(np.array([[2.0], [-2.0]]), np.array([1.0, 1.0]))

    def test_from_atoms(self):
        measure = SpectralMeasure.from_atoms([((1.0, 0.0), 0.5), ((-1.0, 0.0), 0.5),
                                              ((0.0, 1.0), 2.0), ((0.0, -1.0), 2.0)])
        self.assertEqual(measure.dim, 2)
        np.testing.assert_allclose(measure.second_moment(), np.diag([1.0, 4.0]))


class TestCharacteristicExponent(unittest.TestCase):
    """psi(u) = scale * sum w_i |<u, xi_i>|^alpha"""

    def test_line_power_law(self):
        spec = StableSpec.from_measure(1.5, isotropic_measure(1))
        self.assertAlmostEqual(characteristic_exponent(spec, [2.0]), 2.0 ** 1.5)
        self.assertEqual(characteristic_exponent(spec, [0.0]), 0.0)

    def test_homogeneity_and_symmetry(self):
        spec = StableSpec.from_measure(1.2, isotropic_measure(2, 16), scale=3.0)
        u = np.array([0.3, -0.7])
        value = characteristic_exponent(spec, u)
        self.assertAlmostEqual(characteristic_exponent(spec, -u), value)
        self.assertAlmostEqual(characteristic_exponent(spec, 2.5 * u), 2.5 ** 1.2 * value)

    def test_axes_is_sum_of_coordinates(self):
        spec = StableSpec.from_measure(1.2, axes_measure(2))
        points = np.array([[1.0, 0.0], [0.5, -2.0]])
        expected = np.abs(points[:, 0]) ** 1.2 + np.abs(points[:, 1]) ** 1.2
        np.testing.assert_allclose(characteristic_exponent(spec, points), expected)

    def test_wrong_dimension(self):
        spec = StableSpec.from_measure(1.2, axes_measure(2))
        with self.assertRaises(InvalidParameter):
            characteristic_exponent(spec, [1.0, 2.0, 3.0])

    def test_alpha_out_of_range(self):
        with self.assertRaises(InvalidParameter):
            StableSpec.from_measure(2.0, isotropic_measure(1))


class TestNondegeneracy(unittest.TestCase):

    def test_axes_minimum_on_axes(self):
        spec = StableSpec.from_measure(1.2, axes_measure(2))
        self.assertAlmostEqual(nondegeneracy_constant(spec), 1.0, places=6)

    def test_line_constant(self):
        spec = StableSpec.from_measure(0.7, isotropic_measure(1), scale=2.0)
        self.assertAlmostEqual(spec.c_alpha, 2.0)

    def test_degenerate_measure(self):
        measure = SpectralMeasure(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([1.0, 1.0]))
        spec = StableSpec.from_measure(1.5, measure)
        with self.assertRaises(DegenerateMeasure):
            nondegeneracy_constant(spec)


class TestLevyMeasure(unittest.TestCase):
    """Radial moments with levy_factor = scale / K_alpha"""

    def test_cauchy_constant(self):
        self.assertAlmostEqual(levy_khintchine_constant(1.0), math.pi / 2.0)

    def test_unit_factor_examples(self):
        alpha = 1.5
        spec = StableSpec.from_measure(alpha, axes_measure(1), scale=levy_khintchine_constant(alpha))
        self.assertAlmostEqual(spec.levy_factor, 1.0)
        weight = spec.total_weight
        eps = 0.1
        self.assertAlmostEqual(levy_tail_mass(spec, eps), weight * eps ** -alpha / alpha)
        self.assertAlmostEqual(levy_radial_integral(spec, 2.0, 0.0, 1.0), weight / (2.0 - alpha))

    def test_divergent_moments(self):
        spec = StableSpec.from_measure(1.5, isotropic_measure(1))
        with self.assertRaises(DivergentIntegral):
            levy_radial_integral(spec, 1.0, 0.0, 1.0)
        with self.assertRaises(DivergentIntegral):
            levy_radial_integral(spec, 1.5, 1.0, math.inf)

    def test_empty_annulus(self):
        spec = StableSpec.from_measure(1.5, isotropic_measure(1))
        self.assertEqual(levy_radial_integral(spec, 0.0, 2.0, 2.0), 0.0)

    def test_small_jump_covariance_line(self):
        spec = StableSpec.from_measure(1.5, isotropic_measure(1))
        eps = 0.2
        expected = spec.levy_factor * eps ** 0.5 / 0.5
        np.testing.assert_allclose(small_jump_covariance(spec, eps), [[expected]])


class TestPicardCondition(unittest.TestCase):

    def test_closed_form_matches_quadrature(self):
        spec = StableSpec.from_measure(1.3, isotropic_measure(2, 12))
        u = np.array([0.6, 0.8])
        self.assertAlmostEqual(
            picard_functional(spec, u, 0.5) / picard_quadrature(spec, u, 0.5), 1.0, places=7
        )

    def test_report_verified(self):
        spec = StableSpec.from_measure(0.8, axes_measure(2))
        report = picard_report(spec, [1.0, 0.0], 0.25)
        self.assertTrue(report.verified)
        self.assertLess(report.relative_gap, 1e-8)

    def test_non_unit_vector(self):
        spec = StableSpec.from_measure(1.3, axes_measure(2))
        with self.assertRaises(InvalidParameter):
            picard_functional(spec, [1.0, 1.0], 0.5)

    def test_fingerprint_is_content_hash(self):
        a = StableSpec.from_measure(1.3, axes_measure(2))
        b = StableSpec.from_measure(1.3, axes_measure(2))
        c = StableSpec.from_measure(1.4, axes_measure(2))
        self.assertEqual(a.fingerprint, b.fingerprint)
        self.assertNotEqual(a.fingerprint, c.fingerprint)


if __name__ == '__main__':
    unittest.main()
