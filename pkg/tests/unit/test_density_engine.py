"""
tests/unit/test_density_engine.py

Unit tests for transition densities:
- Cauchy closed form and the scaling law
- Far-field series and tail masses
- Density tables, profiles and the kernel quadrature
- Semigroup action on Fourier modes
"""

import math
import os
import sys
import unittest

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(__file__))))

from density_engine import (
    build_frequency_rule,
    chapman_kolmogorov_gap,
    density,
    density_gradient,
    frequency_cutoff,
    get_profile,
    grad_l1_norm,
    kernel_quadrature,
    semigroup_apply,
    semigroup_gradient,
    semigroup_pair,
    stable_tail_mass,
    stable_tail_series,
    tabulate,
)
from error_handlers import CutoffTooSmall, InvalidParameter
from lattice import Lattice
from stable_model import StableSpec, axes_measure, characteristic_exponent, isotropic_measure


def cauchy(x, t=1.0):
    return t / (math.pi * (t * t + np.asarray(x) ** 2))


class TestCauchyAnchor(unittest.TestCase):
    """d=1, alpha=1, psi(u) = |u| has p_t(x) = t / (pi (t^2 + x^2))"""

    @classmethod
    def setUpClass(cls):
        cls.spec = StableSpec.from_measure(1.0, isotropic_measure(1))

    def test_point_values(self):
        for x in (0.0, 0.5, 1.0, 3.0, 10.0):
            self.assertAlmostEqual(density(self.spec, 1.0, [x]), cauchy(x), delta=1e-5)

    def test_table_matches_closed_form(self):
        box = Lattice.cube(1, 10.0, 0.05)
        table = tabulate(self.spec, 1.0, box)
        x = box.points()[:, 0]
        self.assertLessEqual(np.max(np.abs(table.values - cauchy(x))), 1e-5)

    def test_gradient_sign(self):
        self.assertAlmostEqual(density_gradient(self.spec, 1.0, [1.0])[0], -1.0 / (2.0 * math.pi), delta=1e-6)

    def test_scaling_law(self):
        box = Lattice.cube(1, 5.0, 0.1)
        for t in (0.5, 2.0):
            scaled = tabulate(self.spec, t, box, method="scaled").values
            direct = tabulate(self.spec, t, box, method="direct").values
            self.assertLessEqual(np.max(np.abs(scaled - direct)), 1e-6)
            self.assertLessEqual(np.max(np.abs(direct - cauchy(box.points()[:, 0], t))), 1e-5)

    def test_tail_series_is_geometric(self):
        x = np.array([30.0, 60.0])
        np.testing.assert_allclose(stable_tail_series(self.spec, x), cauchy(x), rtol=1e-10)

    def test_tail_mass(self):
        level = 30.0
        self.assertAlmostEqual(stable_tail_mass(self.spec, level), 0.5 - math.atan(level) / math.pi, places=12)

    def test_gradient_l1_norm(self):
        self.assertAlmostEqual(grad_l1_norm(self.spec), 2.0 / math.pi, places=4)

    def test_profile_cdf(self):
        profile = get_profile(self.spec)
        self.assertAlmostEqual(float(profile.cdf(np.array([0.0]))[0]), 0.5, places=12)
        self.assertAlmostEqual(float(profile.cdf(np.array([1.0]))[0]), 0.75, places=6)
        self.assertAlmostEqual(float(profile.cdf(np.array([-1.0]))[0]), 0.25, places=6)
        self.assertAlmostEqual(float(profile.pt(2.0, np.array([1.0]))[0]), cauchy(1.0, 2.0), delta=1e-6)


class TestDensityTable(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.spec = StableSpec.from_measure(1.5, isotropic_measure(1))
        cls.box = Lattice.cube(1, 10.0, 0.05)
        cls.table = tabulate(cls.spec, 1.0, cls.box)

    def test_mass_accounts_for_tail(self):
        mass = self.table.mass()
        tail = self.table.tail_mass_estimate()
        self.assertLess(mass, 1.0)
        self.assertLessEqual(abs(1.0 - mass - tail), max(1e-3, 0.25 * tail))

    def test_symmetry(self):
        self.assertLess(self.table.symmetry_error(), 1e-10)

    def test_frame_columns(self):
        frame = self.table.to_frame()
        self.assertEqual(list(frame.columns), ["x1", "p", "dp1"])
        self.assertEqual(len(frame), self.box.size)

    def test_table_is_read_only(self):
        with self.assertRaises(ValueError):
            self.table.values[0] = 1.0

    def test_two_dimensional_axes_product(self):
        spec = StableSpec.from_measure(1.2, axes_measure(2))
        line = StableSpec.from_measure(1.2, axes_measure(1))
        point = np.array([0.4, -1.1])
        expected = density(line, 1.0, [point[0]]) * density(line, 1.0, [point[1]])
        self.assertAlmostEqual(density(spec, 1.0, point), expected, delta=1e-7)

    def test_invalid_time(self):
        with self.assertRaises(InvalidParameter):
            tabulate(self.spec, 0.0, self.box)
        with self.assertRaises(InvalidParameter):
            tabulate(self.spec, 1.0, self.box, method="other")

    def test_chapman_kolmogorov(self):
        box = Lattice.cube(1, 20.0, 0.05)
        self.assertLess(chapman_kolmogorov_gap(self.spec, 0.5, 0.5, box), 1e-3)


class TestFrequencyRule(unittest.TestCase):

    def test_cutoff_meets_tail_bound(self):
        spec = StableSpec.from_measure(1.5, isotropic_measure(1))
        cutoff = frequency_cutoff(spec, 1.0, 1e-12)
        self.assertAlmostEqual(math.exp(-spec.c_alpha * cutoff ** 1.5), 1e-12, delta=1e-15)

    def test_node_budget(self):
        spec = StableSpec.from_measure(0.5, isotropic_measure(1))
        with self.assertRaises(CutoffTooSmall):
            build_frequency_rule(spec, 1e-6, 1e3, max_nodes=100)


class TestSemigroup(unittest.TestCase):
    """P_t cos(w x) = exp(-t psi(w)) cos(w x)"""

    @classmethod
    def setUpClass(cls):
        cls.spec = StableSpec.from_measure(1.5, isotropic_measure(1))
        cls.points = np.linspace(-2.0, 2.0, 9).reshape(-1, 1)

    @staticmethod
    def wave(pts):
        return np.cos(np.asarray(pts)[:, 0])

    def test_kernel_weights(self):
        rule = kernel_quadrature(self.spec)
        self.assertTrue(np.all(rule.mass_weights >= 0))
        self.assertAlmostEqual(float(rule.mass_weights.sum()), 1.0, places=12)
        self.assertAlmostEqual(float(rule.gradient_weights.sum()), 0.0, places=10)

    def test_apply_on_cosine(self):
        damping = math.exp(-0.5 * characteristic_exponent(self.spec, [1.0]))
        values = semigroup_apply(self.spec, self.wave, 0.5, self.points)
        np.testing.assert_allclose(values, damping * np.cos(self.points[:, 0]), atol=1e-3)

    def test_gradient_on_cosine(self):
        damping = math.exp(-0.5 * characteristic_exponent(self.spec, [1.0]))
        grads = semigroup_gradient(self.spec, self.wave, 0.5, self.points)
        np.testing.assert_allclose(grads[:, 0], -damping * np.sin(self.points[:, 0]), atol=1e-3)

    def test_pair_agrees_with_separate_calls(self):
        values, grads = semigroup_pair(self.spec, self.wave, 0.3, self.points, k=[0.7])
        np.testing.assert_allclose(values, semigroup_apply(self.spec, self.wave, 0.3, self.points, k=[0.7]))
        np.testing.assert_allclose(grads, semigroup_gradient(self.spec, self.wave, 0.3, self.points, k=[0.7]))

    def test_drift_shifts_the_mode(self):
        t, k = 0.5, 0.8
        damping = math.exp(-t * characteristic_exponent(self.spec, [1.0]))
        values = semigroup_apply(self.spec, self.wave, t, self.points, k=[k])
        np.testing.assert_allclose(values, damping * np.cos(self.points[:, 0] + t * k), atol=1e-3)


if __name__ == '__main__':
    unittest.main()
