#!/usr/bin/env python
"""
test_quadrature.py - Triangle quadrature tests
==============================================

Exactness, weights and affine invariance of the collapsed Gauss rules.
"""

import math
import unittest

import numpy as np

from argyris_qge import (
    ValidationError,
    build_structured_mesh,
    integrate,
    triangle_rule,
)

REFERENCE = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def monomial_integral(a, b):
    """Exact integral of x^a y^b over the reference triangle."""
    return math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)


class TestTriangleRule(unittest.TestCase):
    """Rule construction"""

    def test_weights_sum(self):
        """Test: weights sum to 1/2 for every degree"""
        for degree in range(1, 21):
            rule = triangle_rule(degree)
            self.assertAlmostEqual(float(rule.weights.sum()), 0.5, places=14)

    def test_points_inside(self):
        """Test: barycentric coordinates lie in [0,1] and sum to 1"""
        for degree in (1, 6, 12, 20):
            rule = triangle_rule(degree)
            self.assertTrue(np.all(rule.points >= 0.0))
            self.assertTrue(np.all(rule.points <= 1.0))
            np.testing.assert_allclose(rule.points.sum(axis=1), 1.0, atol=1e-15)

    def test_declared_degree(self):
        """Test: declared degree is at least the requested one"""
        for degree in range(1, 21):
            self.assertGreaterEqual(triangle_rule(degree).degree, degree)
        self.assertEqual(triangle_rule(12).degree, 13)
        self.assertEqual(triangle_rule(12).size, 49)

    def test_centroid_rule(self):
        """Test: degree 1 is the centroid rule"""
        rule = triangle_rule(1)
        self.assertEqual(rule.size, 1)
        np.testing.assert_allclose(rule.xy[0], [1.0 / 3.0, 1.0 / 3.0])

    def test_cached(self):
        """Test: the same rule object is returned"""
        self.assertIs(triangle_rule(12), triangle_rule(12))

    def test_unsupported_degree(self):
        """Test: degrees outside 1..20 are rejected"""
        for bad in (0, 21, -3):
            with self.assertRaises(ValidationError):
                triangle_rule(bad)
        with self.assertRaises(ValidationError):
            triangle_rule(2.5)


class TestExactness(unittest.TestCase):
    """Monomial exactness"""

    def test_all_monomials_to_declared_degree(self):
        """Test: every monomial up to the declared degree is exact"""
        for requested in (1, 4, 8, 12):
            rule = triangle_rule(requested)
            x, y = rule.xy[:, 0], rule.xy[:, 1]
            for total in range(rule.degree + 1):
                for a in range(total + 1):
                    b = total - a
                    value = float(np.dot(rule.weights, x ** a * y ** b))
                    self.assertAlmostEqual(value, monomial_integral(a, b), delta=1e-13,
                                           msg=f"rule({requested}) x^{a} y^{b}")

    def test_x7_y5(self):
        """Test: rule(12) integrates x^7 y^5 to 7!5!/14!"""
        rule = triangle_rule(12)
        value = integrate(rule, REFERENCE, lambda x, y: x ** 7 * y ** 5)
        self.assertAlmostEqual(value, monomial_integral(7, 5), delta=1e-13)

    def test_not_vacuous(self):
        """Test: rule(12) is not exact beyond its declared degree"""
        rule = triangle_rule(12)
        value = integrate(rule, REFERENCE, lambda x, y: x ** 14)
        self.assertGreater(abs(value - monomial_integral(14, 0)), 1e-12)


class TestIntegrate(unittest.TestCase):
    """Integration over physical triangles"""

    def test_constant_on_leg_h(self):
        """Test: f=1 over a leg-h right triangle gives h^2/2"""
        h = 0.125
        tri = np.array([[0.5, 0.25], [0.5 + h, 0.25], [0.5 + h, 0.25 + h]])
        self.assertAlmostEqual(integrate(triangle_rule(1), tri, lambda x, y: 1.0), h * h / 2)

    def test_x_over_reference(self):
        """Test: f=x over the reference triangle gives 1/6"""
        self.assertAlmostEqual(integrate(triangle_rule(1), REFERENCE, lambda x, y: x), 1.0 / 6.0)

    def test_linear_in_f(self):
        """Test: integration is linear in the integrand"""
        rule = triangle_rule(6)
        tri = np.array([[0.0, 0.0], [2.0, 0.5], [0.3, 1.0]])

        def f(x, y):
            return np.sin(x) * y

        def g(x, y):
            return x ** 2 + np.cos(y)

        lhs = integrate(rule, tri, lambda x, y: 2.0 * f(x, y) - 3.0 * g(x, y))
        rhs = 2.0 * integrate(rule, tri, f) - 3.0 * integrate(rule, tri, g)
        self.assertAlmostEqual(lhs, rhs, places=12)

    def test_affine_invariance(self):
        """Test: integral over F(T) equals |det B| times the pulled-back integral"""
        rule = triangle_rule(12)
        tri = np.array([[0.2, 0.1], [1.1, 0.4], [0.5, 0.9]])
        jac = np.column_stack([tri[1] - tri[0], tri[2] - tri[0]])
        det = abs(np.linalg.det(jac))

        def f(x, y):
            return x ** 3 * y ** 2 - 2.0 * x * y ** 4 + x

        def pulled_back(xh, yh):
            px = tri[0, 0] + jac[0, 0] * xh + jac[0, 1] * yh
            py = tri[0, 1] + jac[1, 0] * xh + jac[1, 1] * yh
            return f(px, py)

        physical = integrate(rule, tri, f)
        reference = det * integrate(rule, REFERENCE, pulled_back)
        self.assertAlmostEqual(physical, reference, delta=1e-12)

    def test_separable_over_mesh(self):
        """Test: integral of (x(x-1)y(y-1))^2 over the unit square mesh is 1/900"""
        mesh = build_structured_mesh(1.0, 1.0, "1/4")
        rule = triangle_rule(12)

        def u(x, y):
            return (x * (x - 1) * y * (y - 1)) ** 2

        total = sum(integrate(rule, mesh.vertices[tri], u) for tri in mesh.triangles)
        self.assertAlmostEqual(total, 1.0 / 900.0, delta=1e-14)


if __name__ == "__main__":
    unittest.main()
