#!/usr/bin/env python
"""
test_convergence_tables.py - Reference convergence studies
==========================================================

Reproduces the reference error tables for the biharmonic, Stommel,
Stommel-Munk and QGE manufactured solutions.

Meshes up to h=1/16 run by default. The h=1/32 rows take minutes and only
run with ARGYRIS_QGE_FULL_TABLES=1.
"""

import os
import unittest

from argyris_qge import PRESETS, build_dofmap, build_structured_mesh, run_study

FULL_TABLES = os.environ.get("ARGYRIS_QGE_FULL_TABLES", "") == "1"
TO_16 = ("1/2", "1/4", "1/8", "1/16")


def study(name, h_values=None):
    preset = PRESETS[name]
    return run_study(preset.problem(), h_values or preset.h_values)


class TableAssertions(unittest.TestCase):
    """Shared checks on ErrorTable rows"""

    def assertRatesNear(self, record, expected, tolerance):
        for got, want in zip(record.rates, expected):
            self.assertIsNotNone(got)
            self.assertAlmostEqual(got, want, delta=tolerance)

    def assertWithinFactor(self, value, reference, factor):
        self.assertGreater(value, reference / factor)
        self.assertLess(value, reference * factor)


class TestDofCounts(unittest.TestCase):
    """DOF counts of the reference tables"""

    def test_counts(self):
        """Test: 70 and 9670 on the unit square, 170 and 28550 on [0,3]x[0,1]"""
        cases = [((1.0, 1.0, "1/2"), 70), ((1.0, 1.0, "1/32"), 9670),
                 ((3.0, 1.0, "1/2"), 170), ((3.0, 1.0, "1/32"), 28550)]
        for (lx, ly, h), expected in cases:
            dofmap = build_dofmap(build_structured_mesh(lx, ly, h))
            self.assertEqual(dofmap.n_dofs, expected)


class TestDefaultTables(TableAssertions):
    """Studies up to h=1/16"""

    def test_biharmonic(self):
        """Test: biharmonic rates near (6.434, 5.294, 4.192)"""
        table = study("biharmonic")
        self.assertTrue(table.all_ok)
        self.assertRatesNear(table.final, PRESETS["biharmonic"].reference_rates, 0.3)
        self.assertWithinFactor(table.final.e2, 2.473e-6, 3.0)

    def test_stommel_smooth(self):
        """Test: Stommel without boundary layer reaches the round-off floor at h=1/16"""
        table = study("test1b", TO_16)
        self.assertTrue(table.all_ok)
        self.assertWithinFactor(table.final.e0, 7.079e-11, 5.0)

    def test_stommel_munk_smooth(self):
        """Test: Stommel-Munk rates near (6.232, 5.148, 4.067) at h=1/16"""
        table = study("test3", TO_16)
        self.assertTrue(table.all_ok)
        self.assertWithinFactor(table.records[2].e0, 3.437e-7, 3.0)
        self.assertRatesNear(table.final, (6.232, 5.148, 4.067), 0.3)

    def test_qge_smooth(self):
        """Test: QGE rates near (6.274, 5.165, 4.067) at h=1/16 with converged Newton"""
        table = study("test5", TO_16)
        self.assertTrue(table.all_ok)
        for record in table.records:
            self.assertLessEqual(record.newton_iterations, 10)
        self.assertWithinFactor(table.records[2].e0, 3.597e-7, 3.0)
        self.assertRatesNear(table.final, (6.274, 5.165, 4.067), 0.3)


@unittest.skipUnless(FULL_TABLES, "set ARGYRIS_QGE_FULL_TABLES=1 to run the h=1/32 tables")
class TestFullTables(TableAssertions):
    """Studies down to h=1/32"""

    def _smooth(self, name):
        table = study(name)
        self.assertTrue(table.all_ok)
        self.assertRatesNear(table.final, PRESETS[name].reference_rates, 0.25)
        return table

    def _boundary_layer(self, name):
        table = study(name)
        self.assertTrue(table.all_ok)
        for k in range(3):
            rates = [r.rates[k] for r in table.records[1:]]
            self.assertEqual(rates, sorted(rates), f"rate{k} not increasing: {rates}")
        for got, floor in zip(table.final.rates, (5.4, 4.4, 3.4)):
            self.assertGreaterEqual(got, floor)

    def test_1a(self):
        """Test: Stommel with boundary layer"""
        self._boundary_layer("test1a")

    def test_1b(self):
        """Test: Stommel without boundary layer"""
        self._smooth("test1b")

    def test_2(self):
        """Test: Stommel two-root boundary layer"""
        self._boundary_layer("test2")

    def test_3(self):
        """Test: Stommel-Munk smooth"""
        self._smooth("test3")

    def test_4(self):
        """Test: Stommel-Munk boundary layer"""
        self._boundary_layer("test4")

    def test_5(self):
        """Test: QGE smooth with Newton converged on every mesh"""
        table = self._smooth("test5")
        for record in table.records:
            self.assertLessEqual(record.newton_iterations, 10)

    def test_6(self):
        """Test: QGE boundary layer"""
        self._boundary_layer("test6")


if __name__ == "__main__":
    unittest.main()
