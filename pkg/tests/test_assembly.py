#!/usr/bin/env python
"""
test_assembly.py - Global assembly tests
========================================

DOF numbering, boundary constraints, bilinear and trilinear operators,
load vectors and the MatrixMarket export.
"""

import os
import shutil
import tempfile
import unittest

import numpy as np
import scipy.io
import scipy.sparse as sp
import sympy

from argyris_qge import (
    SYM_X,
    SYM_Y,
    BoundaryMode,
    BoundarySpec,
    SymbolicField,
    ValidationError,
    apply_constraints,
    assemble_biharmonic,
    assemble_laplace,
    assemble_load,
    assemble_transport,
    build_dofmap,
    build_structured_mesh,
    interpolate,
    manufactured,
    trilinear_jacobian,
    trilinear_residual,
    write_matrix_market,
)

BUBBLE = SymbolicField(SYM_X * (1 - SYM_X) * SYM_Y * (1 - SYM_Y))


class TestDofMap(unittest.TestCase):
    """Global DOF numbering and constraint flags"""

    def test_dof_counts(self):
        """Test: 6V + E DOFs"""
        cases = [((1, 1, "1/2"), 70), ((1, 1, "1/4"), 206), ((3, 1, "1/2"), 170),
                 ((1, 1, "1/16"), 2534), ((1, 1, "1/32"), 9670)]
        for (lx, ly, h), expected in cases:
            dofmap = build_dofmap(build_structured_mesh(lx, ly, h))
            self.assertEqual(dofmap.n_dofs, expected)

    def test_class_offsets(self):
        """Test: vertex block, then horizontal, vertical, oblique midpoints"""
        mesh = build_structured_mesh(1.0, 1.0, "1/8")
        dofmap = build_dofmap(mesh)
        self.assertEqual(dofmap.class_offsets, (0, 486, 558, 630, 694))

    def test_local_to_global(self):
        """Test: local DOFs map to vertex and edge blocks in order"""
        mesh = build_structured_mesh(1.0, 1.0, "1/2")
        dofmap = build_dofmap(mesh)
        row = dofmap.local_to_global[3]
        v = mesh.triangles[3]
        self.assertEqual(row[:6].tolist(), list(range(6 * v[0], 6 * v[0] + 6)))
        self.assertEqual(row[12], dofmap.vertex_dof(v[2], 0))
        self.assertEqual(row[18:].tolist(), [dofmap.edge_dof(e) for e in mesh.triangle_edges[3]])

    def test_clamped_counts(self):
        """Test: clamped h=1/2 fixes 52 of 70 DOFs, h=1/4 fixes 100 of 206"""
        dofmap = build_dofmap(build_structured_mesh(1.0, 1.0, "1/2"), BoundaryMode.CLAMPED)
        self.assertEqual((dofmap.n_constrained, dofmap.n_free), (52, 18))
        dofmap = build_dofmap(build_structured_mesh(1.0, 1.0, "1/4"), "clamped")
        self.assertEqual((dofmap.n_constrained, dofmap.n_free), (100, 106))

    def test_clamped_vertex_pattern(self):
        """Test: x-boundary vertices keep only d2/dx2 free"""
        mesh = build_structured_mesh(1.0, 1.0, "1/2")
        dofmap = build_dofmap(mesh, BoundaryMode.CLAMPED)
        v = 3  # (0, 0.5)
        flags = dofmap.constrained[6 * v:6 * v + 6].tolist()
        self.assertEqual(flags, [True, True, True, False, True, True])
        v = 1  # (0.5, 0)
        flags = dofmap.constrained[6 * v:6 * v + 6].tolist()
        self.assertEqual(flags, [True, True, True, True, True, False])

    def test_dirichlet_counts(self):
        """Test: dirichlet-value leaves midpoint DOFs free"""
        mesh = build_structured_mesh(1.0, 1.0, "1/2")
        dofmap = build_dofmap(mesh, BoundaryMode.DIRICHLET_VALUE)
        self.assertEqual(dofmap.n_constrained, 4 * 5 + 4 * 3)
        self.assertFalse(np.any(dofmap.constrained[6 * mesh.n_vertices:]))

    def test_unconstrained(self):
        """Test: no boundary spec means every DOF is free"""
        dofmap = build_dofmap(build_structured_mesh(1.0, 1.0, "1/2"))
        self.assertEqual(dofmap.n_free, dofmap.n_dofs)
        self.assertEqual(dofmap.bc.mode, BoundaryMode.NONE)

    def test_lifting_required(self):
        """Test: lifted-dirichlet needs a lifting field"""
        with self.assertRaises(ValidationError):
            BoundarySpec(BoundaryMode.LIFTED_DIRICHLET)

    def test_lifted_prescribed_values(self):
        """Test: prescribed values are the nodal values of the lifting"""
        mesh = build_structured_mesh(1.0, 1.0, "1/2")
        lifting = SymbolicField(1 + SYM_X + 2 * SYM_Y)
        dofmap = build_dofmap(mesh, BoundarySpec(BoundaryMode.LIFTED_DIRICHLET, lifting))
        corner = 8  # (1, 1)
        self.assertAlmostEqual(dofmap.prescribed[6 * corner], 4.0)
        self.assertAlmostEqual(dofmap.prescribed[6 * corner + 2], 2.0)
        self.assertTrue(np.all(dofmap.prescribed[~dofmap.constrained] == 0.0))

    def test_unknown_mode(self):
        """Test: unknown boundary mode names are rejected"""
        with self.assertRaises(ValidationError):
            build_dofmap(build_structured_mesh(1.0, 1.0, "1/2"), "periodic")


class TestBilinearForms(unittest.TestCase):
    """A0, L and B on polynomial fields"""

    def setUp(self):
        self.mesh = build_structured_mesh(1.0, 1.0, "1/4")
        self.dofmap = build_dofmap(self.mesh)

    def _coef(self, expr):
        return interpolate(self.mesh, SymbolicField(expr), self.dofmap).coefficients

    def test_biharmonic_exact(self):
        """Test: chi' A0 psi = int 4 * 2y = 4 for psi = x^2+y^2, chi = x^2 y"""
        a0 = assemble_biharmonic(self.mesh, self.dofmap)
        value = self._coef(SYM_X ** 2 * SYM_Y) @ (a0 @ self._coef(SYM_X ** 2 + SYM_Y ** 2))
        self.assertAlmostEqual(value, 4.0, places=9)

    def test_laplace_exact(self):
        """Test: grad x . grad x^2 integrates to 1"""
        lap = assemble_laplace(self.mesh, self.dofmap)
        value = self._coef(SYM_X ** 2) @ (lap @ self._coef(SYM_X))
        self.assertAlmostEqual(value, 1.0, places=10)

    def test_transport_exact(self):
        """Test: chi' B psi = 1/36 for psi = x^2 and the bubble chi"""
        b = assemble_transport(self.mesh, self.dofmap)
        value = self._coef(BUBBLE.expr) @ (b @ self._coef(SYM_X ** 2))
        self.assertAlmostEqual(value, 1.0 / 36.0, places=11)

    def test_symmetry(self):
        """Test: A0 and L are symmetric"""
        for matrix in (assemble_biharmonic(self.mesh, self.dofmap),
                       assemble_laplace(self.mesh, self.dofmap)):
            asym = abs(matrix - matrix.T).max()
            self.assertLess(asym, 1e-10 * abs(matrix).max())

    def test_kernels(self):
        """Test: L annihilates constants and A0 annihilates linear fields"""
        lap = assemble_laplace(self.mesh, self.dofmap)
        a0 = assemble_biharmonic(self.mesh, self.dofmap)
        self.assertLess(np.abs(lap @ self._coef(sympy.Integer(1))).max(), 1e-10)
        self.assertLess(np.abs(a0 @ self._coef(2 * SYM_X - SYM_Y + 1)).max(), 1e-8)

    def test_transport_antisymmetric_when_clamped(self):
        """Test: reduced B is skew-symmetric under clamped constraints"""
        dofmap = build_dofmap(self.mesh, BoundaryMode.CLAMPED)
        b = assemble_transport(self.mesh, dofmap)
        reduced = apply_constraints(b, np.zeros(dofmap.n_dofs), dofmap).matrix
        self.assertLess(abs(reduced + reduced.T).max(), 1e-12 * abs(reduced).max() + 1e-14)

    def test_reduced_biharmonic_spd(self):
        """Test: clamped A0 restricted to free DOFs is positive definite"""
        dofmap = build_dofmap(self.mesh, BoundaryMode.CLAMPED)
        a0 = assemble_biharmonic(self.mesh, dofmap)
        reduced = apply_constraints(a0, np.zeros(dofmap.n_dofs), dofmap).matrix.toarray()
        self.assertEqual(reduced.shape, (106, 106))
        eigenvalues = np.linalg.eigvalsh(0.5 * (reduced + reduced.T))
        self.assertGreater(eigenvalues.min(), 0.0)

    def test_biharmonic_energy(self):
        """Test: energy of the interpolated bubble squared approaches 4/1225"""
        mesh = build_structured_mesh(1.0, 1.0, "1/16")
        dofmap = build_dofmap(mesh)
        solution = manufactured("biharmonic-square")
        c = interpolate(mesh, solution.psi, dofmap).coefficients
        energy = c @ (assemble_biharmonic(mesh, dofmap) @ c)
        self.assertAlmostEqual(energy / (4.0 / 1225.0), 1.0, delta=1e-3)

    def test_csr_sorted(self):
        """Test: operators are CSR with sorted indices"""
        a0 = assemble_biharmonic(self.mesh, self.dofmap)
        self.assertTrue(sp.isspmatrix_csr(a0))
        self.assertTrue(a0.has_sorted_indices)


class TestLoad(unittest.TestCase):
    """Load vectors"""

    def test_constant_load(self):
        """Test: constant f=1 tested against the constant interpolant gives the area"""
        mesh = build_structured_mesh(3.0, 1.0, "1/2")
        dofmap = build_dofmap(mesh)
        ones = interpolate(mesh, SymbolicField(sympy.Integer(1)), dofmap).coefficients
        self.assertAlmostEqual(assemble_load(mesh, dofmap, None, 1.0) @ ones, 3.0, places=12)

    def test_callable_matches_constant(self):
        """Test: callable and constant forcing agree"""
        mesh = build_structured_mesh(1.0, 1.0, "1/2")
        dofmap = build_dofmap(mesh)
        a = assemble_load(mesh, dofmap, None, 2.5)
        b = assemble_load(mesh, dofmap, None, lambda x, y: np.full_like(x, 2.5))
        np.testing.assert_allclose(a, b, atol=1e-14)

    def test_manufactured_load(self):
        """Test: int f u approaches 4/1225 for the biharmonic solution"""
        mesh = build_structured_mesh(1.0, 1.0, "1/16")
        dofmap = build_dofmap(mesh)
        solution = manufactured("biharmonic-square")
        load = assemble_load(mesh, dofmap, None, solution.forcing)
        value = load @ interpolate(mesh, solution.psi, dofmap).coefficients
        self.assertAlmostEqual(value / (4.0 / 1225.0), 1.0, delta=1e-3)


class TestTrilinear(unittest.TestCase):
    """Nonlinear term and its Jacobian"""

    def setUp(self):
        self.mesh = build_structured_mesh(1.0, 1.0, "1/2")
        self.dofmap = build_dofmap(self.mesh)
        rng = np.random.default_rng(7)
        self.psi = rng.standard_normal(self.dofmap.n_dofs) * 0.1
        self.delta = rng.standard_normal(self.dofmap.n_dofs) * 0.1

    def test_quadratic_homogeneity(self):
        """Test: N(2 psi) = 4 N(psi)"""
        n1 = trilinear_residual(self.mesh, self.dofmap, None, self.psi)
        n2 = trilinear_residual(self.mesh, self.dofmap, None, 2.0 * self.psi)
        np.testing.assert_allclose(n2, 4.0 * n1, rtol=1e-10, atol=1e-12)

    def test_orthogonal_to_argument(self):
        """Test: psi' N(psi) vanishes"""
        n = trilinear_residual(self.mesh, self.dofmap, None, self.psi)
        self.assertLess(abs(self.psi @ n), 1e-10 * np.linalg.norm(n) * np.linalg.norm(self.psi))

    def test_jacobian_matches_difference(self):
        """Test: N(psi + d) - N(psi) = K(psi) d + N(d)"""
        mesh, dofmap = self.mesh, self.dofmap
        lhs = (trilinear_residual(mesh, dofmap, None, self.psi + self.delta)
               - trilinear_residual(mesh, dofmap, None, self.psi))
        k = trilinear_jacobian(mesh, dofmap, None, self.psi)
        rhs = k @ self.delta + trilinear_residual(mesh, dofmap, None, self.delta)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-10 * np.abs(lhs).max())

    def test_central_difference(self):
        """Test: central finite difference of N equals K(psi) d"""
        mesh, dofmap = self.mesh, self.dofmap
        eps = 1e-3
        fd = (trilinear_residual(mesh, dofmap, None, self.psi + eps * self.delta)
              - trilinear_residual(mesh, dofmap, None, self.psi - eps * self.delta)) / (2 * eps)
        k = trilinear_jacobian(mesh, dofmap, None, self.psi)
        np.testing.assert_allclose(fd, k @ self.delta, rtol=1e-7, atol=1e-9 * np.abs(fd).max())

    def test_accepts_field(self):
        """Test: FemField and raw coefficients give the same residual"""
        field = interpolate(self.mesh, BUBBLE, self.dofmap)
        a = trilinear_residual(self.mesh, self.dofmap, None, field)
        b = trilinear_residual(self.mesh, self.dofmap, None, field.coefficients)
        np.testing.assert_array_equal(a, b)

    def test_wrong_length(self):
        """Test: coefficient length must match the dofmap"""
        with self.assertRaises(ValidationError):
            trilinear_residual(self.mesh, self.dofmap, None, np.zeros(3))


class TestConstraints(unittest.TestCase):
    """Elimination of constrained DOFs"""

    def setUp(self):
        self.mesh = build_structured_mesh(1.0, 1.0, "1/2")

    def test_reduced_shape(self):
        """Test: reduced system has one row per free DOF"""
        dofmap = build_dofmap(self.mesh, BoundaryMode.CLAMPED)
        a0 = assemble_biharmonic(self.mesh, dofmap)
        system = apply_constraints(a0, np.ones(dofmap.n_dofs), dofmap)
        self.assertEqual(system.matrix.shape, (18, 18))
        self.assertEqual(system.size, 18)
        self.assertEqual(system.rhs.shape, (18,))

    def test_expand_restrict(self):
        """Test: expand fills prescribed values, restrict picks free entries"""
        lifting = SymbolicField(SYM_X + SYM_Y)
        dofmap = build_dofmap(self.mesh, BoundarySpec(BoundaryMode.LIFTED_DIRICHLET, lifting))
        lap = assemble_laplace(self.mesh, dofmap)
        system = apply_constraints(lap, np.zeros(dofmap.n_dofs), dofmap)
        reduced = np.arange(system.size, dtype=float)
        full = system.expand(reduced)
        np.testing.assert_array_equal(system.restrict(full), reduced)
        np.testing.assert_array_equal(full[system.constrained], dofmap.prescribed[system.constrained])
        with self.assertRaises(ValidationError):
            system.expand(np.zeros(system.size + 1))

    def test_lifting_moves_to_rhs(self):
        """Test: rhs is reduced by A times the prescribed vector"""
        lifting = SymbolicField(SYM_X ** 2 + SYM_Y)
        dofmap = build_dofmap(self.mesh, BoundarySpec(BoundaryMode.LIFTED_DIRICHLET, lifting))
        lap = assemble_laplace(self.mesh, dofmap)
        rhs = np.ones(dofmap.n_dofs)
        system = apply_constraints(lap, rhs, dofmap)
        expected = (rhs - lap @ dofmap.prescribed)[dofmap.free_dofs]
        np.testing.assert_allclose(system.rhs, expected)

    def test_dimension_mismatch(self):
        """Test: mismatched sizes raise ValidationError"""
        dofmap = build_dofmap(self.mesh, BoundaryMode.CLAMPED)
        with self.assertRaises(ValidationError):
            apply_constraints(sp.identity(10, format="csr"), np.zeros(10), dofmap)


class TestMatrixMarket(unittest.TestCase):
    """MatrixMarket export"""

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def test_write_and_read_back(self):
        """Test: exported matrix reads back with the same entries"""
        mesh = build_structured_mesh(1.0, 1.0, "1/2")
        dofmap = build_dofmap(mesh, BoundaryMode.CLAMPED)
        a0 = assemble_biharmonic(mesh, dofmap)
        path = write_matrix_market(a0, os.path.join(self.test_dir, "sub", "a0.mtx"),
                                   comment="biharmonic h=1/2")
        with open(path, "r", encoding="utf-8") as handle:
            self.assertTrue(handle.readline().startswith("%%MatrixMarket matrix coordinate real"))
        back = sp.csr_matrix(scipy.io.mmread(path))
        self.assertEqual(back.shape, a0.shape)
        self.assertLess(abs(back - a0).max(), 1e-12 * abs(a0).max())


if __name__ == "__main__":
    unittest.main()
