#!/usr/bin/env python

"""Tests for `flowtopo.fem` module."""

import gc
import unittest
import weakref
from math import factorial

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from flowtopo.fem import (
    FunctionSpace,
    SingularMatrixError,
    SolverError,
    assemble_matrix,
    assemble_vector,
    element_data,
    eval_basis,
    p1_operators,
    quadrature_rule,
    solve_saddle,
    solve_spd,
)

from .test_fixtures import diffuser_mesh, two_triangle_mesh


def dirichlet_mean(a, b, c):
    """Mean of l0^a l1^b l2^c over a triangle."""
    return 2.0 * factorial(a) * factorial(b) * factorial(c) / factorial(a + b + c + 2)


class TestQuadrature(unittest.TestCase):
    """Tests for the triangle quadrature rules."""

    def test_weights_sum_to_one(self):
        for degree in range(1, 7):
            rule = quadrature_rule(degree)
            self.assertAlmostEqual(float(rule.weights.sum()), 1.0, places=14)
            np.testing.assert_allclose(rule.points.sum(axis=1), 1.0, atol=1e-15)
            self.assertTrue(np.all(rule.weights > 0))

    def test_exact_for_monomials(self):
        for degree in range(1, 7):
            rule = quadrature_rule(degree)
            lam = rule.points
            for a in range(degree + 1):
                for b in range(degree + 1 - a):
                    for c in range(degree + 1 - a - b):
                        monomial = lam[:, 0] ** a * lam[:, 1] ** b * lam[:, 2] ** c
                        self.assertAlmostEqual(
                            float(rule.weights @ monomial),
                            dirichlet_mean(a, b, c),
                            places=13,
                            msg=f"degree {degree}: {a}{b}{c}",
                        )

    def test_bubble_squared(self):
        rule = quadrature_rule(6)
        bubble = 27.0 * rule.points.prod(axis=1)
        self.assertAlmostEqual(
            float(rule.weights @ bubble**2), 729.0 * 16.0 / 40320.0, places=13
        )

    def test_degree_three_uses_degree_four_points(self):
        np.testing.assert_array_equal(quadrature_rule(3).points, quadrature_rule(4).points)

    def test_unsupported_degree(self):
        with self.assertRaises(ValueError):
            quadrature_rule(7)
        with self.assertRaises(ValueError):
            quadrature_rule(0)


class TestFunctionSpace(unittest.TestCase):
    """Tests for the P1 and MINI spaces and their local bases."""

    def setUp(self):
        self.mesh = two_triangle_mesh()

    def test_dof_counts(self):
        p1 = FunctionSpace(self.mesh, "P1")
        mini = FunctionSpace(self.mesh, "MINI")
        self.assertEqual(p1.dof_count, 4)
        self.assertEqual(mini.dof_count, 2 * (4 + 2))
        self.assertEqual(mini.component_dofs(1).tolist()[0], [6, 7, 8, 10])
        self.assertEqual(mini.vertex_slice(1), slice(6, 10))
        with self.assertRaises(ValueError):
            FunctionSpace(self.mesh, "P2")

    def test_p1_values_are_barycentric(self):
        space = FunctionSpace(self.mesh, "P1")
        point = [0.2, 0.3, 0.5]
        values, gradients = eval_basis(space, 0, point)
        np.testing.assert_allclose(values, point)
        np.testing.assert_allclose(gradients.sum(axis=0), 0.0, atol=1e-14)
        # Triangle 0 is (0,0), (1,0), (1,1)
        np.testing.assert_allclose(gradients, [[-1.0, 0.0], [1.0, -1.0], [0.0, 1.0]])

    def test_mini_bubble(self):
        space = FunctionSpace(self.mesh, "MINI")
        values, gradients = eval_basis(space, 1, np.full(3, 1.0 / 3.0))
        self.assertAlmostEqual(values[3], 1.0)
        np.testing.assert_allclose(gradients[3], 0.0, atol=1e-14)
        values, _ = eval_basis(space, 1, [1.0, 0.0, 0.0])
        self.assertEqual(values[3], 0.0)

    def test_point_outside(self):
        space = FunctionSpace(self.mesh, "P1")
        with self.assertRaises(ValueError):
            eval_basis(space, 0, [1.2, -0.1, -0.1])

    def test_element_data_shapes(self):
        space = FunctionSpace(self.mesh, "MINI")
        data = element_data(space, 4)
        self.assertEqual(data.values.shape, (6, 4))
        self.assertEqual(data.grads.shape, (2, 6, 4, 2))
        self.assertAlmostEqual(float(data.dx.sum()), 1.0)
        self.assertIs(element_data(space, 4), data)


class TestAssembly(unittest.TestCase):
    """Tests for global assembly and the P1 operators."""

    def test_assemble_matrix_sums_duplicates(self):
        local = np.ones((2, 2, 2))
        dofs = np.array([[0, 1], [1, 2]])
        matrix = assemble_matrix(local, dofs, dofs, (3, 3)).toarray()
        np.testing.assert_array_equal(
            matrix, [[1, 1, 0], [1, 2, 1], [0, 1, 1]]
        )

    def test_assemble_matrix_shape_mismatch(self):
        with self.assertRaises(ValueError):
            assemble_matrix(
                np.ones((2, 2, 2)), np.zeros((2, 3), int), np.zeros((2, 2), int), (3, 3)
            )

    def test_assemble_vector(self):
        vector = assemble_vector(np.ones((2, 2)), np.array([[0, 1], [1, 2]]), 4)
        np.testing.assert_array_equal(vector, [1, 2, 1, 0])

    def test_p1_operators(self):
        mesh, _ = diffuser_mesh(6)
        ops = p1_operators(mesh)
        ones = np.ones(mesh.n_vertices)
        self.assertAlmostEqual(float(ones @ (ops.mass @ ones)), 1.0, places=13)
        self.assertAlmostEqual(float(ops.lumped.sum()), mesh.domain_area, places=13)
        np.testing.assert_allclose(ops.stiffness @ ones, 0.0, atol=1e-12)
        x = mesh.vertices[:, 0]
        self.assertAlmostEqual(float(x @ (ops.stiffness @ x)), 1.0, places=12)
        self.assertAlmostEqual(float(x @ (ops.mass @ x)), 1.0 / 3.0, places=13)
        self.assertLess(abs(ops.mass - ops.mass.T).max(), 1e-15)
        self.assertIs(p1_operators(mesh), ops)

    def test_operator_cache_released_with_mesh(self):
        mesh, _ = diffuser_mesh(4)
        p1_operators(mesh)
        element_data(FunctionSpace(mesh, "MINI"), 4)
        ref = weakref.ref(mesh)
        del mesh
        gc.collect()
        self.assertIsNone(ref())


class TestSolvers(unittest.TestCase):
    """Tests for the SPD and saddle-point solvers."""

    def test_solve_spd(self):
        n = 50
        A = sp.diags([-1.0, 2.5, -1.0], [-1, 0, 1], shape=(n, n), format="csr")
        b = np.random.default_rng(1).normal(size=n)
        x, iterations = solve_spd(A, b, tol=1e-12, return_iterations=True)
        np.testing.assert_allclose(x, spsolve(A.tocsc(), b), rtol=1e-9, atol=1e-11)
        self.assertGreater(iterations, 0)

    def test_solve_spd_zero_rhs(self):
        x = solve_spd(sp.identity(3, format="csr"), np.zeros(3))
        np.testing.assert_array_equal(x, 0.0)

    def test_solve_spd_rejects_negative_diagonal(self):
        A = sp.diags([1.0, -1.0, 1.0], format="csr")
        with self.assertRaises(SolverError):
            solve_spd(A, np.ones(3))

    def test_solve_saddle_stokes_like(self):
        rng = np.random.default_rng(2)
        B = rng.normal(size=(2, 4))
        A = sp.bmat([[sp.identity(4), B.T], [B, None]], format="csr")
        exact = rng.normal(size=6)
        x = solve_saddle(A, A @ exact)
        np.testing.assert_allclose(x, exact, rtol=1e-10, atol=1e-12)
        self.assertLess(np.linalg.norm(A @ x - A @ exact), 1e-10)

    def test_solve_saddle_zero_row(self):
        A = sp.csr_matrix(np.array([[1.0, 0.0], [0.0, 0.0]]))
        with self.assertRaises(SingularMatrixError) as ctx:
            solve_saddle(A, np.ones(2))
        self.assertEqual(ctx.exception.pivot, 1)

    def test_solve_saddle_singular(self):
        A = sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
        with self.assertRaises(SingularMatrixError):
            solve_saddle(A, np.ones(2))

    def test_solve_saddle_shape_mismatch(self):
        with self.assertRaises(ValueError):
            solve_saddle(sp.identity(3), np.ones(2))


if __name__ == "__main__":
    unittest.main()
