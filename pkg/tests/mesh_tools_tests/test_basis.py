import unittest
import warnings

import numpy as np

from mesh_tools import basis


class GllNodesTests(unittest.TestCase):

    def test_known_nodes(self):
        np.testing.assert_allclose(basis.gll_nodes(2).nodes, [-1.0, 0.0, 1.0], atol=1e-15)
        np.testing.assert_allclose(basis.gll_nodes(3).nodes, [-1.0, -1.0 / np.sqrt(5.0), 1.0 / np.sqrt(5.0), 1.0],
                                   atol=1e-14)
        np.testing.assert_allclose(basis.gll_nodes(4).nodes, [-1.0, -np.sqrt(3.0 / 7.0), 0.0, np.sqrt(3.0 / 7.0), 1.0],
                                   atol=1e-14)

    def test_known_weights(self):
        np.testing.assert_allclose(basis.gll_nodes(2).weights, [1.0 / 3.0, 4.0 / 3.0, 1.0 / 3.0], atol=1e-14)
        np.testing.assert_allclose(basis.gll_nodes(3).weights, [1.0 / 6.0, 5.0 / 6.0, 5.0 / 6.0, 1.0 / 6.0],
                                   atol=1e-14)

    def test_nodes_sorted_symmetric_and_weights_sum_to_two(self):
        for p in range(1, 17):
            ns = basis.gll_nodes(p)
            self.assertEqual(ns.size, p + 1)
            self.assertEqual(ns.nodes[0], -1.0)
            self.assertEqual(ns.nodes[-1], 1.0)
            self.assertTrue(np.all(np.diff(ns.nodes) > 0.0))
            np.testing.assert_allclose(ns.nodes, -ns.nodes[::-1], atol=1e-15)
            self.assertAlmostEqual(ns.weights.sum(), 2.0, places=13)

    def test_bad_degree(self):
        with self.assertRaises(basis.BasisError):
            basis.gll_nodes(0)

    def test_cached_arrays_are_read_only(self):
        ns = basis.gll_nodes(5)
        self.assertIs(ns, basis.gll_nodes(5))
        with self.assertRaises(ValueError):
            ns.nodes[0] = 3.0


class LagrangeTests(unittest.TestCase):

    def test_kronecker_property(self):
        for p in (1, 2, 5, 8):
            ns = basis.gll_nodes(p)
            np.testing.assert_array_equal(basis.lagrange_eval(ns, ns.nodes), np.eye(p + 1))

    def test_partition_of_unity(self):
        ns = basis.gll_nodes(6)
        x = np.linspace(-1.0, 1.0, 41)
        np.testing.assert_allclose(basis.lagrange_eval(ns, x).sum(axis=1), 1.0, atol=1e-13)
        np.testing.assert_allclose(basis.lagrange_deriv(ns, x).sum(axis=1), 0.0, atol=1e-11)

    def test_polynomials_reproduced_with_derivatives(self):
        p = 5
        ns = basis.gll_nodes(p)
        coefficients = np.array([0.3, -1.2, 0.5, 2.0, -0.7, 0.25])
        poly = np.polynomial.Polynomial(coefficients)
        x = np.linspace(-1.0, 1.0, 23)
        nodal = poly(ns.nodes)
        np.testing.assert_allclose(basis.lagrange_eval(ns, x) @ nodal, poly(x), atol=1e-12)
        np.testing.assert_allclose(basis.lagrange_deriv(ns, x) @ nodal, poly.deriv()(x), atol=1e-11)
        np.testing.assert_allclose(basis.lagrange_second_deriv(ns, x) @ nodal, poly.deriv(2)(x), atol=1e-9)

    def test_shape_follows_input(self):
        ns = basis.gll_nodes(3)
        self.assertEqual(basis.lagrange_eval(ns, 0.1).shape, (4,))
        self.assertEqual(basis.lagrange_eval(ns, np.zeros((2, 5))).shape, (2, 5, 4))

    def test_differentiation_matrix(self):
        ns = basis.gll_nodes(4)
        D = basis.differentiation_matrix(4)
        np.testing.assert_allclose(D @ ns.nodes ** 3, 3.0 * ns.nodes ** 2, atol=1e-12)
        np.testing.assert_allclose(D @ np.ones(5), 0.0, atol=1e-13)


class QuadratureTests(unittest.TestCase):

    def test_points_for_order(self):
        self.assertEqual(basis.points_for_order(1), 2)
        self.assertEqual(basis.points_for_order(3), 3)
        self.assertEqual(basis.points_for_order(10), 7)
        with self.assertRaises(basis.BasisError):
            basis.points_for_order(0)

    def test_exactness(self):
        for order in (2, 5, 10, 20):
            rule = basis.gll_quadrature(order)
            self.assertGreaterEqual(rule.exactness, order)
            for degree in range(order + 1):
                exact = 0.0 if degree % 2 else 2.0 / (degree + 1)
                self.assertAlmostEqual(float(rule.weights @ rule.points ** degree), exact, places=12)

    def test_reference_tables_integrate_area(self):
        tables = basis.reference_tables(3, 6)
        self.assertAlmostEqual(tables.weights.sum(), 4.0, places=12)
        np.testing.assert_allclose(tables.values.sum(axis=1), 1.0, atol=1e-13)
        np.testing.assert_allclose(tables.d_xi.sum(axis=1), 0.0, atol=1e-11)
        # d/dxi of the xi coordinate is 1 everywhere
        ns = basis.gll_nodes(3)
        xi = np.tile(ns.nodes, 4)
        eta = np.repeat(ns.nodes, 4)
        np.testing.assert_allclose(tables.d_xi @ xi, 1.0, atol=1e-12)
        np.testing.assert_allclose(tables.d_eta @ xi, 0.0, atol=1e-12)
        np.testing.assert_allclose(tables.d_eta @ eta, 1.0, atol=1e-12)
        np.testing.assert_allclose(tables.values @ xi, tables.points[:, 0], atol=1e-13)

    def test_reference_table_cache_is_bounded(self):
        basis.reference_tables.cache_clear()
        for p in range(1, 4):
            for order in range(1, basis.REFERENCE_TABLE_CACHE_SIZE):
                basis.reference_tables(p, order)
        info = basis.reference_tables.cache_info()
        self.assertEqual(info.maxsize, basis.REFERENCE_TABLE_CACHE_SIZE)
        self.assertEqual(info.currsize, basis.REFERENCE_TABLE_CACHE_SIZE)
        basis.reference_tables.cache_clear()


class BernsteinTests(unittest.TestCase):

    def test_matrix_is_partition_of_unity(self):
        x = np.linspace(-1.0, 1.0, 17)
        for p in (1, 3, 7):
            np.testing.assert_allclose(basis.bernstein_matrix(p, x).sum(axis=-1), 1.0, atol=1e-14)

    def test_conversion_reproduces_polynomial(self):
        p = 6
        ns = basis.gll_nodes(p)
        poly = np.polynomial.Polynomial([1.0, -0.5, 0.25, 2.0, 0.1, -1.0, 0.3])
        coefficients = basis.to_bernstein(ns, poly(ns.nodes))
        x = np.linspace(-1.0, 1.0, 31)
        np.testing.assert_allclose(basis.bernstein_eval(coefficients, x), poly(x), atol=1e-12)

    def test_endpoint_coefficients_are_endpoint_values(self):
        ns = basis.gll_nodes(5)
        values = np.sin(np.arange(6.0))
        coefficients = basis.to_bernstein(ns, values)
        self.assertAlmostEqual(coefficients[0], values[0], places=13)
        self.assertAlmostEqual(coefficients[-1], values[-1], places=13)

    def test_wrong_length(self):
        with self.assertRaises(basis.BasisError):
            basis.to_bernstein(basis.gll_nodes(3), np.ones(5))

    def test_tensor_conversion(self):
        p = 3
        ns = basis.gll_nodes(p)
        xi, eta = np.meshgrid(ns.nodes, ns.nodes)
        values = (xi ** 2 * eta - 0.5 * eta ** 3 + xi).ravel()
        coefficients = basis.to_bernstein_2d(ns, values)
        x = np.array([-0.9, -0.2, 0.4, 1.0])
        y = np.array([-1.0, 0.3, 0.7])
        by = basis.bernstein_matrix(p, y)
        bx = basis.bernstein_matrix(p, x)
        np.testing.assert_allclose(by @ coefficients @ bx.T, basis.tensor_interpolation(ns, values, x, y), atol=1e-12)

    def test_well_conditioned_degrees_do_not_warn(self):
        with warnings.catch_warnings():
            warnings.simplefilter('error', basis.ConditioningWarning)
            basis.to_bernstein(basis.gll_nodes(8), np.ones(9))


class TensorTests(unittest.TestCase):

    def test_lattice_index(self):
        self.assertEqual(basis.lattice_index(0, 0, 2), 0)
        self.assertEqual(basis.lattice_index(2, 0, 2), 2)
        self.assertEqual(basis.lattice_index(0, 1, 2), 3)
        self.assertEqual(basis.lattice_index(2, 2, 2), 8)

    def test_tensor_interpolation_orientation(self):
        ns = basis.gll_nodes(2)
        xi, eta = np.meshgrid(ns.nodes, ns.nodes)
        values = (2.0 * xi + 3.0 * eta).ravel()
        x = np.array([0.5, -0.25])
        y = np.array([0.1, 0.2, 0.3])
        grid = basis.tensor_interpolation(ns, values, x, y)
        self.assertEqual(grid.shape, (3, 2))
        np.testing.assert_allclose(grid, 2.0 * x[None, :] + 3.0 * y[:, None], atol=1e-14)
