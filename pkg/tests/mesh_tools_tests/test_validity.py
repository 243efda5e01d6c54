import unittest
from unittest import mock

import numpy as np

from mesh_tools import validity
from mesh_tools.basis import gll_nodes, tensor_interpolation
from mesh_tools.bounds import Verdict, bernstein_lower_bound, bound_function_1d, bound_function_2d, build_bound_table
from mesh_tools.mesh import jacobian
from tests.fixtures import (curved_mesh, folded_mesh, perturbed_square_mesh, reference_element,
                            structured_quad_mesh, undersampled_element)


def random_element(p, rng, amplitude=0.2):
    """
    Reference square with every node moved by up to <amplitude> of the node spacing.
    """
    def moved(xi, eta):
        spacing = 2.0 / p
        return (xi + amplitude * spacing * rng.uniform(-1.0, 1.0, xi.shape),
                eta + amplitude * spacing * rng.uniform(-1.0, 1.0, eta.shape))
    return reference_element(p, moved)


class DetDegreeTests(unittest.TestCase):

    def test_degrees(self):
        self.assertEqual(validity.det_degree(1), 1)
        self.assertEqual(validity.det_degree(4), 7)
        self.assertEqual(validity.default_control_nodes(2), 8)
        self.assertEqual(validity.default_control_nodes(4), 16)

    def test_nodal_values_reproduce_det(self):
        mesh = curved_mesh(n=2, p=3, amplitude=0.08)
        nodal = validity.det_nodal_values(mesh, 3)
        self.assertEqual(nodal.shape, (36,))
        # det has degree 5 per direction, so the degree-5 lattice values determine it everywhere
        ns = gll_nodes(5)
        point = np.array([[0.37, -0.81]])
        interpolated = tensor_interpolation(ns, nodal, point[:, 0], point[:, 1])[0, 0]
        self.assertAlmostEqual(interpolated, float(np.linalg.det(jacobian(mesh, 3, point[0]))), places=12)


class CertifyTests(unittest.TestCase):

    def test_affine_mesh(self):
        certificate = validity.certify_mesh(structured_quad_mesh(2, 2, 2))
        self.assertTrue(certificate.all_positive)
        self.assertEqual(certificate.verdict, Verdict.POSITIVE)
        self.assertAlmostEqual(certificate.alpha_lower, 0.0625, places=10)
        self.assertAlmostEqual(certificate.sampled_min, 0.0625, places=12)
        self.assertEqual(certificate.inverted, [])
        self.assertEqual(certificate.undecided, [])

    def test_folded_mesh_is_negative(self):
        for p in (1, 2, 3):
            certificate = validity.certify_mesh(folded_mesh(p))
            self.assertEqual(certificate.verdict, Verdict.NEGATIVE, f"p={p}")
            self.assertIn(4, certificate.inverted)
            self.assertLess(certificate.alpha_lower, 0.0)

    def test_undersampled_element(self):
        mesh = undersampled_element()
        self.assertGreater(validity.sampled_min_det(mesh, 10), 0.0)
        self.assertLess(validity.dense_min_det(mesh, 0), 0.0)
        certificate = validity.certify_element(mesh, 0, max_depth=6)
        self.assertEqual(certificate.verdict, Verdict.NEGATIVE)
        self.assertLessEqual(certificate.depth_used, 6)
        self.assertLess(certificate.certified_upper, 0.0)

    def test_depth_zero_can_be_undecided(self):
        certificate = validity.certify_mesh(undersampled_element(offset=1e-6), max_depth=0)
        self.assertEqual(certificate.verdict, Verdict.UNDECIDED)
        self.assertEqual(certificate.undecided, [0])

    def test_near_singular_valid_element(self):
        mesh = undersampled_element(offset=-1e-3)
        certificate = validity.certify_element(mesh, 0)
        self.assertEqual(certificate.verdict, Verdict.POSITIVE)
        self.assertGreater(certificate.certified_lower, 0.0)
        self.assertLessEqual(certificate.certified_lower, 1e-3 + 1e-12)

    def test_lower_bound_below_sampled_and_dense_minima(self):
        for mesh in (perturbed_square_mesh(2, 2), perturbed_square_mesh(2, 3, seed=3), curved_mesh(n=2, p=4)):
            certificate = validity.certify_mesh(mesh, quad_orders=10)
            for element in certificate.elements:
                self.assertLessEqual(element.certified_lower, element.sampled_min + 1e-12)
                dense = validity.dense_min_det(mesh, element.element, samples=60)
                self.assertLessEqual(element.certified_lower, dense + 1e-12)
                self.assertGreaterEqual(element.certified_upper, element.certified_lower)

    def test_per_element_quadrature_orders(self):
        mesh = perturbed_square_mesh(2, 2)
        minima = validity.element_sampled_min_dets(mesh, [4, 10, 10, 20])
        self.assertEqual(minima.shape, (4,))
        self.assertAlmostEqual(minima[1], validity.element_sampled_min_dets(mesh, 10)[1])

    def test_thread_pool_gives_same_result(self):
        mesh = perturbed_square_mesh(3, 2)
        serial = validity.certify_mesh(mesh, workers=1)
        pooled = validity.certify_mesh(mesh, workers=3)
        self.assertEqual([c.certified_lower for c in serial.elements],
                         [c.certified_lower for c in pooled.elements])

    def test_worker_count_from_settings(self):
        with mock.patch('mesh_tools.validity.ThreadPoolExecutor') as executor:
            executor.return_value.__enter__.return_value.map.side_effect = map
            with mock.patch('mesh_tools.validity.AppSettings.worker_count', 2):
                validity.certify_mesh(perturbed_square_mesh(2, 2))
        executor.assert_called_once_with(max_workers=2)

    def test_minimum_bracket(self):
        mesh = undersampled_element()
        bracket = validity.det_minimum_bracket(mesh, 0, max_depth=4)
        dense = validity.dense_min_det(mesh, 0)
        self.assertLessEqual(bracket.lower, dense + 1e-12)
        self.assertLess(bracket.upper, 0.0)


class BernsteinComparisonTests(unittest.TestCase):

    def test_bernstein_lower_is_sound(self):
        rng = np.random.default_rng(21)
        for p in (2, 3):
            for _ in range(5):
                mesh = random_element(p, rng)
                dense = validity.dense_min_det(mesh, 0, 80)
                self.assertLessEqual(validity.bernstein_det_lower(mesh, 0), dense + 1e-12)

    def test_piecewise_linear_bound_beats_bernstein_on_elements(self):
        rng = np.random.default_rng(2024)
        for p in (2, 3, 4):
            table = build_bound_table(validity.det_degree(p), 2 * (2 * p))
            wins = 0
            for _ in range(100):
                mesh = random_element(p, rng)
                nodal = validity.det_nodal_values(mesh, 0)
                piecewise = bound_function_2d(table, nodal).min_lower
                if piecewise >= bernstein_lower_bound(nodal, validity.det_degree(p)):
                    wins += 1
            self.assertGreaterEqual(wins, 90, f"p={p}")

    def test_piecewise_linear_bound_beats_bernstein_in_1d(self):
        rng = np.random.default_rng(99)
        p = 7
        table = build_bound_table(p, 4 * (p + 1))
        trials = 300
        wins = 0
        for _ in range(trials):
            nodal = rng.normal(size=p + 1)
            if bound_function_1d(table, nodal).min_lower >= bernstein_lower_bound(nodal, p):
                wins += 1
        self.assertGreaterEqual(wins, 0.9 * trials)
