import unittest
from unittest import mock

import numpy as np

from mesh_tools.mesh import NodeKind, classify_nodes, extract_boundary
from optimizer_tools import tangential
from tests.fixtures import annulus_mesh, curved_mesh, structured_quad_mesh


def brute_force_distance(curve, point, samples=4001):
    t = np.linspace(-1.0, 1.0, samples)
    best = np.inf
    for segment in range(curve.num_segments):
        distances = np.linalg.norm(curve.point(segment, t) - point, axis=1)
        best = min(best, float(distances.min()))
    return best


class ClosestPointTests(unittest.TestCase):

    def setUp(self):
        self.mesh = annulus_mesh(n_theta=12, p=3)
        self.curve = extract_boundary(self.mesh, [5, 6])

    def test_beats_brute_force(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            radius = rng.uniform(0.3, 1.3)
            angle = rng.uniform(0.0, 2.0 * np.pi)
            point = radius * np.array([np.cos(angle), np.sin(angle)])
            result = tangential.closest_point(self.curve, point)
            self.assertLessEqual(np.sqrt(result.residual), brute_force_distance(self.curve, point) + 1e-12)
            self.assertTrue(-1.0 <= result.t <= 1.0)
            np.testing.assert_allclose(result.point, self.curve.point(result.segment, result.t), atol=1e-15)

    def test_point_on_curve(self):
        point = self.curve.point(3, 0.27)
        result = tangential.closest_point(self.curve, point)
        self.assertLess(result.residual, 1e-24)
        np.testing.assert_allclose(result.point, point, atol=1e-12)

    def test_attribute_restricts_segments(self):
        point = np.array([0.55, 0.0])
        near = tangential.closest_point(self.curve, point)
        outer = tangential.closest_point(self.curve, point, attribute=6)
        self.assertEqual(self.curve.attributes[near.segment], 5)
        self.assertEqual(self.curve.attributes[outer.segment], 6)
        self.assertAlmostEqual(np.linalg.norm(outer.point), 1.0, places=3)

    def test_straight_segment(self):
        curve = extract_boundary(structured_quad_mesh(2, 1, 2), [1])
        result = tangential.closest_point(curve, [0.3, -0.4])
        np.testing.assert_allclose(result.point, [0.3, 0.0], atol=1e-14)
        self.assertAlmostEqual(result.residual, 0.16)


class BlendTests(unittest.TestCase):

    def test_stiffness_matrix(self):
        mesh = curved_mesh(n=2, p=2)
        stiffness = tangential.stiffness_matrix(mesh)
        self.assertEqual(stiffness.shape, (mesh.num_nodes, mesh.num_nodes))
        self.assertLess(abs(stiffness - stiffness.T).max(), 1e-12)
        np.testing.assert_allclose(stiffness @ np.ones(mesh.num_nodes), 0.0, atol=1e-11)
        x = mesh.nodes[:, 0]
        self.assertAlmostEqual(float(x @ (stiffness @ x)), mesh.total_area(), places=10)

    def test_constant_displacement_is_reproduced(self):
        mesh = structured_quad_mesh(3, 3, 3, single_attribute=True)
        node_class = classify_nodes(mesh, [1])
        self.assertEqual(len(node_class.indices(NodeKind.CORNER)), 0)
        prescribed = np.where(node_class.boundary[:, None], [0.01, -0.02], 0.0)
        field = tangential.laplace_blend(mesh, prescribed, node_class)
        np.testing.assert_allclose(field.displacement, np.broadcast_to([0.01, -0.02], mesh.nodes.shape),
                                   atol=1e-10)
        np.testing.assert_array_equal(field.dirichlet, node_class.boundary)

    def test_linear_displacement_is_reproduced(self):
        mesh = curved_mesh(n=3, p=2)
        mesh.boundary = [type(b)(b.elem, b.edge, 1) for b in mesh.boundary]
        node_class = classify_nodes(mesh, [1])
        exact = 0.01 * np.column_stack([mesh.nodes[:, 0] + 2.0 * mesh.nodes[:, 1], 3.0 * mesh.nodes[:, 0] - 1.0])
        prescribed = np.where(node_class.boundary[:, None], exact, 0.0)
        field = tangential.laplace_blend(mesh, prescribed, node_class)
        np.testing.assert_allclose(field.displacement, exact, atol=1e-10)

    def test_fixed_nodes_do_not_move(self):
        mesh = structured_quad_mesh(2, 2, 2)
        node_class = classify_nodes(mesh, [1])
        prescribed = np.full(mesh.nodes.shape, 0.05)
        field = tangential.laplace_blend(mesh, prescribed, node_class)
        moving = node_class.kinds == NodeKind.TANGENTIAL_BOUNDARY
        np.testing.assert_array_equal(field.displacement[node_class.boundary & ~moving], 0.0)
        np.testing.assert_allclose(field.displacement[moving], 0.05)
        interior = node_class.indices(NodeKind.INTERIOR)
        self.assertTrue(np.all(np.abs(field.displacement[interior]) < 0.05))

    def test_zero_displacement(self):
        mesh = structured_quad_mesh(2, 2, 2)
        node_class = classify_nodes(mesh, [1, 2, 3, 4])
        field = tangential.laplace_blend(mesh, np.zeros_like(mesh.nodes), node_class)
        np.testing.assert_array_equal(field.displacement, 0.0)

    def test_conjugate_gradients_use_relative_tolerance(self):
        mesh = structured_quad_mesh(2, 2, 2, single_attribute=True)
        node_class = classify_nodes(mesh, [1])
        prescribed = np.where(node_class.boundary[:, None], 0.01, 0.0)
        with mock.patch('optimizer_tools.tangential.sp_la.cg', wraps=tangential.sp_la.cg) as cg:
            field = tangential.laplace_blend(mesh, prescribed, node_class, tol=1e-11)
        self.assertEqual(cg.call_count, 2)
        for call in cg.call_args_list:
            self.assertEqual(call.kwargs['rtol'], 1e-11)
            self.assertEqual(call.kwargs['atol'], 0.0)
            self.assertNotIn('tol', call.kwargs)
        np.testing.assert_allclose(field.displacement, 0.01, atol=1e-9)

    def test_solver_failure(self):
        mesh = structured_quad_mesh(2, 2, 2, single_attribute=True)
        node_class = classify_nodes(mesh, [1])
        prescribed = np.where(node_class.boundary[:, None], 0.01, 0.0)
        with mock.patch('optimizer_tools.tangential.sp_la.cg', return_value=(np.zeros(9), 50)):
            with self.assertRaises(tangential.BlendError):
                tangential.laplace_blend(mesh, prescribed, node_class)


class RelaxTests(unittest.TestCase):

    def test_relaxed_nodes_lie_on_frozen_curve(self):
        mesh = annulus_mesh(n_theta=12, p=2)
        node_class = classify_nodes(mesh, [5, 6])
        curve = extract_boundary(mesh, [5, 6])
        rng = np.random.default_rng(4)
        trial = mesh.with_nodes(mesh.nodes + 0.01 * rng.uniform(-1.0, 1.0, mesh.nodes.shape))
        self.assertGreater(tangential.projection_residual(trial, curve, node_class), 1e-4)
        relaxed = tangential.relax(trial, curve, node_class)
        self.assertLessEqual(tangential.projection_residual(relaxed, curve, node_class), 1e-10)

    def test_fixed_boundary_is_untouched(self):
        mesh = curved_mesh(n=2, p=2)
        node_class = classify_nodes(mesh, [1])
        curve = extract_boundary(mesh, [1])
        trial_nodes = mesh.nodes.copy()
        trial_nodes[node_class.movable] += [0.0, 0.01]
        relaxed = tangential.relax(mesh.with_nodes(trial_nodes), curve, node_class)
        fixed = ~node_class.movable
        np.testing.assert_array_equal(relaxed.nodes[fixed], mesh.nodes[fixed])
        on_bottom = node_class.indices(NodeKind.TANGENTIAL_BOUNDARY)
        np.testing.assert_allclose(relaxed.nodes[on_bottom, 1], 0.0, atol=1e-12)
        np.testing.assert_allclose(relaxed.nodes[on_bottom, 0], mesh.nodes[on_bottom, 0], atol=1e-12)

    def test_projection_displacement(self):
        mesh = structured_quad_mesh(2, 2, 2)
        node_class = classify_nodes(mesh, [1])
        curve = extract_boundary(mesh, [1])
        trial = mesh.with_nodes(mesh.nodes + [0.0, 0.02])
        displacement = tangential.project_boundary(trial, curve, node_class)
        moving = node_class.kinds == NodeKind.TANGENTIAL_BOUNDARY
        np.testing.assert_allclose(displacement[moving], np.broadcast_to([0.0, -0.02], displacement[moving].shape),
                                   atol=1e-13)
        np.testing.assert_array_equal(displacement[~moving], 0.0)
