"""
Tangential relaxation of boundary nodes.

Trial boundary nodes are projected back onto the boundary curve extracted
from the initial mesh, and the boundary correction is extended into the
interior by solving a Laplace problem in the mesh's own space.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sp_la

from app_settings.app_settings import AppSettings
from mesh_tools.basis import gll_nodes, reference_tables
from mesh_tools.mesh import BoundaryCurve, Mesh, NodeClass, NodeKind, element_jacobians

SEED_DEGREE = 4
MAX_NEWTON_STEPS = 40
MAX_HALVINGS = 30
STEP_TOLERANCE = 1.0e-15
DEFAULT_BLEND_TOLERANCE = 1.0e-12


class BlendError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProjectionResult:
    point: np.ndarray
    segment: int
    t: float  # reference coordinate on the segment
    residual: float  # squared distance


@dataclass(frozen=True)
class BlendField:
    displacement: np.ndarray  # (N, 2)
    dirichlet: np.ndarray  # (N,) bool
    iterations: int = 0


def _squared_distance(curve: BoundaryCurve, segment: int, t: float, target: np.ndarray) -> float:
    diff = curve.point(segment, t) - target
    return float(diff @ diff)


def _newton_on_segment(curve: BoundaryCurve, segment: int, t: float, target: np.ndarray) -> float:
    """
    Safeguarded Newton on d/dt ‖x(t) - target‖² / 2, kept inside [-1, 1].

    A step is halved until the distance does not grow.
    """
    current = _squared_distance(curve, segment, t, target)
    for _ in range(MAX_NEWTON_STEPS):
        diff = curve.point(segment, t) - target
        tangent = curve.tangent(segment, t)
        slope = float(diff @ tangent)
        curvature = float(tangent @ tangent + diff @ curve.curvature_vector(segment, t))
        if curvature > 0.0:
            step = -slope / curvature
        else:
            step = -np.sign(slope) * 0.25
        if step == 0.0:
            break
        for _ in range(MAX_HALVINGS):
            trial = float(np.clip(t + step, -1.0, 1.0))
            distance = _squared_distance(curve, segment, trial, target)
            if distance <= current:
                break
            step *= 0.5
        else:
            break
        moved = abs(trial - t)
        t, current = trial, distance
        if moved <= STEP_TOLERANCE:
            break
    return t


def closest_point(curve: BoundaryCurve, point, attribute: Optional[int] = None) -> ProjectionResult:
    """
    Closest point to <point> on the curve (optionally only on segments of one attribute).

    Segments are visited by distance to their inflated bounding box and skipped
        once that distance exceeds the best distance found.
    """
    target = np.asarray(point, dtype=float)
    candidates = np.arange(curve.num_segments)
    if attribute is not None:
        matching = candidates[curve.attributes == attribute]
        if matching.size:
            candidates = matching
    low, high = curve.boxes[candidates, 0], curve.boxes[candidates, 1]
    box_distance = np.linalg.norm(np.maximum(0.0, np.maximum(low - target, target - high)), axis=1)
    seeds = gll_nodes(SEED_DEGREE).nodes

    best = ProjectionResult(point=target, segment=-1, t=0.0, residual=np.inf)
    for k in np.argsort(box_distance, kind='stable'):
        if box_distance[k] ** 2 > best.residual:
            break
        segment = int(candidates[k])
        for seed in seeds:
            t = _newton_on_segment(curve, segment, float(seed), target)
            residual = _squared_distance(curve, segment, t, target)
            if residual < best.residual:
                best = ProjectionResult(point=curve.point(segment, t), segment=segment, t=t, residual=residual)
    return best


def project_boundary(mesh_trial: Mesh, curve: BoundaryCurve, node_class: NodeClass) -> np.ndarray:
    """
    Δx̆: projection minus trial position on tangential nodes, zero elsewhere.
    """
    displacement = np.zeros_like(mesh_trial.nodes)
    worst = 0.0
    for node in node_class.indices(NodeKind.TANGENTIAL_BOUNDARY):
        result = closest_point(curve, mesh_trial.nodes[node], int(node_class.attributes[node]))
        displacement[node] = result.point - mesh_trial.nodes[node]
        worst = max(worst, float(np.linalg.norm(displacement[node])))
    AppSettings.logger.debug(f"Boundary projection moved tangential nodes by at most {worst:.3e}")
    return displacement


def projection_residual(mesh: Mesh, curve: BoundaryCurve, node_class: NodeClass) -> float:
    """
    Largest distance from a tangential node to the curve.
    """
    residuals = [closest_point(curve, mesh.nodes[node], int(node_class.attributes[node])).residual
                 for node in node_class.indices(NodeKind.TANGENTIAL_BOUNDARY)]
    return float(np.sqrt(max(residuals, default=0.0)))


def stiffness_matrix(mesh: Mesh) -> sp.csr_matrix:
    """
    Scalar Laplace stiffness matrix in the mesh's own space, GLL quadrature of order 2p.
    """
    tables = reference_tables(mesh.order, 2 * mesh.order)
    jac = element_jacobians(mesh, tables)
    det = np.linalg.det(jac)
    inv = np.linalg.inv(jac)
    ref_grad = np.stack([tables.d_xi, tables.d_eta], axis=-1)  # (q, i, 2)
    phys_grad = np.einsum('eqba,qib->eqia', inv, ref_grad)
    local = np.einsum('q,eq,eqia,eqja->eij', tables.weights, det, phys_grad, phys_grad)
    n = mesh.elements.shape[1]
    rows = np.repeat(mesh.elements[:, :, None], n, axis=2)
    cols = np.repeat(mesh.elements[:, None, :], n, axis=1)
    return sp.coo_matrix((local.ravel(), (rows.ravel(), cols.ravel())),
                         shape=(mesh.num_nodes, mesh.num_nodes)).tocsr()


def laplace_blend(mesh: Mesh, boundary_displacement: np.ndarray, node_class: NodeClass,
                  tol: float = DEFAULT_BLEND_TOLERANCE) -> BlendField:
    """
    Harmonic extension of <boundary_displacement>: every boundary node is a Dirichlet node
        (its prescribed value on tangential nodes, zero on fixed ones and corners).
    """
    dirichlet = node_class.boundary.copy()
    values = np.where(dirichlet[:, None], boundary_displacement, 0.0)
    values[node_class.kinds != NodeKind.TANGENTIAL_BOUNDARY] = 0.0
    free = np.flatnonzero(~dirichlet)
    fixed = np.flatnonzero(dirichlet)
    if free.size == 0 or not np.any(values):
        return BlendField(displacement=values, dirichlet=dirichlet)

    stiffness = stiffness_matrix(mesh)
    k_ff = stiffness[free][:, free]
    k_fd = stiffness[free][:, fixed]
    diagonal = k_ff.diagonal()
    if np.any(diagonal <= 0.0):
        raise BlendError("Laplace stiffness has a non-positive diagonal; the mesh is not valid")
    preconditioner = sp_la.LinearOperator(k_ff.shape, matvec=lambda v: v / diagonal)
    max_iterations = 10 * mesh.num_nodes
    for c in range(2):
        rhs = -k_fd @ values[fixed, c]
        if not np.any(rhs):
            continue
        solution, info = sp_la.cg(k_ff, rhs, rtol=tol, atol=0.0, maxiter=max_iterations, M=preconditioner)
        if info != 0:
            AppSettings.logger.error(f"Displacement blending did not converge (component {c}, info {info})")
            raise BlendError(f"Conjugate gradients did not reach relative residual {tol:g} "
                             f"in {max_iterations} iterations")
        values[free, c] = solution
    return BlendField(displacement=values, dirichlet=dirichlet)


def relax(mesh_trial: Mesh, curve: BoundaryCurve, node_class: NodeClass,
          tol: float = DEFAULT_BLEND_TOLERANCE) -> Mesh:
    """
    Projects tangential nodes onto the curve and blends the correction into the interior.
    """
    correction = project_boundary(mesh_trial, curve, node_class)
    blended = laplace_blend(mesh_trial, correction, node_class, tol)
    return mesh_trial.with_nodes(mesh_trial.nodes + blended.displacement)
