"""
Certified and sampled checks of the Jacobian determinant.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from app_settings.app_settings import AppSettings
from mesh_tools.basis import gll_nodes, reference_tables
from mesh_tools.bounds import (Verdict, bernstein_lower_bound, bound_minimum, build_bound_table,
                               certify_sign)
from mesh_tools.mesh import Mesh, element_jacobians, jacobian

DEFAULT_MAX_DEPTH = 6
DEFAULT_QUAD_ORDER = 10
DENSE_SAMPLES = 300


def det_degree(p: int) -> int:
    """
    Per-direction degree of det(A) for a degree-p quad map.
    """
    return 2 * p - 1


def default_control_nodes(p: int) -> int:
    return 2 * (det_degree(p) + 1)


def det_nodal_values(mesh: Mesh, element: int) -> np.ndarray:
    """
    det(A) at the GLL lattice of degree 2p-1, lexicographic with xi fastest.
    """
    ns = gll_nodes(det_degree(mesh.order))
    xs, ys = np.meshgrid(ns.nodes, ns.nodes)
    points = np.column_stack([xs.ravel(), ys.ravel()])
    return np.linalg.det(jacobian(mesh, element, points))


@dataclass(frozen=True)
class ElementCertificate:
    element: int
    certified_lower: float
    certified_upper: float
    verdict: Verdict
    depth_used: int
    sampled_min: float = np.nan


@dataclass
class DetCertificate:
    elements: List[ElementCertificate] = field(default_factory=list)
    sampled_min: float = np.nan

    @property
    def alpha_lower(self) -> float:
        return min(c.certified_lower for c in self.elements)

    @property
    def inverted(self) -> List[int]:
        return [c.element for c in self.elements if c.verdict == Verdict.NEGATIVE]

    @property
    def undecided(self) -> List[int]:
        return [c.element for c in self.elements if c.verdict == Verdict.UNDECIDED]

    @property
    def all_positive(self) -> bool:
        return all(c.verdict == Verdict.POSITIVE for c in self.elements)

    @property
    def verdict(self) -> Verdict:
        if self.inverted:
            return Verdict.NEGATIVE
        if self.undecided:
            return Verdict.UNDECIDED
        return Verdict.POSITIVE


def certify_element(mesh: Mesh, element: int, m: Optional[int] = None,
                    max_depth: int = DEFAULT_MAX_DEPTH, sampled_min: float = np.nan) -> ElementCertificate:
    degree = det_degree(mesh.order)
    table = build_bound_table(degree, m or default_control_nodes(mesh.order))
    result = certify_sign(table, det_nodal_values(mesh, element), max_depth)
    return ElementCertificate(element=element, certified_lower=result.certified_lower,
                              certified_upper=result.certified_upper, verdict=result.verdict,
                              depth_used=result.depth_used, sampled_min=sampled_min)


def element_sampled_min_dets(mesh: Mesh, quad_orders: Union[int, Sequence[int]]) -> np.ndarray:
    """
    Minimum of det(A) over each element's tensor GLL rule.

    <quad_orders> is one order for every element or one per element.
    """
    orders = np.broadcast_to(np.asarray(quad_orders, dtype=int), (mesh.num_elements,))
    minima = np.empty(mesh.num_elements)
    for order in np.unique(orders):
        chosen = np.flatnonzero(orders == order)
        dets = np.linalg.det(element_jacobians(mesh, reference_tables(mesh.order, int(order)), chosen))
        minima[chosen] = dets.min(axis=1)
    return minima


def sampled_min_det(mesh: Mesh, quad_orders: Union[int, Sequence[int]] = DEFAULT_QUAD_ORDER) -> float:
    return float(element_sampled_min_dets(mesh, quad_orders).min())


def dense_min_det(mesh: Mesh, element: int, samples: int = DENSE_SAMPLES) -> float:
    """
    Minimum of det(A) over a uniform samples × samples grid (boundary included).
    """
    t = np.linspace(-1.0, 1.0, samples)
    xs, ys = np.meshgrid(t, t)
    points = np.column_stack([xs.ravel(), ys.ravel()])
    return float(np.linalg.det(jacobian(mesh, element, points)).min())


def bernstein_det_lower(mesh: Mesh, element: int) -> float:
    return bernstein_lower_bound(det_nodal_values(mesh, element), det_degree(mesh.order))


def det_minimum_bracket(mesh: Mesh, element: int, m: Optional[int] = None, max_depth: int = 4):
    table = build_bound_table(det_degree(mesh.order), m or default_control_nodes(mesh.order))
    return bound_minimum(table, det_nodal_values(mesh, element), max_depth)


def certify_mesh(mesh: Mesh, m: Optional[int] = None, max_depth: int = DEFAULT_MAX_DEPTH,
                 quad_orders: Union[int, Sequence[int]] = DEFAULT_QUAD_ORDER,
                 workers: Optional[int] = None) -> DetCertificate:
    """
    Certifies every element; element checks are independent, so they may use a thread pool.
    """
    sampled = element_sampled_min_dets(mesh, quad_orders)
    workers = AppSettings.worker_count if workers is None else workers

    def check(element: int) -> ElementCertificate:
        return certify_element(mesh, element, m, max_depth, float(sampled[element]))

    if workers and workers > 1 and mesh.num_elements > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(check, range(mesh.num_elements)))
    else:
        results = [check(e) for e in range(mesh.num_elements)]
    certificate = DetCertificate(elements=results, sampled_min=float(sampled.min()))
    AppSettings.logger.debug(f"Certified {mesh.num_elements} elements: lower bound "
                             f"{certificate.alpha_lower:.6e}, sampled min {certificate.sampled_min:.6e}, "
                             f"{len(certificate.inverted)} inverted, {len(certificate.undecided)} undecided")
    return certificate
