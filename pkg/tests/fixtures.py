"""
Meshes built in code for the test suites.
"""
from typing import Callable, Optional

import numpy as np

from mesh_tools.basis import gll_nodes
from mesh_tools.mesh import BoundaryEdge, Mesh

# Midway between the 10th-order GLL points 0 and 0.4688
UNDERSAMPLED_CENTRE = 0.2344


def structured_quad_mesh(nx: int, ny: int, p: int, x0: float = 0.0, x1: float = 1.0, y0: float = 0.0,
                         y1: float = 1.0, mapping: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                         single_attribute: bool = False) -> Mesh:
    """
    nx × ny grid of degree-p elements with GLL-spaced nodes.

    Boundary attributes: bottom 1, right 2, top 3, left 4 (all 1 with <single_attribute>).
    """
    ref = 0.5 * (gll_nodes(p).nodes + 1.0)
    xs = np.concatenate([[0.0]] + [ex + ref[1:] for ex in range(nx)]) / nx
    ys = np.concatenate([[0.0]] + [ey + ref[1:] for ey in range(ny)]) / ny
    grid_x, grid_y = np.meshgrid(x0 + (x1 - x0) * xs, y0 + (y1 - y0) * ys)
    nodes = np.column_stack([grid_x.ravel(), grid_y.ravel()])
    if mapping is not None:
        nodes = np.asarray(mapping(nodes), dtype=float)
    row = nx * p + 1
    elements = []
    boundary = []
    for ey in range(ny):
        for ex in range(nx):
            e = len(elements)
            elements.append([(ey * p + j) * row + ex * p + i for j in range(p + 1) for i in range(p + 1)])
            if ey == 0:
                boundary.append(BoundaryEdge(e, 0, 1))
            if ex == nx - 1:
                boundary.append(BoundaryEdge(e, 1, 1 if single_attribute else 2))
            if ey == ny - 1:
                boundary.append(BoundaryEdge(e, 2, 1 if single_attribute else 3))
            if ex == 0:
                boundary.append(BoundaryEdge(e, 3, 1 if single_attribute else 4))
    return Mesh(order=p, nodes=nodes, elements=np.array(elements, dtype=int), boundary=boundary)


def single_element_mesh(coords: np.ndarray, p: int) -> Mesh:
    boundary = [BoundaryEdge(0, edge, edge + 1) for edge in range(4)]
    return Mesh(order=p, nodes=np.array(coords, dtype=float),
                elements=np.arange((p + 1) ** 2)[None, :], boundary=boundary)


def reference_element(p: int, function: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> Mesh:
    """
    One element whose nodes are function(xi, eta) on the GLL lattice.
    """
    nodes = gll_nodes(p).nodes
    xi, eta = np.meshgrid(nodes, nodes)
    x, y = function(xi.ravel(), eta.ravel())
    return single_element_mesh(np.column_stack([x, y]), p)


def undersampled_element(offset: float = 0.01, centre: float = UNDERSAMPLED_CENTRE) -> Mesh:
    """
    p = 4 element x = (f(xi), eta) with f'(xi) = (xi - centre)^2 - offset, so det A = f'.

    With the default offset det A < 0 only for |xi - centre| < 0.1, which no
        point of the 10th-order GLL rule reaches; a negative offset gives a valid
        element with a near-singular spot.
    """
    def f(xi):
        return ((xi - centre) ** 3 - (-1.0 - centre) ** 3) / 3.0 - offset * (xi + 1.0)

    return reference_element(4, lambda xi, eta: (f(xi), eta))


def folded_mesh(p: int, fold: float = 0.37) -> Mesh:
    """
    3 × 3 unit-square mesh whose vertex (1/3, 1/3) is pushed by (fold, fold) with a
        bilinear hat, folding the element diagonal to it.
    """
    def push(points):
        hat = (np.maximum(0.0, 1.0 - 3.0 * np.abs(points[:, 0] - 1.0 / 3.0))
               * np.maximum(0.0, 1.0 - 3.0 * np.abs(points[:, 1] - 1.0 / 3.0)))
        return points + fold * hat[:, None]

    return structured_quad_mesh(3, 3, p, mapping=push)


def perturbed_square_mesh(n: int, p: int, amplitude: float = 0.15, seed: int = 7) -> Mesh:
    """
    n × n unit-square mesh with interior nodes moved randomly by up to <amplitude> of the node spacing.
    """
    mesh = structured_quad_mesh(n, n, p)
    rng = np.random.default_rng(seed)
    nodes = mesh.nodes.copy()
    interior = np.all((nodes > 1.0e-12) & (nodes < 1.0 - 1.0e-12), axis=1)
    spacing = 1.0 / (n * p)
    nodes[interior] += amplitude * spacing * rng.uniform(-1.0, 1.0, size=(int(interior.sum()), 2))
    return mesh.with_nodes(nodes)


def curved_mesh(n: int = 3, p: int = 2, amplitude: float = 0.04) -> Mesh:
    """
    Smoothly curved n × n mesh of the unit square (boundary nodes stay on the square).
    """
    def warp(points):
        x, y = points[:, 0], points[:, 1]
        bump = np.sin(np.pi * x) * np.sin(np.pi * y)
        return np.column_stack([x + amplitude * bump * np.cos(2.0 * y), y + amplitude * bump * np.sin(3.0 * x)])

    return structured_quad_mesh(n, n, p, mapping=warp)


def annulus_mesh(n_theta: int = 12, n_r: int = 2, p: int = 2, r_inner: float = 0.5, r_outer: float = 1.0,
                 twist: float = 0.0) -> Mesh:
    """
    O-grid between two circles; xi runs outward, eta counterclockwise.

    Inner circle attribute 5, outer circle attribute 6. <twist> moves nodes
        along their circle by a fraction of the angular node spacing, fading to
        zero at the outer circle.
    """
    ref = 0.5 * (gll_nodes(p).nodes + 1.0)
    radial = np.concatenate([[0.0]] + [k + ref[1:] for k in range(n_r)]) / n_r
    angular = np.concatenate([[0.0]] + [k + ref[1:] for k in range(n_theta)])[:-1] / n_theta
    n_rad = n_r * p + 1
    n_ang = n_theta * p
    nodes = np.empty((n_ang * n_rad, 2))
    for a_index, s in enumerate(angular):
        for r_index, t in enumerate(radial):
            theta = 2.0 * np.pi * s
            theta += twist * (2.0 * np.pi / n_ang) * np.sin(3.0 * theta) * (1.0 - t)
            r = r_inner + (r_outer - r_inner) * t
            nodes[a_index * n_rad + r_index] = (r * np.cos(theta), r * np.sin(theta))
    elements = []
    boundary = []
    for it in range(n_theta):
        for ir in range(n_r):
            e = len(elements)
            elements.append([((it * p + b) % n_ang) * n_rad + ir * p + a
                             for b in range(p + 1) for a in range(p + 1)])
            if ir == 0:
                boundary.append(BoundaryEdge(e, 3, 5))
            if ir == n_r - 1:
                boundary.append(BoundaryEdge(e, 1, 6))
    return Mesh(order=p, nodes=nodes, elements=np.array(elements, dtype=int), boundary=boundary)
