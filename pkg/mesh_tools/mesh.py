"""
High-order 2D quadrilateral meshes.

Element nodes sit on the (p+1) × (p+1) GLL lattice of [-1, 1]^2 in
lexicographic order (xi fastest). Local edges run counterclockwise:
0 bottom, 1 right, 2 top, 3 left.
"""
import enum
import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set

import numpy as np

from app_settings.app_settings import AppSettings
from general_tools.file_utils import write_json_file
from mesh_tools.basis import (ReferenceTables, gll_nodes, lagrange_deriv, lagrange_eval,
                              lagrange_second_deriv, reference_tables)

EDGE_COUNT = 4
# Bounding boxes of boundary segments grow by this fraction of their diagonal
BOX_INFLATION = 0.1


class MeshError(ValueError):
    pass


class MalformedMeshError(MeshError):
    pass


class InconsistentMeshError(MeshError):
    pass


class DanglingIndexError(MeshError):
    pass


class BoundaryError(MeshError):
    pass


class NodeKind(enum.IntEnum):
    INTERIOR = 0
    FIXED_BOUNDARY = 1
    TANGENTIAL_BOUNDARY = 2
    CORNER = 3


@dataclass(frozen=True)
class BoundaryEdge:
    elem: int
    edge: int
    attr: int


def edge_local_indices(p: int, edge: int) -> np.ndarray:
    """
    Lattice positions of the p+1 nodes on local <edge>, in counterclockwise order.
    """
    run = np.arange(p + 1)
    if edge == 0:
        return run
    if edge == 1:
        return run * (p + 1) + p
    if edge == 2:
        return p * (p + 1) + run[::-1]
    if edge == 3:
        return run[::-1] * (p + 1)
    raise InconsistentMeshError(f"Local edge id must be 0..3, got {edge}")


@dataclass(eq=False)
class Mesh:
    order: int
    nodes: np.ndarray  # (N, 2)
    elements: np.ndarray  # (E, (p+1)^2) global node indices
    boundary: List[BoundaryEdge] = field(default_factory=list)
    dim: int = 2

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_elements(self) -> int:
        return len(self.elements)

    def element_coords(self, element: int) -> np.ndarray:
        return self.nodes[self.elements[element]]

    def edge_node_indices(self, element: int, edge: int) -> np.ndarray:
        return self.elements[element][edge_local_indices(self.order, edge)]

    def element_area(self, element: int) -> float:
        tables = reference_tables(self.order, 2 * self.order)
        dets = np.linalg.det(element_jacobians(self, tables, [element])[0])
        return float(tables.weights @ dets)

    def total_area(self) -> float:
        tables = reference_tables(self.order, 2 * self.order)
        return float(np.sum(np.linalg.det(element_jacobians(self, tables)) @ tables.weights))

    def with_nodes(self, nodes: np.ndarray) -> 'Mesh':
        """
        Same connectivity and boundary, new coordinates (copied).
        """
        nodes = np.array(nodes, dtype=float)
        if nodes.shape != self.nodes.shape:
            raise InconsistentMeshError(f"Node array shape {nodes.shape} does not match {self.nodes.shape}")
        return Mesh(order=self.order, nodes=nodes, elements=self.elements, boundary=list(self.boundary))

    def copy(self) -> 'Mesh':
        return self.with_nodes(self.nodes)


def _lattice(mesh: Mesh, element: int) -> np.ndarray:
    n = mesh.order + 1
    return mesh.element_coords(element).reshape(n, n, 2)  # [eta index, xi index, coord]


def _reference_points(x_ref) -> np.ndarray:
    points = np.asarray(x_ref, dtype=float)
    if points.shape[-1] != 2:
        raise ValueError(f"Reference points need 2 coordinates, got shape {points.shape}")
    return points


def position(mesh: Mesh, element: int, x_ref) -> np.ndarray:
    """
    Physical position of reference point(s) x_ref ∈ [-1, 1]^2; shape (..., 2) in, (..., 2) out.
    """
    points = _reference_points(x_ref)
    ns = gll_nodes(mesh.order)
    flat = points.reshape(-1, 2)
    lx = lagrange_eval(ns, flat[:, 0])
    ly = lagrange_eval(ns, flat[:, 1])
    values = np.einsum('kb,bac,ka->kc', ly, _lattice(mesh, element), lx)
    return values.reshape(points.shape)


def jacobian(mesh: Mesh, element: int, x_ref) -> np.ndarray:
    """
    A[a, b] = d x_a / d xi_b at reference point(s); shape (..., 2) in, (..., 2, 2) out.
    """
    points = _reference_points(x_ref)
    ns = gll_nodes(mesh.order)
    flat = points.reshape(-1, 2)
    lx, ly = lagrange_eval(ns, flat[:, 0]), lagrange_eval(ns, flat[:, 1])
    dx, dy = lagrange_deriv(ns, flat[:, 0]), lagrange_deriv(ns, flat[:, 1])
    grid = _lattice(mesh, element)
    d_xi = np.einsum('kb,bac,ka->kc', ly, grid, dx)
    d_eta = np.einsum('kb,bac,ka->kc', dy, grid, lx)
    return np.stack([d_xi, d_eta], axis=-1).reshape(points.shape[:-1] + (2, 2))


def element_jacobians(mesh: Mesh, tables: ReferenceTables,
                      elements: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    Jacobians at every point of a reference rule; shape (E, n_q, 2, 2).
    """
    connectivity = mesh.elements if elements is None else mesh.elements[np.asarray(elements, dtype=int)]
    coords = mesh.nodes[connectivity]
    d_xi = np.einsum('qi,eic->eqc', tables.d_xi, coords)
    d_eta = np.einsum('qi,eic->eqc', tables.d_eta, coords)
    return np.stack([d_xi, d_eta], axis=-1)


def _fail(error_class, path: str, message: str):
    AppSettings.logger.error(f"{path}: {message}")
    raise error_class(f"{path}: {message}")


def _parse_boundary(path: str, raw, num_elements: int) -> List[BoundaryEdge]:
    if not isinstance(raw, list):
        _fail(MalformedMeshError, path, "'boundary' must be a list")
    edges = []
    seen: Set[tuple] = set()
    for k, entry in enumerate(raw):
        if not isinstance(entry, dict) or not {'elem', 'edge', 'attr'} <= set(entry):
            _fail(MalformedMeshError, path, f"boundary[{k}] needs 'elem', 'edge' and 'attr'")
        elem, edge, attr = entry['elem'], entry['edge'], entry['attr']
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in (elem, edge, attr)):
            _fail(MalformedMeshError, path, f"boundary[{k}] fields must be integers")
        if not 0 <= elem < num_elements:
            _fail(DanglingIndexError, path,
                  f"boundary[{k}] references element {elem} but there are {num_elements} elements")
        if not 0 <= edge < EDGE_COUNT:
            _fail(InconsistentMeshError, path, f"boundary[{k}] has local edge {edge}, expected 0..3")
        if attr <= 0:
            _fail(InconsistentMeshError, path, f"boundary[{k}] attribute must be positive, got {attr}")
        if (elem, edge) in seen:
            _fail(InconsistentMeshError, path, f"boundary[{k}] repeats element {elem} edge {edge}")
        seen.add((elem, edge))
        edges.append(BoundaryEdge(elem=elem, edge=edge, attr=attr))
    return edges


def mesh_from_dict(data, path: str = '<mesh>') -> Mesh:
    if not isinstance(data, dict):
        _fail(MalformedMeshError, path, "top level must be an object")
    for key in ('order', 'nodes', 'elements'):
        if key not in data:
            _fail(MalformedMeshError, path, f"missing key '{key}'")
    if data.get('dim', 2) != 2:
        _fail(InconsistentMeshError, path, f"only dim 2 is supported, got {data.get('dim')}")
    order = data['order']
    if not isinstance(order, int) or isinstance(order, bool) or order < 1:
        _fail(InconsistentMeshError, path, f"order must be a positive integer, got {order!r}")

    raw_nodes = data['nodes']
    if not isinstance(raw_nodes, list):
        _fail(MalformedMeshError, path, "'nodes' must be a list")
    for k, node in enumerate(raw_nodes):
        if (not isinstance(node, list) or len(node) != 2
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in node)):
            _fail(MalformedMeshError, path, f"nodes[{k}] must be a pair of numbers, got {node!r}")
    nodes = np.array(raw_nodes, dtype=float).reshape(-1, 2)

    raw_elements = data['elements']
    if not isinstance(raw_elements, list):
        _fail(MalformedMeshError, path, "'elements' must be a list")
    expected = (order + 1) ** 2
    for e, connectivity in enumerate(raw_elements):
        if not isinstance(connectivity, list):
            _fail(MalformedMeshError, path, f"elements[{e}] must be a list of node indices")
        if len(connectivity) != expected:
            _fail(InconsistentMeshError, path,
                  f"elements[{e}] has {len(connectivity)} nodes, expected {expected} for order {order}")
        for k, index in enumerate(connectivity):
            if not isinstance(index, int) or isinstance(index, bool):
                _fail(MalformedMeshError, path, f"elements[{e}][{k}] is not an integer: {index!r}")
            if not 0 <= index < len(nodes):
                _fail(DanglingIndexError, path,
                      f"elements[{e}][{k}] references node {index} but there are {len(nodes)} nodes")
    elements = np.array(raw_elements, dtype=int).reshape(-1, expected)
    boundary = _parse_boundary(path, data.get('boundary', []), len(elements))
    return Mesh(order=order, nodes=nodes, elements=elements, boundary=boundary)


def mesh_to_dict(mesh: Mesh) -> Dict:
    return {
        'dim': 2,
        'order': int(mesh.order),
        'nodes': [[float(x), float(y)] for x, y in mesh.nodes],
        'elements': [[int(i) for i in row] for row in mesh.elements],
        'boundary': [{'elem': b.elem, 'edge': b.edge, 'attr': b.attr} for b in mesh.boundary],
    }


def load_mesh(path: str) -> Mesh:
    """
    Reads a mesh from its JSON file.

    Raises MalformedMeshError, InconsistentMeshError or DanglingIndexError with the offending location.
    """
    try:
        with open(path, 'rt', encoding='utf-8') as in_file:
            data = json.load(in_file)
    except json.JSONDecodeError as e:
        _fail(MalformedMeshError, path, f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}")
    mesh = mesh_from_dict(data, path)
    AppSettings.logger.debug(f"Loaded {path}: order {mesh.order}, {mesh.num_nodes} nodes, "
                             f"{mesh.num_elements} elements, {len(mesh.boundary)} boundary edges")
    return mesh


def save_mesh(mesh: Mesh, path: str) -> None:
    write_json_file(path, mesh_to_dict(mesh), indent=None)


@dataclass(frozen=True)
class NodeClass:
    kinds: np.ndarray  # NodeKind per global node
    attributes: np.ndarray  # attribute of tangential nodes, 0 elsewhere

    def indices(self, kind: NodeKind) -> np.ndarray:
        return np.flatnonzero(self.kinds == kind)

    @property
    def movable(self) -> np.ndarray:
        return (self.kinds == NodeKind.INTERIOR) | (self.kinds == NodeKind.TANGENTIAL_BOUNDARY)

    @property
    def boundary(self) -> np.ndarray:
        return self.kinds != NodeKind.INTERIOR


def boundary_node_attributes(mesh: Mesh) -> Dict[int, Set[int]]:
    attributes: Dict[int, Set[int]] = {}
    for b in mesh.boundary:
        for node in mesh.edge_node_indices(b.elem, b.edge):
            attributes.setdefault(int(node), set()).add(b.attr)
    return attributes


def classify_nodes(mesh: Mesh, tangential_attributes: Iterable[int]) -> NodeClass:
    """
    A boundary node touching two or more attributes is a corner; a node on a single
        tangential attribute may slide; other boundary nodes are fixed.
    """
    tangential = set(tangential_attributes)
    kinds = np.full(mesh.num_nodes, NodeKind.INTERIOR, dtype=int)
    node_attrs = np.zeros(mesh.num_nodes, dtype=int)
    for node, attrs in boundary_node_attributes(mesh).items():
        if len(attrs) >= 2:
            kinds[node] = NodeKind.CORNER
        else:
            attr = next(iter(attrs))
            if attr in tangential:
                kinds[node] = NodeKind.TANGENTIAL_BOUNDARY
                node_attrs[node] = attr
            else:
                kinds[node] = NodeKind.FIXED_BOUNDARY
    kinds.flags.writeable = False
    node_attrs.flags.writeable = False
    return NodeClass(kinds=kinds, attributes=node_attrs)


@dataclass(frozen=True)
class BoundaryCurve:
    """
    Frozen copy of boundary edges: segments (S, p+1, 2) with their attributes
        and inflated bounding boxes (S, 2, 2) as [[xmin, ymin], [xmax, ymax]].
    """
    order: int
    segments: np.ndarray
    attributes: np.ndarray
    boxes: np.ndarray

    @property
    def num_segments(self) -> int:
        return len(self.segments)

    def point(self, segment: int, t) -> np.ndarray:
        return lagrange_eval(gll_nodes(self.order), t) @ self.segments[segment]

    def tangent(self, segment: int, t) -> np.ndarray:
        return lagrange_deriv(gll_nodes(self.order), t) @ self.segments[segment]

    def curvature_vector(self, segment: int, t) -> np.ndarray:
        return lagrange_second_deriv(gll_nodes(self.order), t) @ self.segments[segment]


def extract_boundary(mesh: Mesh, attributes: Iterable[int]) -> BoundaryCurve:
    """
    Copies the current nodes of every boundary edge carrying one of <attributes>.
    """
    wanted = set(attributes)
    picked = [b for b in mesh.boundary if b.attr in wanted]
    if not picked:
        raise BoundaryError(f"No boundary edge carries any of the attributes {sorted(wanted)}")
    segments = np.array([mesh.nodes[mesh.edge_node_indices(b.elem, b.edge)] for b in picked])
    low, high = segments.min(axis=1), segments.max(axis=1)
    margin = BOX_INFLATION * np.linalg.norm(high - low, axis=1)[:, None] + 1.0e-12
    boxes = np.stack([low - margin, high + margin], axis=1)
    attrs = np.array([b.attr for b in picked], dtype=int)
    for array in (segments, boxes, attrs):
        array.flags.writeable = False
    AppSettings.logger.debug(f"Extracted {len(picked)} boundary segments for attributes {sorted(wanted)}")
    return BoundaryCurve(order=mesh.order, segments=segments, attributes=attrs, boxes=boxes)
