"""
One-dimensional Gauss-Lobatto-Legendre machinery for tensor-product quads.

Everything here works on the reference interval [-1, 1]; 2D lattices are
lexicographic with the first (xi) index running fastest.
"""
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.special import comb

from app_settings.app_settings import AppSettings

MAX_NEWTON_ITERATIONS = 100
NODE_TOLERANCE = 1.0e-15
# Change of basis is refused beyond ~10 lost digits
MAX_BERNSTEIN_CONDITION = 1.0e10
# Tables grow with p times the quadrature order; q-refinement keeps asking for new orders
REFERENCE_TABLE_CACHE_SIZE = 64


class BasisError(ValueError):
    pass


class ConditioningWarning(UserWarning):
    pass


@dataclass(frozen=True)
class NodeSet1D:
    """
    GLL nodes of degree <order> together with the data every evaluation needs.
    """
    order: int
    nodes: np.ndarray
    weights: np.ndarray  # GLL quadrature weights for these nodes
    barycentric: np.ndarray
    diff_matrix: np.ndarray  # diff_matrix[i, j] = l_j'(nodes[i])

    @property
    def size(self) -> int:
        return self.order + 1


@dataclass(frozen=True)
class QuadratureRule1D:
    points: np.ndarray
    weights: np.ndarray

    @property
    def exactness(self) -> int:
        return 2 * len(self.points) - 3


def _read_only(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@lru_cache(maxsize=None)
def gll_nodes(p: int) -> NodeSet1D:
    """
    Returns the p+1 Gauss-Lobatto-Legendre nodes (and weights) on [-1, 1].

    The interior nodes are the roots of L_p'(x); they are found by Newton
        iteration on (1-x^2) L_p'(x) starting from the Chebyshev-Gauss-Lobatto points.
    """
    if int(p) != p or p < 1:
        raise BasisError(f"GLL nodes need a degree of at least 1, got {p}")
    p = int(p)
    x = -np.cos(np.pi * np.arange(p + 1) / p)
    legendre = np.zeros((p + 1, p + 1))
    for _ in range(MAX_NEWTON_ITERATIONS):
        x_old = x
        legendre[:, 0] = 1.0
        legendre[:, 1] = x
        for k in range(2, p + 1):
            legendre[:, k] = ((2 * k - 1) * x * legendre[:, k - 1] - (k - 1) * legendre[:, k - 2]) / k
        x = x_old - (x * legendre[:, p] - legendre[:, p - 1]) / ((p + 1) * legendre[:, p])
        if np.max(np.abs(x - x_old)) <= NODE_TOLERANCE:
            break
    # Exact endpoints and exact symmetry
    x = 0.5 * (x - x[::-1])
    x[0], x[-1] = -1.0, 1.0
    if p % 2 == 0:
        x[p // 2] = 0.0

    legendre[:, 0] = 1.0
    legendre[:, 1] = x
    for k in range(2, p + 1):
        legendre[:, k] = ((2 * k - 1) * x * legendre[:, k - 1] - (k - 1) * legendre[:, k - 2]) / k
    weights = 2.0 / (p * (p + 1) * legendre[:, p] ** 2)

    differences = x[:, None] - x[None, :]
    np.fill_diagonal(differences, 1.0)
    barycentric = 1.0 / np.prod(differences, axis=1)

    diff_matrix = (barycentric[None, :] / barycentric[:, None]) / differences
    np.fill_diagonal(diff_matrix, 0.0)
    np.fill_diagonal(diff_matrix, -diff_matrix.sum(axis=1))

    return NodeSet1D(order=p, nodes=_read_only(x), weights=_read_only(weights),
                     barycentric=_read_only(barycentric), diff_matrix=_read_only(diff_matrix))


def lagrange_eval(ns: NodeSet1D, x) -> np.ndarray:
    """
    Values of the p+1 Lagrange interpolants at x (scalar or array).

    Uses the barycentric form; an x that coincides with a node returns the
        Kronecker delta exactly. The result has shape x.shape + (p+1,).
    """
    x = np.asarray(x, dtype=float)
    xs = x.reshape(-1)
    diff = xs[:, None] - ns.nodes[None, :]
    exact = diff == 0.0
    with np.errstate(divide='ignore', invalid='ignore'):
        terms = ns.barycentric[None, :] / diff
        values = terms / terms.sum(axis=1, keepdims=True)
    on_node = exact.any(axis=1)
    values[on_node] = exact[on_node].astype(float)
    return values.reshape(x.shape + (ns.size,))


def lagrange_deriv(ns: NodeSet1D, x) -> np.ndarray:
    """
    Derivatives of the p+1 Lagrange interpolants at x.

    l_j' has degree p-1, so it is interpolated exactly from its nodal values.
    """
    return lagrange_eval(ns, x) @ ns.diff_matrix


def lagrange_second_deriv(ns: NodeSet1D, x) -> np.ndarray:
    return lagrange_eval(ns, x) @ (ns.diff_matrix @ ns.diff_matrix)


def points_for_order(order: int) -> int:
    """
    Fewest GLL points whose degree of exactness (2n-3) reaches <order>.
    """
    if order < 1:
        raise BasisError(f"Quadrature order must be at least 1, got {order}")
    return max(2, math.ceil((order + 3) / 2))


@lru_cache(maxsize=None)
def gll_quadrature(order: int) -> QuadratureRule1D:
    """
    The smallest GLL rule that integrates polynomials of degree <order> exactly.
    """
    ns = gll_nodes(points_for_order(order) - 1)
    return QuadratureRule1D(points=ns.nodes, weights=ns.weights)


def bernstein_matrix(p: int, x) -> np.ndarray:
    """
    Degree-p Bernstein polynomials on [-1, 1] evaluated at x; shape x.shape + (p+1,).
    """
    t = 0.5 * (np.asarray(x, dtype=float) + 1.0)
    k = np.arange(p + 1)
    return comb(p, k) * t[..., None] ** k * (1.0 - t[..., None]) ** (p - k)


@lru_cache(maxsize=None)
def _bernstein_factorization(p: int) -> Tuple[Tuple[np.ndarray, np.ndarray], float]:
    ns = gll_nodes(p)
    vandermonde = bernstein_matrix(p, ns.nodes)
    condition = float(np.linalg.cond(vandermonde))
    AppSettings.logger.debug(f"Bernstein change of basis for p={p}: condition number {condition:.3e}")
    return lu_factor(vandermonde), condition


def _check_conditioning(p: int, condition: float) -> None:
    if condition > MAX_BERNSTEIN_CONDITION:
        message = f"Bernstein change of basis for p={p} is poorly conditioned ({condition:.2e})"
        AppSettings.logger.warning(message)
        warnings.warn(message, ConditioningWarning, stacklevel=3)


def to_bernstein(ns: NodeSet1D, nodal_values) -> np.ndarray:
    """
    Bernstein coefficients (degree p, on [-1, 1]) of the polynomial with the given GLL nodal values.

    Accepts a (p+1,) vector or a (p+1, k) stack of columns.
    """
    values = np.asarray(nodal_values, dtype=float)
    if values.shape[0] != ns.size:
        raise BasisError(f"Expected {ns.size} nodal values for p={ns.order}, got {values.shape[0]}")
    factorization, condition = _bernstein_factorization(ns.order)
    _check_conditioning(ns.order, condition)
    return lu_solve(factorization, values)


def to_bernstein_2d(ns: NodeSet1D, nodal_values) -> np.ndarray:
    """
    Tensor-product Bernstein coefficients, as a (p+1, p+1) array indexed [j_eta, i_xi].
    """
    grid = np.asarray(nodal_values, dtype=float).reshape(ns.size, ns.size)
    coefficients = to_bernstein(ns, grid)  # along eta
    return to_bernstein(ns, coefficients.T).T  # along xi


def bernstein_eval(coefficients, x) -> np.ndarray:
    coefficients = np.asarray(coefficients, dtype=float)
    return bernstein_matrix(len(coefficients) - 1, x) @ coefficients


def lattice_index(i: int, j: int, p: int) -> int:
    """
    Position of lattice node (xi index i, eta index j) in lexicographic order.
    """
    return j * (p + 1) + i


def tensor_interpolation(ns: NodeSet1D, nodal_values, x, y) -> np.ndarray:
    """
    Evaluates a tensor-product nodal polynomial on the grid x × y.

    Returns values indexed [iy, ix], i.e. lexicographic with x fastest when flattened.
    """
    grid = np.asarray(nodal_values, dtype=float).reshape(ns.size, ns.size)
    return lagrange_eval(ns, y) @ grid @ lagrange_eval(ns, x).T


@dataclass(frozen=True)
class ReferenceTables:
    """
    2D basis data at a tensor GLL rule: rows are quadrature points (x fastest),
        columns are the (p+1)^2 lattice basis functions.
    """
    weights: np.ndarray
    values: np.ndarray
    d_xi: np.ndarray
    d_eta: np.ndarray
    points: np.ndarray


@lru_cache(maxsize=REFERENCE_TABLE_CACHE_SIZE)
def reference_tables(p: int, quad_order: int) -> ReferenceTables:
    ns = gll_nodes(p)
    rule = gll_quadrature(quad_order)
    values_1d = lagrange_eval(ns, rule.points)
    derivs_1d = lagrange_deriv(ns, rule.points)
    xs, ys = np.meshgrid(rule.points, rule.points)
    return ReferenceTables(weights=_read_only(np.kron(rule.weights, rule.weights)),
                           values=_read_only(np.kron(values_1d, values_1d)),
                           d_xi=_read_only(np.kron(values_1d, derivs_1d)),
                           d_eta=_read_only(np.kron(derivs_1d, values_1d)),
                           points=_read_only(np.column_stack([xs.ravel(), ys.ravel()])))


def differentiation_matrix(p: int) -> np.ndarray:
    """
    D[i, j] = l_j'(x_i) for the degree-p GLL basis, so D @ u gives u' at the nodes.
    """
    return gll_nodes(p).diff_matrix
