"""
Piecewise-linear bounds for polynomials expressed in a GLL nodal basis.

Each basis function l_i gets a continuous piecewise-linear upper envelope
    (values q_plus[i, j] at control nodes eta_j) and lower envelope (q_minus).
    Any u = sum_i u_i l_i is then bracketed at the control nodes by
    sum_i min(u_i q-, u_i q+) and sum_i max(u_i q-, u_i q+), and the linear
    interpolants of those values bound u everywhere on [-1, 1].
"""
import enum
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np
from numpy.polynomial import chebyshev
from scipy.interpolate import RegularGridInterpolator

from app_settings.app_settings import AppSettings
from mesh_tools.basis import gll_nodes, tensor_interpolation, to_bernstein, to_bernstein_2d

EPS = np.finfo(float).eps
# Envelope values are inflated by this many ulps of the row scale once built
SAFETY_ULPS = 64
FEASIBILITY_ULPS = 4
LIFT_OVERSHOOT = 1.05
MAX_LIFT_SWEEPS = 400
DESCENT_SWEEPS = 2
DESCENT_BISECTIONS = 24
PIECE_SAMPLES = 7
MAX_ACTIVE_BOXES = 4096


class BoundsError(ValueError):
    pass


class Verdict(enum.Enum):
    POSITIVE = 'positive'
    NEGATIVE = 'negative'
    UNDECIDED = 'undecided'


@dataclass(frozen=True)
class BoundTable:
    degree: int
    control_nodes: np.ndarray
    q_minus: np.ndarray  # (p+1, M)
    q_plus: np.ndarray  # (p+1, M)
    linear_fit_removed: bool = True

    @property
    def size(self) -> int:
        return len(self.control_nodes)


@dataclass(frozen=True)
class PiecewiseLinearBound:
    control_nodes: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def lower_at(self, x) -> np.ndarray:
        return np.interp(x, self.control_nodes, self.lower)

    def upper_at(self, x) -> np.ndarray:
        return np.interp(x, self.control_nodes, self.upper)

    @property
    def min_lower(self) -> float:
        return float(self.lower.min())

    @property
    def max_upper(self) -> float:
        return float(self.upper.max())

    @property
    def mean_gap(self) -> float:
        """
        Average of upper - lower over [-1, 1] (exact for piecewise-linear bounds).
        """
        gap = self.upper - self.lower
        return float(np.sum(0.5 * (gap[1:] + gap[:-1]) * np.diff(self.control_nodes)) / 2.0)


@dataclass(frozen=True)
class PiecewiseBilinearBound:
    """
    Bounds on the M × M control grid, indexed [j_x, j_y].
    """
    control_nodes: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def _interpolate(self, grid: np.ndarray, x, y) -> np.ndarray:
        interpolator = RegularGridInterpolator((self.control_nodes, self.control_nodes), grid)
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        return interpolator(np.stack([x.ravel(), y.ravel()], axis=-1)).reshape(x.shape)

    def lower_at(self, x, y) -> np.ndarray:
        return self._interpolate(self.lower, x, y)

    def upper_at(self, x, y) -> np.ndarray:
        return self._interpolate(self.upper, x, y)

    @property
    def min_lower(self) -> float:
        return float(self.lower.min())

    @property
    def min_upper(self) -> float:
        return float(self.upper.min())

    @property
    def max_upper(self) -> float:
        return float(self.upper.max())


@dataclass(frozen=True)
class SubBox:
    x0: float = -1.0
    x1: float = 1.0
    y0: float = -1.0
    y1: float = 1.0
    depth: int = 0

    def children(self) -> List['SubBox']:
        xm = 0.5 * (self.x0 + self.x1)
        ym = 0.5 * (self.y0 + self.y1)
        d = self.depth + 1
        return [SubBox(self.x0, xm, self.y0, ym, d), SubBox(xm, self.x1, self.y0, ym, d),
                SubBox(self.x0, xm, ym, self.y1, d), SubBox(xm, self.x1, ym, self.y1, d)]


@dataclass(frozen=True)
class SignCertificate:
    verdict: Verdict
    certified_lower: float  # lower bound on the minimum
    certified_upper: float  # upper bound on the minimum
    depth_used: int
    witness: Optional[SubBox] = None


@dataclass(frozen=True)
class MinimumBracket:
    lower: float
    upper: float
    depth: int
    history: List[Tuple[int, float, float]] = field(default_factory=list)


def chebyshev_control_nodes(m: int) -> np.ndarray:
    """
    M Chebyshev-Gauss-Lobatto points, exactly symmetric with endpoints ±1.
    """
    eta = -np.cos(np.pi * np.arange(m) / (m - 1))
    eta = 0.5 * (eta - eta[::-1])
    eta[0], eta[-1] = -1.0, 1.0
    if m % 2 == 1:
        eta[m // 2] = 0.0
    return eta


def _piece_violation(cheb: np.ndarray, cheb_deriv: np.ndarray, a: float, b: float,
                     qa: float, qb: float) -> Tuple[float, float]:
    """
    Largest value of f - chord on [a, b] and where it happens (as a fraction of the piece).

    Candidates are the piece ends, the real roots of (f - chord)' and a few samples.
    """
    slope = (qb - qa) / (b - a)
    candidates = [np.array([a, b]), np.linspace(a, b, PIECE_SAMPLES)[1:-1]]
    if len(cheb_deriv) > 1:
        shifted = cheb_deriv.copy()
        shifted[0] -= slope
        roots = np.asarray(chebyshev.chebroots(shifted))
        if np.iscomplexobj(roots):
            roots = roots[np.abs(roots.imag) <= 1.0e-10].real
        candidates.append(roots[(roots > a) & (roots < b)])
    xs = np.concatenate(candidates)
    gaps = chebyshev.chebval(xs, cheb) - (qa + slope * (xs - a))
    k = int(np.argmax(gaps))
    return float(gaps[k]), float((xs[k] - a) / (b - a))


def _upper_envelope(cheb: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """
    Feasible, approximately L2-tight piecewise-linear upper envelope of f on the control nodes.

    Values at eta = ±1 are pinned to f(±1) so the bound is exact at the vertices.
    """
    deriv = chebyshev.chebder(cheb)
    f_eta = chebyshev.chebval(eta, cheb)
    q = f_eta.copy()
    m = len(eta)
    free = np.ones(m, dtype=bool)
    if m > 2:
        free[0] = free[-1] = False
    slack = FEASIBILITY_ULPS * EPS * max(1.0, float(np.max(np.abs(f_eta))))

    def violation(j: int) -> Tuple[float, float]:
        return _piece_violation(cheb, deriv, eta[j], eta[j + 1], q[j], q[j + 1])

    # Lift until every piece lies above f
    for sweep in range(MAX_LIFT_SWEEPS):
        overshoot = LIFT_OVERSHOOT * 2.0 ** (sweep // 50)
        lifted = False
        for j in range(m - 1):
            v, s = violation(j)
            if v <= slack:
                continue
            lifted = True
            if free[j] and free[j + 1]:
                norm = (1.0 - s) ** 2 + s ** 2
                q[j] += overshoot * v * (1.0 - s) / norm
                q[j + 1] += overshoot * v * s / norm
            elif free[j + 1]:
                q[j + 1] += overshoot * v / max(s, 1.0e-12)
            else:
                q[j] += overshoot * v / max(1.0 - s, 1.0e-12)
        if not lifted:
            break
    else:
        AppSettings.logger.warning(f"Envelope lifting needed all {MAX_LIFT_SWEEPS} sweeps")

    def feasible_at(j: int, value: float) -> bool:
        saved = q[j]
        q[j] = value
        ok = (j == 0 or violation(j - 1)[0] <= slack) and (j == m - 1 or violation(j)[0] <= slack)
        q[j] = saved
        return ok

    # Coordinate descent: push each free value down as far as feasibility allows
    for _ in range(DESCENT_SWEEPS):
        for j in np.flatnonzero(free):
            lo, hi = f_eta[j], q[j]
            if hi - lo <= slack:
                continue
            if feasible_at(j, lo):
                q[j] = lo
                continue
            for _ in range(DESCENT_BISECTIONS):
                mid = 0.5 * (lo + hi)
                if feasible_at(j, mid):
                    hi = mid
                else:
                    lo = mid
            q[j] = hi
    return q


@lru_cache(maxsize=None)
def build_bound_table(p: int, m: int) -> BoundTable:
    """
    Piecewise-linear envelopes of the degree-p GLL Lagrange basis on M control nodes.

    Tables are cached per (p, M) and read-only afterwards.
    """
    if m < 2 or m < p + 1:
        raise BoundsError(f"Need at least max(2, p+1) control nodes, got M={m} for p={p}")
    ns = gll_nodes(p)
    eta = chebyshev_control_nodes(m)
    # Column i holds the Chebyshev coefficients of l_i
    cheb_basis = np.linalg.solve(chebyshev.chebvander(ns.nodes, p), np.eye(p + 1))
    q_minus = np.empty((p + 1, m))
    q_plus = np.empty((p + 1, m))
    for i in range(p + 1):
        cheb = cheb_basis[:, i]
        q_plus[i] = _upper_envelope(cheb, eta)
        q_minus[i] = -_upper_envelope(-cheb, eta)
        margin = SAFETY_ULPS * EPS * max(1.0, float(np.max(np.abs(q_plus[i]))),
                                          float(np.max(np.abs(q_minus[i]))))
        q_plus[i] += margin
        q_minus[i] -= margin
    for array in (eta, q_minus, q_plus):
        array.flags.writeable = False
    AppSettings.logger.debug(f"Built bound table p={p} M={m}: "
                             f"mean envelope width {np.mean(q_plus - q_minus):.3e}")
    return BoundTable(degree=p, control_nodes=eta, q_minus=q_minus, q_plus=q_plus)


def _bound_rows(table: BoundTable, rows) -> Tuple[np.ndarray, np.ndarray]:
    """
    Lower and upper control values for a stack of 1D nodal vectors; shapes (k, M).
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.shape[-1] != table.degree + 1:
        raise BoundsError(f"Expected {table.degree + 1} nodal values for p={table.degree}, "
                          f"got {rows.shape[-1]}")
    eta = table.control_nodes
    if table.linear_fit_removed:
        nodes = gll_nodes(table.degree).nodes
        left, right = rows[:, :1], rows[:, -1:]
        residual = rows - (0.5 * (1.0 - nodes) * left + 0.5 * (1.0 + nodes) * right)
        line = 0.5 * (1.0 - eta) * left + 0.5 * (1.0 + eta) * right
    else:
        residual = rows
        line = np.zeros((rows.shape[0], len(eta)))
    low = residual[:, :, None] * table.q_minus[None, :, :]
    high = residual[:, :, None] * table.q_plus[None, :, :]
    return np.minimum(low, high).sum(axis=1) + line, np.maximum(low, high).sum(axis=1) + line


def bound_function_1d(table: BoundTable, coeffs) -> PiecewiseLinearBound:
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.ndim != 1:
        raise BoundsError("bound_function_1d takes a single coefficient vector")
    lower, upper = _bound_rows(table, coeffs)
    return PiecewiseLinearBound(control_nodes=table.control_nodes, lower=lower[0], upper=upper[0])


def bound_function_2d(table: BoundTable, coeffs) -> PiecewiseBilinearBound:
    """
    Bounds a tensor-product nodal polynomial on the M × M control grid.

    u is split along eta into its linear part (1-y)/2 g_0(x) + (1+y)/2 g_p(x)
        plus sum_b h_b(x) l_b(y). Every x-function is bounded in 1D; the
        h_b(x) l_b(y) terms use sign-aware interval products of the x bounds
        with the eta envelopes. Each product is bilinear on a control cell,
        so the grid values interpolate to valid bounds.
    """
    n = table.degree + 1
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.size != n * n:
        raise BoundsError(f"Expected {n * n} nodal values for p={table.degree}, got {coeffs.size}")
    grid = coeffs.reshape(n, n)  # [eta index, xi index]
    nodes = gll_nodes(table.degree).nodes
    g_first, g_last = grid[0], grid[-1]
    h = grid - np.outer(0.5 * (1.0 - nodes), g_first) - np.outer(0.5 * (1.0 + nodes), g_last)

    lower_x, upper_x = _bound_rows(table, np.vstack([g_first, g_last, h]))
    eta = table.control_nodes
    w_first, w_last = 0.5 * (1.0 - eta), 0.5 * (1.0 + eta)
    lower = np.outer(lower_x[0], w_first) + np.outer(lower_x[1], w_last)
    upper = np.outer(upper_x[0], w_first) + np.outer(upper_x[1], w_last)

    h_low, h_high = lower_x[2:, :, None], upper_x[2:, :, None]
    q_minus, q_plus = table.q_minus[:, None, :], table.q_plus[:, None, :]
    products = np.stack([h_low * q_minus, h_low * q_plus, h_high * q_minus, h_high * q_plus])
    lower += products.min(axis=0).sum(axis=0)
    upper += products.max(axis=0).sum(axis=0)
    return PiecewiseBilinearBound(control_nodes=eta, lower=lower, upper=upper)


def _box_values(coeffs: np.ndarray, p: int, box: SubBox) -> np.ndarray:
    """
    Nodal values of the same polynomial re-expanded on the GLL lattice of <box>.
    """
    ns = gll_nodes(p)
    xs = box.x0 + 0.5 * (ns.nodes + 1.0) * (box.x1 - box.x0)
    ys = box.y0 + 0.5 * (ns.nodes + 1.0) * (box.y1 - box.y0)
    return tensor_interpolation(ns, coeffs, xs, ys).ravel()


def certify_sign(table: BoundTable, coeffs_2d, max_depth: int) -> SignCertificate:
    """
    Decides the sign of a 2D nodal polynomial on [-1, 1]^2.

    Boxes whose lower bound is not positive are bisected in both directions
        until every leaf is positive, the upper bound drops below zero at some
        control node (the function is then negative there), or <max_depth> is reached.
    """
    if max_depth < 0:
        raise BoundsError(f"max_depth must be non-negative, got {max_depth}")
    coeffs = np.asarray(coeffs_2d, dtype=float)
    p = table.degree
    stack: List[Tuple[SubBox, float]] = [(SubBox(), -np.inf)]
    leaf_lower = np.inf
    best_upper = np.inf
    depth_used = 0
    undecided = False
    while stack:
        box, parent_lower = stack.pop()
        depth_used = max(depth_used, box.depth)
        bound = bound_function_2d(table, _box_values(coeffs, p, box))
        box_lower = max(bound.min_lower, parent_lower)
        best_upper = min(best_upper, bound.min_upper)
        if bound.min_upper < 0.0:
            pending = min([lower for _, lower in stack], default=np.inf)
            return SignCertificate(verdict=Verdict.NEGATIVE,
                                   certified_lower=float(min(leaf_lower, box_lower, pending)),
                                   certified_upper=float(best_upper), depth_used=depth_used, witness=box)
        if box_lower > 0.0:
            leaf_lower = min(leaf_lower, box_lower)
        elif box.depth >= max_depth:
            undecided = True
            leaf_lower = min(leaf_lower, box_lower)
        else:
            stack.extend((child, box_lower) for child in reversed(box.children()))
    return SignCertificate(verdict=Verdict.UNDECIDED if undecided else Verdict.POSITIVE,
                           certified_lower=float(leaf_lower), certified_upper=float(best_upper),
                           depth_used=depth_used)


def bound_minimum(table: BoundTable, coeffs_2d, max_depth: int) -> MinimumBracket:
    """
    Branch-and-bound bracket [lower, upper] on the minimum of a 2D nodal polynomial.

    The lower value never decreases with depth: children inherit their parent's bound.
    """
    coeffs = np.asarray(coeffs_2d, dtype=float)
    p = table.degree
    active: List[Tuple[SubBox, float]] = [(SubBox(), -np.inf)]
    history = []
    lower = upper = np.inf
    for depth in range(max_depth + 1):
        evaluated = []
        for box, parent_lower in active:
            bound = bound_function_2d(table, _box_values(coeffs, p, box))
            evaluated.append((box, max(bound.min_lower, parent_lower), bound.min_upper))
        upper = min(upper, min(box_upper for _, _, box_upper in evaluated))
        kept = [(box, box_lower) for box, box_lower, _ in evaluated if box_lower <= upper]
        lower = min(box_lower for _, box_lower in kept)
        history.append((depth, float(lower), float(upper)))
        if depth == max_depth or len(kept) * 4 > MAX_ACTIVE_BOXES:
            break
        active = [(child, box_lower) for box, box_lower in kept for child in box.children()]
    return MinimumBracket(lower=float(lower), upper=float(upper), depth=history[-1][0], history=history)


def bernstein_lower_bound(coeffs, p: int) -> float:
    """
    Minimum Bernstein coefficient of a 1D or tensor 2D GLL nodal polynomial.
    """
    coeffs = np.asarray(coeffs, dtype=float).ravel()
    ns = gll_nodes(p)
    if coeffs.size == p + 1:
        return float(to_bernstein(ns, coeffs).min())
    if coeffs.size == (p + 1) ** 2:
        return float(to_bernstein_2d(ns, coeffs).min())
    raise BoundsError(f"{coeffs.size} values are neither a 1D nor a 2D lattice for p={p}")


def bernstein_subdivision_bound(coeffs_2d, p: int, tolerance: float, max_depth: int) -> float:
    """
    Lower bound on the minimum from Bernstein coefficients with uniform h-refinement.

    A box is split while the spread of its coefficients exceeds <tolerance>
        and it could still hold the minimum.
    """
    coeffs = np.asarray(coeffs_2d, dtype=float)
    ns = gll_nodes(p)
    active = [SubBox()]
    settled_lower = upper = np.inf
    lower = -np.inf
    for depth in range(max_depth + 1):
        spans = []
        for box in active:
            bernstein = to_bernstein_2d(ns, _box_values(coeffs, p, box))
            corners = bernstein[np.ix_([0, -1], [0, -1])]  # corner coefficients are point values
            spans.append((box, float(bernstein.min()), float(bernstein.max())))
            upper = min(upper, float(corners.min()))
        kept = [span for span in spans if span[1] <= upper]
        lower = min([span[1] for span in kept] + [settled_lower])
        to_split = [span for span in kept if span[2] - span[1] > tolerance]
        if depth == max_depth or not to_split or len(to_split) * 4 > MAX_ACTIVE_BOXES:
            break
        settled_lower = min([span[1] for span in kept if span[2] - span[1] <= tolerance] + [settled_lower])
        active = [child for box, _, _ in to_split for child in box.children()]
    return float(lower)
