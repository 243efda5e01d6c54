"""
Target-matrix quality metrics and the mesh objective F(x) = Σ_e Σ_q w_q ω μ(T).

All metric routines are vectorized over leading axes: T and W have shape (..., 2, 2).
"""
import abc
import dataclasses
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from app_settings.app_settings import AppSettings
from mesh_tools.basis import reference_tables
from mesh_tools.mesh import Mesh, NodeClass, element_jacobians

DEFAULT_GAMMA = 0.5
SAMPLE_BARRIER_SCALE = 1.5
SAMPLE_BARRIER_OFFSET = 1.0e-2
BOUND_BARRIER_OFFSET = 1.0e-3


class TmopError(ValueError):
    pass


class MetricDomainError(TmopError):
    pass


class BarrierViolationError(MetricDomainError):
    pass


class InfeasiblePointError(TmopError):
    pass


def _det(m: np.ndarray) -> np.ndarray:
    return m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]


def _cofactor(m: np.ndarray) -> np.ndarray:
    """
    d det(M) / dM.
    """
    cof = np.empty_like(m)
    cof[..., 0, 0] = m[..., 1, 1]
    cof[..., 0, 1] = -m[..., 1, 0]
    cof[..., 1, 0] = -m[..., 0, 1]
    cof[..., 1, 1] = m[..., 0, 0]
    return cof


def _frobenius2(m: np.ndarray) -> np.ndarray:
    return np.sum(m * m, axis=(-2, -1))


def _identity_like(t: np.ndarray) -> np.ndarray:
    return np.broadcast_to(np.eye(2), t.shape)


class Metric(abc.ABC):
    """
    A quality metric μ(T) of T = A W^-1 with its derivative dμ/dT.
    """
    name = 'metric'
    domain_error = MetricDomainError

    @property
    def tau_floor(self) -> float:
        """
        The metric is defined only for det(T) strictly above this value.
        """
        return 0.0

    def in_domain(self, tau: np.ndarray) -> np.ndarray:
        return tau > self.tau_floor

    @abc.abstractmethod
    def value(self, t: np.ndarray, w: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @abc.abstractmethod
    def grad_t(self, t: np.ndarray, w: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class Mu2(Metric):
    """
    Shape metric |T|^2 / (2τ) - 1.
    """
    name = 'mu2'

    def value(self, t, w):
        return _frobenius2(t) / (2.0 * _det(t)) - 1.0

    def grad_t(self, t, w):
        tau = _det(t)[..., None, None]
        return t / tau - _frobenius2(t)[..., None, None] / (2.0 * tau ** 2) * _cofactor(t)


@dataclass(frozen=True)
class Mu77(Metric):
    """
    Size metric (τ - 1/τ)^2 / 2.
    """
    name = 'mu77'

    def in_domain(self, tau):
        return tau != 0.0

    def value(self, t, w):
        tau = _det(t)
        return 0.5 * (tau - 1.0 / tau) ** 2

    def grad_t(self, t, w):
        tau = _det(t)[..., None, None]
        return (tau - 1.0 / tau) * (1.0 + 1.0 / tau ** 2) * _cofactor(t)


@dataclass(frozen=True)
class Mu4NonBarrier(Metric):
    """
    |T|^2 - 2τ, zero for any scaled rotation and finite for inverted T.
    """
    name = 'mu4'

    @property
    def tau_floor(self):
        return -np.inf

    def value(self, t, w):
        return _frobenius2(t) - 2.0 * _det(t)

    def grad_t(self, t, w):
        return 2.0 * t - 2.0 * _cofactor(t)


@dataclass(frozen=True)
class ShiftedBarrier(Metric):
    inner: Metric = dataclasses.field(default_factory=Mu4NonBarrier)
    tau_b: float = 0.0
    domain_error = BarrierViolationError

    @property
    def name(self):  # type: ignore[override]
        return f'{self.inner.name}sb'

    @property
    def tau_floor(self):
        return self.tau_b

    def in_domain(self, tau):
        return tau > self.tau_b

    def with_barrier(self, tau_b: float) -> 'ShiftedBarrier':
        return dataclasses.replace(self, tau_b=float(tau_b))

    def value(self, t, w):
        return self.inner.value(t, w) / (2.0 * (_det(t) - self.tau_b))

    def grad_t(self, t, w):
        gap = (_det(t) - self.tau_b)[..., None, None]
        inner = self.inner.value(t, w)[..., None, None]
        return self.inner.grad_t(t, w) / (2.0 * gap) - inner / (2.0 * gap ** 2) * _cofactor(t)


def _column_terms(a: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    a1, a2 = a[..., :, 0], a[..., :, 1]
    n1 = np.linalg.norm(a1, axis=-1)
    n2 = np.linalg.norm(a2, axis=-1)
    dot = np.sum(a1 * a2, axis=-1)
    return n1, n2, dot, _det(a)


def skew_cos_sin(m: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Cosine and signed sine of the angle between the two columns of m.
    """
    n1, n2, dot, det = _column_terms(m)
    return dot / (n1 * n2), det / (n1 * n2)


@dataclass(frozen=True)
class Nu50(Metric):
    """
    Skewness metric [1 - cos(φ_A - φ_W)] / (sin φ_A sin φ_W), φ the angle between Jacobian columns.

    With signed sines this is (|a1||a2| - cos φ_W a1·a2) / (det A sin φ_W) - 1.
    """
    name = 'nu50'

    def value(self, t, w):
        a = t @ w
        n1, n2, dot, det = _column_terms(a)
        cos_w, sin_w = skew_cos_sin(w)
        return (n1 * n2 - cos_w * dot) / (det * sin_w) - 1.0

    def grad_t(self, t, w):
        a = t @ w
        n1, n2, dot, det = _column_terms(a)
        cos_w, sin_w = skew_cos_sin(w)
        a1, a2 = a[..., :, 0], a[..., :, 1]
        numerator = n1 * n2 - cos_w * dot
        d_num = np.empty_like(a)
        d_num[..., :, 0] = (n2 / n1)[..., None] * a1 - cos_w[..., None] * a2
        d_num[..., :, 1] = (n1 / n2)[..., None] * a2 - cos_w[..., None] * a1
        scale = (det * sin_w)[..., None, None]
        grad_a = d_num / scale - (numerator / (det ** 2 * sin_w))[..., None, None] * _cofactor(a)
        return grad_a @ np.swapaxes(w, -1, -2)


@dataclass(frozen=True)
class Blend(Metric):
    """
    γ first + (1-γ) second; mu80 and nu49 are blends with mu2.
    """
    first: Metric
    second: Metric
    gamma: float = DEFAULT_GAMMA
    label: str = 'blend'

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise TmopError(f"Blend weight must lie in [0, 1], got {self.gamma}")

    @property
    def name(self):  # type: ignore[override]
        return f'{self.label}:{self.gamma:g}'

    @property
    def tau_floor(self):
        return max(self.first.tau_floor, self.second.tau_floor)

    def in_domain(self, tau):
        return self.first.in_domain(tau) & self.second.in_domain(tau)

    def value(self, t, w):
        return self.gamma * self.first.value(t, w) + (1.0 - self.gamma) * self.second.value(t, w)

    def grad_t(self, t, w):
        return self.gamma * self.first.grad_t(t, w) + (1.0 - self.gamma) * self.second.grad_t(t, w)


def mu80(gamma: float = DEFAULT_GAMMA) -> Blend:
    return Blend(Mu2(), Mu77(), gamma, 'mu80')


def nu49(gamma: float = DEFAULT_GAMMA) -> Blend:
    return Blend(Mu2(), Nu50(), gamma, 'nu49')


def parse_metric(text: str, tau_b: float = 0.0) -> Metric:
    """
    Metric from its command-line name: mu2, mu77, mu80[:γ], mu4, mu4sb, nu50, nu49[:γ].
    """
    name, _, parameter = text.strip().lower().partition(':')
    try:
        gamma = float(parameter) if parameter else DEFAULT_GAMMA
    except ValueError:
        raise TmopError(f"Bad blend weight in metric '{text}'")
    if name == 'mu2':
        return Mu2()
    if name == 'mu77':
        return Mu77()
    if name == 'mu80':
        return mu80(gamma)
    if name == 'mu4':
        return Mu4NonBarrier()
    if name == 'mu4sb':
        return ShiftedBarrier(Mu4NonBarrier(), tau_b)
    if name == 'nu50':
        return Nu50()
    if name == 'nu49':
        return nu49(gamma)
    raise TmopError(f"Unknown metric '{text}'")


def _check(metric: Metric, tau: np.ndarray) -> None:
    if not np.all(metric.in_domain(tau)):
        raise metric.domain_error(f"{metric.name} is undefined at det(T) = {np.min(tau):.6e}")


def metric_value(metric: Metric, a, w) -> np.ndarray:
    a, w = np.asarray(a, dtype=float), np.asarray(w, dtype=float)
    t = a @ np.linalg.inv(w)
    _check(metric, _det(t))
    if isinstance(metric, Nu50) or (isinstance(metric, Blend) and isinstance(metric.second, Nu50)):
        if np.any(skew_cos_sin(a)[1] == 0.0) or np.any(skew_cos_sin(w)[1] == 0.0):
            raise MetricDomainError("Degenerate skewness: the Jacobian columns are parallel")
    return metric.value(t, w)


def metric_grad_t(metric: Metric, t, w=None) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    w = _identity_like(t) if w is None else np.asarray(w, dtype=float)
    _check(metric, _det(t))
    return metric.grad_t(t, w)


@dataclass(frozen=True)
class TargetSpec:
    """
    Ideal-shape target W = ζ I at every quadrature point.
    """
    zeta: float

    def __post_init__(self):
        if not self.zeta > 0.0:
            raise TmopError(f"Target size must be positive, got {self.zeta}")

    @property
    def w(self) -> np.ndarray:
        return self.zeta * np.eye(2)

    @property
    def omega(self) -> float:
        return self.zeta ** 2


def ideal_shape_target(mesh: Mesh) -> TargetSpec:
    """
    ζ such that a square of the mean element area maps from [-1, 1]^2 with A = ζ I.
    """
    tables = reference_tables(mesh.order, 2 * mesh.order)
    areas = np.abs(np.linalg.det(element_jacobians(mesh, tables))) @ tables.weights
    return TargetSpec(zeta=float(np.sqrt(np.mean(areas) / 4.0)))


QuadOrders = Union[int, Sequence[int], np.ndarray]


def _orders(mesh: Mesh, quad_orders: QuadOrders) -> np.ndarray:
    return np.broadcast_to(np.asarray(quad_orders, dtype=int), (mesh.num_elements,))


def evaluate(mesh: Mesh, metric: Metric, target: TargetSpec, quad_orders: QuadOrders,
             node_class: Optional[NodeClass] = None, with_gradient: bool = True
             ) -> Tuple[float, Optional[np.ndarray]]:
    """
    Objective and (optionally) its gradient with respect to node coordinates.

    Raises InfeasiblePointError if any quadrature point leaves the metric's domain.
    """
    w = target.w
    w_inv = np.linalg.inv(w)
    orders = _orders(mesh, quad_orders)
    energy = 0.0
    gradient = np.zeros_like(mesh.nodes) if with_gradient else None
    for order in np.unique(orders):
        chosen = np.flatnonzero(orders == order)
        tables = reference_tables(mesh.order, int(order))
        t = element_jacobians(mesh, tables, chosen) @ w_inv
        tau = _det(t)
        if not np.all(metric.in_domain(tau)):
            raise InfeasiblePointError(f"{metric.name}: det(T) reaches {np.min(tau):.6e}, "
                                       f"floor is {metric.tau_floor:.6e}")
        weights = target.omega * tables.weights
        energy += float(np.sum(metric.value(t, w) @ weights))
        if gradient is not None:
            g_a = metric.grad_t(t, w) @ w_inv.T
            local = (np.einsum('q,eqc,qi->eic', weights, g_a[..., 0], tables.d_xi)
                     + np.einsum('q,eqc,qi->eic', weights, g_a[..., 1], tables.d_eta))
            np.add.at(gradient, mesh.elements[chosen], local)
    if gradient is not None and node_class is not None:
        gradient[~node_class.movable] = 0.0
    return energy, gradient


def objective(mesh: Mesh, metric: Metric, target: TargetSpec, quad_orders: QuadOrders) -> float:
    return evaluate(mesh, metric, target, quad_orders, with_gradient=False)[0]


def gradient(mesh: Mesh, metric: Metric, target: TargetSpec, quad_orders: QuadOrders,
             node_class: Optional[NodeClass] = None) -> np.ndarray:
    return evaluate(mesh, metric, target, quad_orders, node_class)[1]


def barrier_from_bounds(alpha_lower: float, omega: float, epsilon: float = BOUND_BARRIER_OFFSET) -> float:
    """
    τ_b = α̲/ω - ε while the certified lower bound is not positive, else 0.
    """
    if omega <= 0.0 or epsilon <= 0.0:
        raise TmopError(f"Barrier needs ω > 0 and ε > 0, got ω={omega}, ε={epsilon}")
    return alpha_lower / omega - epsilon if alpha_lower <= 0.0 else 0.0


def barrier_from_samples(tau_min: float, beta: float = SAMPLE_BARRIER_SCALE,
                         epsilon: float = SAMPLE_BARRIER_OFFSET) -> float:
    if epsilon <= 0.0:
        raise TmopError(f"Barrier offset must be positive, got {epsilon}")
    return beta * tau_min - epsilon if tau_min <= 0.0 else 0.0


def min_tau(mesh: Mesh, target: TargetSpec, quad_orders: QuadOrders) -> float:
    orders = _orders(mesh, quad_orders)
    lowest = np.inf
    for order in np.unique(orders):
        chosen = np.flatnonzero(orders == order)
        dets = np.linalg.det(element_jacobians(mesh, reference_tables(mesh.order, int(order)), chosen))
        lowest = min(lowest, float(dets.min()) / target.omega)
    return lowest


def skew_angles(mesh: Mesh, quad_order: int = 10) -> np.ndarray:
    """
    Angle between the Jacobian columns at each quadrature point; shape (E, n_q), π/2 is ideal.
    """
    cos_a, _ = skew_cos_sin(element_jacobians(mesh, reference_tables(mesh.order, quad_order)))
    angles = np.arccos(np.clip(cos_a, -1.0, 1.0))
    AppSettings.logger.debug(f"Skewness angles in [{angles.min():.4f}, {angles.max():.4f}]")
    return angles
