"""
Node-relocation solver: Newton or L-BFGS steps, a backtracking line search
that only accepts valid meshes, per-element quadrature refinement and a
shifted-barrier untangling loop.
"""
import collections
import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Deque, FrozenSet, List, Optional, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse.linalg as sp_la

from app_settings.app_settings import AppSettings
from general_tools.file_utils import write_csv_file
from mesh_tools.mesh import Mesh, NodeKind, classify_nodes, extract_boundary
from mesh_tools.validity import DetCertificate, certify_mesh, sampled_min_det
from optimizer_tools.tangential import projection_residual, relax
from optimizer_tools.tmop import (InfeasiblePointError, Metric, Mu4NonBarrier, ShiftedBarrier, TargetSpec,
                                  barrier_from_bounds, barrier_from_samples, evaluate, ideal_shape_target,
                                  min_tau)

MODES = ('bfgs', 'newton')
VALIDITY_MODES = ('bounds', 'samples')
BARRIER_MODES = ('bounds', 'samples')
DENSE_SOLVE_LIMIT = 2000
# First (or reset) L-BFGS steps move no node further than this fraction of the target size
INITIAL_STEP_FRACTION = 0.1
CURVATURE_TOLERANCE = 1.0e-12
GRADIENT_FLOOR = 1.0e-12
AXIS_TOLERANCE = 1.0e-12

TRACE_HEADER = ('iteration', 'F', '|J|', 'gamma', 'alpha_lb', 'alpha_qpmin', 'tau_b', 'n_qrefined',
                'projection_residual', 'direction')


class SolverError(RuntimeError):
    pass


class InvalidInitialMeshError(SolverError):
    pass


class LineSearchFailure(SolverError):
    pass


class UntangleError(SolverError):
    def __init__(self, message: str, best_alpha_lower: float):
        super().__init__(message)
        self.best_alpha_lower = best_alpha_lower


@dataclass(frozen=True)
class SolverConfig:
    mode: str = 'bfgs'
    eps_conv: float = 1.0e-10
    max_iters: int = 200
    validity: str = 'bounds'
    backtrack: float = 0.5
    max_backtracks: int = 30
    energy_factor: float = 1.2
    grad_factor: float = 1.2
    qrefine: bool = False
    eps_q: float = 5.0
    quad_order: int = 10
    max_quad_order: int = 400
    tangential: bool = False
    tangential_attrs: FrozenSet[int] = frozenset()
    control_nodes: Optional[int] = None
    max_depth: int = 6
    barrier: str = 'bounds'
    barrier_offset: float = 1.0e-3
    bfgs_memory: int = 10
    hessian_step: float = 1.0e-7
    blend_tol: float = 1.0e-12

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.validity not in VALIDITY_MODES:
            raise ValueError(f"validity must be one of {VALIDITY_MODES}, got '{self.validity}'")
        if self.barrier not in BARRIER_MODES:
            raise ValueError(f"barrier must be one of {BARRIER_MODES}, got '{self.barrier}'")
        if not self.eps_conv > 0.0:
            raise ValueError(f"eps_conv must be positive, got {self.eps_conv}")
        if not self.eps_q > 1.0:
            raise ValueError(f"eps_q must exceed 1, got {self.eps_q}")
        if self.quad_order < 1 or self.max_quad_order < self.quad_order:
            raise ValueError(f"Need 1 <= quad_order <= max_quad_order, "
                             f"got {self.quad_order} and {self.max_quad_order}")
        if not 0.0 < self.backtrack < 1.0:
            raise ValueError(f"backtrack must lie in (0, 1), got {self.backtrack}")
        if self.tangential and not self.tangential_attrs:
            raise ValueError("Tangential relaxation needs at least one boundary attribute")
        object.__setattr__(self, 'tangential_attrs', frozenset(int(a) for a in self.tangential_attrs))

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data['tangential_attrs'] = sorted(self.tangential_attrs)
        return data


@dataclass
class TraceRecord:
    iteration: int
    energy: float
    grad_norm: float
    gamma: float = 0.0
    alpha_lower: float = np.nan
    alpha_qp_min: float = np.nan
    tau_b: float = 0.0
    n_qrefined: int = 0
    projection_residual: float = np.nan
    direction: str = ''

    def row(self) -> tuple:
        return (self.iteration, self.energy, self.grad_norm, self.gamma, self.alpha_lower, self.alpha_qp_min,
                self.tau_b, self.n_qrefined, self.projection_residual, self.direction)


@dataclass
class SolverTrace:
    records: List[TraceRecord] = field(default_factory=list)
    converged: bool = False
    stop_reason: str = ''
    saturated_elements: int = 0
    quad_order_history: List[np.ndarray] = field(default_factory=list)

    @property
    def accepted_steps(self) -> int:
        return sum(1 for r in self.records if r.iteration > 0)

    def append(self, record: TraceRecord) -> None:
        self.records.append(record)
        AppSettings.logger.debug(f"iter {record.iteration}: F={record.energy:.10e} |J|={record.grad_norm:.3e} "
                                 f"gamma={record.gamma:g} alpha_lb={record.alpha_lower:.3e}")

    def write_csv(self, path: str) -> None:
        write_csv_file(path, TRACE_HEADER, (r.row() for r in self.records))


class LbfgsMemory:
    """
    Limited-memory inverse Hessian approximation (two-loop recursion).
    """

    def __init__(self, size: int = 10):
        self.size = size
        self.pairs: Deque[Tuple[np.ndarray, np.ndarray, float]] = collections.deque(maxlen=size)

    def __len__(self):
        return len(self.pairs)

    def reset(self) -> None:
        self.pairs.clear()

    def update(self, s: np.ndarray, y: np.ndarray) -> bool:
        curvature = float(s @ y)
        if curvature <= CURVATURE_TOLERANCE * np.linalg.norm(s) * np.linalg.norm(y):
            return False
        self.pairs.append((s.copy(), y.copy(), 1.0 / curvature))
        return True

    def direction(self, g: np.ndarray) -> np.ndarray:
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(self.pairs):
            alpha = rho * (s @ q)
            q -= alpha * y
            alphas.append(alpha)
        if self.pairs:
            s, y, _ = self.pairs[-1]
            q *= (s @ y) / (y @ y)
        for (s, y, rho), alpha in zip(self.pairs, reversed(alphas)):
            beta = rho * (y @ q)
            q += (alpha - beta) * s
        return -q


def fd_hessian(grad_fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, free: np.ndarray,
               step: float = 1.0e-7, g0: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Symmetrized forward-difference Hessian of <grad_fn> on the free degrees of freedom.
    """
    free_idx = np.flatnonzero(free)
    g0 = grad_fn(x) if g0 is None else g0
    hessian = np.empty((free_idx.size, free_idx.size))
    for column, j in enumerate(free_idx):
        h = step * max(1.0, abs(x[j]))
        shifted = x.copy()
        shifted[j] += h
        hessian[:, column] = (grad_fn(shifted)[free_idx] - g0[free_idx]) / h
    return 0.5 * (hessian + hessian.T)


def _solve_hessian(hessian: np.ndarray, rhs: np.ndarray) -> Optional[np.ndarray]:
    if rhs.size <= DENSE_SOLVE_LIMIT:
        try:
            return scipy.linalg.cho_solve(scipy.linalg.cho_factor(hessian), rhs)
        except (np.linalg.LinAlgError, ValueError):
            return None
    diagonal = np.diag(hessian)
    if np.any(diagonal <= 0.0):
        return None
    preconditioner = sp_la.LinearOperator(hessian.shape, matvec=lambda v: v / diagonal)
    solution, info = sp_la.cg(hessian, rhs, rtol=1.0e-10, atol=0.0, maxiter=10 * rhs.size, M=preconditioner)
    return solution if info == 0 else None


def newton_direction(grad_fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, g: np.ndarray,
                     free: np.ndarray, step: float = 1.0e-7) -> Tuple[np.ndarray, str]:
    """
    Solves H d = -g on the free DOFs; falls back to -g when H is not positive definite.
    """
    direction = np.zeros_like(x)
    if not np.any(g[free]):
        return direction, 'newton'
    try:
        hessian = fd_hessian(grad_fn, x, free, step, g)
    except InfeasiblePointError:
        hessian = None
    solution = None if hessian is None else _solve_hessian(hessian, -g[free])
    if solution is None or not solution @ g[free] < 0.0:
        AppSettings.logger.warning("Newton system could not be used, falling back to steepest descent")
        direction[free] = -g[free]
        return direction, 'steepest'
    direction[free] = solution
    return direction, 'newton'


def q_refine(certificate: DetCertificate, quad_orders: np.ndarray,
             config: SolverConfig) -> Tuple[np.ndarray, int, int]:
    """
    Raises the quadrature order of elements whose sampled min det is more than
        eps_q times their certified lower bound.

    Returns the new orders, how many were raised and how many were already at the cap.
    """
    orders = np.array(quad_orders, dtype=int)
    refined = saturated = 0
    for cert in certificate.elements:
        if not cert.certified_lower > 0.0:
            continue
        if cert.sampled_min / cert.certified_lower <= config.eps_q:
            continue
        e = cert.element
        if orders[e] >= config.max_quad_order:
            saturated += 1
            continue
        orders[e] = min(orders[e] + config.quad_order, config.max_quad_order)
        refined += 1
    if saturated:
        AppSettings.logger.warning(f"{saturated} elements are at the maximum quadrature order "
                                   f"{config.max_quad_order}")
    return orders, refined, saturated


@dataclass
class StepResult:
    mesh: Mesh
    gamma: float
    energy: float
    gradient: np.ndarray
    alpha_lower: float = np.nan
    alpha_qp_min: float = np.nan
    certificate: Optional[DetCertificate] = None


class MeshOptimizer:
    """
    Holds the state of one r-adaptivity run. The mesh passed in is never modified.
    """

    def __init__(self, mesh: Mesh, metric: Metric, target: Optional[TargetSpec] = None,
                 config: Optional[SolverConfig] = None):
        self.config = config or SolverConfig()
        self.metric = metric
        self.mesh = mesh.copy()
        self.target = target or ideal_shape_target(mesh)
        self.quad_orders = np.full(mesh.num_elements, self.config.quad_order, dtype=int)
        attrs = self.config.tangential_attrs if self.config.tangential else frozenset()
        self.node_class = classify_nodes(mesh, attrs)
        self.curve = extract_boundary(mesh, attrs) if attrs else None
        self.free_dofs = np.repeat(self.node_class.movable, 2)
        self.memory = LbfgsMemory(self.config.bfgs_memory)
        self.trace = SolverTrace()
        self.untangling = False
        self.tau_b = 0.0

    # Objective --------------------------------------------------------------

    def evaluate(self, mesh: Mesh) -> Tuple[float, np.ndarray]:
        energy, gradient = evaluate(mesh, self.metric, self.target, self.quad_orders)
        return energy, gradient.ravel() * self.free_dofs

    def _grad_at(self, x: np.ndarray) -> np.ndarray:
        return self.evaluate(self.mesh.with_nodes(x.reshape(-1, 2)))[1]

    def check_validity(self, mesh: Mesh) -> Tuple[bool, float, float, Optional[DetCertificate]]:
        """
        (valid, certified lower bound, sampled minimum, certificate) under the configured criterion.
        """
        if self.config.validity == 'bounds' or self.config.qrefine:
            certificate = certify_mesh(mesh, self.config.control_nodes, self.config.max_depth, self.quad_orders)
            if self.config.validity == 'bounds':
                return certificate.all_positive, certificate.alpha_lower, certificate.sampled_min, certificate
            return certificate.sampled_min > 0.0, certificate.alpha_lower, certificate.sampled_min, certificate
        alpha_qp = sampled_min_det(mesh, self.quad_orders)
        return alpha_qp > 0.0, np.nan, alpha_qp, None

    # Steps ------------------------------------------------------------------

    def step_direction(self, g: np.ndarray) -> Tuple[np.ndarray, str]:
        if self.config.mode == 'newton':
            return newton_direction(self._grad_at, self.mesh.nodes.ravel(), g, self.free_dofs,
                                    self.config.hessian_step)
        if len(self.memory):
            direction = self.memory.direction(g) * self.free_dofs
            if direction @ g < 0.0:
                return direction, 'bfgs'
            self.memory.reset()
        largest = np.max(np.linalg.norm(g.reshape(-1, 2), axis=1))
        if largest == 0.0:
            return np.zeros_like(g), 'steepest'
        return -g * (INITIAL_STEP_FRACTION * self.target.zeta / largest), 'steepest'

    def line_search(self, direction: np.ndarray, energy: float, gradient: np.ndarray) -> StepResult:
        """
        Backtracks from γ = 1 until the trial mesh satisfies the energy and gradient
            conditions and is valid; raises LineSearchFailure otherwise.
        """
        config = self.config
        grad_norm = float(np.linalg.norm(gradient))
        if not np.any(direction):
            return StepResult(mesh=self.mesh, gamma=1.0, energy=energy, gradient=gradient)
        relax_boundary = self.curve is not None and not self.untangling
        gamma = 1.0
        for _ in range(config.max_backtracks + 1):
            trial = self.mesh.with_nodes(self.mesh.nodes + gamma * direction.reshape(-1, 2))
            result = self._try_step(trial, gamma, energy, grad_norm, relax_boundary)
            if result is not None:
                return result
            gamma *= config.backtrack
        raise LineSearchFailure(f"No acceptable step after {config.max_backtracks} backtracks")

    def _try_step(self, trial: Mesh, gamma: float, energy: float, grad_norm: float,
                  relax_boundary: bool) -> Optional[StepResult]:
        config = self.config
        if relax_boundary:
            # Projection needs a valid trial mesh
            if not self.check_validity(trial)[0]:
                return None
            trial = relax(trial, self.curve, self.node_class, config.blend_tol)
        try:
            trial_energy, trial_gradient = self.evaluate(trial)
        except InfeasiblePointError:
            return None
        if not trial_energy < config.energy_factor * energy:
            return None
        if not np.linalg.norm(trial_gradient) < config.grad_factor * grad_norm:
            return None
        if self.untangling:
            return StepResult(mesh=trial, gamma=gamma, energy=trial_energy, gradient=trial_gradient)
        valid, alpha_lower, alpha_qp, certificate = self.check_validity(trial)
        if not valid:
            return None
        return StepResult(mesh=trial, gamma=gamma, energy=trial_energy, gradient=trial_gradient,
                          alpha_lower=alpha_lower, alpha_qp_min=alpha_qp, certificate=certificate)

    def _accept(self, step: StepResult, gradient: np.ndarray) -> None:
        s = (step.mesh.nodes - self.mesh.nodes).ravel()
        if np.any(s):
            self.memory.update(s, step.gradient - gradient)
        self.mesh = step.mesh

    def _converged(self, grad_norm: float, initial_norm: float) -> bool:
        floor = GRADIENT_FLOOR * self.target.omega * np.sqrt(self.mesh.num_elements)
        if initial_norm <= floor:
            # Started at an optimum up to round-off
            return grad_norm <= floor
        return grad_norm <= self.config.eps_conv * initial_norm

    def _residual(self) -> float:
        return projection_residual(self.mesh, self.curve, self.node_class) if self.curve is not None else np.nan

    # Drivers ----------------------------------------------------------------

    def optimize(self) -> Tuple[Mesh, SolverTrace]:
        config = self.config
        valid, alpha_lower, alpha_qp, _ = self.check_validity(self.mesh)
        if config.validity == 'bounds' and not valid:
            raise InvalidInitialMeshError(f"Initial mesh is not certified valid (lower bound {alpha_lower:.6e}); "
                                          f"untangle it first")
        energy, gradient = self.evaluate(self.mesh)
        initial_norm = grad_norm = float(np.linalg.norm(gradient))
        self.trace.append(TraceRecord(0, energy, grad_norm, alpha_lower=alpha_lower, alpha_qp_min=alpha_qp,
                                      projection_residual=self._residual()))
        AppSettings.logger.info(f"Optimizing {self.mesh.num_elements} elements with {self.metric.name}: "
                                f"F0={energy:.6e}, |J0|={initial_norm:.3e}")
        self.trace.stop_reason = 'max_iters'
        for iteration in range(1, config.max_iters + 1):
            if self._converged(grad_norm, initial_norm):
                self.trace.converged = True
                self.trace.stop_reason = 'converged'
                break
            direction, kind = self.step_direction(gradient)
            try:
                step = self.line_search(direction, energy, gradient)
            except LineSearchFailure as e:
                AppSettings.logger.info(f"Stopping at iteration {iteration}: {e}")
                self.trace.stop_reason = 'line_search'
                break
            self._accept(step, gradient)
            energy, gradient = step.energy, step.gradient
            n_refined = 0
            if config.qrefine and step.certificate is not None:
                self.quad_orders, n_refined, saturated = q_refine(step.certificate, self.quad_orders, config)
                self.trace.saturated_elements = saturated
                if n_refined:
                    self.memory.reset()
                    energy, gradient = self.evaluate(self.mesh)
            grad_norm = float(np.linalg.norm(gradient))
            self.trace.quad_order_history.append(self.quad_orders.copy())
            self.trace.append(TraceRecord(iteration, energy, grad_norm, step.gamma, step.alpha_lower,
                                          step.alpha_qp_min, 0.0, n_refined, self._residual(), kind))
        else:
            if self._converged(grad_norm, initial_norm):
                self.trace.converged = True
                self.trace.stop_reason = 'converged'
        AppSettings.logger.info(f"Optimization stopped ({self.trace.stop_reason}) after "
                                f"{self.trace.accepted_steps} steps: F={energy:.6e}")
        return self.mesh, self.trace

    def _sliding_dofs(self) -> np.ndarray:
        """
        While untangling, tangential nodes may only slide along axis-aligned boundaries.
        """
        free = np.repeat(self.node_class.kinds == NodeKind.INTERIOR, 2).reshape(-1, 2)
        if self.curve is None:
            return free.ravel()
        for node in self.node_class.indices(NodeKind.TANGENTIAL_BOUNDARY):
            segments = self.curve.segments[self.curve.attributes == self.node_class.attributes[node]]
            spread = np.ptp(segments.reshape(-1, 2), axis=0)
            scale = AXIS_TOLERANCE * max(1.0, float(np.max(np.abs(segments))))
            if spread[1] <= scale:
                free[node, 0] = True
            elif spread[0] <= scale:
                free[node, 1] = True
        return free.ravel()

    def _untangled(self, certificate: DetCertificate) -> bool:
        if self.config.validity == 'samples':
            return certificate.sampled_min > 0.0
        return certificate.all_positive

    def _barrier_for(self, certificate: DetCertificate) -> float:
        if self.config.barrier == 'samples':
            return barrier_from_samples(min_tau(self.mesh, self.target, self.quad_orders))
        return barrier_from_bounds(certificate.alpha_lower, self.target.omega, self.config.barrier_offset)

    def untangle(self) -> Tuple[Mesh, SolverTrace]:
        """
        Minimizes a shifted-barrier metric, lifting the barrier as the mesh improves,
            until the mesh is valid under the configured criterion.

        The barrier comes from the certified lower bound ('bounds') or from the
            quadrature-point minimum of det(T) ('samples').
        """
        config = self.config
        certificate = certify_mesh(self.mesh, config.control_nodes, config.max_depth, self.quad_orders)
        alpha_lower = best_alpha = certificate.alpha_lower
        if self._untangled(certificate):
            AppSettings.logger.info("Mesh is already valid; nothing to untangle")
            self.trace.converged = True
            self.trace.stop_reason = 'valid'
            return self.mesh, self.trace

        saved_metric, saved_dofs = self.metric, self.free_dofs
        self.tau_b = self._barrier_for(certificate)
        barrier = ShiftedBarrier(Mu4NonBarrier(), self.tau_b)
        self.metric, self.free_dofs = barrier, self._sliding_dofs()
        self.untangling = True
        self.memory.reset()
        AppSettings.logger.info(f"Untangling: lower bound {alpha_lower:.6e}, {config.barrier} barrier {self.tau_b:.6e}")
        try:
            energy, gradient = self.evaluate(self.mesh)
            self.trace.append(TraceRecord(0, energy, float(np.linalg.norm(gradient)), alpha_lower=alpha_lower,
                                          alpha_qp_min=certificate.sampled_min, tau_b=self.tau_b))
            self.trace.stop_reason = 'max_iters'
            for iteration in range(1, config.max_iters + 1):
                direction, kind = self.step_direction(gradient)
                try:
                    step = self.line_search(direction, energy, gradient)
                except LineSearchFailure as e:
                    AppSettings.logger.warning(f"Untangling stalled at iteration {iteration}: {e}")
                    self.trace.stop_reason = 'line_search'
                    break
                self._accept(step, gradient)
                certificate = certify_mesh(self.mesh, config.control_nodes, config.max_depth, self.quad_orders)
                alpha_lower = certificate.alpha_lower
                best_alpha = max(best_alpha, alpha_lower)
                done = self._untangled(certificate)
                if done:
                    self.tau_b = 0.0
                    energy, gradient = step.energy, step.gradient
                else:
                    lifted = self._barrier_for(certificate)
                    if lifted > self.tau_b:
                        self.tau_b = lifted
                        self.metric = barrier.with_barrier(self.tau_b)
                        self.memory.reset()
                    energy, gradient = self.evaluate(self.mesh)
                self.trace.append(TraceRecord(iteration, energy, float(np.linalg.norm(gradient)), step.gamma,
                                              alpha_lower, certificate.sampled_min, self.tau_b, 0, np.nan, kind))
                if done:
                    self.trace.converged = True
                    self.trace.stop_reason = 'untangled'
                    break
        finally:
            self.metric, self.free_dofs = saved_metric, saved_dofs
            self.untangling = False
            self.memory.reset()
        if not self.trace.converged:
            raise UntangleError(f"Untangling failed ({self.trace.stop_reason}); best lower bound {best_alpha:.6e}",
                                best_alpha)
        AppSettings.logger.info(f"Untangled after {self.trace.accepted_steps} steps: lower bound {alpha_lower:.6e}")
        return self.mesh, self.trace


def optimize(mesh: Mesh, metric: Metric, target: Optional[TargetSpec] = None,
             config: Optional[SolverConfig] = None) -> Tuple[Mesh, SolverTrace]:
    return MeshOptimizer(mesh, metric, target, config).optimize()


def untangle(mesh: Mesh, config: Optional[SolverConfig] = None,
             target: Optional[TargetSpec] = None) -> Tuple[Mesh, SolverTrace]:
    return MeshOptimizer(mesh, Mu4NonBarrier(), target, config).untangle()
