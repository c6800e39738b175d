"""Reference physics: external forces, the momentum step and implicit Euler."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from msim.elastic import ElasticError
from msim.mesh import Mesh, SimState
from msim.trajectory import Trajectory, step_diagnostics

logger = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, grad_norm: float):
        super().__init__(f"{message} (|grad|_inf = {grad_norm:.3e})")
        self.grad_norm = grad_norm


class StepError(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step}: {cause}")
        self.step = step
        self.cause = cause


@dataclass
class HalfSpace:
    """Obstacle ``{x : n.x >= offset}``; penetrating points are pushed out along ``n``."""

    normal: np.ndarray
    offset: float
    stiffness: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        if not np.isclose(np.linalg.norm(n), 1.0, atol=1e-12):
            raise ValueError("half-space normal must be unit length")
        if self.stiffness < 0:
            raise ValueError("stiffness must be nonnegative")
        self.normal = n

    def signed_distance(self, x):
        return x @ self.normal - self.offset, np.broadcast_to(self.normal, x.shape)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    stiffness: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.stiffness < 0 or self.radius <= 0:
            raise ValueError("sphere needs positive radius and nonnegative stiffness")

    def signed_distance(self, x):
        d = x - self.center
        r = np.linalg.norm(d, axis=1)
        n = d / np.maximum(r, 1e-300)[:, None]
        return r - self.radius, n


@dataclass
class ExternalForces:
    gravity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    obstacles: list = field(default_factory=list)
    extra: np.ndarray | None = None

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=float).reshape(3)


@dataclass
class StepConfig:
    dt: float = 1.0 / 60.0
    newton_tol: float | None = None  # default: 1e-8 * total_mass / dt^2
    newton_max_iters: int = 100
    line_search_shrink: float = 0.5
    armijo: float = 1e-4
    max_line_search: int = 60

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.newton_tol is not None and not self.newton_tol > 0:
            raise ValueError("newton_tol must be positive")
        if not 0 < self.line_search_shrink < 1:
            raise ValueError("line_search_shrink must lie in (0, 1)")

    def tolerance(self, mesh: Mesh) -> float:
        if self.newton_tol is not None:
            return self.newton_tol
        return 1e-8 * mesh.total_mass / self.dt**2


def eval_external(mesh: Mesh, state: SimState, forces: ExternalForces) -> np.ndarray:
    """Per-vertex external force; pinned vertices receive zero."""
    x = state.positions
    f = mesh.masses[:, None] * forces.gravity[None, :]
    for obs in forces.obstacles:
        phi, grad = obs.signed_distance(x)
        f = f + obs.stiffness * np.maximum(0.0, -phi)[:, None] * grad
    if forces.extra is not None:
        f = f + np.asarray(forces.extra, dtype=float).reshape(x.shape)
    f[mesh.pinned] = 0.0
    return f


def momentum_step(mesh: Mesh, state: SimState, f_ext: np.ndarray, dt: float) -> np.ndarray:
    """Inertia plus external forces: ``x + dt v + dt^2 M^-1 f``; pinned vertices stay put."""
    xm = state.positions + dt * state.velocities + dt**2 * f_ext / mesh.masses[:, None]
    xm[mesh.pinned] = state.positions[mesh.pinned]
    return xm


def modified_potential(mesh: Mesh, x, x_m, dt: float, j_min: float | None = None
                       ) -> tuple[float, np.ndarray]:
    """``|x - x_m|_M^2 / (2 dt^2) + E_int(x)`` and its gradient with pinned rows zeroed."""
    x = np.asarray(x, dtype=float)
    d = x - x_m
    e_val, e_grad = mesh.elastic.energy_and_gradient(x, j_min)
    value = 0.5 / dt**2 * float(np.sum(mesh.masses[:, None] * d * d)) + e_val
    grad = mesh.masses[:, None] * d / dt**2 + e_grad
    grad[mesh.pinned] = 0.0
    return value, grad


def implicit_euler_potential(mesh: Mesh, x, state: SimState, f_ext, dt: float
                             ) -> tuple[float, np.ndarray]:
    """Single-stage implicit Euler objective ``|dv|_M^2 / 2 + E_int(x) - f.x``.

    ``dv = (x - x_i)/dt - v_i``.  Differs from :func:`modified_potential` by a
    constant, so both have the same minimizer.
    """
    x = np.asarray(x, dtype=float)
    dv = (x - state.positions) / dt - state.velocities
    e_val, e_grad = mesh.elastic.energy_and_gradient(x)
    value = 0.5 * float(np.sum(mesh.masses[:, None] * dv * dv)) + e_val - float(np.sum(f_ext * x))
    grad = mesh.masses[:, None] * dv / dt + e_grad - f_ext
    grad[mesh.pinned] = 0.0
    return value, grad


@dataclass
class NewtonResult:
    x: np.ndarray
    iterations: int
    grad_norm: float
    values: list


def minimize_newton(mesh: Mesh, objective, x0: np.ndarray, dt: float, cfg: StepConfig,
                    tol: float) -> NewtonResult:
    """Damped Newton on the free DOFs of ``objective(x) -> (value, grad)``.

    The Hessian is ``M / dt^2 + Hess E_int``.  Indefinite systems are shifted by
    a growing multiple of the identity; if that fails the step falls back to
    steepest descent.  Elastic inversion during the line search counts as an
    infinite objective.
    """
    free = np.repeat(~mesh.pinned, 3)
    mass_diag = np.repeat(mesh.masses, 3) / dt**2
    x = x0.copy()
    value, grad = objective(x)
    values = [value]
    for it in range(cfg.newton_max_iters + 1):
        gnorm = float(np.abs(grad).max()) if grad.size else 0.0
        if gnorm <= tol:
            return NewtonResult(x, it, gnorm, values)
        if it == cfg.newton_max_iters:
            break
        g = grad.ravel()[free]
        H = mesh.elastic.hessian(x)[np.ix_(free, free)]
        H[np.diag_indices_from(H)] += mass_diag[free]
        direction = _newton_direction(H, g)
        slope = float(direction @ g)
        if not slope < 0:
            direction, slope = -g, -float(g @ g)
        step = 1.0
        accepted = None
        for _ in range(cfg.max_line_search):
            trial = x.copy()
            trial.reshape(-1)[free] += step * direction
            try:
                t_val, t_grad = objective(trial)
            except ElasticError:
                step *= cfg.line_search_shrink
                continue
            if t_val <= value + cfg.armijo * step * slope:
                accepted = (trial, t_val, t_grad)
                break
            # near the optimum the Armijo decrease drowns in roundoff; a
            # non-increasing value with a smaller gradient is still progress
            if t_val <= value and np.abs(t_grad).max() < gnorm:
                accepted = (trial, t_val, t_grad)
                break
            step *= cfg.line_search_shrink
        if accepted is None:
            raise ConvergenceError("line search failed", gnorm)
        trial, t_val, t_grad = accepted
        x, value, grad = trial, t_val, t_grad
        values.append(value)
    raise ConvergenceError(f"no convergence after {cfg.newton_max_iters} iterations",
                           float(np.abs(grad).max()))


def _newton_direction(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    shift = 0.0
    scale = max(float(np.abs(np.diag(H)).max()), 1e-300)
    for _ in range(12):
        try:
            Lc = np.linalg.cholesky(H + shift * np.eye(len(H)) if shift else H)
            return -np.linalg.solve(Lc.T, np.linalg.solve(Lc, g))
        except np.linalg.LinAlgError:
            shift = 1e-8 * scale if shift == 0.0 else 10.0 * shift
    return -g


def implicit_euler_step(mesh: Mesh, state: SimState, forces: ExternalForces,
                        cfg: StepConfig, return_info: bool = False):
    """One implicit Euler step via the momentum step and the modified potential."""
    dt = cfg.dt
    f_ext = eval_external(mesh, state, forces)
    x_m = momentum_step(mesh, state, f_ext, dt)
    result = minimize_newton(mesh, lambda x: modified_potential(mesh, x, x_m, dt),
                             x_m, dt, cfg, cfg.tolerance(mesh))
    x_new = result.x
    x_new[mesh.pinned] = state.positions[mesh.pinned]
    new_state = SimState(x_new, (x_new - state.positions) / dt, state.time + dt)
    if return_info:
        return new_state, result
    return new_state


def implicit_euler_step_direct(mesh: Mesh, state: SimState, forces: ExternalForces,
                               cfg: StepConfig) -> SimState:
    """Implicit Euler by minimizing the single-stage potential from ``x_i + dt v_i``."""
    dt = cfg.dt
    f_ext = eval_external(mesh, state, forces)
    x0 = state.positions + dt * state.velocities
    x0[mesh.pinned] = state.positions[mesh.pinned]
    result = minimize_newton(mesh, lambda x: implicit_euler_potential(mesh, x, state, f_ext, dt),
                             x0, dt, cfg, cfg.tolerance(mesh))
    return SimState(result.x, (result.x - state.positions) / dt, state.time + dt)


def reference_rollout(mesh: Mesh, state0: SimState, forces: ExternalForces, cfg: StepConfig,
                      n_steps: int) -> Trajectory:
    traj = Trajectory(mesh=mesh, dt=cfg.dt, provenance="reference")
    traj.append(state0.copy(), step_diagnostics(mesh, state0))
    state = state0
    for k in range(n_steps):
        try:
            state = implicit_euler_step(mesh, state, forces, cfg)
        except (ElasticError, ConvergenceError) as exc:
            raise StepError(k, exc) from exc
        traj.append(state, step_diagnostics(mesh, state))
    return traj
