"""Momentum diagnostics and the six-constraint velocity correction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MomentumPair:
    p: np.ndarray
    L: np.ndarray


@dataclass
class ProjectionResult:
    velocities: np.ndarray
    correction: np.ndarray
    multipliers: np.ndarray
    residual: np.ndarray
    fallback: bool


def linear_momentum(masses, velocities) -> np.ndarray:
    return np.asarray(masses, float) @ np.asarray(velocities, float)


def angular_momentum(masses, positions, velocities) -> np.ndarray:
    """Angular momentum about the origin."""
    m = np.asarray(masses, float)
    return (m[:, None] * np.cross(positions, velocities)).sum(axis=0)


def target_momenta(masses, positions, velocities, forces, dt: float) -> MomentumPair:
    """Momenta after one step of the external forces (evaluated at the start positions)."""
    f = np.asarray(forces, float)
    x = np.asarray(positions, float)
    p = linear_momentum(masses, velocities) + dt * f.sum(axis=0)
    L = angular_momentum(masses, x, velocities) + dt * np.cross(x, f).sum(axis=0)
    return MomentumPair(p, L)


def constraint_residual(masses, positions, velocities, targets: MomentumPair) -> np.ndarray:
    return np.concatenate([linear_momentum(masses, velocities) - targets.p,
                           angular_momentum(masses, positions, velocities) - targets.L])


def constraint_jacobian(masses, positions) -> np.ndarray:
    """(6, 3N) Jacobian of the momentum constraints with respect to velocities."""
    m = np.asarray(masses, float)
    x = np.asarray(positions, float)
    n = len(m)
    G = np.zeros((6, 3 * n))
    for c in range(3):
        G[c, c::3] = m
    # row block for L: m_i [x_i]_x
    G[3, 1::3] = -m * x[:, 2]
    G[3, 2::3] = m * x[:, 1]
    G[4, 0::3] = m * x[:, 2]
    G[4, 2::3] = -m * x[:, 0]
    G[5, 0::3] = -m * x[:, 1]
    G[5, 1::3] = m * x[:, 0]
    return G


def project_velocities(masses, positions, v_fd, targets: MomentumPair,
                       cond_limit: float = 1e12) -> ProjectionResult:
    """Correct ``v_fd`` to meet the target momenta via the Schur-complement KKT solve.

    Solves ``(G M^-1 G^T) lam = C(v_fd)`` and returns ``v_fd - M^-1 G^T lam``.
    The system is assembled about the centre of mass (an invertible change of
    multiplier variables that leaves the correction unchanged) for
    conditioning; ill-conditioned systems fall back to a pseudo-inverse.
    """
    m = np.asarray(masses, float)
    x = np.asarray(positions, float)
    v = np.asarray(v_fd, float)
    c = (m @ x) / m.sum()
    xc = x - c
    C = constraint_residual(m, x, v, targets)
    # multipliers in the centred frame: C_c = T C with L_c = L - c x p
    Cc = C.copy()
    Cc[3:] = C[3:] - np.cross(c, C[:3])
    G = constraint_jacobian(m, xc)
    A = (G / np.repeat(m, 3)) @ G.T
    fallback = False
    try:
        if np.linalg.cond(A) > cond_limit:
            raise np.linalg.LinAlgError("ill-conditioned")
        Lc = np.linalg.cholesky(A)
        lam = np.linalg.solve(Lc.T, np.linalg.solve(Lc, Cc))
    except np.linalg.LinAlgError:
        fallback = True
        lam = np.linalg.pinv(A, rcond=1e-14) @ Cc
    dv = -((G.T @ lam) / np.repeat(m, 3)).reshape(-1, 3)
    out = v + dv
    lam_world = np.concatenate([lam[:3] + np.cross(c, lam[3:]), lam[3:]])
    return ProjectionResult(out, dv, lam_world, constraint_residual(m, x, out, targets), fallback)
