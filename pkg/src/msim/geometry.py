"""Batched geometric primitives shared by the energies and the impulse basis.

Hinge convention: rows are ``(x0, x1, x2, x3)`` where ``x0 -> x1`` is the
shared edge (smaller vertex index first), ``x2`` is the opposite vertex of the
triangle that traverses the edge as ``x0 -> x1`` and ``x3`` the other one.
The angle is zero for a flat hinge and positive when the hinge folds towards
the normal of the ``x2`` triangle.
"""
from __future__ import annotations

import numpy as np


class DegenerateGeometryError(ValueError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message if index is None else f"{message} (stencil {index})")
        self.index = index


def _hinge_normals(x, eps_area):
    x0, x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2], x[:, 3]
    e = x1 - x0
    nA = np.cross(e, x2 - x0)
    nB = np.cross(x3 - x0, e)
    aA = np.einsum("ij,ij->i", nA, nA)
    aB = np.einsum("ij,ij->i", nB, nB)
    # |n|^2 = (2 * area)^2
    bad = np.flatnonzero((aA <= 4.0 * eps_area**2) | (aB <= 4.0 * eps_area**2))
    if bad.size:
        raise DegenerateGeometryError("degenerate hinge triangle", int(bad[0]))
    return e, nA, nB, aA, aB


def dihedral_angle(x: np.ndarray, eps_area: float = 0.0) -> np.ndarray:
    """Signed dihedral angles (H,) of hinges given as (H, 4, 3) positions."""
    x = np.asarray(x, dtype=float)
    e, nA, nB, aA, aB = _hinge_normals(x, eps_area)
    e_hat = e / np.linalg.norm(e, axis=1)[:, None]
    sin = np.einsum("ij,ij->i", np.cross(nA, nB), e_hat)
    cos = np.einsum("ij,ij->i", nA, nB)
    return np.arctan2(sin, cos)


def dihedral_angle_and_gradient(x: np.ndarray, eps_area: float = 0.0
                                ) -> tuple[np.ndarray, np.ndarray]:
    """Angles (H,) and exact gradients d(theta)/dx_k as (H, 4, 3)."""
    x = np.asarray(x, dtype=float)
    e, nA, nB, aA, aB = _hinge_normals(x, eps_area)
    e_len = np.linalg.norm(e, axis=1)
    e_hat = e / e_len[:, None]
    theta = np.arctan2(np.einsum("ij,ij->i", np.cross(nA, nB), e_hat),
                       np.einsum("ij,ij->i", nA, nB))
    gA = -nA / aA[:, None]
    gB = -nB / aB[:, None]
    x0, x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2], x[:, 3]
    g = np.empty_like(x)
    g[:, 2] = e_len[:, None] * gA
    g[:, 3] = e_len[:, None] * gB
    g[:, 0] = (np.einsum("ij,ij->i", x2 - x1, e_hat)[:, None] * gA
               + np.einsum("ij,ij->i", x3 - x1, e_hat)[:, None] * gB)
    g[:, 1] = -(np.einsum("ij,ij->i", x2 - x0, e_hat)[:, None] * gA
                + np.einsum("ij,ij->i", x3 - x0, e_hat)[:, None] * gB)
    return theta, g


def edge_vectors(x: np.ndarray, edges: np.ndarray, eps_len: float = 0.0
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Lengths (E,) and unit directions ``(x_i - x_j)/|x_i - x_j|`` (E, 3)."""
    d = x[edges[:, 0]] - x[edges[:, 1]]
    length = np.linalg.norm(d, axis=1)
    bad = np.flatnonzero(~(length > eps_len))
    if bad.size:
        raise DegenerateGeometryError("degenerate edge", int(bad[0]))
    return length, d / length[:, None]


def diameter(x: np.ndarray) -> float:
    """Bounding-box diagonal, the length scale used for degeneracy thresholds."""
    x = np.asarray(x, dtype=float)
    if len(x) == 0:
        return 0.0
    return float(np.linalg.norm(x.max(axis=0) - x.min(axis=0)))
