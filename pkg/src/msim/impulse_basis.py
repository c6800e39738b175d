"""Momentum-conserving impulse directions built from intrinsic quantities.

Stretch stencils are edge-length gradients, bend stencils are dihedral-angle
gradients.  Any linear combination of them leaves total linear and angular
momentum unchanged because both quantities are invariant under rigid motion.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from msim import geometry
from msim.geometry import DegenerateGeometryError


@dataclass
class StretchStencil:
    edge: tuple[int, int]
    direction: np.ndarray  # unit vector (x_i - x_j)/|x_i - x_j|


@dataclass
class BendStencil:
    hinge: tuple[int, int, int, int]
    gradients: np.ndarray  # (4, 3), d(theta)/dx_k
    theta: float


@dataclass
class BasisMatrix:
    B: np.ndarray
    n_stretch: int
    n_bend: int
    dim: int


@dataclass
class CompletenessReport:
    rank: int
    expected_rank: int
    nullspace_dim: int
    rigid_residuals: np.ndarray
    singular_values: np.ndarray
    inconclusive: bool
    passed: bool


def edge_length_gradient(x_i, x_j, eps_len: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(x_i, dtype=float) - np.asarray(x_j, dtype=float)
    n = np.linalg.norm(d)
    if not n > eps_len:
        raise DegenerateGeometryError("coincident edge endpoints")
    g = d / n
    return g, -g


def dihedral_angle(x0, x1, x2, x3, eps_area: float = 0.0) -> float:
    x = np.array([x0, x1, x2, x3], dtype=float)[None]
    return float(geometry.dihedral_angle(x, eps_area)[0])


def dihedral_gradient(x0, x1, x2, x3, eps_area: float = 0.0) -> np.ndarray:
    x = np.array([x0, x1, x2, x3], dtype=float)[None]
    return geometry.dihedral_angle_and_gradient(x, eps_area)[1][0]


def stretch_stencil(x, edge, eps_len: float = 0.0) -> StretchStencil:
    i, j = int(edge[0]), int(edge[1])
    g, _ = edge_length_gradient(x[i], x[j], eps_len)
    return StretchStencil((i, j), g)


def bend_stencil(x, hinge, eps_area: float = 0.0) -> BendStencil:
    idx = tuple(int(k) for k in hinge)
    theta, g = geometry.dihedral_angle_and_gradient(np.asarray(x, float)[list(idx)][None], eps_area)
    return BendStencil(idx, g[0], float(theta[0]))


def apply_stretch_impulse(w: float, stencil: StretchStencil) -> dict[int, np.ndarray]:
    i, j = stencil.edge
    dp = w * stencil.direction
    return {i: dp, j: -dp}


def apply_bend_impulse(w_b: float, stencil: BendStencil) -> dict[int, np.ndarray]:
    out: dict[int, np.ndarray] = {}
    for k, v in enumerate(stencil.hinge):
        out[v] = out.get(v, 0.0) + w_b * stencil.gradients[k]
    return out


def assemble_basis(positions, edges, hinge_vertices=None, eps_len: float = 0.0,
                   eps_area: float = 0.0) -> BasisMatrix:
    """Dense basis with one column per edge (stretch) then per hinge (bend).

    ``positions`` may be (N, 2) for planar meshes, giving 2N rows.
    """
    x = np.asarray(positions, dtype=float)
    dim = x.shape[1]
    x3 = x if dim == 3 else np.column_stack([x, np.zeros((len(x), 3 - dim))])
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    hv = np.zeros((0, 4), dtype=np.int64) if hinge_vertices is None else \
        np.asarray(hinge_vertices, dtype=np.int64).reshape(-1, 4)
    n = len(x)
    B = np.zeros((dim * n, len(edges) + len(hv)))
    _, u = geometry.edge_vectors(x3, edges, eps_len)
    cols = np.arange(len(edges))
    for c in range(dim):
        B[dim * edges[:, 0] + c, cols] = u[:, c]
        B[dim * edges[:, 1] + c, cols] = -u[:, c]
    if len(hv):
        if dim != 3:
            raise ValueError("bend stencils need 3D positions")
        _, g = geometry.dihedral_angle_and_gradient(x3[hv], eps_area)
        hcols = len(edges) + np.arange(len(hv))
        for k in range(4):
            for c in range(3):
                np.add.at(B, (3 * hv[:, k] + c, hcols), g[:, k, c])
    return BasisMatrix(B, len(edges), len(hv), dim)


def rigid_motion_directions(positions) -> np.ndarray:
    """Columns spanning translations and linearized rotations, (dim*N, 3) in 2D or (3N, 6) in 3D."""
    x = np.asarray(positions, dtype=float)
    n, dim = x.shape
    if dim == 2:
        D = np.zeros((2 * n, 3))
        D[0::2, 0] = 1.0
        D[1::2, 1] = 1.0
        D[0::2, 2] = -x[:, 1]
        D[1::2, 2] = x[:, 0]
        return D
    D = np.zeros((3 * n, 6))
    for c in range(3):
        D[c::3, c] = 1.0
        axis = np.zeros(3)
        axis[c] = 1.0
        D[:, 3 + c] = np.cross(axis, x).ravel()
    return D


def net_impulse_and_torque(positions, impulses) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(positions, dtype=float)
    dp = np.asarray(impulses, dtype=float).reshape(x.shape)
    if x.shape[1] == 2:
        torque = np.array([np.sum(x[:, 0] * dp[:, 1] - x[:, 1] * dp[:, 0])])
        return dp.sum(axis=0), torque
    return dp.sum(axis=0), np.cross(x, dp).sum(axis=0)


def verify_completeness(positions, edges, rank_tol: float = 1e-9,
                        residual_tol: float = 1e-9) -> CompletenessReport:
    """Rank of the planar stretch basis and its rigid-motion left nullspace.

    Expected rank is ``2|V| - 3``.  Configurations whose vertices are all
    collinear are reported as inconclusive rather than failed.
    """
    x = np.asarray(positions, dtype=float)
    if x.shape[1] == 3:
        if np.abs(x[:, 2]).max() > 0:
            raise ValueError("completeness check is defined for planar meshes (z = 0)")
        x = x[:, :2]
    basis = assemble_basis(x, edges)
    s = np.linalg.svd(basis.B, compute_uv=False)
    rank = int(np.sum(s > rank_tol * s[0])) if s.size else 0
    D = rigid_motion_directions(x)
    D = D / np.linalg.norm(D, axis=0)
    residuals = np.linalg.norm(basis.B.T @ D, axis=0)
    expected = 2 * len(x) - 3
    centered = x - x.mean(axis=0)
    inconclusive = np.linalg.matrix_rank(centered, tol=1e-9 * max(geometry.diameter(x), 1e-300)) < 2
    passed = (not inconclusive) and rank == expected and bool((residuals <= residual_tol).all())
    return CompletenessReport(rank, expected, basis.B.shape[0] - rank, residuals, s,
                              bool(inconclusive), bool(passed))


def triangle_strip(k: int, rng: np.random.Generator | None = None, jitter: float = 0.0
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Planar strip of ``k`` triangles on ``k + 2`` vertices, built by vertex additions.

    Returns ``(positions (k+2, 2), triangles, edges)``.
    """
    if k < 1:
        raise ValueError("strip needs at least one triangle")
    n = k + 2
    x = np.zeros((n, 2))
    x[:, 0] = np.arange(n) // 2
    x[:, 1] = np.arange(n) % 2
    x[1::2, 0] += 0.5
    if rng is not None and jitter > 0:
        x = x + rng.uniform(-jitter, jitter, size=x.shape)
    tris = np.array([(m, m + 1, m + 2) for m in range(k)], dtype=np.int64)
    edges = sorted({tuple(sorted((int(t[a]), int(t[b])))) for t in tris
                    for a, b in ((0, 1), (1, 2), (0, 2))})
    return x, tris, np.array(edges, dtype=np.int64)
