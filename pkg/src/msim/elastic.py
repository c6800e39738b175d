"""Internal elastic energies and their gradients.

Shells use constant-strain St. Venant-Kirchhoff membrane triangles plus a
discrete-shells hinge bending term; solids use Neo-Hookean tetrahedra.
Everything is vectorized over elements and returns exact analytic gradients.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import TYPE_CHECKING

import numpy as np

from msim import geometry

if TYPE_CHECKING:
    from msim.mesh import Mesh


class ElasticError(ValueError):
    """Raised for degenerate rest elements or inverted tetrahedra."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message if index is None else f"{message} (element {index})")
        self.index = index


class InversionError(ElasticError):
    pass


@dataclass(frozen=True)
class MaterialParams:
    youngs_modulus: float
    poisson_ratio: float
    density: float
    thickness: float = 1.0
    bending_stiffness: float = 0.0
    name: str = "stvk"

    def __post_init__(self):
        if not (self.youngs_modulus > 0 and self.density > 0 and self.thickness > 0):
            raise ValueError("material moduli, density and thickness must be positive")
        if not (0.0 < self.poisson_ratio < 0.5):
            raise ValueError(f"poisson_ratio must lie in (0, 0.5), got {self.poisson_ratio}")
        if self.bending_stiffness < 0:
            raise ValueError("bending_stiffness must be nonnegative")

    @property
    def lame(self) -> tuple[float, float]:
        E, nu = self.youngs_modulus, self.poisson_ratio
        mu = E / (2.0 * (1.0 + nu))
        lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
        return mu, lam


@dataclass
class EnergyReport:
    value: float
    gradient: np.ndarray  # (n_vertices, 3), equals minus the force


# ---------------------------------------------------------------------------
# Rest-state precomputation
# ---------------------------------------------------------------------------

def triangle_rest_frame(rest: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rest edge matrices ``Dm`` (T, 2, 2) and areas (T,) for triangles (T, 3, 3)."""
    e1 = rest[:, 1] - rest[:, 0]
    e2 = rest[:, 2] - rest[:, 0]
    l1 = np.linalg.norm(e1, axis=1)
    n = np.cross(e1, e2)
    area = 0.5 * np.linalg.norm(n, axis=1)
    scale = np.maximum(l1, 1e-300) ** 2
    bad = np.flatnonzero(area <= 1e-14 * scale)
    if bad.size:
        raise ElasticError("degenerate rest triangle", int(bad[0]))
    u = e1 / l1[:, None]
    w = np.cross(n / (2.0 * area)[:, None], u)
    Dm = np.zeros((len(rest), 2, 2))
    Dm[:, 0, 0] = l1
    Dm[:, 0, 1] = np.einsum("ij,ij->i", e2, u)
    Dm[:, 1, 1] = np.einsum("ij,ij->i", e2, w)
    return Dm, area


def tet_rest_frame(rest: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rest edge matrices ``Dm`` (T, 3, 3) and volumes (T,) for tets (T, 4, 3)."""
    Dm = np.stack([rest[:, k] - rest[:, 0] for k in (1, 2, 3)], axis=2)
    vol = np.linalg.det(Dm) / 6.0
    bad = np.flatnonzero(vol <= 0.0)
    if bad.size:
        raise ElasticError("rest tetrahedron with non-positive volume", int(bad[0]))
    return Dm, vol


# ---------------------------------------------------------------------------
# Batched element kernels
# ---------------------------------------------------------------------------

def stvk_triangles(x: np.ndarray, Dm_inv: np.ndarray, area: np.ndarray,
                   params: MaterialParams) -> tuple[np.ndarray, np.ndarray]:
    """Energies (T,) and vertex gradients (T, 3, 3) of constant-strain StVK triangles."""
    mu, lam = params.lame
    Ds = np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]], axis=2)  # (T, 3, 2)
    F = Ds @ Dm_inv
    E = 0.5 * (np.swapaxes(F, 1, 2) @ F - np.eye(2))
    trE = E[:, 0, 0] + E[:, 1, 1]
    psi = mu * np.einsum("tij,tij->t", E, E) + 0.5 * lam * trE**2
    S = 2.0 * mu * E + lam * trE[:, None, None] * np.eye(2)
    vol = area * params.thickness
    H = vol[:, None, None] * (F @ S @ np.swapaxes(Dm_inv, 1, 2))  # (T, 3, 2)
    grad = np.empty_like(x)
    grad[:, 1] = H[:, :, 0]
    grad[:, 2] = H[:, :, 1]
    grad[:, 0] = -(grad[:, 1] + grad[:, 2])
    return vol * psi, grad


def _det3(F):
    return (F[:, 0, 0] * (F[:, 1, 1] * F[:, 2, 2] - F[:, 1, 2] * F[:, 2, 1])
            - F[:, 0, 1] * (F[:, 1, 0] * F[:, 2, 2] - F[:, 1, 2] * F[:, 2, 0])
            + F[:, 0, 2] * (F[:, 1, 0] * F[:, 2, 1] - F[:, 1, 1] * F[:, 2, 0]))


def _cofactor3(F):
    c = np.empty_like(F)
    c[:, :, 0] = np.cross(F[:, :, 1], F[:, :, 2])
    c[:, :, 1] = np.cross(F[:, :, 2], F[:, :, 0])
    c[:, :, 2] = np.cross(F[:, :, 0], F[:, :, 1])
    return c


def neo_hookean_tets(x: np.ndarray, Dm_inv: np.ndarray, volume: np.ndarray,
                     params: MaterialParams, j_min: float | None = None
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Energies (T,) and vertex gradients (T, 4, 3) of Neo-Hookean tetrahedra.

    With ``j_min=None`` any ``J <= 0`` raises :class:`InversionError`.  With a
    positive ``j_min`` the volumetric term is continued below ``j_min`` by its
    second-order Taylor expansion, which keeps the energy finite for inverted
    elements (used by the training loss only).
    """
    mu, lam = params.lame
    Ds = np.stack([x[:, k] - x[:, 0] for k in (1, 2, 3)], axis=2)
    F = Ds @ Dm_inv
    J = _det3(F)
    if j_min is None:
        bad = np.flatnonzero(~(J > 0.0))
        if bad.size:
            raise InversionError(f"inverted tetrahedron, J={J[bad[0]]:.3e}", int(bad[0]))
        logJ = np.log(J)
        vol_term = -mu * logJ + 0.5 * lam * logJ**2
        dvol = (-mu + lam * logJ) / J
    else:
        Jc = np.maximum(J, j_min)
        logJ = np.log(Jc)
        f0 = -mu * logJ + 0.5 * lam * logJ**2
        f1 = (-mu + lam * logJ) / Jc
        f2 = (mu + lam * (1.0 - logJ)) / Jc**2
        d = np.minimum(J - j_min, 0.0)
        vol_term = f0 + f1 * d + 0.5 * f2 * d**2
        dvol = f1 + f2 * d
    psi = 0.5 * mu * (np.einsum("tij,tij->t", F, F) - 3.0) + vol_term
    P = mu * F + dvol[:, None, None] * _cofactor3(F)
    H = volume[:, None, None] * (P @ np.swapaxes(Dm_inv, 1, 2))  # (T, 3, 3)
    grad = np.empty_like(x)
    grad[:, 1:] = np.swapaxes(H, 1, 2)
    grad[:, 0] = -H.sum(axis=2)
    return volume * psi, grad


def bending_coefficients(rest_hinges: np.ndarray, bending_stiffness: float) -> np.ndarray:
    """Per-hinge ``k * |e0| / hbar`` where ``hbar`` is a third of the summed rest heights."""
    e = rest_hinges[:, 1] - rest_hinges[:, 0]
    e_len = np.linalg.norm(e, axis=1)
    area_a = 0.5 * np.linalg.norm(np.cross(e, rest_hinges[:, 2] - rest_hinges[:, 0]), axis=1)
    area_b = 0.5 * np.linalg.norm(np.cross(e, rest_hinges[:, 3] - rest_hinges[:, 0]), axis=1)
    return bending_stiffness * hinge_weight(e_len, area_a + area_b)


def hinge_weight(e_len, area_sum):
    heights = 2.0 * area_sum / e_len
    return e_len / (heights / 3.0)


def discrete_shell_hinges(x: np.ndarray, theta0: np.ndarray, coeff: np.ndarray,
                          eps_area: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Energies (H,) and vertex gradients (H, 4, 3) of ``coeff * (theta - theta0)^2``."""
    theta, g = geometry.dihedral_angle_and_gradient(x, eps_area)
    d = theta - theta0
    return coeff * d**2, (2.0 * coeff * d)[:, None, None] * g


# ---------------------------------------------------------------------------
# Single-element API
# ---------------------------------------------------------------------------

def stvk_triangle(x, rest_edges, params: MaterialParams) -> EnergyReport:
    """StVK membrane energy of one triangle.

    ``rest_edges`` is the 2x2 rest edge matrix in the triangle's own frame
    (columns are the two rest edge vectors leaving vertex 0).
    """
    Dm = np.asarray(rest_edges, dtype=float).reshape(1, 2, 2)
    area = 0.5 * abs(np.linalg.det(Dm[0]))
    if area <= 1e-14 * max(np.abs(Dm).max(), 1e-300) ** 2:
        raise ElasticError("degenerate rest triangle")
    val, grad = stvk_triangles(np.asarray(x, float).reshape(1, 3, 3),
                               np.linalg.inv(Dm), np.array([area]), params)
    return EnergyReport(float(val[0]), grad[0])


def neo_hookean_tet(x, rest_inverse, params: MaterialParams, rest_volume: float | None = None
                    ) -> EnergyReport:
    """Neo-Hookean energy of one tet given the inverse rest edge matrix."""
    Dm_inv = np.asarray(rest_inverse, dtype=float).reshape(1, 3, 3)
    if rest_volume is None:
        rest_volume = 1.0 / (6.0 * np.linalg.det(Dm_inv[0]))
    if rest_volume <= 0:
        raise ElasticError("rest tetrahedron with non-positive volume")
    val, grad = neo_hookean_tets(np.asarray(x, float).reshape(1, 4, 3), Dm_inv,
                                 np.array([rest_volume]), params)
    return EnergyReport(float(val[0]), grad[0])


def discrete_shell_bend(x, theta0: float, rest_edge_length: float, rest_area_sum: float,
                        params: MaterialParams) -> EnergyReport:
    """Bending energy of one hinge ``(x0, x1)`` shared edge, ``x2``/``x3`` opposite vertices."""
    coeff = params.bending_stiffness * hinge_weight(rest_edge_length, rest_area_sum)
    val, grad = discrete_shell_hinges(np.asarray(x, float).reshape(1, 4, 3),
                                      np.array([theta0]), np.array([coeff]))
    return EnergyReport(float(val[0]), grad[0])


# ---------------------------------------------------------------------------
# Whole-mesh energy
# ---------------------------------------------------------------------------

class ElasticModel:
    """Rest-state data of a mesh, precomputed once for repeated evaluation."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        rest = mesh.rest_positions
        self.params = mesh.material
        if mesh.kind == "shell":
            Dm, self.rest_measure = triangle_rest_frame(rest[mesh.elements])
        else:
            Dm, self.rest_measure = tet_rest_frame(rest[mesh.elements])
        self.Dm_inv = np.linalg.inv(Dm)
        self.hinge_vertices = mesh.hinge_vertices
        if len(self.hinge_vertices) and self.params.bending_stiffness > 0:
            rest_h = rest[self.hinge_vertices]
            self.theta0 = geometry.dihedral_angle(rest_h)
            self.bend_coeff = bending_coefficients(rest_h, self.params.bending_stiffness)
        else:
            self.theta0 = np.zeros(0)
            self.bend_coeff = np.zeros(0)
        self.hinge_vertices = self.hinge_vertices[: len(self.bend_coeff)]

    def element_terms(self, x: np.ndarray, j_min: float | None = None):
        """Per-element energies and local gradients, keyed by stencil type."""
        elems = self.mesh.elements
        if self.mesh.kind == "shell":
            e_val, e_grad = stvk_triangles(x[elems], self.Dm_inv, self.rest_measure, self.params)
        else:
            e_val, e_grad = neo_hookean_tets(x[elems], self.Dm_inv, self.rest_measure,
                                             self.params, j_min)
        out = [(elems, e_val, e_grad)]
        if len(self.bend_coeff):
            h = self.hinge_vertices
            b_val, b_grad = discrete_shell_hinges(x[h], self.theta0, self.bend_coeff)
            out.append((h, b_val, b_grad))
        return out

    def energy(self, x: np.ndarray, j_min: float | None = None) -> float:
        return float(sum(v.sum() for _, v, _ in self.element_terms(x, j_min)))

    def energy_and_gradient(self, x: np.ndarray, j_min: float | None = None
                            ) -> tuple[float, np.ndarray]:
        value = 0.0
        grad = np.zeros_like(x)
        for idx, v, g in self.element_terms(x, j_min):
            value += float(v.sum())
            np.add.at(grad, idx, g)
        return value, grad

    def hessian(self, x: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
        """Dense Hessian (3N, 3N) assembled from central differences of element gradients."""
        n = len(x)
        Hs = np.zeros((3 * n, 3 * n))
        h = rel_step * max(self.mesh.diameter, 1e-300)
        kernels = [(self.mesh.elements, self._element_kernel)]
        if len(self.bend_coeff):
            kernels.append((self.hinge_vertices, self._hinge_kernel))
        for idx, kernel in kernels:
            xl = x[idx]  # (T, k, 3)
            k = idx.shape[1]
            local = np.empty((len(idx), 3 * k, 3 * k))
            for a in range(k):
                for c in range(3):
                    xp = xl.copy()
                    xp[:, a, c] += h
                    xm = xl.copy()
                    xm[:, a, c] -= h
                    col = (kernel(xp) - kernel(xm)) / (2.0 * h)
                    local[:, :, 3 * a + c] = col.reshape(len(idx), 3 * k)
            local = 0.5 * (local + np.swapaxes(local, 1, 2))
            dofs = (3 * idx[:, :, None] + np.arange(3)).reshape(len(idx), 3 * k)
            rows = np.repeat(dofs, 3 * k, axis=1).ravel()
            cols = np.tile(dofs, (1, 3 * k)).ravel()
            np.add.at(Hs, (rows, cols), local.ravel())
        return Hs

    def _element_kernel(self, xl):
        if self.mesh.kind == "shell":
            return stvk_triangles(xl, self.Dm_inv, self.rest_measure, self.params)[1]
        return neo_hookean_tets(xl, self.Dm_inv, self.rest_measure, self.params, j_min=1e-12)[1]

    def _hinge_kernel(self, xl):
        return discrete_shell_hinges(xl, self.theta0, self.bend_coeff)[1]


def total_internal(mesh: Mesh, positions, j_min: float | None = None) -> EnergyReport:
    """Sum of all element and hinge energies with scatter-added gradient.

    Pinned vertices still receive gradient entries.
    """
    value, grad = mesh.elastic.energy_and_gradient(np.asarray(positions, float), j_min)
    return EnergyReport(value, grad)
