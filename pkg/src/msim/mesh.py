"""Mesh representation, topology, mass lumping and procedural geometry."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from msim import geometry
from msim.elastic import ElasticModel, MaterialParams


class TopologyError(ValueError):
    pass


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable simulation mesh.

    ``hinges`` rows are ``(edge_index, opposite_a, opposite_b)``; see
    :mod:`msim.geometry` for the orientation convention.
    """

    rest_positions: np.ndarray
    elements: np.ndarray
    edges: np.ndarray
    hinges: np.ndarray
    masses: np.ndarray
    pinned: np.ndarray
    material: MaterialParams
    kind: str

    def __post_init__(self):
        for name in ("rest_positions", "elements", "edges", "hinges", "masses", "pinned"):
            getattr(self, name).setflags(write=False)

    @classmethod
    def from_elements(cls, rest_positions, elements, material: MaterialParams,
                      pinned=None) -> Mesh:
        rest = np.array(rest_positions, dtype=float).reshape(-1, 3)
        elems = np.array(elements, dtype=np.int64)
        if elems.ndim != 2 or elems.shape[1] not in (3, 4):
            raise MeshError("elements must be triangles (k=3) or tetrahedra (k=4)")
        kind = "shell" if elems.shape[1] == 3 else "solid"
        if len(elems) and (elems.min() < 0 or elems.max() >= len(rest)):
            raise MeshError("element index out of range")
        edges, hinges = build_topology(elems)
        if pinned is None:
            pin = np.zeros(len(rest), dtype=bool)
        else:
            pin = np.array(pinned, dtype=bool).reshape(-1)
            if pin.shape != (len(rest),):
                raise MeshError("pinned flags must match vertex count")
        masses = lump_masses(rest, elems, material.density,
                             material.thickness if kind == "shell" else None)
        return cls(rest, elems, edges, hinges, masses, pin, material, kind)

    def with_pinned(self, pinned) -> Mesh:
        pin = np.array(pinned, dtype=bool).reshape(-1)
        if pin.shape != (self.n_vertices,):
            raise MeshError("pinned flags must match vertex count")
        return replace(self, pinned=pin)

    @property
    def n_vertices(self) -> int:
        return len(self.rest_positions)

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    @cached_property
    def hinge_vertices(self) -> np.ndarray:
        """(H, 4) vertex indices ``(edge_i, edge_j, opposite_a, opposite_b)``."""
        if len(self.hinges) == 0:
            return np.zeros((0, 4), dtype=np.int64)
        e = self.edges[self.hinges[:, 0]]
        return np.column_stack([e, self.hinges[:, 1:]])

    @cached_property
    def diameter(self) -> float:
        return geometry.diameter(self.rest_positions)

    @cached_property
    def eps_len(self) -> float:
        return 1e-9 * self.diameter

    @cached_property
    def eps_area(self) -> float:
        return 1e-12 * self.diameter**2

    @cached_property
    def rest_lengths(self) -> np.ndarray:
        return geometry.edge_vectors(self.rest_positions, self.edges)[0]

    @cached_property
    def elastic(self) -> ElasticModel:
        return ElasticModel(self)

    def rest_state(self) -> SimState:
        return SimState(self.rest_positions.copy(), np.zeros_like(self.rest_positions), 0.0)

    def validate_state(self, state: SimState) -> None:
        n = self.n_vertices
        if state.positions.shape != (n, 3) or state.velocities.shape != (n, 3):
            raise MeshError(f"state shape mismatch: mesh has {n} vertices")
        if not (np.isfinite(state.positions).all() and np.isfinite(state.velocities).all()):
            raise MeshError("non-finite state")


@dataclass
class SimState:
    positions: np.ndarray
    velocities: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.velocities = np.asarray(self.velocities, dtype=float).reshape(-1, 3)
        if self.positions.shape != self.velocities.shape:
            raise MeshError("positions and velocities must have the same shape")

    def copy(self) -> SimState:
        return SimState(self.positions.copy(), self.velocities.copy(), self.time)


# ---------------------------------------------------------------------------
# Topology and masses
# ---------------------------------------------------------------------------

_TRI_EDGES = ((0, 1), (1, 2), (2, 0))
_TET_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


def build_topology(elements) -> tuple[np.ndarray, np.ndarray]:
    """Canonical edges (E, 2) and hinges (H, 3) of a triangle or tet list.

    Edges are sorted lexicographically with the smaller index first.  Hinges
    are listed in edge order as ``(edge_index, opposite_a, opposite_b)``
    where ``opposite_a`` belongs to the triangle traversing the edge from the
    smaller to the larger index (ties broken by opposite vertex index).
    """
    elems = np.asarray(elements, dtype=np.int64)
    if elems.ndim != 2 or elems.shape[1] not in (3, 4):
        raise TopologyError("elements must have 3 or 4 vertices each")
    k = elems.shape[1]
    for row in elems:
        if len(set(row.tolist())) != k:
            raise TopologyError(f"element {row.tolist()} repeats a vertex")
    keys = {tuple(sorted(r)) for r in elems.tolist()}
    if len(keys) != len(elems):
        raise TopologyError("duplicate element")

    local = _TRI_EDGES if k == 3 else _TET_EDGES
    edge_set = set()
    incident: dict[tuple[int, int], list[tuple[int, bool]]] = {}
    for row in elems.tolist():
        for a, b in local:
            i, j = row[a], row[b]
            key = (min(i, j), max(i, j))
            edge_set.add(key)
            if k == 3:
                opp = row[3 - a - b]
                incident.setdefault(key, []).append((opp, i < j))
    edges = np.array(sorted(edge_set), dtype=np.int64).reshape(-1, 2)

    hinges = []
    if k == 3:
        for idx, key in enumerate(map(tuple, edges.tolist())):
            tris = incident[key]
            if len(tris) > 2:
                raise TopologyError(f"non-manifold edge {key} shared by {len(tris)} triangles")
            if len(tris) == 2:
                (oa, fa), (ob, fb) = sorted(tris, key=lambda t: (not t[1], t[0]))
                hinges.append((idx, oa, ob))
    return edges, np.array(hinges, dtype=np.int64).reshape(-1, 3)


def element_measures(rest_positions, elements) -> np.ndarray:
    x = np.asarray(rest_positions, dtype=float)[np.asarray(elements)]
    if x.shape[1] == 3:
        return 0.5 * np.linalg.norm(np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]), axis=1)
    Dm = np.stack([x[:, k] - x[:, 0] for k in (1, 2, 3)], axis=2)
    return np.abs(np.linalg.det(Dm)) / 6.0


def lump_masses(rest_positions, elements, density: float, thickness: float | None = None
                ) -> np.ndarray:
    """Equal split of each element's mass among its vertices."""
    if not density > 0:
        raise MeshError("density must be positive")
    elems = np.asarray(elements, dtype=np.int64)
    n = len(rest_positions)
    meas = element_measures(rest_positions, elems)
    scale = geometry.diameter(rest_positions)
    dim = 2 if elems.shape[1] == 3 else 3
    bad = np.flatnonzero(meas <= 1e-14 * max(scale, 1e-300) ** dim)
    if bad.size:
        raise MeshError(f"element {int(bad[0])} has zero measure")
    if elems.shape[1] == 3:
        if thickness is None or not thickness > 0:
            raise MeshError("shells need a positive thickness")
        elem_mass = density * meas * thickness
    else:
        elem_mass = density * meas
    masses = np.zeros(n)
    np.add.at(masses, elems, np.repeat(elem_mass[:, None] / elems.shape[1], elems.shape[1], axis=1))
    if (masses <= 0).any():
        raise MeshError("vertex without incident element")
    return masses


# ---------------------------------------------------------------------------
# Procedural meshes
# ---------------------------------------------------------------------------

def default_shell_material() -> MaterialParams:
    return MaterialParams(youngs_modulus=5e5, poisson_ratio=0.3, density=300.0,
                          thickness=1e-3, bending_stiffness=1e-3, name="stvk")


def default_solid_material() -> MaterialParams:
    return MaterialParams(youngs_modulus=2e5, poisson_ratio=0.3, density=1000.0,
                          name="neohookean")


def generate_sheet(nx: int, ny: int, size_x: float = 1.0, size_y: float = 1.0,
                   material: MaterialParams | None = None) -> Mesh:
    """Regular ``nx`` by ``ny`` vertex grid in the z=0 plane.

    Cell ``(i, j)`` is split along the diagonal chosen by ``(i + j) % 2``;
    triangles are counter-clockwise seen from +z.
    """
    if nx < 2 or ny < 2:
        raise MeshError("sheet needs at least 2 vertices per side")
    xs = np.linspace(0.0, size_x, nx)
    ys = np.linspace(0.0, size_y, ny)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    rest = np.column_stack([X.ravel(), Y.ravel(), np.zeros(nx * ny)])
    tris = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a, b = j * nx + i, j * nx + i + 1
            c, d = a + nx, b + nx
            if (i + j) % 2 == 0:
                tris += [(a, b, d), (a, d, c)]
            else:
                tris += [(a, b, c), (b, d, c)]
    return Mesh.from_elements(rest, tris, material or default_shell_material())


def generate_cuboid(nx: int, ny: int, nz: int, dims=(1.0, 1.0, 1.0),
                    material: MaterialParams | None = None) -> Mesh:
    """Vertex grid of hexahedral cells, each split into five tetrahedra.

    The central tet of every cell joins the four corners with even global
    parity ``(i + j + k) % 2 == 0``; the four odd corners each cut off one
    corner tet.  Using global parity keeps face diagonals shared between
    neighbouring cells, so the mesh is conforming.
    """
    if min(nx, ny, nz) < 2:
        raise MeshError("cuboid needs at least 2 vertices per side")
    gx = np.linspace(0.0, dims[0], nx)
    gy = np.linspace(0.0, dims[1], ny)
    gz = np.linspace(0.0, dims[2], nz)
    Z, Y, X = np.meshgrid(gz, gy, gx, indexing="ij")
    rest = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def vid(i, j, k):
        return (k * ny + j) * nx + i

    tets = []
    for k in range(nz - 1):
        for j in range(ny - 1):
            for i in range(nx - 1):
                corners = {(a, b, c): vid(i + a, j + b, k + c)
                           for a in (0, 1) for b in (0, 1) for c in (0, 1)}
                even = [key for key in corners if (i + j + k + sum(key)) % 2 == 0]
                odd = [key for key in corners if (i + j + k + sum(key)) % 2 == 1]
                tets.append([corners[key] for key in even])
                for key in odd:
                    nbrs = [key[:d] + (1 - key[d],) + key[d + 1:] for d in range(3)]
                    tets.append([corners[key]] + [corners[nb] for nb in nbrs])
    tets = np.array(tets, dtype=np.int64)
    x = rest[tets]
    vol = np.linalg.det(np.stack([x[:, m] - x[:, 0] for m in (1, 2, 3)], axis=2))
    flip = vol < 0
    tets[flip, 1], tets[flip, 2] = tets[flip, 2].copy(), tets[flip, 1].copy()
    return Mesh.from_elements(rest, tets, material or default_solid_material())


# ---------------------------------------------------------------------------
# Deformations
# ---------------------------------------------------------------------------

# determinant window the dataset sampler accepts for random affine maps
DET_RANGE = (0.3, 3.0)


def deform_affine(state: SimState, A, b=None) -> SimState:
    A = np.asarray(A, dtype=float).reshape(3, 3)
    b = np.zeros(3) if b is None else np.asarray(b, dtype=float).reshape(3)
    return SimState(state.positions @ A.T + b, state.velocities.copy(), state.time)


def bezier_point(ctrl, t):
    t = np.asarray(t, dtype=float)[..., None]
    s = 1.0 - t
    return s**3 * ctrl[0] + 3 * s**2 * t * ctrl[1] + 3 * s * t**2 * ctrl[2] + t**3 * ctrl[3]


def bezier_derivative(ctrl, t):
    t = np.asarray(t, dtype=float)[..., None]
    s = 1.0 - t
    return 3 * (s**2 * (ctrl[1] - ctrl[0]) + 2 * s * t * (ctrl[2] - ctrl[1])
                + t**2 * (ctrl[3] - ctrl[2]))


class _ArcLength:
    """Arclength of a cubic Bezier via composite Gauss-Legendre quadrature."""

    def __init__(self, ctrl, panels: int = 64, order: int = 10):
        self.ctrl = ctrl
        nodes, weights = np.polynomial.legendre.leggauss(order)
        self.nodes, self.weights = nodes, weights
        self.knots = np.linspace(0.0, 1.0, panels + 1)
        seg = np.array([self._panel(a, b) for a, b in zip(self.knots[:-1], self.knots[1:])])
        self.cum = np.concatenate([[0.0], np.cumsum(seg)])
        self.total = float(self.cum[-1])

    def speed(self, t):
        return np.linalg.norm(bezier_derivative(self.ctrl, t), axis=-1)

    def _panel(self, a, b):
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        return half * float(np.dot(self.weights, self.speed(mid + half * self.nodes)))

    def length_to(self, t: float) -> float:
        p = min(int(np.searchsorted(self.knots, t, side="right")) - 1, len(self.knots) - 2)
        p = max(p, 0)
        return float(self.cum[p]) + self._panel(self.knots[p], t)

    def parameter_at(self, s: float) -> float:
        lo, hi = 0.0, 1.0
        t = s / self.total
        for _ in range(60):
            f = self.length_to(t) - s
            if f > 0:
                hi = t
            else:
                lo = t
            sp = self.speed(t)
            t_new = t - f / sp if sp > 0 else 0.5 * (lo + hi)
            if not lo < t_new < hi:
                t_new = 0.5 * (lo + hi)
            if abs(t_new - t) < 1e-15:
                return t_new
            t = t_new
        return t


def deform_bezier(mesh: Mesh, state: SimState, control_points, axis: int = 0) -> SimState:
    """Wrap a flat sheet's ``axis`` coordinate onto a cubic Bezier curve by arclength.

    A rest point at axis coordinate ``u`` and transverse coordinate ``w`` maps to
    ``c(s) + (w - w_min) * n(s)`` with ``s = u - u_min`` and ``n`` the unit part
    of the rest transverse direction orthogonal to the curve tangent.  Points
    past the curve's end continue along the end tangent.
    """
    if mesh.kind != "shell":
        raise MeshError("Bezier deformation applies to sheets only")
    ctrl = np.asarray(control_points, dtype=float).reshape(4, 3)
    arc = _ArcLength(ctrl)
    if not arc.total > 1e-12 * max(1.0, np.abs(ctrl).max()):
        raise MeshError("degenerate Bezier control polygon")
    rest = mesh.rest_positions
    trans_axis = 1 - axis if axis in (0, 1) else None
    if trans_axis is None:
        raise MeshError("sheet axis must be 0 (x) or 1 (y)")
    if np.ptp(rest[:, 2]) > 1e-12 * mesh.diameter:
        raise MeshError("sheet must lie in the z=0 plane at rest")
    w_dir = np.zeros(3)
    w_dir[trans_axis] = 1.0
    u = rest[:, axis] - rest[:, axis].min()
    w = rest[:, trans_axis] - rest[:, trans_axis].min()
    out = np.empty_like(rest)
    cache: dict[float, tuple[np.ndarray, np.ndarray]] = {}
    for idx, (s, off) in enumerate(zip(u, w)):
        key = float(s)
        if key not in cache:
            if s <= arc.total:
                t = arc.parameter_at(s)
                p = bezier_point(ctrl, t)
                tan = bezier_derivative(ctrl, t)
            else:
                tan = bezier_derivative(ctrl, 1.0)
                p = ctrl[3] + (s - arc.total) * tan / np.linalg.norm(tan)
            tan = tan / np.linalg.norm(tan)
            n = w_dir - np.dot(w_dir, tan) * tan
            nn = np.linalg.norm(n)
            if nn < 1e-9:
                raise MeshError("curve tangent parallel to the transverse axis")
            cache[key] = (p, n / nn)
        p, n = cache[key]
        out[idx] = p + off * n
    return SimState(out, state.velocities.copy(), state.time)
