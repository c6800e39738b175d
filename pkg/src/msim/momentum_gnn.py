"""MomentumGNN: message passing with per-edge momentum-conserving impulse decoders.

Every layer decodes stretch magnitudes (one per edge) and bend magnitudes (one
per hinge), turns them into impulses along edge-length and dihedral-angle
gradients evaluated at the current intermediate positions, and moves those
positions.  Each per-layer update has zero net impulse and zero net torque, so
the whole prediction keeps the momentum of the momentum step.

The baseline variant shares encoder and processor but decodes unconstrained
per-vertex accelerations.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from msim import geometry
from msim.geometry import DegenerateGeometryError
from msim.integrator import ExternalForces, eval_external, momentum_step
from msim.mesh import Mesh, SimState
from msim.neural import checkpoint
from msim.neural.layers import MLP, Module
from msim.neural.tensor import (Tensor, as_tensor, atan2, concat, cross, dot, gather,
                                maximum, norm, scatter_add)
from msim.velocity_projection import ProjectionResult, project_velocities, target_momenta

FEATURE_SCHEMA = 1
NODE_FEATURES = ("speed", "mass", "pinned", "ext_accel")
EDGE_FEATURES = ("rest_length", "length", "strain", "prev_strain", "dihedral", "hinge")
_STRAIN, _DIHEDRAL = EDGE_FEATURES.index("strain"), EDGE_FEATURES.index("dihedral")


class LayerError(RuntimeError):
    def __init__(self, layer: int, cause: Exception):
        super().__init__(f"layer {layer}: {cause}")
        self.layer = layer
        self.cause = cause


@dataclass
class ModelConfig:
    kind: str = "shell"
    layers: int = 4
    latent: int = 128
    hidden: int = 128
    n_hidden: int = 2
    impulse_scale: float = 0.05
    accel_scale: float = 1.0
    seed: int = 0
    zero_decoders: bool = True

    def __post_init__(self):
        if self.kind not in ("shell", "solid"):
            raise ValueError(f"unknown mesh kind {self.kind!r}")
        if self.layers < 1:
            raise ValueError("need at least one layer")


@dataclass
class Normalizer:
    """Fixed per-feature affine normalization, fitted once on a dataset."""

    node_mean: np.ndarray = field(default_factory=lambda: np.zeros(len(NODE_FEATURES)))
    node_std: np.ndarray = field(default_factory=lambda: np.ones(len(NODE_FEATURES)))
    edge_mean: np.ndarray = field(default_factory=lambda: np.zeros(len(EDGE_FEATURES)))
    edge_std: np.ndarray = field(default_factory=lambda: np.ones(len(EDGE_FEATURES)))

    @classmethod
    def fit(cls, node_feats: np.ndarray, edge_feats: np.ndarray, floor: float = 1e-8):
        def stats(a):
            mean = a.mean(axis=0)
            std = a.std(axis=0)
            return mean, np.where(std > floor, std, 1.0)

        nm, ns = stats(node_feats)
        em, es = stats(edge_feats)
        return cls(nm, ns, em, es)


@dataclass
class GraphFeatures:
    r: Tensor  # (N, latent) node latents
    s: Tensor  # (2E, latent) directed edge latents; rows E.. are the reversed edges
    x: Tensor  # (N, 3) current layer positions


@dataclass
class ForwardResult:
    positions: Tensor
    v_fd: np.ndarray
    velocities: np.ndarray
    x_m: np.ndarray
    f_ext: np.ndarray
    layer_positions: list
    projection: ProjectionResult | None = None


# ---------------------------------------------------------------------------
# Differentiable geometry
# ---------------------------------------------------------------------------

def edge_geometry(x: Tensor, edges: np.ndarray, eps_len: float = 0.0):
    """Lengths (E, 1) and unit stretch directions (E, 3) at positions ``x``."""
    d = gather(x, edges[:, 0]) - gather(x, edges[:, 1])
    length = norm(d)
    bad = np.flatnonzero(~(length.data[:, 0] > eps_len))
    if bad.size:
        raise DegenerateGeometryError("degenerate edge", int(bad[0]))
    return length, d / length


def hinge_geometry(x: Tensor, hinge_vertices: np.ndarray, eps_area: float = 0.0):
    """Dihedral angles (H, 1) and the four gradient blocks (H, 3) each."""
    x0, x1, x2, x3 = (gather(x, hinge_vertices[:, k]) for k in range(4))
    e = x1 - x0
    nA = cross(e, x2 - x0)
    nB = cross(x3 - x0, e)
    aA = dot(nA, nA)
    aB = dot(nB, nB)
    bad = np.flatnonzero((aA.data[:, 0] <= 4 * eps_area**2) | (aB.data[:, 0] <= 4 * eps_area**2))
    if bad.size:
        raise DegenerateGeometryError("degenerate hinge triangle", int(bad[0]))
    le = norm(e)
    eh = e / le
    theta = atan2(dot(cross(nA, nB), eh), dot(nA, nB))
    gA = -nA / aA
    gB = -nB / aB
    g0 = dot(x2 - x1, eh) * gA + dot(x3 - x1, eh) * gB
    g1 = -(dot(x2 - x0, eh) * gA + dot(x3 - x0, eh) * gB)
    return theta, (g0, g1, le * gA, le * gB)


def layer_accelerations(mesh: Mesh, x_prev: Tensor, w_stretch, w_bend, dt: float) -> Tensor:
    """Nodal accelerations ``sum of impulses / (m dt)`` from per-edge and per-hinge magnitudes.

    ``w_stretch`` is (E, 1) and ``w_bend`` (H, 1) or None.  Impulses landing on
    pinned vertices are dropped.
    """
    n = mesh.n_vertices
    _, u = edge_geometry(x_prev, mesh.edges, mesh.eps_len)
    dp_s = as_tensor(w_stretch) * u
    rows = [dp_s, -dp_s]
    index = [mesh.edges[:, 0], mesh.edges[:, 1]]
    hv = mesh.hinge_vertices
    if w_bend is not None and len(hv):
        _, grads = hinge_geometry(x_prev, hv, mesh.eps_area)
        wb = as_tensor(w_bend)
        rows += [wb * g for g in grads]
        index += [hv[:, k] for k in range(4)]
    dp = scatter_add(concat(rows, axis=0), np.concatenate(index), n)
    inv = (~mesh.pinned).astype(float) / (mesh.masses * dt)
    return dp * inv[:, None]


@dataclass
class SpringGraph:
    """Edge-only particle graph (no elements) accepted by :func:`layered_update`."""

    positions: np.ndarray
    edges: np.ndarray
    masses: np.ndarray
    pinned: np.ndarray = None
    eps_len: float = 0.0
    eps_area: float = 0.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.masses = np.asarray(self.masses, dtype=float).reshape(-1)
        if self.pinned is None:
            self.pinned = np.zeros(len(self.positions), dtype=bool)
        self.hinge_vertices = np.zeros((0, 4), dtype=np.int64)

    @property
    def n_vertices(self) -> int:
        return len(self.positions)


def chain_graph(n: int, spacing: float = 1.0, mass: float = 1.0) -> SpringGraph:
    """Straight chain of ``n`` particles along x joined by consecutive springs."""
    x = np.zeros((n, 3))
    x[:, 0] = spacing * np.arange(n)
    edges = np.column_stack([np.arange(n - 1), np.arange(1, n)])
    return SpringGraph(x, edges, np.full(n, mass))


def layered_update(mesh: Mesh | SpringGraph, x_m, dt: float, stretch_magnitudes,
                   bend_magnitudes=None):
    """Apply given per-layer impulse magnitudes with stencil refresh between layers.

    Returns the list of positions ``[x^(0) = x_m, x^(1), ..., x^(L)]`` as arrays.
    """
    x = as_tensor(np.asarray(x_m, dtype=float))
    out = [x.data.copy()]
    for l, ws in enumerate(stretch_magnitudes):
        wb = None if bend_magnitudes is None else bend_magnitudes[l]
        ws = np.asarray(ws, dtype=float).reshape(-1, 1)
        if wb is not None:
            wb = np.asarray(wb, dtype=float).reshape(-1, 1)
        a = layer_accelerations(mesh, x, ws, wb, dt)
        x = x + a * dt**2
        out.append(x.data.copy())
    return out


# ---------------------------------------------------------------------------
# Input features
# ---------------------------------------------------------------------------

def intrinsic_edge_data(mesh: Mesh, x: np.ndarray):
    """Edge lengths, strains and per-edge dihedral deviations at ``x`` (numpy)."""
    length, _ = geometry.edge_vectors(x, mesh.edges, mesh.eps_len)
    strain = (length - mesh.rest_lengths) / mesh.rest_lengths
    dihedral = np.zeros(len(mesh.edges))
    hv = mesh.hinge_vertices
    if len(hv):
        theta = geometry.dihedral_angle(x[hv], mesh.eps_area)
        dihedral[mesh.hinges[:, 0]] = theta - mesh_theta0(mesh)
    return length, strain, dihedral


def mesh_theta0(mesh: Mesh) -> np.ndarray:
    hv = mesh.hinge_vertices
    if not len(hv):
        return np.zeros(0)
    return geometry.dihedral_angle(mesh.rest_positions[hv])


def input_features(mesh: Mesh, state: SimState, x_m: np.ndarray, f_ext: np.ndarray):
    """Raw node features (N, 4) and undirected edge features (E, 6).

    All entries are invariant under rigid motions of the whole state.
    """
    v = state.velocities
    node = np.column_stack([
        np.linalg.norm(v, axis=1),
        mesh.masses,
        mesh.pinned.astype(float),
        np.linalg.norm(f_ext, axis=1) / mesh.masses,
    ])
    length, strain, dihedral = intrinsic_edge_data(mesh, x_m)
    prev_strain = intrinsic_edge_data(mesh, state.positions)[1]
    hinge_flag = np.zeros(len(mesh.edges))
    if len(mesh.hinges):
        hinge_flag[mesh.hinges[:, 0]] = 1.0
    edge = np.column_stack([mesh.rest_lengths, length, strain, prev_strain, dihedral, hinge_flag])
    return node, edge


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

class _GraphNet(Module):
    """Encoder and message-passing processor shared by both model variants."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        c = config
        self.config = c
        self.normalizer = Normalizer()
        mlp = lambda n_in, n_out, zero=False: MLP(n_in, n_out, rng, c.hidden, c.n_hidden, zero)
        self.node_encoder = mlp(len(NODE_FEATURES), c.latent)
        self.edge_encoder = mlp(len(EDGE_FEATURES), c.latent)
        self.edge_mlps = [mlp(3 * c.latent + 2, c.latent) for _ in range(c.layers)]
        self.vertex_mlps = [mlp(2 * c.latent, c.latent) for _ in range(c.layers)]

    def encode(self, mesh: Mesh, state: SimState, x_m: np.ndarray, f_ext: np.ndarray
               ) -> GraphFeatures:
        node, edge = input_features(mesh, state, x_m, f_ext)
        nz = self.normalizer
        r = self.node_encoder(Tensor((node - nz.node_mean) / nz.node_std))
        edge_dir = np.concatenate([edge, edge], axis=0)
        s = self.edge_encoder(Tensor((edge_dir - nz.edge_mean) / nz.edge_std))
        return GraphFeatures(r, s, Tensor(x_m))

    def _directed(self, mesh: Mesh):
        e = mesh.edges
        return np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]])

    def message_layer(self, l: int, feats: GraphFeatures, mesh: Mesh,
                      strain: Tensor, dihedral: Tensor) -> GraphFeatures:
        """Residual message passing with the layer's current strain and dihedral inputs.

        ``strain`` and ``dihedral`` are (E, 1) per undirected edge.
        """
        nz = self.normalizer
        snd, rcv = self._directed(mesh)
        eps_n = (strain - nz.edge_mean[_STRAIN]) * (1.0 / nz.edge_std[_STRAIN])
        th_n = (dihedral - nz.edge_mean[_DIHEDRAL]) * (1.0 / nz.edge_std[_DIHEDRAL])
        eps_d = concat([eps_n, eps_n], axis=0)
        th_d = concat([th_n, th_n], axis=0)
        msg = self.edge_mlps[l](concat([feats.s, gather(feats.r, snd), gather(feats.r, rcv),
                                        th_d, eps_d], axis=1))
        s = feats.s + msg
        agg = scatter_add(msg, snd, mesh.n_vertices)
        r = feats.r + self.vertex_mlps[l](concat([feats.r, agg], axis=1))
        return GraphFeatures(r, s, feats.x)

    def _intrinsics(self, mesh: Mesh, x: Tensor):
        length, u = edge_geometry(x, mesh.edges, mesh.eps_len)
        strain = (length - mesh.rest_lengths[:, None]) / mesh.rest_lengths[:, None]
        hv = mesh.hinge_vertices
        if len(hv):
            theta, grads = hinge_geometry(x, hv, mesh.eps_area)
            dev = theta - mesh_theta0(mesh)[:, None]
            dihedral = scatter_add(dev, mesh.hinges[:, 0], len(mesh.edges))
        else:
            dihedral = Tensor(np.zeros((len(mesh.edges), 1)))
        return strain, dihedral

    def _check_mesh(self, mesh: Mesh):
        if mesh.kind != self.config.kind:
            raise ValueError(f"model built for {self.config.kind} meshes, got {mesh.kind}")

    # -- persistence ---------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        nz = self.normalizer
        out.update({"normalizer.node_mean": nz.node_mean, "normalizer.node_std": nz.node_std,
                    "normalizer.edge_mean": nz.edge_mean, "normalizer.edge_std": nz.edge_std})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in arrays:
                raise KeyError(f"checkpoint lacks parameter {name!r}")
            if arrays[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.data.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)
        self.normalizer = Normalizer(*(np.array(arrays[f"normalizer.{k}"]) for k in
                                       ("node_mean", "node_std", "edge_mean", "edge_std")))

    def manifest(self) -> dict:
        return {"model": type(self).__name__, "config": asdict(self.config),
                "feature_schema": FEATURE_SCHEMA, "node_features": list(NODE_FEATURES),
                "edge_features": list(EDGE_FEATURES)}


class MomentumGNN(_GraphNet):
    def __init__(self, config: ModelConfig | None = None, rng: np.random.Generator | None = None):
        config = config or ModelConfig()
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        super().__init__(config, rng)
        c = config
        mlp = lambda n_out: MLP(c.latent, n_out, rng, c.hidden, c.n_hidden, c.zero_decoders)
        self.stretch_decoders = [mlp(1) for _ in range(c.layers)]
        self.bend_decoders = [mlp(1) for _ in range(c.layers)] if c.kind == "shell" else []

    def decode_stretch(self, l: int, feats: GraphFeatures, mesh: Mesh) -> Tensor:
        """Stretch magnitudes (E, 1) from max-pooled directed edge latents."""
        ne = len(mesh.edges)
        pooled = maximum(feats.s[:ne], feats.s[ne:])
        return self.stretch_decoders[l](pooled)

    def decode_bend(self, l: int, feats: GraphFeatures, mesh: Mesh, edge_ids=None) -> Tensor:
        """Bend magnitudes (H, 1) for hinge edges; non-hinge edges are rejected."""
        if not self.bend_decoders:
            raise ValueError("solid models have no bend decoder")
        hinge_edges = mesh.hinges[:, 0]
        if edge_ids is not None:
            edge_ids = np.atleast_1d(np.asarray(edge_ids, dtype=np.int64))
            missing = np.setdiff1d(edge_ids, hinge_edges)
            if missing.size:
                raise ValueError(f"edge {int(missing[0])} is not a hinge")
            hinge_edges = edge_ids
        ne = len(mesh.edges)
        pooled = maximum(feats.s[hinge_edges], feats.s[hinge_edges + ne])
        return self.bend_decoders[l](pooled)

    def impulse_scales(self, mesh: Mesh, dt: float):
        """Per-edge and per-hinge factors turning decoder outputs into impulses (kg m/s)."""
        k = self.config.impulse_scale
        m = mesh.masses
        e = mesh.edges
        l0 = mesh.rest_lengths
        s_stretch = k * 0.5 * (m[e[:, 0]] + m[e[:, 1]]) * l0 / dt
        hv = mesh.hinge_vertices
        if len(hv):
            l0h = l0[mesh.hinges[:, 0]]
            s_bend = k * m[hv].mean(axis=1) * l0h**2 / dt
        else:
            s_bend = np.zeros(0)
        return s_stretch[:, None], s_bend[:, None]

    def forward(self, mesh: Mesh, state: SimState, forces: ExternalForces | None, dt: float,
                project: bool = True) -> ForwardResult:
        self._check_mesh(mesh)
        forces = forces or ExternalForces()
        f_ext = eval_external(mesh, state, forces)
        x_m = momentum_step(mesh, state, f_ext, dt)
        try:
            feats = self.encode(mesh, state, x_m, f_ext)
        except DegenerateGeometryError as exc:
            raise LayerError(0, exc) from exc
        s_stretch, s_bend = self.impulse_scales(mesh, dt)
        use_bend = bool(self.bend_decoders) and len(mesh.hinges) > 0
        layer_positions = [feats.x]
        for l in range(self.config.layers):
            try:
                strain, dihedral = self._intrinsics(mesh, feats.x)
                feats = self.message_layer(l, feats, mesh, strain, dihedral)
                w_s = self.decode_stretch(l, feats, mesh) * s_stretch
                w_b = self.decode_bend(l, feats, mesh) * s_bend if use_bend else None
                a = layer_accelerations(mesh, feats.x, w_s, w_b, dt)
            except DegenerateGeometryError as exc:
                raise LayerError(l + 1, exc) from exc
            feats = GraphFeatures(feats.r, feats.s, feats.x + a * dt**2)
            layer_positions.append(feats.x)
        x_new = feats.x
        v_fd = (x_new.data - state.positions) / dt
        velocities, proj = v_fd, None
        if project and not mesh.pinned.any():
            targets = target_momenta(mesh.masses, state.positions, state.velocities, f_ext, dt)
            proj = project_velocities(mesh.masses, x_new.data, v_fd, targets)
            velocities = proj.velocities
        return ForwardResult(x_new, v_fd, velocities, x_m, f_ext, layer_positions, proj)

    __call__ = forward


class BaselineGNN(_GraphNet):
    """Same encoder and processor, with one per-vertex acceleration decoder after the last layer."""

    def __init__(self, config: ModelConfig | None = None, rng: np.random.Generator | None = None):
        config = config or ModelConfig()
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        super().__init__(config, rng)
        c = config
        self.decoder = MLP(c.latent, 3, rng, c.hidden, c.n_hidden, c.zero_decoders)

    def forward(self, mesh: Mesh, state: SimState, forces: ExternalForces | None, dt: float,
                project: bool = False) -> ForwardResult:
        self._check_mesh(mesh)
        forces = forces or ExternalForces()
        f_ext = eval_external(mesh, state, forces)
        x_m = momentum_step(mesh, state, f_ext, dt)
        feats = self.encode(mesh, state, x_m, f_ext)
        strain, dihedral = self._intrinsics(mesh, feats.x)
        for l in range(self.config.layers):
            feats = self.message_layer(l, feats, mesh, strain, dihedral)
        a = self.decoder(feats.r) * self.config.accel_scale
        a = a * (~mesh.pinned).astype(float)[:, None]
        x_new = Tensor(state.positions + dt * state.velocities) + a * dt**2
        v_fd = (x_new.data - state.positions) / dt
        velocities, proj = v_fd, None
        if project and not mesh.pinned.any():
            targets = target_momenta(mesh.masses, state.positions, state.velocities, f_ext, dt)
            proj = project_velocities(mesh.masses, x_new.data, v_fd, targets)
            velocities = proj.velocities
        return ForwardResult(x_new, v_fd, velocities, x_m, f_ext, [x_new], proj)

    __call__ = forward


def save_model(model: _GraphNet, path, extra_sections: dict | None = None,
               extra_manifest: dict | None = None) -> None:
    sections = model.state_arrays()
    if extra_sections:
        sections.update(extra_sections)
    manifest = model.manifest()
    if extra_manifest:
        manifest.update(extra_manifest)
    checkpoint.save(path, sections, manifest)


def load_model(path):
    """Rebuild a model from a checkpoint; returns ``(model, sections, manifest)``."""
    sections, manifest = checkpoint.load(path)
    cfg = ModelConfig(**manifest["config"])
    if manifest.get("feature_schema") != FEATURE_SCHEMA:
        raise ValueError(f"checkpoint feature schema {manifest.get('feature_schema')} "
                         f"does not match {FEATURE_SCHEMA}")
    cls = {"MomentumGNN": MomentumGNN, "BaselineGNN": BaselineGNN}[manifest["model"]]
    model = cls(cfg)
    model.load_state_arrays(sections)
    return model, sections, manifest
