"""Property suites behind ``msim verify``; each returns a list of named pass/fail checks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from msim import geometry, impulse_basis
from msim.elastic import (MaterialParams, discrete_shell_hinges, neo_hookean_tets, stvk_triangles,
                          tet_rest_frame, triangle_rest_frame)
from msim.harness.rollout import Scene, rollout
from msim.harness.train import physics_loss
from msim.integrator import ExternalForces
from msim.mesh import SimState, generate_cuboid, generate_sheet
from msim.momentum_gnn import ModelConfig, MomentumGNN
from msim.velocity_projection import (MomentumPair, angular_momentum, constraint_jacobian,
                                      linear_momentum, project_velocities)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def _fd_rel_error(f, x: np.ndarray, grad: np.ndarray, h: float = 1e-6) -> float:
    """Max elementwise relative error of ``grad`` against central differences of ``f``."""
    fd = np.zeros_like(x)
    flat, g = x.reshape(-1), fd.reshape(-1)
    for k in range(flat.size):
        step = h * max(1.0, abs(flat[k]))
        old = flat[k]
        flat[k] = old + step
        fp = f(x)
        flat[k] = old - step
        fm = f(x)
        flat[k] = old
        g[k] = (fp - fm) / (2 * step)
    scale = max(np.abs(fd).max(), 1e-300)
    return float(np.abs(fd - grad).max() / scale)


def basis_rank(max_vertices: int = 10, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []
    for n in range(3, max_vertices + 1):
        x, _, edges = impulse_basis.triangle_strip(n - 2, rng, jitter=0.1)
        rep = impulse_basis.verify_completeness(x, edges)
        out.append(Check(f"strip |V|={n}", rep.passed,
                         f"rank {rep.rank} (expected {rep.expected_rank}), "
                         f"max rigid residual {rep.rigid_residuals.max():.2e}"))
    return out


def gradients(instances: int = 20, seed: int = 0, tol: float = 1e-5) -> list[Check]:
    rng = np.random.default_rng(seed)
    shell = MaterialParams(1e4, 0.3, 100.0, thickness=0.01, bending_stiffness=0.1)
    solid = MaterialParams(1e4, 0.3, 100.0, name="neohookean")
    worst = {"stvk": 0.0, "neohookean": 0.0, "bend": 0.0, "dihedral": 0.0, "edge length": 0.0}
    for _ in range(instances):
        rest = rng.standard_normal((1, 3, 3))
        Dm, area = triangle_rest_frame(rest)
        x = rest + 0.1 * rng.standard_normal(rest.shape)
        Dinv = np.linalg.inv(Dm)
        _, g = stvk_triangles(x, Dinv, area, shell)
        worst["stvk"] = max(worst["stvk"], _fd_rel_error(
            lambda y: stvk_triangles(y, Dinv, area, shell)[0].sum(), x, g))

        rest = np.array([[[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]], float)
        rest = rest + 0.1 * rng.standard_normal(rest.shape)
        Dm, vol = tet_rest_frame(rest)
        x = rest + 0.05 * rng.standard_normal(rest.shape)
        Dinv = np.linalg.inv(Dm)
        _, g = neo_hookean_tets(x, Dinv, vol, solid)
        worst["neohookean"] = max(worst["neohookean"], _fd_rel_error(
            lambda y: neo_hookean_tets(y, Dinv, vol, solid)[0].sum(), x, g))

        h = np.array([[[0, 0, 0], [1, 0, 0], [0.3, 0.8, 0], [0.6, -0.9, 0]]], float)
        h = h + 0.2 * rng.standard_normal(h.shape)
        theta0 = geometry.dihedral_angle(h) + rng.uniform(-0.3, 0.3)
        coeff = np.array([rng.uniform(0.1, 2.0)])
        _, g = discrete_shell_hinges(h, theta0, coeff)
        worst["bend"] = max(worst["bend"], _fd_rel_error(
            lambda y: discrete_shell_hinges(y, theta0, coeff)[0].sum(), h, g))
        _, g = geometry.dihedral_angle_and_gradient(h, 0.0)
        worst["dihedral"] = max(worst["dihedral"], _fd_rel_error(
            lambda y: geometry.dihedral_angle(y).sum(), h, g))

        xi, xj = rng.standard_normal(3), rng.standard_normal(3)
        gi, gj = impulse_basis.edge_length_gradient(xi, xj)
        pair = np.stack([xi, xj])
        worst["edge length"] = max(worst["edge length"], _fd_rel_error(
            lambda y: np.linalg.norm(y[0] - y[1]), pair, np.stack([gi, gj])))
    out = [Check(f"{k} gradient", v <= tol, f"max rel error {v:.2e} over {instances} instances")
           for k, v in worst.items()]
    out.append(_network_gradient_check(seed, n_params=max(20, instances)))
    return out


def _network_gradient_check(seed: int, n_params: int = 20, tol: float = 1e-4) -> Check:
    rng = np.random.default_rng(seed)
    mesh = generate_sheet(3, 3)
    model = MomentumGNN(ModelConfig(layers=2, latent=8, hidden=8, zero_decoders=False, seed=seed))
    state = SimState(mesh.rest_positions + 0.01 * rng.standard_normal((9, 3)),
                     0.1 * rng.standard_normal((9, 3)))
    dt = 1.0 / 60.0

    def loss_value():
        out = model.forward(mesh, state, None, dt, project=False)
        return physics_loss(mesh, out.positions, out.x_m, dt)

    model.zero_grad()
    loss_value().backward()
    named = list(model.named_parameters())
    worst = 0.0
    for k in range(n_params):
        name, p = named[int(rng.integers(len(named)))]
        idx = tuple(int(rng.integers(n)) for n in p.data.shape)
        analytic = 0.0 if p.grad is None else p.grad[idx]
        old = p.data[idx]
        h = 1e-6 * max(1.0, abs(old))
        p.data[idx] = old + h
        fp = float(loss_value().data)
        p.data[idx] = old - h
        fm = float(loss_value().data)
        p.data[idx] = old
        fd = (fp - fm) / (2 * h)
        worst = max(worst, abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-8))
    return Check("network loss gradient", worst <= tol,
                 f"max rel error {worst:.2e} over {n_params} parameters")


def random_conservation_scene(rng: np.random.Generator, kind: str) -> Scene:
    if kind == "shell":
        mesh = generate_sheet(*(int(rng.integers(4, 9)) for _ in range(2)))
    else:
        mesh = generate_cuboid(*(int(rng.integers(2, 5)) for _ in range(3)))
    x = mesh.rest_positions + 0.02 * rng.standard_normal(mesh.rest_positions.shape)
    return Scene(mesh, SimState(x, 0.2 * rng.standard_normal(x.shape)), ExternalForces())


def conservation(n_scenes: int = 4, steps: int = 50, seed: int = 0) -> list[Check]:
    """Random-parameter rollouts: per-step momentum drift relative to ``M diam / dt``."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_scenes):
        kind = "shell" if k % 2 == 0 else "solid"
        scene = random_conservation_scene(rng, kind)
        model = MomentumGNN(ModelConfig(kind=kind, zero_decoders=False, seed=seed + k))
        traj = rollout(scene, steps, model)
        p, L = traj.momenta
        mesh = scene.mesh
        ps = mesh.total_mass * mesh.diameter / scene.dt
        dp = np.abs(np.diff(p, axis=0)).max() / ps
        dL = np.abs(np.diff(L, axis=0)).max() / (ps * mesh.diameter)
        out.append(Check(f"{kind} rollout {k}", dp <= 1e-9 and dL <= 1e-10,
                         f"max per-step drift p {dp:.2e}, L {dL:.2e} ({steps} steps)"))
    return out


def projection(n_systems: int = 100, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst_res = worst_idem = worst_kkt = 0.0
    for _ in range(n_systems):
        n = int(rng.integers(3, 20))
        m = rng.uniform(0.1, 2.0, n)
        x = rng.standard_normal((n, 3))
        v = rng.standard_normal((n, 3))
        tgt = MomentumPair(rng.standard_normal(3), rng.standard_normal(3))
        res = project_velocities(m, x, v, tgt)
        scale_p = max(np.linalg.norm(tgt.p), float(m @ np.linalg.norm(v, axis=1)))
        scale_L = max(np.linalg.norm(tgt.L),
                      float(m @ (np.linalg.norm(x, axis=1) * np.linalg.norm(v, axis=1))))
        r = max(np.linalg.norm(linear_momentum(m, res.velocities) - tgt.p) / scale_p,
                np.linalg.norm(angular_momentum(m, x, res.velocities) - tgt.L) / scale_L)
        again = project_velocities(m, x, res.velocities, tgt).velocities
        idem = np.abs(again - res.velocities).max() / np.abs(res.velocities).max()
        G = constraint_jacobian(m, x)
        # stationarity of 1/2 |dv|_M^2 + lam . G dv
        stat = np.repeat(m, 3) * res.correction.reshape(-1) + G.T @ res.multipliers
        kkt = np.abs(stat).max() / max(np.abs(np.repeat(m, 3) * res.correction.reshape(-1)).max(), 1e-300)
        worst_res, worst_idem, worst_kkt = max(worst_res, r), max(worst_idem, idem), max(worst_kkt, kkt)
    return [Check("constraint residual", worst_res <= 1e-10, f"max relative {worst_res:.2e}"),
            Check("idempotence", worst_idem <= 1e-12, f"max relative {worst_idem:.2e}"),
            Check("KKT stationarity", worst_kkt <= 1e-10, f"max relative {worst_kkt:.2e}")]


SUITES = {"basis-rank": basis_rank, "gradients": gradients, "conservation": conservation,
          "projection": projection}

__all__ = ["Check", "SUITES", "basis_rank", "conservation", "gradients", "projection",
           "random_conservation_scene"]
