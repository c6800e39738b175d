"""Sequential rollouts of the network, the baseline, or the reference integrator."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from msim import meshio
from msim.elastic import ElasticError
from msim.integrator import (ConvergenceError, ExternalForces, HalfSpace, Sphere, StepConfig,
                             StepError, implicit_euler_step)
from msim.mesh import Mesh, SimState
from msim.momentum_gnn import BaselineGNN, LayerError, MomentumGNN
from msim.neural import no_grad
from msim.trajectory import Trajectory, step_diagnostics


@dataclass
class Scene:
    mesh: Mesh
    state: SimState
    forces: ExternalForces
    dt: float = 1.0 / 60.0


def _obstacle(spec: dict):
    kind = spec.get("type")
    if kind == "halfspace":
        return HalfSpace(np.array(spec["normal"], dtype=float), float(spec.get("offset", 0.0)),
                         float(spec.get("stiffness", 1e4)))
    if kind == "sphere":
        return Sphere(np.array(spec["center"], dtype=float), float(spec["radius"]),
                      float(spec.get("stiffness", 1e4)))
    raise ValueError(f"unknown obstacle type {kind!r}")


def load_scene(path) -> Scene:
    """Read a JSON scene: ``mesh`` path, optional ``state`` path, ``gravity``, ``dt``, ``obstacles``.

    Relative paths resolve against the scene file's directory.
    """
    path = Path(path)
    spec = json.loads(path.read_text())
    base = path.parent
    mesh = meshio.load_mesh(base / spec["mesh"])
    state = meshio.load_state(base / spec["state"]) if spec.get("state") else mesh.rest_state()
    mesh.validate_state(state)
    forces = ExternalForces(np.array(spec.get("gravity", [0.0, 0.0, 0.0]), dtype=float),
                            [_obstacle(o) for o in spec.get("obstacles", [])])
    return Scene(mesh, state, forces, float(spec.get("dt", 1.0 / 60.0)))


def rollout(scene: Scene, n_steps: int, model: MomentumGNN | BaselineGNN | None = None,
            project: bool | None = None, step_cfg: StepConfig | None = None) -> Trajectory:
    """Step ``scene`` forward ``n_steps`` times.

    ``model=None`` runs the reference implicit-Euler integrator.  ``project``
    selects whether the network's finite-difference velocities are projected
    onto the momentum targets; by default :class:`MomentumGNN` projects and
    :class:`BaselineGNN` does not.
    """
    mesh, dt = scene.mesh, scene.dt
    if model is None:
        provenance = "reference"
    elif isinstance(model, BaselineGNN):
        provenance = "baseline"
    else:
        provenance = "model"
    if project is None:
        project = provenance == "model"
    traj = Trajectory(mesh=mesh, dt=dt, provenance=provenance)
    state = scene.state.copy()
    traj.append(state, step_diagnostics(mesh, state))
    cfg = step_cfg or StepConfig(dt=dt)
    for k in range(n_steps):
        try:
            if model is None:
                state = implicit_euler_step(mesh, state, scene.forces, cfg)
                diag = step_diagnostics(mesh, state)
            else:
                with no_grad():
                    out = model.forward(mesh, state, scene.forces, dt, project=project)
                state = SimState(out.positions.data, out.velocities, state.time + dt)
                res = 0.0 if out.projection is None else float(np.abs(out.projection.residual).max())
                fb = False if out.projection is None else out.projection.fallback
                diag = step_diagnostics(mesh, state, res, fb)
        except (ElasticError, ConvergenceError, LayerError, FloatingPointError) as exc:
            raise StepError(k, exc) from exc
        traj.append(state, diag)
    return traj
