"""Training data: randomly deformed sheets and cuboids and the snapshots of their reference rollouts."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from msim import meshio
from msim.integrator import ExternalForces, StepConfig, StepError, reference_rollout
from msim.mesh import (DET_RANGE, Mesh, MeshError, SimState, deform_affine, deform_bezier,
                       element_measures, generate_cuboid, generate_sheet)

MAX_RETRIES = 20


class GenerationError(RuntimeError):
    pass


@dataclass
class TrainSample:
    mesh: Mesh
    state: SimState
    forces: ExternalForces
    dt: float
    scene: int = 0


@dataclass
class DataRanges:
    """Sampling ranges for procedural scenes; sizes are vertex counts per side."""

    shell_size: tuple = (4, 8)
    solid_size: tuple = (2, 4)
    affine_strength: float = 0.25
    bezier_height: float = 0.3
    linear_speed: float = 0.5
    angular_speed: float = 1.0
    steps: int = 30
    dt: float = 1.0 / 60.0
    pinned_force: tuple = (0.0, 20.0)

    def __post_init__(self):
        for lo, hi in (self.shell_size, self.solid_size):
            if not 2 <= lo <= hi:
                raise ValueError("size ranges need 2 <= lo <= hi")
        if self.steps < 1 or not self.dt > 0:
            raise ValueError("need steps >= 1 and dt > 0")
        if min(self.affine_strength, self.bezier_height, self.linear_speed,
               self.angular_speed) < 0 or self.pinned_force[0] < 0:
            raise ValueError("ranges must be nonnegative")


def _random_unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def _random_velocities(x: np.ndarray, rng: np.random.Generator, r: DataRanges) -> np.ndarray:
    c = x.mean(axis=0)
    v_lin = _random_unit(rng) * rng.uniform(0.0, r.linear_speed)
    omega = _random_unit(rng) * rng.uniform(0.0, r.angular_speed)
    return v_lin + np.cross(omega, x - c)


def _deformed_sheet(rng: np.random.Generator, r: DataRanges) -> tuple[Mesh, SimState]:
    nx, ny = (int(rng.integers(r.shell_size[0], r.shell_size[1] + 1)) for _ in range(2))
    mesh = generate_sheet(nx, ny)
    h = r.bezier_height
    axis = int(rng.integers(2))
    # control polygon in the plane of the mapped axis and the sheet normal
    ctrl = np.zeros((4, 3))
    ctrl[:, axis] = np.arange(4) / 3.0
    ctrl[1:, 2] = rng.uniform(-h, h, size=3)
    state = deform_bezier(mesh, mesh.rest_state(), ctrl, axis=axis)
    state.velocities = _random_velocities(state.positions, rng, r)
    return mesh, state


def _deformed_cuboid(rng: np.random.Generator, r: DataRanges) -> tuple[Mesh, SimState]:
    n = [int(rng.integers(r.solid_size[0], r.solid_size[1] + 1)) for _ in range(3)]
    dims = rng.uniform(0.5, 1.0, size=3)
    mesh = generate_cuboid(*n, dims=dims)
    for _ in range(MAX_RETRIES):
        A = np.eye(3) + rng.uniform(-r.affine_strength, r.affine_strength, size=(3, 3))
        if DET_RANGE[0] <= np.linalg.det(A) <= DET_RANGE[1]:
            break
    else:
        raise GenerationError("could not sample an admissible affine map")
    state = deform_affine(mesh.rest_state(), A)
    if (element_measures(state.positions, mesh.elements) <= 0).any():
        raise GenerationError("affine map inverted a tetrahedron")
    state.velocities = _random_velocities(state.positions, rng, r)
    return mesh, state


def _harvest(mesh: Mesh, state0: SimState, forces: ExternalForces, r: DataRanges, scene: int
             ) -> list[TrainSample]:
    traj = reference_rollout(mesh, state0, forces, StepConfig(dt=r.dt), r.steps)
    # every state that starts a step of the rollout becomes one sample
    return [TrainSample(mesh, s, forces, r.dt, scene) for s in traj.states[:r.steps]]


def gen_dataset(kind: str, count: int, seed: int, ranges: DataRanges | None = None
                ) -> list[TrainSample]:
    """``count`` scenes of ``kind``; each contributes ``ranges.steps`` snapshots."""
    if kind not in ("shell", "solid"):
        raise ValueError(f"unknown kind {kind!r}")
    if count < 0:
        raise ValueError("count must be nonnegative")
    r = ranges or DataRanges()
    samples: list[TrainSample] = []
    for scene in range(count):
        rng = np.random.default_rng([seed, scene])
        for _ in range(MAX_RETRIES):
            try:
                mesh, state = (_deformed_sheet if kind == "shell" else _deformed_cuboid)(rng, r)
                samples += _harvest(mesh, state, ExternalForces(), r, scene)
                break
            except (GenerationError, MeshError, StepError):
                continue
        else:
            raise GenerationError(f"scene {scene}: generation failed {MAX_RETRIES} times")
    return samples


def pinned_sheet(nx: int, ny: int) -> Mesh:
    """Sheet with its last vertex row (largest y) pinned."""
    mesh = generate_sheet(nx, ny)
    pinned = np.zeros(mesh.n_vertices, dtype=bool)
    pinned[-nx:] = True
    return mesh.with_pinned(pinned)


def gen_pinned_dataset(count: int, seed: int, ranges: DataRanges | None = None
                       ) -> list[TrainSample]:
    """Pinned sheets released from rest under a random uniform body force per scene."""
    if count < 0:
        raise ValueError("count must be nonnegative")
    r = ranges or DataRanges()
    samples: list[TrainSample] = []
    for scene in range(count):
        rng = np.random.default_rng([seed, scene, 1])
        for _ in range(MAX_RETRIES):
            nx, ny = (int(rng.integers(r.shell_size[0], r.shell_size[1] + 1)) for _ in range(2))
            mesh = pinned_sheet(nx, ny)
            gravity = _random_unit(rng) * rng.uniform(*r.pinned_force)
            try:
                samples += _harvest(mesh, mesh.rest_state(), ExternalForces(gravity), r, scene)
                break
            except StepError:
                continue
        else:
            raise GenerationError(f"pinned scene {scene}: generation failed {MAX_RETRIES} times")
    return samples


# ---------------------------------------------------------------------------
# On-disk layout: index.json plus one mesh file and one state stream per scene
# ---------------------------------------------------------------------------

def save_dataset(samples: list[TrainSample], directory, meta: dict | None = None) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    scenes: dict[int, list[TrainSample]] = {}
    for s in samples:
        scenes.setdefault(s.scene, []).append(s)
    index = {"format": "msim-dataset", "version": 1, "meta": meta or {}, "scenes": []}
    for k, group in scenes.items():
        stem = f"scene_{k:05d}"
        meshio.save_mesh(group[0].mesh, out / f"{stem}.mesh")
        meshio.save_state_stream([g.state for g in group], out / f"{stem}.states")
        index["scenes"].append({"scene": k, "mesh": f"{stem}.mesh", "states": f"{stem}.states",
                                "gravity": [float(v) for v in group[0].forces.gravity],
                                "dt": group[0].dt})
    (out / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")


def load_dataset(directory) -> list[TrainSample]:
    root = Path(directory)
    index = json.loads((root / "index.json").read_text())
    if index.get("format") != "msim-dataset":
        raise ValueError(f"{root} is not a dataset directory")
    samples = []
    for entry in index["scenes"]:
        mesh = meshio.load_mesh(root / entry["mesh"])
        forces = ExternalForces(np.array(entry["gravity"]))
        for st in meshio.load_state_stream(root / entry["states"]):
            samples.append(TrainSample(mesh, st, forces, float(entry["dt"]), entry["scene"]))
    return samples


def ranges_dict(r: DataRanges) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(r).items()}


__all__ = ["DataRanges", "GenerationError", "TrainSample", "gen_dataset", "gen_pinned_dataset",
           "load_dataset", "pinned_sheet", "ranges_dict", "save_dataset"]
