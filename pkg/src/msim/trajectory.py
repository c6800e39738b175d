"""Rollout records and conservation diagnostics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from msim.mesh import Mesh, SimState
from msim.velocity_projection import angular_momentum, linear_momentum

CSV_COLUMNS = ("step", "time", "px", "py", "pz", "Lx", "Ly", "Lz", "kinetic", "elastic")


@dataclass
class StepDiagnostics:
    p: np.ndarray
    L: np.ndarray
    kinetic: float
    elastic: float
    constraint_residual: float = 0.0
    projection_fallback: bool = False


def step_diagnostics(mesh: Mesh, state: SimState, constraint_residual: float = 0.0,
                     projection_fallback: bool = False) -> StepDiagnostics:
    m = mesh.masses
    v = state.velocities
    try:
        elastic = mesh.elastic.energy(state.positions)
    except ValueError:
        elastic = float("nan")
    return StepDiagnostics(linear_momentum(m, v), angular_momentum(m, state.positions, v),
                           0.5 * float(np.sum(m[:, None] * v * v)), elastic,
                           constraint_residual, projection_fallback)


@dataclass
class Trajectory:
    mesh: Mesh
    dt: float
    provenance: str
    states: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)

    def append(self, state: SimState, diag: StepDiagnostics) -> None:
        self.states.append(state)
        self.diagnostics.append(diag)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def momenta(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([d.p for d in self.diagnostics]).reshape(-1, 3),
                np.array([d.L for d in self.diagnostics]).reshape(-1, 3))

    @property
    def total_energy(self) -> np.ndarray:
        return np.array([d.kinetic + d.elastic for d in self.diagnostics])


def diag_rows(mesh: Mesh, states) -> list[list[float]]:
    """CSV rows with momenta and energies recomputed from the states."""
    rows = []
    for k, s in enumerate(states):
        d = step_diagnostics(mesh, s)
        rows.append([k, s.time, *d.p, *d.L, d.kinetic, d.elastic])
    return rows


def diag_export(trajectory: Trajectory | None, path, mesh: Mesh | None = None, states=None) -> None:
    if trajectory is not None:
        mesh, states = trajectory.mesh, trajectory.states
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for row in diag_rows(mesh, states or []):
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def read_diag_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header {header}")
        rows = [[float(v) for v in row] for row in r]
    return np.array(rows, dtype=float).reshape(-1, len(CSV_COLUMNS))
