"""Training-time position noise: iid Gaussian jitter plus one shared-direction local bump."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from msim.harness.data import GenerationError, TrainSample
from msim.mesh import SimState

MAX_RESAMPLES = 10


@dataclass(frozen=True)
class NoiseConfig:
    global_sigma: float
    local_radius_fraction: float
    local_magnitude: tuple = (0.0, 0.05)

    def __post_init__(self):
        lo, hi = self.local_magnitude
        if self.global_sigma < 0 or self.local_radius_fraction < 0 or lo < 0 or hi < lo:
            raise ValueError("noise parameters must be nonnegative with lo <= hi")

    @classmethod
    def for_kind(cls, kind: str) -> NoiseConfig:
        if kind == "shell":
            return cls(0.001, 0.25)
        if kind == "solid":
            return cls(6e-4, 0.5)
        raise ValueError(f"unknown kind {kind!r}")

    @classmethod
    def zero(cls) -> NoiseConfig:
        return cls(0.0, 0.0, (0.0, 0.0))


def _inverted(sample: TrainSample, x: np.ndarray) -> bool:
    mesh = sample.mesh
    if mesh.kind != "solid":
        return False
    e = x[mesh.elements]
    vol = np.linalg.det(np.stack([e[:, k] - e[:, 0] for k in (1, 2, 3)], axis=2))
    return bool((vol <= 0).any())


def apply_noise(sample: TrainSample, cfg: NoiseConfig, rng: np.random.Generator) -> TrainSample:
    """Perturb positions only; pinned vertices and velocities are left alone.

    The local bump picks a centre vertex, a random unit direction shared by all
    vertices, and per-vertex magnitudes ``U(lo, hi)`` inside a ball whose radius
    is ``local_radius_fraction`` times the longest rest bounding-box side.
    """
    mesh = sample.mesh
    x0 = sample.state.positions
    free = ~mesh.pinned
    extent = np.ptp(mesh.rest_positions, axis=0).max()
    radius = cfg.local_radius_fraction * extent
    lo, hi = cfg.local_magnitude
    for _ in range(MAX_RESAMPLES):
        x = x0.copy()
        if cfg.global_sigma > 0:
            x[free] += rng.normal(0.0, cfg.global_sigma, size=(int(free.sum()), 3))
        if radius > 0 and hi > 0:
            centre = x0[rng.integers(len(x0))]
            d = rng.standard_normal(3)
            d /= np.linalg.norm(d)
            inside = (np.linalg.norm(x0 - centre, axis=1) <= radius) & free
            mags = rng.uniform(lo, hi, size=int(inside.sum()))
            x[inside] += mags[:, None] * d
        if not _inverted(sample, x):
            return replace(sample, state=SimState(x, sample.state.velocities.copy(),
                                                  sample.state.time))
    raise GenerationError(f"noise inverted elements {MAX_RESAMPLES} times in a row")


__all__ = ["NoiseConfig", "apply_noise"]
