"""Self-supervised training against the incremental implicit-Euler potential."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from msim.harness.data import TrainSample
from msim.harness.noise import NoiseConfig, apply_noise
from msim.integrator import (StepConfig, eval_external, implicit_euler_step, modified_potential,
                             momentum_step)
from msim.momentum_gnn import (MomentumGNN, Normalizer, _GraphNet, input_features, load_model,
                               save_model)
from msim.neural import Adam, Tensor, external, no_grad

log = logging.getLogger(__name__)

# Neo-Hookean log barrier is replaced by a quadratic below this J during training
LOSS_J_MIN = 0.05


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, sample: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}, batch slot {sample}")
        self.step = step
        self.sample = sample


def physics_loss(mesh, x_pred: Tensor, x_m: np.ndarray, dt: float,
                 j_min: float | None = LOSS_J_MIN) -> Tensor:
    """Modified potential at the predicted positions as a differentiable scalar."""
    return external(x_pred, lambda x: modified_potential(mesh, x, x_m, dt, j_min))


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-5
    batch_size: int = 4
    seed: int = 0
    noise: bool = True
    pinned_fraction: float = 0.5
    checkpoint_every: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("need steps >= 0 and batch_size >= 1")
        if not 0.0 <= self.pinned_fraction <= 1.0:
            raise ValueError("pinned_fraction must lie in [0, 1]")


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)   # per optimizer step, summed over the batch
    epoch_means: list = field(default_factory=list)
    steps_done: int = 0


def steps_per_epoch(n_samples: int, batch_size: int) -> int:
    return max(1, math.ceil(n_samples / batch_size))


def fit_normalizer(model: _GraphNet, samples: list[TrainSample]) -> Normalizer:
    """Feature statistics over the (noise-free) dataset, stored on the model."""
    nodes, edges = [], []
    for s in samples:
        f_ext = eval_external(s.mesh, s.state, s.forces)
        x_m = momentum_step(s.mesh, s.state, f_ext, s.dt)
        n, e = input_features(s.mesh, s.state, x_m, f_ext)
        nodes.append(n)
        edges.append(e)
    model.normalizer = Normalizer.fit(np.concatenate(nodes), np.concatenate(edges))
    return model.normalizer


def _batch(step: int, cfg: TrainConfig, dataset, pinned) -> list[TrainSample]:
    # stateless per-step stream: resuming at any step replays the same batches
    rng = np.random.default_rng([cfg.seed, step])
    n_pinned = 0
    if pinned:
        want = cfg.batch_size * cfg.pinned_fraction
        n_pinned = int(want) + int(rng.random() < want - int(want))
    picks = [pinned[int(rng.integers(len(pinned)))] for _ in range(n_pinned)]
    picks += [dataset[int(rng.integers(len(dataset)))] for _ in range(cfg.batch_size - n_pinned)]
    if cfg.noise:
        picks = [apply_noise(s, NoiseConfig.for_kind(s.mesh.kind), rng) for s in picks]
    return picks


def sample_loss(model: MomentumGNN, s: TrainSample) -> Tensor:
    out = model.forward(s.mesh, s.state, s.forces, s.dt, project=False)
    return physics_loss(s.mesh, out.positions, out.x_m, s.dt)


def train(model: MomentumGNN, dataset: list[TrainSample], cfg: TrainConfig,
          pinned: list[TrainSample] | None = None, optimizer: Adam | None = None,
          start_step: int = 0, ckpt_path=None) -> tuple[TrainResult, Adam]:
    """Run optimizer steps ``start_step .. cfg.steps - 1``.

    Each step draws a batch, sums the physics loss over it, and takes one Adam
    step.  With ``checkpoint_every > 0`` a checkpoint including optimizer state
    is written to ``ckpt_path`` every that many steps and at the end.
    """
    if not dataset:
        raise ValueError("training needs a nonempty dataset")
    params = model.parameters()
    opt = optimizer or Adam(params, lr=cfg.lr)
    result = TrainResult()
    spe = steps_per_epoch(len(dataset), cfg.batch_size)
    running = []
    for step in range(start_step, cfg.steps):
        model.zero_grad()
        total = 0.0
        for slot, s in enumerate(_batch(step, cfg, dataset, pinned)):
            loss = sample_loss(model, s)
            if not np.isfinite(loss.data):
                raise NonFiniteLoss(step, slot, float(loss.data))
            loss.backward()
            total += float(loss.data)
        opt.step()
        result.losses.append(total)
        running.append(total)
        if (step + 1) % spe == 0:
            result.epoch_means.append(float(np.mean(running)))
            running = []
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("step %d loss %.6g", step + 1, total)
        result.steps_done = step + 1
        if ckpt_path is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_training_checkpoint(model, opt, cfg, step + 1, ckpt_path)
    if running:
        result.epoch_means.append(float(np.mean(running)))
    if ckpt_path is not None:
        save_training_checkpoint(model, opt, cfg, max(result.steps_done, start_step), ckpt_path)
    return result, opt


def save_training_checkpoint(model, opt: Adam, cfg: TrainConfig, step: int, path) -> None:
    save_model(model, path, extra_sections=opt.state_arrays(),
               extra_manifest={"train": {**asdict(cfg), "step": step}})


def resume(path):
    """Model, optimizer and the step to continue from, as saved by :func:`train`."""
    model, sections, manifest = load_model(path)
    tc = dict(manifest.get("train", {}))
    step = int(tc.pop("step", 0))
    cfg = TrainConfig(**tc) if tc else TrainConfig()
    opt = Adam(model.parameters(), lr=cfg.lr)
    if "adam.step" in sections:
        opt.load_state_arrays(sections)
    return model, opt, cfg, step


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def noised_eval_set(samples: list[TrainSample], seed: int) -> list[TrainSample]:
    rng = np.random.default_rng([seed, 7])
    return [apply_noise(s, NoiseConfig.for_kind(s.mesh.kind), rng) for s in samples]


def mean_loss(model: MomentumGNN, samples: list[TrainSample]) -> float:
    with no_grad():
        return float(np.mean([float(sample_loss(model, s).data) for s in samples]))


@dataclass
class StepComparison:
    model_distance: np.ndarray
    momentum_step_distance: np.ndarray

    @property
    def win_rate(self) -> float:
        return float(np.mean(self.model_distance < self.momentum_step_distance))


def compare_to_implicit_euler(model: MomentumGNN, samples: list[TrainSample]) -> StepComparison:
    """M-norm distances of the prediction and of ``x^m`` to the implicit-Euler step."""
    dm, dx = [], []
    for s in samples:
        with no_grad():
            out = model.forward(s.mesh, s.state, s.forces, s.dt, project=False)
        x_ie = implicit_euler_step(s.mesh, s.state, s.forces, StepConfig(dt=s.dt)).positions
        w = s.mesh.masses[:, None]
        dm.append(math.sqrt(float(np.sum(w * (out.positions.data - x_ie) ** 2))))
        dx.append(math.sqrt(float(np.sum(w * (out.x_m - x_ie) ** 2))))
    return StepComparison(np.array(dm), np.array(dx))
