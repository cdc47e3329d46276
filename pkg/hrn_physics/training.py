"""
One-step supervised training of hierarchical particle models.

The loss mixes a per-level normalized local-delta term, a world-delta term and
a distance-preservation term over sibling pairs. Gradients with respect to the
predicted local and world deltas are derived in closed form and handed to the
model's backward pass.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from hrn_physics.diff import AdamState, StepDecaySchedule, adam_step
from hrn_physics.errors import DivergenceError, InvalidArgumentError, InvalidStateError
from hrn_physics.graph import HierarchyGraph, reaggregate
from hrn_physics.model import (
    STD_FLOOR,
    HrnModel,
    MlpModel,
    ModelConfig,
    NormStats,
    StepInput,
    StepOutput,
    create_model,
    graph_for,
    world_to_local,
)
from hrn_physics.scenarios import Trajectory


@dataclass(frozen=True, eq=False)
class LossConfig:
    alpha: float = 0.5
    beta: float = 1.0
    local_weight: float = 1.0
    stats: NormStats | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidArgumentError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.beta < 0 or self.local_weight < 0:
            raise InvalidArgumentError("beta and local_weight must be non-negative")


LOSS_PRESETS = {
    "hrn": {},
    "local-loss-only": {"alpha": 1.0, "beta": 0.0},
    "no-preservation-loss": {"alpha": 1.0, "beta": 1.0},
    "global-loss-only": {"alpha": 1.0, "beta": 1.0, "local_weight": 0.0},
}


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    epochs: int = 50
    decay_fractions: tuple[float, ...] = (0.5, 0.75, 0.9)
    decay_factors: tuple[float, ...] = (2.0, 5.0, 2.0)
    decay_steps: tuple[int, ...] | None = None
    val_fraction: float = 0.2
    max_samples_per_epoch: int | None = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise InvalidArgumentError("learning_rate must be non-negative")
        if self.max_samples_per_epoch is not None and self.max_samples_per_epoch < 1:
            raise InvalidArgumentError("max_samples_per_epoch must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise InvalidArgumentError("batch_size must be positive and epochs non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise InvalidArgumentError("val_fraction must be in [0, 1)")

    def schedule(self, total_steps: int) -> StepDecaySchedule:
        if self.decay_steps is not None:
            return StepDecaySchedule(self.learning_rate, self.decay_steps, self.decay_factors)
        return StepDecaySchedule.from_fractions(
            self.learning_rate, total_steps, self.decay_fractions, self.decay_factors
        )


@dataclass(eq=False)
class LossTarget:
    positions: np.ndarray
    next_positions: np.ndarray
    world: np.ndarray
    local: np.ndarray


def loss_target(
    h: HierarchyGraph, positions: np.ndarray, next_positions: np.ndarray
) -> LossTarget:
    """Ground-truth world and local deltas of every node between two frames."""
    world = np.asarray(next_positions) - np.asarray(positions)
    return LossTarget(
        np.asarray(positions, dtype=np.float64),
        np.asarray(next_positions, dtype=np.float64),
        world,
        world_to_local(h, world),
    )


@dataclass(eq=False)
class LossResult:
    value: float
    local_term: float
    world_term: float
    preserve_term: float
    grad_local: np.ndarray
    grad_world: np.ndarray


def compute_loss(
    prediction: StepOutput,
    target: LossTarget,
    h: HierarchyGraph,
    cfg: LossConfig,
    pairs: tuple[np.ndarray, np.ndarray] | None = None,
) -> LossResult:
    if cfg.stats is None:
        raise InvalidStateError("the loss needs per-level normalization stats")
    n = h.n_nodes
    for name in ("local", "world"):
        if getattr(prediction, name).shape != (n, 3):
            raise InvalidArgumentError(f"predicted {name} deltas must be ({n}, 3)")
    scale = cfg.stats.local_scale(h.level_array)

    d_local = (prediction.local - target.local) / scale
    d_world = prediction.world - target.world
    local_term = float((d_local**2).sum()) / n
    world_term = float((d_world**2).sum()) / n
    grad_local = cfg.alpha * cfg.local_weight * 2.0 * d_local / scale / n
    grad_world = cfg.alpha * cfg.beta * 2.0 * d_world / n

    i, j = pairs if pairs is not None else h.sibling_pairs()
    preserve_term = 0.0
    if len(i):
        predicted = target.positions + prediction.world
        offset = predicted[i] - predicted[j]
        distance = np.linalg.norm(offset, axis=1)
        truth = np.linalg.norm(target.next_positions[i] - target.next_positions[j], axis=1)
        residual = distance - truth
        preserve_term = float((residual**2).mean())
        unit = np.divide(
            offset, distance[:, None], out=np.zeros_like(offset), where=distance[:, None] > 0
        )
        g = ((1.0 - cfg.alpha) * 2.0 * residual / len(i))[:, None] * unit
        np.add.at(grad_world, i, g)
        np.add.at(grad_world, j, -g)

    value = (
        cfg.alpha * (cfg.local_weight * local_term + cfg.beta * world_term)
        + (1.0 - cfg.alpha) * preserve_term
    )
    return LossResult(value, local_term, world_term, preserve_term, grad_local, grad_world)


def preservation_pairs(
    cfg: ModelConfig, h: HierarchyGraph, material_pairs: Sequence[tuple[int, int]]
) -> tuple[np.ndarray, np.ndarray]:
    """Sibling pairs for the hierarchy; material neighbours for leaf-only models."""
    if cfg.variant == "hrn":
        return h.sibling_pairs()
    unique = sorted({(min(a, b), max(a, b)) for a, b in material_pairs})
    i = np.array([p[0] for p in unique], dtype=np.int64)
    j = np.array([p[1] for p in unique], dtype=np.int64)
    return i, j


class TrajectoryView:
    """A trajectory seen through one model variant's graph, with node states cached."""

    def __init__(self, traj: Trajectory, cfg: ModelConfig):
        self.traj = traj
        self.cfg = cfg
        header = traj.header
        self.graph = graph_for(cfg, header.scene, header.hierarchy)
        self.material_pairs = frozenset(header.scene.material_pairs())
        self.pairs = preservation_pairs(cfg, self.graph, self.material_pairs)
        states = [
            reaggregate(self.graph, x, v) for x, v in zip(traj.positions, traj.velocities)
        ]
        self.node_positions = np.stack([s[0] for s in states])
        self.node_velocities = np.stack([s[1] for s in states])
        self._graphs: dict[tuple, HierarchyGraph] = {}

    def graph_at(self, frame: int) -> HierarchyGraph:
        stiffness = self.traj.stiffness_at(frame)
        key = tuple(sorted(stiffness.items()))
        if key not in self._graphs:
            self._graphs[key] = self.graph.restiffened(stiffness)
        return self._graphs[key]

    def step_input(self, frame: int, history: int) -> StepInput:
        first = frame - history + 1
        return StepInput(
            self.graph_at(frame),
            self.node_positions[first : frame + 1],
            self.node_velocities[first : frame + 1],
            self.traj.forces[frame],
            self.traj.header.gravity,
            material_pairs=self.material_pairs,
        )

    def target(self, frame: int) -> LossTarget:
        return loss_target(
            self.graph, self.node_positions[frame], self.node_positions[frame + 1]
        )

    def sample_frames(self, history: int) -> list[int]:
        """Frames t with a full history and a successor, not crossing a reset."""
        return [
            t
            for t in range(history - 1, self.traj.n_frames - 1)
            if not self.traj.spans_reset(t - history + 1, t + 1)
        ]


def fit_norm_stats(
    trajectories: Sequence[Trajectory], cfg: ModelConfig | None = None
) -> NormStats:
    """Mean and std of ground-truth local deltas (and world deltas) per level."""
    if not trajectories:
        raise InvalidArgumentError("need at least one trajectory to fit normalization stats")
    cfg = cfg or ModelConfig()
    local_rows: dict[int, list[np.ndarray]] = {}
    world_rows: dict[int, list[np.ndarray]] = {}
    force_rows = []
    for traj in trajectories:
        view = TrajectoryView(traj, cfg)
        levels = view.graph.level_array
        frames = view.sample_frames(1)
        if not frames:
            continue
        world = view.node_positions[[t + 1 for t in frames]] - view.node_positions[frames]
        local = np.stack([world_to_local(view.graph, w) for w in world])
        for level in np.unique(levels):
            mask = levels == level
            local_rows.setdefault(int(level), []).append(local[:, mask].reshape(-1, 3))
            world_rows.setdefault(int(level), []).append(world[:, mask].reshape(-1, 3))
        forces = traj.forces.reshape(-1, 3)
        force_rows.append(forces[np.any(forces != 0.0, axis=1)])
    if not local_rows:
        raise InvalidArgumentError("trajectories contain no usable transitions")
    n_levels = max(local_rows) + 1
    mean = np.zeros((n_levels, 3))
    std = np.full((n_levels, 3), STD_FLOOR)
    velocity = np.full((n_levels, 3), STD_FLOOR)
    for level, rows in local_rows.items():
        values = np.concatenate(rows)
        mean[level] = values.mean(axis=0)
        std[level] = values.std(axis=0)
        velocity[level] = np.concatenate(world_rows[level]).std(axis=0)
    forces = np.concatenate(force_rows)
    force_scale = float(np.sqrt((forces**2).sum(axis=1).mean())) if len(forces) else 1.0
    return NormStats(mean, std, velocity, force_scale)


def split_trajectories(
    trajectories: Sequence[Trajectory], val_fraction: float, seed: int
) -> tuple[list[Trajectory], list[Trajectory]]:
    """Whole-trajectory train/validation split."""
    order = np.random.default_rng([seed, 1]).permutation(len(trajectories))
    n_val = int(round(val_fraction * len(trajectories)))
    n_val = min(n_val, len(trajectories) - 1)
    val = sorted(order[:n_val].tolist())
    train = sorted(order[n_val:].tolist())
    return [trajectories[i] for i in train], [trajectories[i] for i in val]


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float | None
    learning_rate: float


@dataclass(eq=False)
class TrainResult:
    model: HrnModel | MlpModel
    loss_cfg: LossConfig
    optimizer: AdamState
    curve: list[EpochRecord] = field(default_factory=list)
    seed: int = 0

    @property
    def epochs_done(self) -> int:
        return self.curve[-1].epoch if self.curve else 0


def _model_config_for(cfg: ModelConfig, trajectories: Sequence[Trajectory]) -> ModelConfig:
    cfg = cfg.resolved(trajectories[0].header.spacing)
    if cfg.variant == "mlp":
        counts = {t.n_particles for t in trajectories}
        if len(counts) != 1:
            raise InvalidArgumentError(
                f"the MLP baseline needs a fixed particle count, got {sorted(counts)}"
            )
        cfg = replace(cfg, n_particles=counts.pop())
    return cfg


def sample_loss(
    model: HrnModel | MlpModel,
    view: TrajectoryView,
    frame: int,
    loss_cfg: LossConfig,
    with_grad: bool = True,
) -> LossResult:
    out = model.step(view.step_input(frame, model.history))
    result = compute_loss(
        out, view.target(frame), view.graph_at(frame), loss_cfg, view.pairs
    )
    if with_grad:
        model.backward(out, result.grad_local, result.grad_world)
    return result


def _samples(views: Sequence[TrajectoryView], history: int) -> list[tuple[int, int]]:
    return [(v, t) for v, view in enumerate(views) for t in view.sample_frames(history)]


def _mean_loss(
    model: HrnModel | MlpModel,
    views: Sequence[TrajectoryView],
    samples: Sequence[tuple[int, int]],
    loss_cfg: LossConfig,
) -> float | None:
    if not samples:
        return None
    total = sum(
        sample_loss(model, views[v], t, loss_cfg, with_grad=False).value
        for v, t in samples
    )
    return total / len(samples)


def train(
    trajectories: Sequence[Trajectory],
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    optim_cfg: OptimConfig,
    seed: int = 0,
    resume: TrainResult | None = None,
    print_fn: Callable[..., None] = print,
) -> TrainResult:
    """Minibatch one-step training with Adam; deterministic for a fixed seed."""
    if not trajectories:
        raise InvalidArgumentError("training needs at least one trajectory")
    train_set, val_set = split_trajectories(trajectories, optim_cfg.val_fraction, seed)

    if resume is not None:
        model = resume.model
        loss_cfg = replace(loss_cfg, stats=model.stats)
        optimizer = resume.optimizer
        curve = list(resume.curve)
    else:
        model_cfg = _model_config_for(model_cfg, trajectories)
        stats = fit_norm_stats(train_set, model_cfg)
        model = create_model(model_cfg, stats, seed)
        loss_cfg = replace(loss_cfg, stats=stats)
        optimizer = None
        curve = []

    train_views = [TrajectoryView(t, model.cfg) for t in train_set]
    val_views = [TrajectoryView(t, model.cfg) for t in val_set]
    train_samples = _samples(train_views, model.history)
    val_samples = _samples(val_views, model.history)
    if not train_samples:
        raise InvalidArgumentError("training trajectories are shorter than the model history")

    per_epoch = len(train_samples)
    if optim_cfg.max_samples_per_epoch is not None:
        per_epoch = min(per_epoch, optim_cfg.max_samples_per_epoch)
    batches_per_epoch = math.ceil(per_epoch / optim_cfg.batch_size)
    if optimizer is None:
        optimizer = AdamState(optim_cfg.schedule(batches_per_epoch * optim_cfg.epochs))

    params = model.params
    start = curve[-1].epoch if curve else 0
    for epoch in range(start + 1, optim_cfg.epochs + 1):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(train_samples))[:per_epoch]
        epoch_total = 0.0
        for batch in range(batches_per_epoch):
            picks = order[batch * optim_cfg.batch_size : (batch + 1) * optim_cfg.batch_size]
            params.zero_grad()
            batch_total = 0.0
            for pick in picks:
                v, t = train_samples[pick]
                batch_total += sample_loss(model, train_views[v], t, loss_cfg).value
            if not math.isfinite(batch_total):
                raise DivergenceError("training loss is not finite", epoch, batch)
            grads = {name: g / len(picks) for name, g in params.grads.items()}
            adam_step(params, grads, optimizer)
            epoch_total += batch_total
        record = EpochRecord(
            epoch=epoch,
            train_loss=epoch_total / per_epoch,
            val_loss=_mean_loss(model, val_views, val_samples, loss_cfg),
            learning_rate=optimizer.lr,
        )
        curve.append(record)
        val_label = "-" if record.val_loss is None else f"{record.val_loss:.6g}"
        print_fn(
            f"epoch {epoch:4d}  train {record.train_loss:.6g}  val {val_label}  "
            f"lr {record.learning_rate:.3g}"
        )
    return TrainResult(model, loss_cfg, optimizer, curve, seed)
