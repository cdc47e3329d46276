"""
Recursive rollouts and the cumulative error metrics used to compare models.
"""

from dataclasses import dataclass, field, replace
from typing import Callable, Protocol, Sequence

import numpy as np

from hrn_physics.errors import InvalidArgumentError, RolloutError
from hrn_physics.model import HrnModel, MlpModel, StepInput
from hrn_physics.scenarios import Trajectory, hierarchy_with_states, scene_at_frame
from hrn_physics.training import TrajectoryView

DEFAULT_HORIZON = 9
METRICS = ("position", "delta", "preserve")


def rollout(
    model: HrnModel | MlpModel,
    traj: Trajectory,
    n_steps: int,
    start: int | None = None,
    view: TrajectoryView | None = None,
) -> Trajectory:
    """Feed one-step predictions back as input for `n_steps` steps.

    The result holds the seed frames (start-T, start] followed by the predicted
    frames, so `n_steps=0` copies the seed frames. Static particles stay where
    the seed frame put them and applied forces come from the source trajectory.
    """
    history = model.history
    start = history - 1 if start is None else start
    if n_steps < 0:
        raise InvalidArgumentError(f"n_steps must be >= 0, got {n_steps}")
    if not history - 1 <= start < traj.n_frames:
        raise InvalidArgumentError(
            f"start frame {start} leaves no room for {history} history frames"
        )
    view = view or TrajectoryView(traj, model.cfg)
    h = view.graph_at(start)
    first = start - history + 1
    static = np.asarray(traj.header.static_mask, dtype=bool)
    pinned = traj.positions[start][static]
    gravity = traj.header.gravity

    positions = [p for p in traj.positions[first : start + 1]]
    velocities = [v for v in traj.velocities[first : start + 1]]
    for k in range(n_steps):
        frame = start + k
        inp = StepInput.from_leaves(
            h,
            positions[-history:],
            velocities[-history:],
            _forces_at(traj, frame),
            gravity,
            material_pairs=view.material_pairs,
        )
        out = model.step(inp)
        nxt, vel = out.positions.copy(), out.velocities.copy()
        nxt[static] = pinned
        vel[static] = 0.0
        if not (np.all(np.isfinite(nxt)) and np.all(np.isfinite(vel))):
            raise RolloutError("prediction is not finite", k + 1)
        positions.append(nxt)
        velocities.append(vel)

    frames = range(first, start + n_steps + 1)
    forces = np.stack([_forces_at(traj, f) for f in frames])
    return Trajectory(
        _rollout_header(traj, first, start, n_steps, positions[0], velocities[0]),
        np.stack(positions),
        np.stack(velocities),
        forces,
    )


def _forces_at(traj: Trajectory, frame: int) -> np.ndarray:
    if frame < traj.n_frames:
        return traj.forces[frame]
    return np.zeros((traj.n_particles, 3))


def _rollout_header(traj, first, start, n_steps, positions0, velocities0):
    header = traj.header
    stiffness = traj.stiffness_at(start)
    return replace(
        header,
        scene=scene_at_frame(header.scene, positions0, velocities0),
        hierarchy=hierarchy_with_states(header.hierarchy, positions0, velocities0),
        resets=[],
        stiffness_changes=[(0, obj, s) for obj, s in sorted(stiffness.items())],
        config={
            **header.config,
            "rollout": {"first": first, "start": start, "steps": n_steps},
        },
    )


class Predictor(Protocol):
    label: str
    history: int

    def predict(self, traj: Trajectory, start: int, n_steps: int) -> np.ndarray:
        """Leaf positions of frames start+1 .. start+n_steps."""
        ...


@dataclass
class ModelPredictor:
    model: HrnModel | MlpModel
    label: str = "hrn"
    _views: dict[int, TrajectoryView] = field(default_factory=dict, repr=False)

    @property
    def history(self) -> int:
        return self.model.history

    def predict(self, traj: Trajectory, start: int, n_steps: int) -> np.ndarray:
        view = self._views.get(id(traj))
        if view is None or view.traj is not traj:
            view = self._views[id(traj)] = TrajectoryView(traj, self.model.cfg)
        predicted = rollout(self.model, traj, n_steps, start, view)
        return predicted.positions[self.history :]


@dataclass
class OraclePredictor:
    """Plays back the ground truth."""

    label: str = "oracle"
    history: int = 1

    def predict(self, traj: Trajectory, start: int, n_steps: int) -> np.ndarray:
        return traj.positions[start + 1 : start + n_steps + 1].copy()


@dataclass
class IdentityPredictor:
    """Predicts no motion at all."""

    label: str = "identity"
    history: int = 1

    def predict(self, traj: Trajectory, start: int, n_steps: int) -> np.ndarray:
        return np.repeat(traj.positions[start][None], n_steps, axis=0)


@dataclass
class MetricReport:
    label: str
    horizons: list[int]
    position: list[float]
    delta: list[float]
    preserve: list[float]
    n_windows: int = 0

    def series(self, metric: str) -> list[float]:
        if metric not in METRICS:
            raise InvalidArgumentError(f"Unknown metric: {metric}")
        return getattr(self, metric)

    def rows(self) -> list[tuple[str, int, str, float]]:
        return [
            (self.label, horizon, metric, value)
            for metric in METRICS
            for horizon, value in zip(self.horizons, self.series(metric))
        ]

    def has_nan(self) -> bool:
        return any(not np.isfinite(v) for metric in METRICS for v in self.series(metric))

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "n_windows": self.n_windows,
            "horizons": list(self.horizons),
            **{metric: list(self.series(metric)) for metric in METRICS},
        }


def evaluation_windows(
    traj: Trajectory, history: int, horizon: int, stride: int = 1
) -> list[int]:
    """Start frames t with history (t-H, t] and targets up to t+horizon, no reset inside."""
    if horizon < 1:
        raise InvalidArgumentError(f"horizon must be >= 1, got {horizon}")
    if history - 1 + horizon > traj.n_frames - 1:
        raise InvalidArgumentError(
            f"horizon {horizon} with history {history} exceeds trajectory of "
            f"{traj.n_frames} frames"
        )
    return [
        t
        for t in range(history - 1, traj.n_frames - horizon, max(1, stride))
        if not traj.spans_reset(t - history + 1, t + horizon)
    ]


def _material_pairs(traj: Trajectory, dynamic: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pairs = sorted(
        (a, b)
        for a, b in traj.header.scene.material_pairs()
        if a < b and dynamic[a] and dynamic[b]
    )
    return (
        np.array([p[0] for p in pairs], dtype=np.int64),
        np.array([p[1] for p in pairs], dtype=np.int64),
    )


def window_errors(
    predicted: np.ndarray, traj: Trajectory, start: int
) -> dict[str, np.ndarray]:
    """Per-step (not cumulative) errors of one predicted window, dynamic particles only."""
    n_steps = len(predicted)
    truth = traj.positions[start + 1 : start + n_steps + 1]
    dynamic = ~np.asarray(traj.header.static_mask, dtype=bool)
    before = traj.positions[start][None]
    pred_delta = np.diff(np.concatenate([before, predicted]), axis=0)
    true_delta = np.diff(np.concatenate([before, truth]), axis=0)
    position = (((predicted - truth)[:, dynamic]) ** 2).sum(axis=2).mean(axis=1)
    delta = (((pred_delta - true_delta)[:, dynamic]) ** 2).sum(axis=2).mean(axis=1)
    i, j = _material_pairs(traj, dynamic)
    if len(i):
        d_pred = np.linalg.norm(predicted[:, i] - predicted[:, j], axis=2)
        d_true = np.linalg.norm(truth[:, i] - truth[:, j], axis=2)
        preserve = ((d_pred - d_true) ** 2).mean(axis=1)
    else:
        preserve = np.zeros(n_steps)
    return {"position": position, "delta": delta, "preserve": preserve}


def evaluate(
    predictors: Sequence[Predictor],
    trajectories: Sequence[Trajectory],
    horizon: int = DEFAULT_HORIZON,
    stride: int = 1,
    print_fn: Callable[..., None] | None = None,
) -> list[MetricReport]:
    """Cumulative position, delta and preserve-distance MSE per predictor.

    All predictors are scored on the same windows, chosen for the longest
    history among them.
    """
    if not trajectories:
        raise InvalidArgumentError("evaluation needs at least one trajectory")
    history = max((p.history for p in predictors), default=1)
    windows = [
        (traj, t)
        for traj in trajectories
        for t in evaluation_windows(traj, history, horizon, stride)
    ]
    if not windows:
        raise InvalidArgumentError("no evaluation window fits between trajectory resets")

    reports = []
    for predictor in predictors:
        totals = {metric: np.zeros(horizon) for metric in METRICS}
        for traj, start in windows:
            errors = window_errors(predictor.predict(traj, start, horizon), traj, start)
            for metric in METRICS:
                totals[metric] += np.cumsum(errors[metric])
        report = MetricReport(
            label=predictor.label,
            horizons=list(range(1, horizon + 1)),
            **{metric: (totals[metric] / len(windows)).tolist() for metric in METRICS},
            n_windows=len(windows),
        )
        reports.append(report)
        if print_fn is not None:
            print_fn(
                f"{predictor.label}: position {report.position[-1]:.4g}, "
                f"delta {report.delta[-1]:.4g}, preserve {report.preserve[-1]:.4g} "
                f"over {len(windows)} windows"
            )
    return reports
