import csv
import json
import shutil
import struct
from dataclasses import asdict
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

from hrn_physics.diff import AdamState, ModelParams, StepDecaySchedule
from hrn_physics.errors import InvalidArgumentError, TrajectoryFormatError
from hrn_physics.evaluation import MetricReport
from hrn_physics.graph import WITHIN_SIBLING, HierarchyGraph, Particle, Relation, SceneGraph
from hrn_physics.model import ModelConfig, NormStats, model_from_params
from hrn_physics.scenarios import (
    Trajectory,
    TrajectoryHeader,
    hierarchy_with_states,
    scene_at_frame,
)
from hrn_physics.training import EpochRecord, LossConfig, TrainResult

MAGIC = b"HRNT"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<4sII")
CHECKPOINT_FORMAT = "hrn-checkpoint"
CHECKPOINT_VERSION = 1


def _ensure_parent(path: Path) -> None:
    if not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)


def _create_backup(path: Path, extension: str) -> Path:
    date_tag = datetime.now().strftime("%y%m%d")
    index = 0
    while True:
        backup_path = path.with_name(f"{path.stem}.{date_tag}-{index}.backup.{extension}")
        if not backup_path.exists():
            break
        index += 1
    shutil.copy2(path, backup_path)
    return backup_path


def _header_dict(traj: Trajectory) -> dict:
    header = traj.header
    h = header.hierarchy
    return {
        "scenario": header.scenario,
        "seed": header.seed,
        "dt": header.dt,
        "gravity": list(header.gravity),
        "n_particles": header.n_particles,
        "n_frames": traj.n_frames,
        "spacing": header.spacing,
        "object_id": list(header.scene.object_id),
        "mass": header.masses.tolist(),
        "static": [bool(s) for s in header.static_mask],
        "relations": [[r.sender, r.receiver, list(r.material)] for r in header.scene.relations],
        "resets": list(header.resets),
        "stiffness_changes": [
            [int(f), int(o), float(s)] for f, o, s in header.stiffness_changes
        ],
        "hierarchy": {
            "n_leaves": h.n_leaves,
            "flat": h.flat,
            "level": list(h.level),
            "parent": [-1 if p is None else p for p in h.parent],
            "object_id": list(h.object_id),
            "node_mass": h.node_masses().tolist(),
            "node_material": h.node_material.tolist(),
            "relations": [[r.kind, r.sender, r.receiver, list(r.material)] for r in h.relations],
        },
        "config": header.config,
    }


def trajectory_to_bytes(traj: Trajectory) -> bytes:
    """Serialize to the HRNT layout: preamble, JSON header, float32 frames."""
    header = json.dumps(_header_dict(traj), separators=(",", ":")).encode("utf-8")
    frames = np.stack([traj.positions, traj.velocities, traj.forces], axis=1)
    payload = frames.astype("<f4").tobytes()
    return _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)) + header + payload


def _hierarchy_from(data: dict, positions0: np.ndarray, velocities0: np.ndarray) -> HierarchyGraph:
    masses = data["node_mass"]
    node_material = np.array(data["node_material"], dtype=np.float64).reshape(len(masses), -1)
    node_material.flags.writeable = False
    skeleton = HierarchyGraph(
        nodes=[Particle((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), m) for m in masses],
        level=tuple(data["level"]),
        parent=tuple(None if p < 0 else p for p in data["parent"]),
        relations=[Relation(s, r, tuple(mat), kind) for kind, s, r, mat in data["relations"]],
        object_id=tuple(data["object_id"]),
        n_leaves=int(data["n_leaves"]),
        node_material=node_material,
        flat=bool(data["flat"]),
    )
    return hierarchy_with_states(skeleton, positions0, velocities0)


def trajectory_from_bytes(data: bytes) -> Trajectory:
    if len(data) < _PREAMBLE.size:
        raise TrajectoryFormatError("file is shorter than the preamble", len(data))
    magic, version, header_len = _PREAMBLE.unpack_from(data, 0)
    if magic != MAGIC:
        raise TrajectoryFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != FORMAT_VERSION:
        raise TrajectoryFormatError(f"unsupported format version {version}", 4)
    header_start = _PREAMBLE.size
    payload_start = header_start + header_len
    if len(data) < payload_start:
        raise TrajectoryFormatError(
            f"header truncated: expected {header_len} bytes", len(data)
        )
    try:
        meta = json.loads(data[header_start:payload_start].decode("utf-8"))
        n_frames = int(meta["n_frames"])
        n = int(meta["n_particles"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise TrajectoryFormatError(f"unreadable header ({e})", header_start) from e

    frame_bytes = n * 9 * 4
    payload = len(data) - payload_start
    expected = n_frames * frame_bytes
    if payload < expected:
        complete = payload // frame_bytes if frame_bytes else 0
        raise TrajectoryFormatError(
            f"payload truncated: frame {complete} of {n_frames} is incomplete",
            payload_start + complete * frame_bytes,
        )
    if payload > expected:
        raise TrajectoryFormatError(
            f"{payload - expected} trailing bytes after the last frame",
            payload_start + expected,
        )
    frames = np.frombuffer(data, dtype="<f4", count=n_frames * n * 9, offset=payload_start)
    frames = frames.reshape(n_frames, 3, n, 3).astype(np.float64)
    positions, velocities, forces = frames[:, 0], frames[:, 1], frames[:, 2]

    try:
        particles = [
            Particle((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), m) for m in meta["mass"]
        ]
        relations = [
            Relation(s, r, tuple(mat), WITHIN_SIBLING) for s, r, mat in meta["relations"]
        ]
        template = SceneGraph(particles, relations, list(meta["object_id"]))
        header = TrajectoryHeader(
            scenario=meta["scenario"],
            seed=int(meta["seed"]),
            dt=float(meta["dt"]),
            gravity=tuple(float(g) for g in meta["gravity"]),
            scene=scene_at_frame(template, positions[0], velocities[0]),
            hierarchy=_hierarchy_from(meta["hierarchy"], positions[0], velocities[0]),
            static_mask=np.array(meta["static"], dtype=bool),
            spacing=float(meta["spacing"]),
            resets=[int(r) for r in meta["resets"]],
            stiffness_changes=[(int(f), int(o), float(s)) for f, o, s in meta["stiffness_changes"]],
            config=meta.get("config", {}),
        )
        return Trajectory(header, positions, velocities, forces)
    except (KeyError, TypeError, ValueError) as e:
        raise TrajectoryFormatError(f"inconsistent header ({e})", header_start) from e


def write_trajectory(path: str | Path, traj: Trajectory) -> Path:
    path = Path(path).expanduser()
    _ensure_parent(path)
    path.write_bytes(trajectory_to_bytes(traj))
    return path


def read_trajectory(path: str | Path) -> Trajectory:
    return trajectory_from_bytes(Path(path).expanduser().read_bytes())


def list_trajectories(directory: str | Path) -> list[Path]:
    """Trajectory files in a directory, sorted by name."""
    directory = Path(directory).expanduser()
    if not directory.is_dir():
        raise FileNotFoundError(f"trajectory directory not found: {directory}")
    return sorted(directory.glob("*.hrnt"))


def checkpoint_paths(path: str | Path) -> tuple[Path, Path]:
    """(manifest, tensor blob) paths of a checkpoint stem."""
    path = Path(path).expanduser()
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".json"), path.with_name(path.name + ".bin")


def save_checkpoint(
    path: str | Path,
    result: TrainResult,
    label: str = "hrn",
    config: dict | None = None,
    backup: bool = True,
) -> Path:
    """Write float32 parameters and Adam moments plus a JSON manifest."""
    manifest_path, blob_path = checkpoint_paths(path)
    _ensure_parent(manifest_path)
    params = result.model.params
    optimizer = result.optimizer
    names = params.names()
    blocks = [params.values[name] for name in names]
    has_moments = all(name in optimizer.m for name in names)
    if has_moments:
        blocks += [optimizer.m[name] for name in names] + [optimizer.v[name] for name in names]
    schedule = optimizer.schedule
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "label": label,
        "seed": result.seed,
        "step": optimizer.step,
        "epoch": result.epochs_done,
        "model": asdict(result.model.cfg),
        "stats": result.model.stats.to_dict(),
        "loss": {
            "alpha": result.loss_cfg.alpha,
            "beta": result.loss_cfg.beta,
            "local_weight": result.loss_cfg.local_weight,
        },
        "optimizer": {
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "initial_lr": schedule.initial,
            "boundaries": list(schedule.boundaries),
            "factors": list(schedule.factors),
            "moments": has_moments,
        },
        "tensors": [{"name": name, "shape": list(params.values[name].shape)} for name in names],
        "curve": [asdict(record) for record in result.curve],
        "config": config or {},
    }
    if backup:
        for existing, extension in ((manifest_path, "json"), (blob_path, "bin")):
            if existing.exists():
                _create_backup(existing, extension)
    blob = np.concatenate([b.reshape(-1) for b in blocks]) if blocks else np.zeros(0)
    blob_path.write_bytes(blob.astype("<f4").tobytes())
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest_path


def load_checkpoint(path: str | Path) -> tuple[TrainResult, dict]:
    manifest_path, blob_path = checkpoint_paths(path)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise InvalidArgumentError(f"{manifest_path} is not a checkpoint manifest")
    blob = np.frombuffer(blob_path.read_bytes(), dtype="<f4").astype(np.float64)

    shapes = [(t["name"], tuple(t["shape"])) for t in manifest["tensors"]]
    sizes = [int(np.prod(shape)) for _, shape in shapes]
    opt = manifest["optimizer"]
    copies = 3 if opt["moments"] else 1
    if blob.size != copies * sum(sizes):
        raise InvalidArgumentError(
            f"{blob_path} holds {blob.size} values, manifest describes {copies * sum(sizes)}"
        )
    tables: list[dict[str, np.ndarray]] = []
    offset = 0
    for _ in range(copies):
        table = {}
        for (name, shape), size in zip(shapes, sizes):
            table[name] = blob[offset : offset + size].reshape(shape).copy()
            offset += size
        tables.append(table)

    model_fields = dict(manifest["model"])
    model_fields["ablations"] = tuple(model_fields.get("ablations", ()))
    cfg = ModelConfig(**model_fields)
    stats = NormStats.from_dict(manifest["stats"])
    model = model_from_params(cfg, ModelParams(tables[0]), stats)
    optimizer = AdamState(
        schedule=StepDecaySchedule(
            opt["initial_lr"], tuple(opt["boundaries"]), tuple(opt["factors"])
        ),
        beta1=opt["beta1"],
        beta2=opt["beta2"],
        eps=opt["eps"],
        step=int(manifest["step"]),
        m=tables[1] if copies == 3 else {},
        v=tables[2] if copies == 3 else {},
    )
    loss_cfg = LossConfig(**manifest["loss"], stats=stats)
    curve = [EpochRecord(**record) for record in manifest.get("curve", [])]
    return TrainResult(model, loss_cfg, optimizer, curve, int(manifest["seed"])), manifest


def write_curve_csv(path: str | Path, curve: Sequence[EpochRecord]) -> Path:
    path = Path(path).expanduser()
    _ensure_parent(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "val_loss", "learning_rate"])
        for record in curve:
            val = "" if record.val_loss is None else repr(record.val_loss)
            writer.writerow(
                [record.epoch, repr(record.train_loss), val, repr(record.learning_rate)]
            )
    return path


def write_metric_csv(path: str | Path, reports: Sequence[MetricReport]) -> Path:
    path = Path(path).expanduser()
    _ensure_parent(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["model", "horizon", "metric", "value"])
        for report in reports:
            for label, horizon, metric, value in report.rows():
                writer.writerow([label, horizon, metric, repr(value)])
    return path


def write_report_json(
    path: str | Path, reports: Sequence[MetricReport], config: dict | None = None
) -> Path:
    path = Path(path).expanduser()
    _ensure_parent(path)
    summary = {"config": config or {}, "models": [r.to_dict() for r in reports]}
    # NaN metrics are written as null so the file stays strict JSON
    text = json.dumps(_strict(summary), indent=2)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def write_rollout_csv(path: str | Path, errors: dict[str, np.ndarray], start: int) -> Path:
    """Per-frame (non-cumulative) rollout errors, one row per predicted frame."""
    path = Path(path).expanduser()
    _ensure_parent(path)
    metrics = list(errors)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", *metrics])
        for k in range(len(errors[metrics[0]])):
            writer.writerow([start + k + 1, *(repr(float(errors[m][k])) for m in metrics)])
    return path


def _strict(value):
    if isinstance(value, float) and not np.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _strict(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_strict(v) for v in value]
    return value
