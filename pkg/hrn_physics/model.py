"""
Hierarchical relation network predictor and its baselines.

One step maps a short history of node states to per-node local deltas:

    forces, collisions and history  ->  input effects e0 on the leaves
    e0  ->  eta (leaf-to-ancestor, within-sibling, ancestor-to-descendant)
    node state + effect + gravity  ->  psi  ->  local delta
    local deltas  ->  world deltas via the ancestor sum

Every learned module is a `diff` MLP chain and `hrn_backward` pushes gradients
back through the same stages by hand.
"""

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from hrn_physics.diff import MlpSpec, ModelParams, Tape, backward, init_mlp, mlp_forward
from hrn_physics.errors import InvalidArgumentError, InvalidStateError
from hrn_physics.graph import (
    ANCESTOR_TO_DESCENDANT,
    COLLISION,
    LEAF_TO_ANCESTOR,
    WITHIN_SIBLING,
    HierarchyGraph,
    Relation,
    SceneGraph,
    flat_graph,
    reaggregate,
)
from hrn_physics.sim import neighbour_pairs

NO_PHI_F = "no-phi-f"
NO_PHI_C = "no-phi-c"
NO_PHI_H = "no-phi-h"
FLAT_GRAPH = "flat-graph"
SPARSE_GRAPH = "sparse-graph"
MLP_BASELINE = "mlp-baseline"
ABLATIONS = (NO_PHI_F, NO_PHI_C, NO_PHI_H, FLAT_GRAPH, SPARSE_GRAPH, MLP_BASELINE)
_GRAPH_ABLATIONS = (FLAT_GRAPH, SPARSE_GRAPH, MLP_BASELINE)

STAGE_TAGS = {LEAF_TO_ANCESTOR: 0, WITHIN_SIBLING: 1, ANCESTOR_TO_DESCENDANT: 2}
FEATURE_DIM = 8
PARTICLE_DIM = 7
STANDARD_GRAVITY = 9.81
STD_FLOOR = 1e-8
DEFAULT_RADIUS_FACTOR = 1.5


@dataclass(frozen=True)
class ModelConfig:
    history: int = 2
    collision_radius: float | None = None
    effect_dim: int = 32
    hidden: int = 64
    effect_layers: int = 2
    psi_layers: int = 3
    material_dim: int = 1
    self_collisions: bool = False
    ablations: tuple[str, ...] = ()
    n_particles: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "ablations", tuple(sorted(set(self.ablations))))
        if self.history < 1:
            raise InvalidArgumentError(f"history must be >= 1, got {self.history}")
        if self.collision_radius is not None and not self.collision_radius > 0:
            raise InvalidArgumentError(
                f"collision_radius must be positive, got {self.collision_radius}"
            )
        for name in ("effect_dim", "hidden", "material_dim"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.effect_layers < 0 or self.psi_layers < 0:
            raise InvalidArgumentError("layer counts must be non-negative")
        unknown = [a for a in self.ablations if a not in ABLATIONS]
        if unknown:
            raise InvalidArgumentError(f"Unknown ablation(s): {', '.join(unknown)}")
        if sum(a in self.ablations for a in _GRAPH_ABLATIONS) > 1:
            raise InvalidArgumentError(
                f"at most one of {', '.join(_GRAPH_ABLATIONS)} may be set"
            )

    def has(self, ablation: str) -> bool:
        return ablation in self.ablations

    @property
    def variant(self) -> str:
        if self.has(MLP_BASELINE):
            return "mlp"
        if self.has(FLAT_GRAPH):
            return "flat"
        if self.has(SPARSE_GRAPH):
            return "sparse"
        return "hrn"

    @property
    def radius(self) -> float:
        if self.collision_radius is None:
            raise InvalidStateError("collision_radius has not been resolved")
        return float(self.collision_radius)

    def resolved(self, spacing: float) -> "ModelConfig":
        if self.collision_radius is not None:
            return self
        return replace(self, collision_radius=DEFAULT_RADIUS_FACTOR * float(spacing))

    @property
    def node_dim(self) -> int:
        return FEATURE_DIM + (3 if self.has(NO_PHI_F) else 0)


@dataclass(frozen=True, eq=False)
class NormStats:
    """Per-level statistics of local deltas plus the input scales derived from them."""

    local_mean: np.ndarray
    local_std: np.ndarray
    velocity_std: np.ndarray
    force_scale: float = 1.0

    def __post_init__(self):
        for name in ("local_mean", "local_std", "velocity_std"):
            value = np.array(getattr(self, name), dtype=np.float64).reshape(-1, 3)
            if name != "local_mean":
                value = np.maximum(value, STD_FLOOR)
            object.__setattr__(self, name, value)
        if not (self.local_mean.shape == self.local_std.shape == self.velocity_std.shape):
            raise InvalidArgumentError("normalization stats differ in level count")
        object.__setattr__(self, "force_scale", max(float(self.force_scale), STD_FLOOR))

    @property
    def n_levels(self) -> int:
        return int(self.local_std.shape[0])

    def _lookup(self, table: np.ndarray, levels: np.ndarray) -> np.ndarray:
        levels = np.asarray(levels, dtype=np.int64)
        if levels.size and int(levels.max()) >= self.n_levels:
            raise InvalidStateError(
                f"no normalization stats for hierarchy level {int(levels.max())} "
                f"(have {self.n_levels} levels)"
            )
        return table[levels]

    def local_scale(self, levels: np.ndarray) -> np.ndarray:
        return self._lookup(self.local_std, levels)

    def velocity_scale(self, levels: np.ndarray) -> np.ndarray:
        return self._lookup(self.velocity_std, levels)

    @classmethod
    def unit(cls, n_levels: int) -> "NormStats":
        return cls(np.zeros((n_levels, 3)), np.ones((n_levels, 3)), np.ones((n_levels, 3)))

    def to_dict(self) -> dict:
        return {
            "local_mean": self.local_mean.tolist(),
            "local_std": self.local_std.tolist(),
            "velocity_std": self.velocity_std.tolist(),
            "force_scale": self.force_scale,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NormStats":
        return cls(
            np.array(data["local_mean"]),
            np.array(data["local_std"]),
            np.array(data["velocity_std"]),
            float(data.get("force_scale", 1.0)),
        )


@dataclass(eq=False)
class StepInput:
    hierarchy: HierarchyGraph
    positions: np.ndarray
    velocities: np.ndarray
    forces: np.ndarray
    gravity: np.ndarray
    collisions: tuple[np.ndarray, np.ndarray] | None = None
    material_pairs: frozenset | None = None

    def __post_init__(self):
        h = self.hierarchy
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        self.forces = np.asarray(self.forces, dtype=np.float64)
        self.gravity = np.asarray(self.gravity, dtype=np.float64).reshape(3)
        shape = self.positions.shape
        if len(shape) != 3 or shape[1:] != (h.n_nodes, 3):
            raise InvalidArgumentError(
                f"node states must be (frames, {h.n_nodes}, 3), got {shape}"
            )
        if self.velocities.shape != shape:
            raise InvalidArgumentError("positions and velocities differ in shape")
        if self.forces.shape != (h.n_leaves, 3):
            raise InvalidArgumentError(
                f"forces must be ({h.n_leaves}, 3), got {self.forces.shape}"
            )

    @property
    def n_frames(self) -> int:
        return int(self.positions.shape[0])

    @classmethod
    def from_leaves(
        cls,
        h: HierarchyGraph,
        leaf_positions: np.ndarray,
        leaf_velocities: np.ndarray,
        forces: np.ndarray,
        gravity: Sequence[float],
        collisions: tuple[np.ndarray, np.ndarray] | None = None,
        material_pairs: frozenset | None = None,
    ) -> "StepInput":
        """Re-aggregate every frame of a leaf history (oldest first) onto the hierarchy."""
        leaf_positions = np.asarray(leaf_positions, dtype=np.float64)
        leaf_velocities = np.asarray(leaf_velocities, dtype=np.float64)
        states = [reaggregate(h, x, v) for x, v in zip(leaf_positions, leaf_velocities)]
        return cls(
            h,
            np.stack([s[0] for s in states]),
            np.stack([s[1] for s in states]),
            forces,
            np.asarray(gravity, dtype=np.float64),
            collisions,
            material_pairs,
        )


@dataclass(eq=False)
class StepOutput:
    local: np.ndarray
    world: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    trace: object = field(default=None, repr=False)


def collision_index(
    positions: np.ndarray,
    object_id: Sequence[int],
    radius: float,
    self_collisions: bool = False,
    material_pairs: frozenset | set | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Directed (sender, receiver) arrays of leaf pairs closer than `radius`.

    Pairs in different objects always collide; with `self_collisions`, pairs of
    the same object collide unless a material relation joins them.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(positions)):
        raise InvalidArgumentError("collision search needs finite positions")
    obj = np.asarray(object_id, dtype=np.int64)
    pairs = neighbour_pairs(positions, radius)
    i, j = pairs[:, 0], pairs[:, 1]
    keep = obj[i] != obj[j]
    if self_collisions:
        joined = material_pairs or frozenset()
        unjoined = np.array(
            [(a, b) not in joined and (b, a) not in joined for a, b in zip(i.tolist(), j.tolist())],
            dtype=bool,
        )
        keep |= (obj[i] == obj[j]) & unjoined.reshape(-1)
    i, j = i[keep], j[keep]
    src = np.concatenate([i, j])
    dst = np.concatenate([j, i])
    order = np.lexsort((src, dst))
    return src[order], dst[order]


def collision_pairs(
    positions: np.ndarray,
    object_id: Sequence[int],
    radius: float,
    self_collisions: bool = False,
    material_pairs: frozenset | set | None = None,
    material_dim: int = 1,
) -> list[Relation]:
    src, dst = collision_index(positions, object_id, radius, self_collisions, material_pairs)
    zero = (0.0,) * material_dim
    return [Relation(int(s), int(r), zero, COLLISION) for s, r in zip(src, dst)]


def _scatter(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n, values.shape[1]))
    if len(index):
        np.add.at(out, index, values)
    return out


def node_features(
    h: HierarchyGraph,
    positions: np.ndarray,
    velocities: np.ndarray,
    stats: NormStats,
    forces: np.ndarray | None = None,
) -> np.ndarray:
    """Per-node inputs: position relative to the object's leaf centroid, scaled
    velocity, log mass and level (plus scaled leaf forces when given)."""
    n_leaves = h.n_leaves
    levels = h.level_array
    labels, inverse = np.unique(np.asarray(h.object_id), return_inverse=True)
    leaf_group = inverse[:n_leaves]
    sums = np.zeros((len(labels), 3))
    np.add.at(sums, leaf_group, positions[:n_leaves])
    counts = np.bincount(leaf_group, minlength=len(labels))
    centroid = sums / counts[:, None]
    parts = [
        positions - centroid[inverse],
        velocities / stats.velocity_scale(levels),
        np.log(h.node_masses())[:, None],
        levels[:, None].astype(np.float64),
    ]
    if forces is not None:
        padded = np.zeros((h.n_nodes, 3))
        padded[:n_leaves] = forces / stats.force_scale
        parts.append(padded)
    return np.hstack(parts)


class HrnModel:
    """Parameters, configuration and normalization stats of one graph model."""

    def __init__(self, cfg: ModelConfig, params: ModelParams, stats: NormStats):
        if cfg.variant == "mlp":
            raise InvalidArgumentError("use MlpModel for the mlp-baseline variant")
        self.cfg = cfg
        self.params = params
        self.stats = stats
        for name, shape in self.param_shapes(cfg).items():
            if name not in params or params.values[name].shape != shape:
                raise InvalidArgumentError(f"parameter {name} missing or not shaped {shape}")

    @staticmethod
    def specs(cfg: ModelConfig) -> dict[str, MlpSpec]:
        hidden = (cfg.hidden,) * cfg.effect_layers
        e = cfg.effect_dim
        specs = {}
        if not cfg.has(NO_PHI_F):
            specs["phi_f"] = MlpSpec((FEATURE_DIM + 3, *hidden, e))
        if not cfg.has(NO_PHI_C):
            specs["phi_c"] = MlpSpec((2 * FEATURE_DIM + 3, *hidden, e))
        if not cfg.has(NO_PHI_H):
            specs["phi_h"] = MlpSpec((FEATURE_DIM * cfg.history, *hidden, e))
        eta_in = 2 * cfg.node_dim + 3 + cfg.material_dim + e + len(STAGE_TAGS)
        specs["eta"] = MlpSpec((eta_in, *hidden, e))
        specs["psi"] = MlpSpec((cfg.node_dim + e + 3, *(cfg.hidden,) * cfg.psi_layers, 3))
        return specs

    @classmethod
    def param_shapes(cls, cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for name, spec in cls.specs(cfg).items():
            shapes.update(spec.param_shapes(name))
        return shapes

    @classmethod
    def create(cls, cfg: ModelConfig, stats: NormStats, seed: int = 0) -> "HrnModel":
        rng = np.random.default_rng(seed)
        params = ModelParams()
        for name, spec in cls.specs(cfg).items():
            init_mlp(params, name, spec, rng)
        return cls(cfg, params, stats)

    @property
    def history(self) -> int:
        return self.cfg.history

    def spec(self, name: str) -> MlpSpec:
        return self.specs(self.cfg)[name]

    def step(self, inp: StepInput) -> StepOutput:
        return hrn_step(inp, self)

    def backward(self, out: StepOutput, grad_local: np.ndarray, grad_world: np.ndarray) -> None:
        hrn_backward(self, out, grad_local, grad_world)


def _run(model, name: str, x: np.ndarray) -> tuple[np.ndarray, Tape | None]:
    spec = model.spec(name)
    if len(x) == 0:
        return np.zeros((0, spec.n_out)), None
    return mlp_forward(spec, model.params, name, x)


def _back(model, tape: Tape | None, grad: np.ndarray) -> np.ndarray | None:
    if tape is None:
        return None
    return backward(tape, model.params, grad)


def phi_f(
    model: HrnModel,
    h: HierarchyGraph,
    features: np.ndarray,
    forces: np.ndarray,
    nodes: np.ndarray | None = None,
) -> tuple[np.ndarray, Tape | None]:
    """Force effects for leaf nodes from their state and (scaled) applied force."""
    nodes = np.arange(h.n_leaves) if nodes is None else np.asarray(nodes, dtype=np.int64)
    if nodes.size and (nodes.min() < 0 or nodes.max() >= h.n_leaves):
        raise InvalidArgumentError("phi_F only applies to leaf nodes")
    forces = np.asarray(forces, dtype=np.float64).reshape(-1, 3)
    if len(forces) != len(nodes):
        raise InvalidArgumentError("need one force per node")
    return _run(model, "phi_f", np.hstack([features[nodes, :FEATURE_DIM], forces]))


def phi_c(
    model: HrnModel,
    features: np.ndarray,
    positions: np.ndarray,
    edges: tuple[np.ndarray, np.ndarray] | Sequence[Relation],
) -> tuple[np.ndarray, Tape | None]:
    """Per-pair collision effects; the caller sums them onto the receivers."""
    if isinstance(edges, tuple):
        src, dst = (np.asarray(a, dtype=np.int64) for a in edges)
    else:
        if any(rel.kind != COLLISION for rel in edges):
            raise InvalidArgumentError("phi_C needs collision relations")
        src = np.array([rel.sender for rel in edges], dtype=np.int64)
        dst = np.array([rel.receiver for rel in edges], dtype=np.int64)
    x = np.hstack(
        [
            features[dst, :FEATURE_DIM],
            features[src, :FEATURE_DIM],
            (positions[src] - positions[dst]) / model.cfg.radius,
        ]
    ).reshape(len(src), 2 * FEATURE_DIM + 3)
    return _run(model, "phi_c", x)


def phi_h(model: HrnModel, history: Sequence[np.ndarray]) -> tuple[np.ndarray, Tape | None]:
    """History effects from leaf features of frames (t-T, t], oldest first."""
    if len(history) != model.cfg.history:
        raise InvalidArgumentError(
            f"phi_H needs {model.cfg.history} frames, got {len(history)}"
        )
    return _run(model, "phi_h", np.hstack([f[:, :FEATURE_DIM] for f in history]))


@dataclass(eq=False)
class _Stage:
    kind: str
    src: np.ndarray
    dst: np.ndarray
    tape: Tape | None


@dataclass(eq=False)
class EtaTrace:
    n_nodes: int
    effect_offset: int
    flat: bool
    stages: list[_Stage] = field(default_factory=list)


def _stage(
    model: HrnModel,
    kind: str,
    features: np.ndarray,
    positions: np.ndarray,
    edges: tuple[np.ndarray, np.ndarray, np.ndarray],
    sender_effects: np.ndarray,
    trace: EtaTrace,
) -> np.ndarray:
    src, dst, material = edges
    tag = np.zeros((len(src), len(STAGE_TAGS)))
    tag[:, STAGE_TAGS[kind]] = 1.0
    x = np.hstack(
        [
            features[src],
            features[dst],
            positions[src] - positions[dst],
            material,
            sender_effects[src],
            tag,
        ]
    )
    out, tape = _run(model, "eta", x)
    trace.stages.append(_Stage(kind, src, dst, tape))
    return _scatter(dst, out, trace.n_nodes)


def _sibling_edges(h: HierarchyGraph, extra: tuple[np.ndarray, np.ndarray] | None):
    src, dst, material = h.edges(WITHIN_SIBLING)
    if extra is None or not len(extra[0]):
        return src, dst, material
    return (
        np.concatenate([src, extra[0]]),
        np.concatenate([dst, extra[1]]),
        np.vstack([material, np.zeros((len(extra[0]), h.material_dim))]),
    )


def eta(
    model: HrnModel,
    h: HierarchyGraph,
    features: np.ndarray,
    positions: np.ndarray,
    e0: np.ndarray,
    extra_sibling_edges: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[np.ndarray, EtaTrace]:
    """Three-stage effect propagation with one shared MLP and a stage tag.

    Flat graphs run a single within-sibling stage driven by e0 directly.
    """
    n, e_dim = h.n_nodes, model.cfg.effect_dim
    e0 = np.asarray(e0, dtype=np.float64)
    if e0.shape != (n, e_dim):
        raise InvalidArgumentError(f"input effects must be ({n}, {e_dim}), got {e0.shape}")
    if features.shape[0] != n or positions.shape != (n, 3):
        raise InvalidArgumentError("node features and positions must cover every node")
    if h.material_dim != model.cfg.material_dim:
        raise InvalidArgumentError(
            f"graph material_dim {h.material_dim} != model material_dim {model.cfg.material_dim}"
        )
    offset = 2 * features.shape[1] + 3 + h.material_dim
    trace = EtaTrace(n, offset, h.flat)
    siblings = _sibling_edges(h, extra_sibling_edges)
    if h.flat:
        return _stage(model, WITHIN_SIBLING, features, positions, siblings, e0, trace), trace
    e_l2a = _stage(
        model, LEAF_TO_ANCESTOR, features, positions, h.edges(LEAF_TO_ANCESTOR), e0, trace
    )
    e_ws = _stage(model, WITHIN_SIBLING, features, positions, siblings, e_l2a, trace)
    e_a2d = _stage(
        model, ANCESTOR_TO_DESCENDANT, features, positions,
        h.edges(ANCESTOR_TO_DESCENDANT), e_l2a + e_ws, trace,
    )
    return e_l2a + e_ws + e_a2d, trace


def _stage_backward(model: HrnModel, trace: EtaTrace, stage: _Stage, grad_out: np.ndarray):
    """Gradient of one stage's scattered output w.r.t. its sender effects."""
    e_dim = model.cfg.effect_dim
    g_in = _back(model, stage.tape, grad_out[stage.dst])
    if g_in is None:
        return np.zeros((trace.n_nodes, e_dim))
    effect = g_in[:, trace.effect_offset : trace.effect_offset + e_dim]
    return _scatter(stage.src, effect, trace.n_nodes)


def eta_backward(model: HrnModel, trace: EtaTrace, grad_e: np.ndarray) -> np.ndarray:
    if trace.flat:
        return _stage_backward(model, trace, trace.stages[0], grad_e)
    l2a, ws, a2d = trace.stages
    from_a2d = _stage_backward(model, trace, a2d, grad_e)
    grad_ws = grad_e + from_a2d
    from_ws = _stage_backward(model, trace, ws, grad_ws)
    grad_l2a = grad_e + from_a2d + from_ws
    return _stage_backward(model, trace, l2a, grad_l2a)


def psi(
    model: HrnModel,
    h: HierarchyGraph,
    features: np.ndarray,
    effects: np.ndarray,
    gravity: Sequence[float],
) -> tuple[np.ndarray, Tape | None]:
    """Local delta per node; gravity reaches roots only."""
    g = np.asarray(gravity, dtype=np.float64).reshape(3) / STANDARD_GRAVITY
    g_in = np.where(h.is_root[:, None], g[None, :], 0.0)
    z, tape = _run(model, "psi", np.hstack([features, effects, g_in]))
    return z * model.stats.local_scale(h.level_array), tape


def local_to_world(h: HierarchyGraph, local: np.ndarray) -> np.ndarray:
    local = np.asarray(local, dtype=np.float64)
    if local.shape != (h.n_nodes, 3):
        raise InvalidArgumentError(f"local deltas must be ({h.n_nodes}, 3), got {local.shape}")
    world = local.copy()
    desc, anc = h.ancestor_pairs
    if desc.size:
        np.add.at(world, desc, local[anc])
    return world


def world_to_local(h: HierarchyGraph, world: np.ndarray) -> np.ndarray:
    """Inverse of `local_to_world`: each node's delta relative to its parent."""
    world = np.asarray(world, dtype=np.float64)
    parent = h.parent_array
    local = world.copy()
    has_parent = parent >= 0
    local[has_parent] -= world[parent[has_parent]]
    return local


def _world_transpose(h: HierarchyGraph, grad_world: np.ndarray) -> np.ndarray:
    grad = grad_world.copy()
    desc, anc = h.ancestor_pairs
    if desc.size:
        np.add.at(grad, anc, grad_world[desc])
    return grad


@dataclass(eq=False)
class _StepTrace:
    h: HierarchyGraph
    local_scale: np.ndarray
    psi_tape: Tape | None
    psi_effect: slice
    eta: EtaTrace
    phi_f_tape: Tape | None = None
    phi_c_tape: Tape | None = None
    phi_c_dst: np.ndarray | None = None
    phi_h_tape: Tape | None = None


def _check_input(inp: StepInput, cfg: ModelConfig) -> None:
    if inp.n_frames != cfg.history:
        raise InvalidArgumentError(
            f"model expects {cfg.history} frames of history, got {inp.n_frames}"
        )
    for name in ("positions", "velocities", "forces"):
        if not np.all(np.isfinite(getattr(inp, name))):
            raise InvalidArgumentError(f"step input {name} are not finite")


def hrn_step(inp: StepInput, model: HrnModel) -> StepOutput:
    cfg, stats, h = model.cfg, model.stats, inp.hierarchy
    _check_input(inp, cfg)
    n_leaves, n = h.n_leaves, h.n_nodes
    frames = [
        node_features(h, inp.positions[t], inp.velocities[t], stats)
        for t in range(cfg.history)
    ]
    current = frames[-1]
    x = inp.positions[-1]
    forces = inp.forces / stats.force_scale
    features = current
    if cfg.has(NO_PHI_F):
        features = np.hstack([current, np.vstack([forces, np.zeros((n - n_leaves, 3))])])

    if inp.collisions is not None:
        src_c, dst_c = (np.asarray(a, dtype=np.int64) for a in inp.collisions)
    else:
        src_c, dst_c = collision_index(
            x[:n_leaves],
            h.object_id[:n_leaves],
            cfg.radius,
            cfg.self_collisions,
            inp.material_pairs,
        )

    e0 = np.zeros((n, cfg.effect_dim))
    tapes: dict[str, Tape | None] = {}
    if not cfg.has(NO_PHI_F):
        e_f, tapes["phi_f"] = phi_f(model, h, current, forces)
        e0[:n_leaves] += e_f
    if not cfg.has(NO_PHI_C):
        e_c, tapes["phi_c"] = phi_c(model, current, x, (src_c, dst_c))
        e0 += _scatter(dst_c, e_c, n)
    if not cfg.has(NO_PHI_H):
        e_h, tapes["phi_h"] = phi_h(model, [f[:n_leaves] for f in frames])
        e0[:n_leaves] += e_h

    extra = (src_c, dst_c) if cfg.has(NO_PHI_C) else None
    effects, eta_trace = eta(model, h, features, x, e0, extra)
    local, psi_tape = psi(model, h, features, effects, inp.gravity)
    world = local_to_world(h, local)
    trace = _StepTrace(
        h=h,
        local_scale=stats.local_scale(h.level_array),
        psi_tape=psi_tape,
        psi_effect=slice(features.shape[1], features.shape[1] + cfg.effect_dim),
        eta=eta_trace,
        phi_f_tape=tapes.get("phi_f"),
        phi_c_tape=tapes.get("phi_c"),
        phi_c_dst=dst_c,
        phi_h_tape=tapes.get("phi_h"),
    )
    leaf_world = world[:n_leaves]
    return StepOutput(local, world, x[:n_leaves] + leaf_world, leaf_world.copy(), trace)


def hrn_backward(
    model: HrnModel, out: StepOutput, grad_local: np.ndarray, grad_world: np.ndarray
) -> None:
    """Accumulate parameter gradients of a loss given d/d(local) and d/d(world)."""
    trace = out.trace
    if not isinstance(trace, _StepTrace):
        raise InvalidStateError("step output carries no hrn trace")
    h = trace.h
    n_leaves = h.n_leaves
    g_local = np.asarray(grad_local, dtype=np.float64) + _world_transpose(
        h, np.asarray(grad_world, dtype=np.float64)
    )
    g_psi = _back(model, trace.psi_tape, g_local * trace.local_scale)
    if g_psi is None:
        return
    g_e0 = eta_backward(model, trace.eta, g_psi[:, trace.psi_effect])
    _back(model, trace.phi_f_tape, g_e0[:n_leaves])
    if trace.phi_c_dst is not None:
        _back(model, trace.phi_c_tape, g_e0[trace.phi_c_dst])
    _back(model, trace.phi_h_tape, g_e0[:n_leaves])


class MlpModel:
    """Whole-scene MLP mapping every particle's state history and force to its delta."""

    def __init__(self, cfg: ModelConfig, params: ModelParams, stats: NormStats):
        self._check_config(cfg)
        self.cfg = cfg
        self.params = params
        self.stats = stats
        for name, shape in self.param_shapes(cfg).items():
            if name not in params or params.values[name].shape != shape:
                raise InvalidArgumentError(f"parameter {name} missing or not shaped {shape}")

    @staticmethod
    def _check_config(cfg: ModelConfig) -> None:
        if cfg.variant != "mlp":
            raise InvalidArgumentError("MlpModel needs the mlp-baseline ablation")
        if not cfg.n_particles:
            raise InvalidArgumentError("the MLP baseline needs n_particles")

    @classmethod
    def specs(cls, cfg: ModelConfig) -> dict[str, MlpSpec]:
        cls._check_config(cfg)
        n_in = cfg.n_particles * (PARTICLE_DIM * cfg.history + 3)
        hidden = (cfg.hidden,) * cfg.psi_layers
        return {"mlp": MlpSpec((n_in, *hidden, cfg.n_particles * 3))}

    @classmethod
    def param_shapes(cls, cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
        return cls.specs(cfg)["mlp"].param_shapes("mlp")

    @classmethod
    def create(cls, cfg: ModelConfig, stats: NormStats, seed: int = 0) -> "MlpModel":
        rng = np.random.default_rng(seed)
        params = ModelParams()
        init_mlp(params, "mlp", cls.specs(cfg)["mlp"], rng)
        return cls(cfg, params, stats)

    @property
    def history(self) -> int:
        return self.cfg.history

    def spec(self, name: str) -> MlpSpec:
        return self.specs(self.cfg)[name]

    def step(self, inp: StepInput) -> StepOutput:
        return baseline_mlp_step(inp, self)

    def backward(self, out: StepOutput, grad_local: np.ndarray, grad_world: np.ndarray) -> None:
        tape, scale = out.trace
        grad = (np.asarray(grad_local) + np.asarray(grad_world)) * scale
        _back(self, tape, grad.reshape(1, -1))


def baseline_mlp_step(inp: StepInput, model: MlpModel) -> StepOutput:
    cfg, stats, h = model.cfg, model.stats, inp.hierarchy
    _check_input(inp, cfg)
    n_leaves = h.n_leaves
    if n_leaves != cfg.n_particles or h.n_nodes != n_leaves:
        raise InvalidArgumentError(
            f"MLP baseline was built for {cfg.n_particles} particles, got a graph "
            f"of {h.n_nodes} nodes and {n_leaves} leaves"
        )
    levels = np.zeros(n_leaves, dtype=np.int64)
    log_mass = np.log(h.node_masses())[:, None]
    per_frame = []
    for t in range(cfg.history):
        x = inp.positions[t]
        velocity = inp.velocities[t] / stats.velocity_scale(levels)
        per_frame.append(np.hstack([x - x.mean(axis=0), velocity, log_mass]))
    rows = np.hstack(per_frame + [inp.forces / stats.force_scale])
    z, tape = _run(model, "mlp", rows.reshape(1, -1))
    scale = stats.local_scale(levels)
    delta = z.reshape(n_leaves, 3) * scale
    current = inp.positions[-1]
    return StepOutput(delta, delta.copy(), current + delta, delta.copy(), (tape, scale))


def create_model(cfg: ModelConfig, stats: NormStats, seed: int = 0) -> HrnModel | MlpModel:
    cls = MlpModel if cfg.variant == "mlp" else HrnModel
    return cls.create(cfg, stats, seed)


def model_from_params(
    cfg: ModelConfig, params: ModelParams, stats: NormStats
) -> HrnModel | MlpModel:
    cls = MlpModel if cfg.variant == "mlp" else HrnModel
    return cls(cfg, params, stats)


def graph_for(cfg: ModelConfig, scene: SceneGraph, hierarchy: HierarchyGraph) -> HierarchyGraph:
    """The graph a model variant runs on: the hierarchy, or a leaf-only graph."""
    variant = cfg.variant
    if variant == "hrn":
        return hierarchy
    return flat_graph(scene, sparse=variant != "flat")
