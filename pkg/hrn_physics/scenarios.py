"""
Scenario protocols producing ground-truth trajectories.

Every scenario places objects, then repeatedly applies Gaussian-dispersed
impulsive forces and teleports the scene back when an object leaves the
surface or room bounds. The random stream is a single numpy Generator seeded
from the trajectory seed, so a seed fully determines the trajectory.
"""

from dataclasses import dataclass, field, replace
from typing import Any, Callable

import numpy as np

from hrn_physics.errors import InvalidArgumentError
from hrn_physics.graph import (
    HierarchyConfig,
    HierarchyGraph,
    Particle,
    Relation,
    SceneGraph,
    build_hierarchy,
    reaggregate,
)
from hrn_physics.sim import (
    STATIC_MASS,
    ShapeSpec,
    SimConfig,
    SimState,
    Surface,
    gen_shape,
    springs_from_relations,
    step,
)

SCENARIOS = (
    "throw-one",
    "zero-g-collide",
    "multi-on-plane",
    "cloth-drop",
    "cloth-hang",
    "tower",
)

COMMON_DEFAULTS: dict[str, Any] = {
    "spacing": 0.25,
    "shapes": None,
    "soft": False,
    "gravity": None,
    "mass_scale_range": [1.0, 1.0],
    "force_interval": [15, 40],
    "force_speed": [1.5, 3.0],
    "surface": "plane",
    "surface_extent": 2.5,
    "episode_length": None,
    "drift_speed": 0.0,
    "n_objects": 2,
    "n_cubes": 5,
    "self_contact": False,
}

SCENARIO_DEFAULTS: dict[str, dict[str, Any]] = {
    "throw-one": {},
    "zero-g-collide": {"gravity": [0.0, 0.0, 0.0], "force_speed": [0.5, 1.5]},
    "multi-on-plane": {"force_speed": [0.5, 1.5]},
    "cloth-drop": {"self_contact": True, "force_interval": [30, 30]},
    "cloth-hang": {"self_contact": True, "force_interval": [30, 30]},
    "tower": {"force_interval": [40, 80], "force_speed": [1.0, 2.0]},
}


@dataclass(eq=False)
class TrajectoryHeader:
    scenario: str
    seed: int
    dt: float
    gravity: tuple[float, float, float]
    scene: SceneGraph
    hierarchy: HierarchyGraph
    static_mask: np.ndarray
    spacing: float
    resets: list[int] = field(default_factory=list)
    stiffness_changes: list[tuple[int, int, float]] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def n_particles(self) -> int:
        return self.scene.n_particles

    @property
    def masses(self) -> np.ndarray:
        return self.scene.masses()

    @property
    def object_id(self) -> np.ndarray:
        return np.array(self.scene.object_id, dtype=np.int64)


@dataclass(eq=False)
class Trajectory:
    header: TrajectoryHeader
    positions: np.ndarray
    velocities: np.ndarray
    forces: np.ndarray

    def __post_init__(self):
        shape = self.positions.shape
        if len(shape) != 3 or shape[2] != 3 or shape[1] != self.header.n_particles:
            raise InvalidArgumentError(
                f"frames must be (n_frames, {self.header.n_particles}, 3), got {shape}"
            )
        if self.velocities.shape != shape or self.forces.shape != shape:
            raise InvalidArgumentError("positions, velocities and forces differ in shape")
        if shape[0] < 1:
            raise InvalidArgumentError("a trajectory needs at least one frame")

    @property
    def n_frames(self) -> int:
        return int(self.positions.shape[0])

    @property
    def n_particles(self) -> int:
        return self.header.n_particles

    def stiffness_at(self, frame: int) -> dict[int, float]:
        current: dict[int, float] = {}
        for when, obj, stiffness in self.header.stiffness_changes:
            if when <= frame:
                current[obj] = stiffness
        return current

    def hierarchy_at(self, frame: int) -> HierarchyGraph:
        return self.header.hierarchy.restiffened(self.stiffness_at(frame))

    def spans_reset(self, first: int, last: int) -> bool:
        """True if any transition between frames first..last crosses a teleport."""
        return any(first < r <= last for r in self.header.resets)


@dataclass
class _Body:
    spec: ShapeSpec
    fragment: SceneGraph
    static: bool = False
    pinned: tuple[int, ...] = ()


def _shape_from(value: ShapeSpec | dict) -> ShapeSpec:
    if isinstance(value, ShapeSpec):
        return value
    return ShapeSpec(**value)


def _resolve_options(name: str, overrides: dict | None) -> dict[str, Any]:
    if name not in SCENARIOS:
        raise InvalidArgumentError(
            f"Unknown scenario: {name} (expected one of {', '.join(SCENARIOS)})"
        )
    options = dict(COMMON_DEFAULTS)
    options.update(SCENARIO_DEFAULTS[name])
    for key, value in (overrides or {}).items():
        if key not in options:
            raise InvalidArgumentError(f"Unknown override for {name}: {key}")
        options[key] = value
    return options


def _dynamic_shapes(name: str, options: dict[str, Any]) -> list[ShapeSpec]:
    spacing = options["spacing"]
    if options["shapes"]:
        return [_shape_from(s) for s in options["shapes"]]
    cube = ShapeSpec("cube", (2 * spacing,) * 3, spacing)
    if name == "throw-one":
        return [cube]
    if name == "zero-g-collide":
        return [cube, cube]
    if name == "multi-on-plane":
        return [cube] * int(options["n_objects"])
    if name in ("cloth-drop", "cloth-hang"):
        sheet = 6 * spacing
        return [ShapeSpec("cloth-sheet", (sheet, 0.0, sheet), spacing, stiffness=0.9)]
    small = ShapeSpec("cube", (spacing,) * 3, spacing)
    return [small] * int(options["n_cubes"])


class _Scene:
    """Mutable generation-time view over the assembled scene."""

    def __init__(self, bodies: list[_Body], spacing: float):
        self.bodies = bodies
        self.spacing = spacing
        self.slices: list[slice] = []
        offset = 0
        for body in bodies:
            n = body.fragment.n_particles
            self.slices.append(slice(offset, offset + n))
            offset += n
        self.n = offset

    def template(self) -> SceneGraph:
        """Bodies in their own lattice coordinates (surfaces keep world placement)."""
        particles: list[Particle] = []
        relations: list[Relation] = []
        object_id: list[int] = []
        for obj, (body, sl) in enumerate(zip(self.bodies, self.slices)):
            for p in body.fragment.particles:
                mass = STATIC_MASS if body.static else p.mass
                particles.append(Particle(p.position, p.velocity, mass))
            for rel in body.fragment.relations:
                relations.append(
                    replace(rel, sender=rel.sender + sl.start, receiver=rel.receiver + sl.start)
                )
            object_id.extend([obj] * body.fragment.n_particles)
        for body, sl in zip(self.bodies, self.slices):
            for local in body.pinned:
                p = particles[sl.start + local]
                particles[sl.start + local] = Particle(p.position, p.velocity, STATIC_MASS)
        return SceneGraph(particles, relations, object_id)

    def local_positions(self) -> list[np.ndarray]:
        return [body.fragment.positions() for body in self.bodies]


def _gaussian_dispersion(
    positions: np.ndarray, center: np.ndarray, width: float
) -> np.ndarray:
    d2 = ((positions - center) ** 2).sum(axis=1)
    weights = np.exp(-d2 / (2.0 * width * width))
    return weights / weights.sum()


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


class _Protocol:
    def __init__(
        self,
        name: str,
        options: dict[str, Any],
        sim_cfg: SimConfig,
        rng: np.random.Generator,
    ):
        self.name = name
        self.options = options
        self.sim_cfg = sim_cfg
        self.rng = rng
        self.spacing = float(options["spacing"])
        gravity = options["gravity"]
        self.gravity = np.array(sim_cfg.gravity if gravity is None else gravity, dtype=float)

        shapes = _dynamic_shapes(name, options)
        low, high = options["mass_scale_range"]
        bodies = []
        self.surface: Surface | None = None
        if name in ("throw-one", "multi-on-plane", "cloth-drop", "tower"):
            extent = float(options["surface_extent"])
            kind = options["surface"]
            height = 0.0 if kind == "plane" else min(extent / 4, self.spacing * 4)
            surface_spec = ShapeSpec(kind, (extent, height, extent), self.spacing)
            self.surface = Surface(kind, (0.0, 0.0, 0.0), surface_spec.extent, surface_spec.steps)
            bodies.append(_Body(surface_spec, gen_shape(surface_spec), static=True))
        for spec in shapes:
            if low != 1.0 or high != 1.0:
                spec = replace(spec, mass_total=spec.mass_total * rng.uniform(low, high))
            pinned: tuple[int, ...] = ()
            fragment = gen_shape(spec)
            if name == "cloth-hang":
                pos = fragment.positions()
                front = np.flatnonzero(np.isclose(pos[:, 2], pos[:, 2].min()))
                left = int(front[np.argmin(pos[front, 0])])
                right = int(front[np.argmax(pos[front, 0])])
                pinned = (left, right)
            bodies.append(_Body(spec, fragment, pinned=pinned))
        self.scene = _Scene(bodies, self.spacing)
        self.dynamic_objects = [i for i, b in enumerate(bodies) if not b.static]

        template = self.scene.template()
        self.template = template
        self.masses = template.masses()
        self.object_id = np.array(template.object_id, dtype=np.int64)
        static = np.zeros(self.scene.n, dtype=bool)
        for body, sl in zip(bodies, self.scene.slices):
            if body.static:
                static[sl] = True
            for local in body.pinned:
                static[sl.start + local] = True
        self.static_mask = static
        dynamic_mass = self.masses[~static]
        self.particle_mass = float(dynamic_mass.min()) if dynamic_mass.size else 1.0
        self.stiffness = {obj: bodies[obj].spec.stiffness for obj in self.dynamic_objects}
        self.stiffness_changes: list[tuple[int, int, float]] = []

    # placement -----------------------------------------------------------

    def _contact_height(self) -> float:
        return self.spacing

    def place(self) -> np.ndarray:
        positions = np.zeros((self.scene.n, 3))
        local = self.scene.local_positions()
        resting = self.template.positions()
        for body, sl in zip(self.scene.bodies, self.scene.slices):
            if body.static:
                positions[sl] = resting[sl]
        spread = 0.15 * float(self.options["surface_extent"])
        size = max(self.scene.bodies[o].spec.extent[0] for o in self.dynamic_objects)
        stack_top = None
        for rank, obj in enumerate(self.dynamic_objects):
            pts = local[obj]
            sl = self.scene.slices[obj]
            if self.name == "throw-one":
                x, z = self.rng.uniform(-spread, spread, size=2)
                lift = self.rng.uniform(1.0, 3.0) * self.spacing
                y = self._ground_under(x, z) + lift - pts[:, 1].min()
            elif self.name == "zero-g-collide":
                side = -1.0 if rank == 0 else 1.0
                x = side * (size + self.spacing) + self.rng.normal(0.0, 0.1 * self.spacing)
                y = 1.0 + self.rng.normal(0.0, 0.2 * self.spacing)
                z = self.rng.normal(0.0, 0.2 * self.spacing)
            elif self.name == "multi-on-plane":
                angle = 2 * np.pi * rank / len(self.dynamic_objects) + self.rng.uniform(0, 0.5)
                radius = size + self.spacing
                x, z = radius * np.cos(angle), radius * np.sin(angle)
                lift = self.rng.uniform(0.5, 2.0) * self.spacing
                y = self._ground_under(x, z) + lift - pts[:, 1].min()
            elif self.name == "cloth-drop":
                x, z = self.rng.uniform(-spread, spread, size=2)
                y = self._ground_under(x, z) + self.rng.uniform(4.0, 8.0) * self.spacing
            elif self.name == "cloth-hang":
                x, z = self.rng.uniform(-0.5, 0.5, size=2)
                y = self.rng.uniform(1.5, 2.5)
            else:
                x, z = self.rng.uniform(-0.1, 0.1, size=2) * self.spacing
                if stack_top is None:
                    stack_top = self._ground_under(0.0, 0.0)
                # resting on the cube below at the contact distance
                y = stack_top - pts[:, 1].min()
                stack_top = y + pts[:, 1].max() + self._contact_height()
            positions[sl] = pts + np.array([x, y, z])
        return positions

    def _ground_under(self, x: float, z: float) -> float:
        if self.surface is None:
            return 0.0
        h = self.surface.height(np.array([x]), np.array([z]))[0]
        return (0.0 if np.isnan(h) else float(h)) + self._contact_height()

    def initial_velocities(self, positions: np.ndarray) -> np.ndarray:
        velocities = np.zeros_like(positions)
        drift = float(self.options["drift_speed"])
        if self.name == "zero-g-collide" and drift:
            for rank, obj in enumerate(self.dynamic_objects):
                side = -1.0 if rank == 0 else 1.0
                velocities[self.scene.slices[obj], 0] = side * drift
        return velocities

    def out_of_bounds(self, positions: np.ndarray) -> bool:
        for obj in self.dynamic_objects:
            center = positions[self.scene.slices[obj]].mean(axis=0)
            if self.surface is not None:
                half = self.surface.extent[0] / 2
                if abs(center[0]) > half or abs(center[2]) > half or center[1] < -1.0:
                    return True
            elif np.abs(center).max() > 3.0:
                return True
        return False

    def restiffen(self, frame: int) -> None:
        if not self.options["soft"]:
            return
        for obj in self.dynamic_objects:
            self.stiffness[obj] = float(self.rng.uniform(0.1, 0.9))
            self.stiffness_changes.append((frame, obj, self.stiffness[obj]))

    # forces --------------------------------------------------------------

    def next_force_frame(self, frame: int) -> int:
        low, high = self.options["force_interval"]
        return frame + int(self.rng.integers(int(low), int(high) + 1))

    def impulse(self, positions: np.ndarray) -> np.ndarray:
        forces = np.zeros_like(positions)
        low, high = self.options["force_speed"]
        width = self.sim_cfg.force_kernel_width * self.spacing
        if self.name in ("zero-g-collide", "multi-on-plane"):
            targets = list(self.dynamic_objects)
            if self.rng.random() < 0.5:
                targets = [targets[int(self.rng.integers(len(targets)))]]
        elif self.name == "tower":
            targets = [self.dynamic_objects[int(self.rng.integers(len(self.dynamic_objects)))]]
        else:
            targets = list(self.dynamic_objects)
        centers = {o: positions[self.scene.slices[o]].mean(axis=0) for o in self.dynamic_objects}
        toward = self.rng.random() < 0.5
        for obj in targets:
            sl = self.scene.slices[obj]
            pts = positions[sl]
            dynamic = ~self.static_mask[sl]
            if self.name in ("zero-g-collide", "multi-on-plane"):
                others = [centers[o] for o in self.dynamic_objects if o != obj]
                direction = _unit(np.mean(others, axis=0) - centers[obj])
                if not toward:
                    direction = -direction
                direction = direction + self.rng.normal(0.0, 0.2, size=3)
                if self.name == "multi-on-plane":
                    direction[1] = 0.0
            elif self.name == "tower":
                direction = np.array([self.rng.normal(), 0.0, self.rng.normal()])
            else:
                lateral = self.rng.normal(0.0, 0.5, size=2)
                direction = np.array([lateral[0], 1.0, lateral[1]])
            direction = _unit(direction)
            anchor = pts[int(self.rng.integers(len(pts)))]
            weights = _gaussian_dispersion(pts, anchor, width) * dynamic
            if weights.sum() <= 0:
                continue
            weights /= weights.sum()
            mass = float(self.masses[sl][dynamic].sum())
            magnitude = mass * self.rng.uniform(low, high) / self.sim_cfg.dt
            forces[sl] += magnitude * weights[:, None] * direction[None, :]
        return forces

    # simulation ----------------------------------------------------------

    def initial_state(self, positions: np.ndarray) -> SimState:
        springs = springs_from_relations(self.template, positions, self.static_mask)
        pairs = frozenset((int(i), int(j)) for i, j in zip(springs[0], springs[1]))
        return SimState(
            positions=positions,
            velocities=self.initial_velocities(positions),
            masses=self.masses,
            object_id=self.object_id,
            static_mask=self.static_mask,
            springs=springs,
            gravity=self.gravity,
            k_spring=self.sim_cfg.spring_constant(self.particle_mass),
            damping=self.sim_cfg.damping_constant(self.particle_mass),
            surfaces=() if self.surface is None else (self.surface,),
            restitution=self.sim_cfg.restitution,
            friction=self.sim_cfg.friction,
            contact_distance=self.spacing,
            self_contact=bool(self.options["self_contact"]),
            spring_pairs=pairs,
        )

    def with_stiffness(self, state: SimState) -> SimState:
        i, j, rest, stiffness = state.springs
        stiffness = stiffness.copy()
        for obj, value in self.stiffness.items():
            stiffness[self.object_id[i] == obj] = value
        return replace(state, springs=(i, j, rest, stiffness))


def gen_scenario(
    name: str,
    overrides: dict | None = None,
    seed: int = 0,
    n_frames: int = 200,
    sim_cfg: SimConfig | None = None,
    hierarchy_cfg: HierarchyConfig | None = None,
    print_fn: Callable[..., None] | None = None,
) -> Trajectory:
    """Generate one trajectory of a named scenario, deterministic per seed."""
    if n_frames < 2:
        raise InvalidArgumentError(f"n_frames must be >= 2, got {n_frames}")
    options = _resolve_options(name, overrides)
    sim_cfg = sim_cfg or SimConfig()
    hierarchy_cfg = hierarchy_cfg or HierarchyConfig()
    rng = np.random.default_rng(seed)
    protocol = _Protocol(name, options, sim_cfg, rng)

    protocol.restiffen(0)
    state = protocol.with_stiffness(protocol.initial_state(protocol.place()))

    n = protocol.scene.n
    positions = np.zeros((n_frames, n, 3))
    velocities = np.zeros((n_frames, n, 3))
    forces = np.zeros((n_frames, n, 3))
    positions[0] = state.positions
    velocities[0] = state.velocities * sim_cfg.dt

    resets: list[int] = []
    episode = options["episode_length"]
    episode_start = 0
    force_frame = protocol.next_force_frame(0)
    dt_sub = sim_cfg.substep_dt
    for frame in range(n_frames - 1):
        applied = np.zeros((n, 3))
        if frame == force_frame:
            applied = protocol.impulse(state.positions)
            force_frame = protocol.next_force_frame(frame)
        forces[frame] = applied
        previous = state.positions
        for _ in range(sim_cfg.substeps):
            state = step(state, dt_sub, applied)
        nxt = frame + 1
        expired = episode is not None and nxt - episode_start >= int(episode)
        if protocol.out_of_bounds(state.positions) or expired:
            resets.append(nxt)
            episode_start = nxt
            protocol.restiffen(nxt)
            state = protocol.with_stiffness(protocol.initial_state(protocol.place()))
            positions[nxt] = state.positions
            velocities[nxt] = state.velocities * sim_cfg.dt
            force_frame = max(force_frame, protocol.next_force_frame(nxt))
        else:
            positions[nxt] = state.positions
            velocities[nxt] = state.positions - previous

    initial = {obj: s for when, obj, s in protocol.stiffness_changes if when == 0}
    template = _restiffened_scene(protocol.template, initial)
    hierarchy = build_hierarchy(template, hierarchy_cfg)
    scene = scene_at_frame(template, positions[0], velocities[0])
    hierarchy = hierarchy_with_states(hierarchy, positions[0], velocities[0])
    if print_fn is not None:
        print_fn(
            f"{name} seed={seed}: {n_frames} frames, {n} particles, "
            f"{len(protocol.scene.bodies)} objects, {len(resets)} resets"
        )
    header = TrajectoryHeader(
        scenario=name,
        seed=int(seed),
        dt=sim_cfg.dt,
        gravity=tuple(float(g) for g in protocol.gravity),
        scene=scene,
        hierarchy=hierarchy,
        static_mask=protocol.static_mask.copy(),
        spacing=protocol.spacing,
        resets=resets,
        stiffness_changes=list(protocol.stiffness_changes),
        config={"scenario": name, "overrides": _jsonable(overrides or {})},
    )
    return Trajectory(header, positions, velocities, forces)


def _restiffened_scene(scene: SceneGraph, stiffness_by_object: dict[int, float]) -> SceneGraph:
    if not stiffness_by_object:
        return scene
    relations = [
        replace(r, material=(stiffness_by_object[scene.object_id[r.sender]],) + r.material[1:])
        if scene.object_id[r.sender] in stiffness_by_object
        else r
        for r in scene.relations
    ]
    return SceneGraph(scene.particles, relations, scene.object_id)


def scene_at_frame(scene: SceneGraph, positions: np.ndarray, velocities: np.ndarray) -> SceneGraph:
    """Scene graph whose particle states are taken from one recorded frame."""
    particles = [
        Particle(tuple(x), tuple(v), p.mass)
        for x, v, p in zip(positions, velocities, scene.particles)
    ]
    return SceneGraph(particles, list(scene.relations), list(scene.object_id))


def hierarchy_with_states(
    h: HierarchyGraph, leaf_positions: np.ndarray, leaf_velocities: np.ndarray
) -> HierarchyGraph:
    """Hierarchy whose node states are re-aggregated from the given leaf states."""
    node_pos, node_vel = reaggregate(h, leaf_positions, leaf_velocities)
    masses = h.node_masses()
    nodes = [Particle(tuple(x), tuple(v), m) for x, v, m in zip(node_pos, node_vel, masses)]
    return replace(h, nodes=nodes)


def _jsonable(value: Any) -> Any:
    if isinstance(value, ShapeSpec):
        return {
            "kind": value.kind,
            "extent": list(value.extent),
            "spacing": value.spacing,
            "stiffness": value.stiffness,
            "mass_total": value.mass_total,
            "steps": value.steps,
        }
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value
