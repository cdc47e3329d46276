"""
Reference particle physics used to generate ground-truth trajectories.

Objects are spring lattices (stiff lattices stand in for rigid bodies), static
surfaces are analytic height fields sampled as heavy particles, and one call to
`step` is a single symplectic Euler update with projection contacts.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from hrn_physics.errors import InvalidArgumentError
from hrn_physics.graph import Particle, Relation, SceneGraph, WITHIN_SIBLING

SHAPE_KINDS = ("cube", "cuboid", "sphere", "plane", "slope", "stairs", "cloth-sheet")
SURFACE_KINDS = ("plane", "slope", "stairs")
STATIC_MASS = 1e6
NEIGHBOUR_FACTOR = 1.8

_CELL_OFFSETS = [
    (dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
]


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    extent: tuple[float, float, float]
    spacing: float
    stiffness: float = 1.0
    mass_total: float = 1.0
    steps: int = 4

    def __post_init__(self):
        object.__setattr__(self, "extent", tuple(float(v) for v in self.extent))
        if self.kind not in SHAPE_KINDS:
            raise InvalidArgumentError(f"Unknown shape kind: {self.kind}")
        if len(self.extent) != 3 or min(self.extent) < 0:
            raise InvalidArgumentError("extent must be a non-negative 3-vector")
        if self.spacing <= 0:
            raise InvalidArgumentError("spacing must be positive")
        if not 0 < self.stiffness <= 1:
            raise InvalidArgumentError(f"stiffness must be in (0, 1], got {self.stiffness}")
        if self.mass_total <= 0:
            raise InvalidArgumentError("mass_total must be positive")
        sized = [v for v in self._lattice_extent() if v > 0]
        if not sized or self.spacing > min(sized) + 1e-12:
            raise InvalidArgumentError(
                f"spacing {self.spacing} exceeds the smallest extent {self.extent}"
            )
        if self.kind == "stairs":
            if self.steps < 1:
                raise InvalidArgumentError("stairs need at least one step")
            if self.extent[1] / self.steps > self.spacing + 1e-12:
                raise InvalidArgumentError("stair rise must not exceed the spacing")

    @property
    def is_surface(self) -> bool:
        return self.kind in SURFACE_KINDS

    def _lattice_extent(self) -> tuple[float, float, float]:
        if self.kind in SURFACE_KINDS or self.kind == "cloth-sheet":
            return (self.extent[0], 0.0, self.extent[2])
        return self.extent


@dataclass(frozen=True)
class Surface:
    kind: str
    origin: tuple[float, float, float]
    extent: tuple[float, float, float]
    steps: int = 4

    def height(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Surface height under (x, z); NaN outside the footprint."""
        ox, oy, oz = self.origin
        ex, ey, ez = self.extent
        u = (x - ox) + ex / 2
        inside = (u >= 0) & (u <= ex) & (np.abs(z - oz) <= ez / 2)
        if self.kind == "plane":
            h = np.full_like(x, oy, dtype=np.float64)
        elif self.kind == "slope":
            h = oy + ey * np.clip(u / ex, 0.0, 1.0)
        else:
            width = ex / self.steps
            step_index = np.clip(np.floor(u / width), 0, self.steps - 1)
            h = oy + step_index * (ey / self.steps)
        return np.where(inside, h, np.nan)


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1.0 / 60.0
    substeps: int = 20
    restitution: float = 0.4
    friction: float = 0.3
    spring_scale: float = 0.02
    damping_scale: float = 0.02
    gravity: tuple[float, float, float] = (0.0, -9.81, 0.0)
    force_kernel_width: float = 2.0

    def __post_init__(self):
        if self.dt <= 0 or self.substeps < 1:
            raise InvalidArgumentError("dt must be positive and substeps >= 1")
        if not 0 <= self.restitution < 1:
            raise InvalidArgumentError("restitution must be in [0, 1)")

    @property
    def substep_dt(self) -> float:
        return self.dt / self.substeps

    def spring_constant(self, particle_mass: float) -> float:
        return self.spring_scale * particle_mass / self.substep_dt**2

    def damping_constant(self, particle_mass: float) -> float:
        return self.damping_scale * particle_mass / self.substep_dt


@dataclass(frozen=True, eq=False)
class SimState:
    positions: np.ndarray
    velocities: np.ndarray
    masses: np.ndarray
    object_id: np.ndarray
    static_mask: np.ndarray
    springs: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]
    gravity: np.ndarray
    k_spring: float = 0.0
    damping: float = 0.0
    surfaces: tuple[Surface, ...] = ()
    restitution: float = 0.4
    friction: float = 0.0
    contact_distance: float = 0.0
    self_contact: bool = False
    spring_pairs: frozenset = field(default=frozenset(), repr=False)

    @property
    def n_particles(self) -> int:
        return len(self.positions)

    @property
    def particles(self) -> list[Particle]:
        return [
            Particle(tuple(x), tuple(v), m)
            for x, v, m in zip(self.positions, self.velocities, self.masses)
        ]

    def ground_height(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Contact height (highest surface plus one particle spacing), NaN if none."""
        heights = np.full(len(x), np.nan)
        for surface in self.surfaces:
            heights = np.fmax(heights, surface.height(x, z))
        return heights + self.contact_distance


def lattice_count(extent: float, spacing: float) -> int:
    return int(math.floor(extent / spacing + 1e-9)) + 1


def neighbour_pairs(positions: np.ndarray, radius: float) -> np.ndarray:
    """All pairs (i < j) closer than `radius`, found with a uniform grid."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(positions) < 2 or radius <= 0:
        return np.zeros((0, 2), dtype=np.int64)
    cells = np.floor(positions / radius).astype(np.int64)
    buckets: dict[tuple[int, int, int], list[int]] = {}
    for idx, cell in enumerate(map(tuple, cells)):
        buckets.setdefault(cell, []).append(idx)
    found = []
    r2 = radius * radius
    for cell, members in buckets.items():
        mine = np.array(members)
        for dx, dy, dz in _CELL_OFFSETS:
            other = buckets.get((cell[0] + dx, cell[1] + dy, cell[2] + dz))
            if other is None:
                continue
            theirs = np.array(other)
            a, b = np.meshgrid(mine, theirs, indexing="ij")
            a, b = a.ravel(), b.ravel()
            keep = a < b
            a, b = a[keep], b[keep]
            d2 = ((positions[a] - positions[b]) ** 2).sum(axis=1)
            close = d2 < r2
            if close.any():
                found.append(np.stack([a[close], b[close]], axis=1))
    if not found:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = np.concatenate(found)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return pairs[order]


def _lattice_points(spec: ShapeSpec) -> np.ndarray:
    ex, ey, ez = spec._lattice_extent()
    axes = [
        (np.arange(n) - (n - 1) / 2) * spec.spacing
        for n in (lattice_count(e, spec.spacing) for e in (ex, ey, ez))
    ]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    if spec.kind == "sphere":
        radii = np.array(spec.extent) / 2
        scaled = np.divide(grid, radii, out=np.zeros_like(grid), where=radii > 0)
        grid = grid[(scaled**2).sum(axis=1) <= 1.0 + 1e-9]
    elif spec.kind in ("slope", "stairs"):
        surface = Surface(spec.kind, (0.0, 0.0, 0.0), spec.extent, spec.steps)
        grid[:, 1] = surface.height(grid[:, 0], grid[:, 2])
    return grid


def gen_shape(spec: ShapeSpec, seed: int = 0) -> SceneGraph:
    """Sample a shape on a regular lattice and connect lattice neighbours.

    The lattice is centred on the origin; `seed` is accepted for a uniform
    generator signature but sampling is fully deterministic.
    """
    points = _lattice_points(spec)
    if len(points) == 0:
        raise InvalidArgumentError(f"shape {spec.kind} {spec.extent} yields no particles")
    mass = spec.mass_total / len(points)
    particles = [Particle(tuple(p), (0.0, 0.0, 0.0), mass) for p in points]
    relations = []
    for i, j in neighbour_pairs(points, NEIGHBOUR_FACTOR * spec.spacing):
        relations.append(Relation(int(i), int(j), (spec.stiffness,), WITHIN_SIBLING))
        relations.append(Relation(int(j), int(i), (spec.stiffness,), WITHIN_SIBLING))
    relations.sort(key=lambda r: (r.sender, r.receiver))
    return SceneGraph(particles, relations, [0] * len(particles))


def _check_finite(name: str, values: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        raise InvalidArgumentError(f"{name} contains non-finite values")


def _contact_forces(state: SimState, x: np.ndarray) -> np.ndarray:
    forces = np.zeros_like(x)
    dynamic = np.flatnonzero(~state.static_mask)
    if state.contact_distance <= 0 or len(dynamic) < 2:
        return forces
    if not state.self_contact and len(np.unique(state.object_id[dynamic])) < 2:
        return forces
    local = neighbour_pairs(x[dynamic], state.contact_distance)
    if len(local) == 0:
        return forces
    a, b = dynamic[local[:, 0]], dynamic[local[:, 1]]
    same = state.object_id[a] == state.object_id[b]
    if state.self_contact:
        linked = np.array(
            [(int(i), int(j)) in state.spring_pairs for i, j in zip(a, b)], dtype=bool
        )
        keep = ~same | ~linked
    else:
        keep = ~same
    a, b = a[keep], b[keep]
    d = x[b] - x[a]
    length = np.linalg.norm(d, axis=1)
    direction = np.divide(d, length[:, None], out=np.zeros_like(d), where=length[:, None] > 0)
    push = (state.k_spring * (state.contact_distance - length))[:, None] * direction
    np.add.at(forces, a, -push)
    np.add.at(forces, b, push)
    return forces


def step(state: SimState, dt: float, forces: np.ndarray) -> SimState:
    """Advance one symplectic Euler step; static particles never move."""
    if not dt > 0:
        raise InvalidArgumentError(f"dt must be positive, got {dt}")
    forces = np.asarray(forces, dtype=np.float64).reshape(state.n_particles, 3)
    _check_finite("forces", forces)
    _check_finite("positions", state.positions)
    _check_finite("velocities", state.velocities)

    x, v, m = state.positions, state.velocities, state.masses
    total = forces + m[:, None] * state.gravity[None, :]

    i, j, rest, stiffness = state.springs
    if len(i):
        d = x[j] - x[i]
        length = np.linalg.norm(d, axis=1)
        direction = np.divide(
            d, length[:, None], out=np.zeros_like(d), where=length[:, None] > 0
        )
        magnitude = state.k_spring * stiffness * (length - rest)
        magnitude += state.damping * ((v[j] - v[i]) * direction).sum(axis=1)
        spring = magnitude[:, None] * direction
        np.add.at(total, i, spring)
        np.add.at(total, j, -spring)

    total += _contact_forces(state, x)

    dynamic = ~state.static_mask
    v_new = v.copy()
    x_new = x.copy()
    v_new[dynamic] += total[dynamic] / m[dynamic, None] * dt
    x_new[dynamic] += v_new[dynamic] * dt

    if state.surfaces:
        ground = state.ground_height(x_new[:, 0], x_new[:, 2])
        below = dynamic & np.isfinite(ground) & (x_new[:, 1] < ground)
        if below.any():
            x_new[below, 1] = ground[below]
            inward = below & (v_new[:, 1] < 0)
            v_new[inward, 1] *= -state.restitution
            v_new[below, 0] *= 1.0 - state.friction
            v_new[below, 2] *= 1.0 - state.friction

    return replace(state, positions=x_new, velocities=v_new)


def springs_from_relations(
    scene: SceneGraph, positions: np.ndarray, static_mask: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Unique springs (i < j) with rest lengths taken from `positions`."""
    by_pair = {
        (r.sender, r.receiver): r.material[0] for r in scene.relations if r.sender < r.receiver
    }
    pairs = sorted(by_pair.items())
    pairs = [(ij, k) for ij, k in pairs if not (static_mask[ij[0]] and static_mask[ij[1]])]
    if not pairs:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy(), np.zeros(0), np.zeros(0)
    i = np.array([p[0][0] for p in pairs], dtype=np.int64)
    j = np.array([p[0][1] for p in pairs], dtype=np.int64)
    stiffness = np.array([p[1] for p in pairs])
    rest = np.linalg.norm(positions[j] - positions[i], axis=1)
    return i, j, rest, stiffness


def kinetic_energy(state: SimState) -> float:
    dynamic = ~state.static_mask
    v = state.velocities[dynamic]
    return float(0.5 * (state.masses[dynamic] * (v**2).sum(axis=1)).sum())
