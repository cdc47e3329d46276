"""Small scenes and trajectories shared by the test modules."""

import numpy as np

from hrn_physics.graph import Particle, Relation, SceneGraph
from hrn_physics.scenarios import Trajectory, gen_scenario
from hrn_physics.sim import ShapeSpec, gen_shape

SPACING = 0.25


def cube(n_per_side: int = 3, spacing: float = SPACING, stiffness: float = 1.0) -> SceneGraph:
    extent = (n_per_side - 1) * spacing
    return gen_shape(ShapeSpec("cube", (extent,) * 3, spacing, stiffness=stiffness))


def combine(*placed: tuple[SceneGraph, tuple[float, float, float]]) -> SceneGraph:
    """Join scenes into one, shifting each by an offset and giving it its own object id."""
    particles: list[Particle] = []
    relations: list[Relation] = []
    object_id: list[int] = []
    for obj, (scene, offset) in enumerate(placed):
        base = len(particles)
        shift = np.asarray(offset, dtype=np.float64)
        for p in scene.particles:
            particles.append(
                Particle(tuple(np.asarray(p.position) + shift), p.velocity, p.mass)
            )
        for r in scene.relations:
            relations.append(Relation(r.sender + base, r.receiver + base, r.material, r.kind))
        object_id.extend([obj] * scene.n_particles)
    return SceneGraph(particles, relations, object_id)


def two_cubes(gap: float = 0.6, n_per_side: int = 2) -> SceneGraph:
    """Two small cubes side by side along x, `gap` apart between centres."""
    block = cube(n_per_side)
    return combine((block, (0.0, 0.0, 0.0)), (block, (gap, 0.0, 0.0)))


def with_velocities(scene: SceneGraph, velocities: np.ndarray) -> SceneGraph:
    particles = [
        Particle(p.position, tuple(v), p.mass) for p, v in zip(scene.particles, velocities)
    ]
    return SceneGraph(particles, list(scene.relations), list(scene.object_id))


def random_scene(rng: np.random.Generator, n_particles: int, n_objects: int = 1) -> SceneGraph:
    """Random point clouds chained into connected objects."""
    particles = []
    relations = []
    object_id = []
    sizes = np.full(n_objects, n_particles // n_objects)
    sizes[: n_particles % n_objects] += 1
    start = 0
    for obj, size in enumerate(sizes):
        centre = np.array([2.0 * obj, 0.0, 0.0])
        for _ in range(size):
            pos = centre + rng.uniform(-0.5, 0.5, size=3)
            vel = rng.normal(scale=0.01, size=3)
            particles.append(Particle(tuple(pos), tuple(vel), float(rng.uniform(0.5, 1.5))))
            object_id.append(obj)
        for i in range(start, start + size - 1):
            relations.append(Relation(i, i + 1, (1.0,), "within-sibling"))
            relations.append(Relation(i + 1, i, (1.0,), "within-sibling"))
        start += size
    return SceneGraph(particles, relations, object_id)


SMALL_CUBE = {"kind": "cube", "extent": [SPACING] * 3, "spacing": SPACING}


def small_trajectories(count: int, n_frames: int = 10, **overrides) -> list[Trajectory]:
    """Two eight-particle cubes pushed around without gravity, one per seed."""
    options = {"shapes": [SMALL_CUBE, SMALL_CUBE], "force_interval": [1, 3], **overrides}
    return [
        gen_scenario("zero-g-collide", options, seed=seed, n_frames=n_frames)
        for seed in range(count)
    ]
