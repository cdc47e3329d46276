"""
Hierarchical particle scene graphs.

A scene is a set of leaf particles grouped into objects and tied together by
material relations. `build_hierarchy` organizes every object into a tree of
aggregated super-particles by recursive k-means splits: leaves talk to all of
their ancestors (L2A), ancestors talk to all of their descendants (A2D) and the
children produced by one split form a sibling clique (WS).
"""

import math
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from hrn_physics.errors import InvalidArgumentError

WITHIN_SIBLING = "within-sibling"
LEAF_TO_ANCESTOR = "leaf-to-ancestor"
ANCESTOR_TO_DESCENDANT = "ancestor-to-descendant"
COLLISION = "collision"

RELATION_KINDS = (WITHIN_SIBLING, LEAF_TO_ANCESTOR, ANCESTOR_TO_DESCENDANT, COLLISION)
KINSHIP_KINDS = (LEAF_TO_ANCESTOR, WITHIN_SIBLING, ANCESTOR_TO_DESCENDANT)
KIN_QUERIES = ("sib", "anc", "par", "des", "leaves")

DEFAULT_KMEANS_ITERS = 50


def _finite(values: Iterable[float]) -> bool:
    return all(math.isfinite(v) for v in values)


@dataclass(frozen=True)
class Particle:
    position: tuple[float, float, float]
    velocity: tuple[float, float, float]
    mass: float

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        object.__setattr__(self, "velocity", tuple(float(v) for v in self.velocity))
        object.__setattr__(self, "mass", float(self.mass))
        if len(self.position) != 3 or len(self.velocity) != 3:
            raise InvalidArgumentError("particle position and velocity must be 3-vectors")
        if not _finite(self.position + self.velocity + (self.mass,)):
            raise InvalidArgumentError("particle state must be finite")
        if self.mass <= 0:
            raise InvalidArgumentError(f"particle mass must be positive, got {self.mass}")

    def as_array(self) -> np.ndarray:
        """Return the 7-dimensional state (position, velocity, mass)."""
        return np.array(self.position + self.velocity + (self.mass,))


@dataclass(frozen=True)
class Relation:
    sender: int
    receiver: int
    material: tuple[float, ...]
    kind: str

    def __post_init__(self):
        object.__setattr__(self, "material", tuple(float(v) for v in self.material))
        if self.kind not in RELATION_KINDS:
            raise InvalidArgumentError(f"Unknown relation kind: {self.kind}")
        if self.sender == self.receiver:
            raise InvalidArgumentError(f"relation sender equals receiver ({self.sender})")
        if not self.material:
            raise InvalidArgumentError("relation material must have at least one component")
        if not _finite(self.material):
            raise InvalidArgumentError("relation material must be finite")
        if self.kind == COLLISION and any(v != 0.0 for v in self.material):
            raise InvalidArgumentError("collision relations carry a zero material vector")


@dataclass(frozen=True)
class HierarchyConfig:
    cluster_size: int = 8
    kmeans_iters: int = DEFAULT_KMEANS_ITERS
    seed: int = 0

    def __post_init__(self):
        if self.cluster_size < 2:
            raise InvalidArgumentError(
                f"cluster_size must be >= 2, got {self.cluster_size}"
            )
        if self.kmeans_iters < 1:
            raise InvalidArgumentError("kmeans_iters must be positive")


@dataclass
class SceneGraph:
    particles: list[Particle]
    relations: list[Relation]
    object_id: list[int]

    @property
    def n_particles(self) -> int:
        return len(self.particles)

    @property
    def material_dim(self) -> int:
        return len(self.relations[0].material) if self.relations else 1

    def positions(self) -> np.ndarray:
        return np.array([p.position for p in self.particles]).reshape(-1, 3)

    def velocities(self) -> np.ndarray:
        return np.array([p.velocity for p in self.particles]).reshape(-1, 3)

    def masses(self) -> np.ndarray:
        return np.array([p.mass for p in self.particles])

    def objects(self) -> list[int]:
        return sorted(set(self.object_id))

    def members(self, obj: int) -> list[int]:
        return [i for i, o in enumerate(self.object_id) if o == obj]

    def material_pairs(self) -> set[tuple[int, int]]:
        return {(r.sender, r.receiver) for r in self.relations}

    def validate(self) -> None:
        """Check object labels and per-object connectivity of the relation graph."""
        if len(self.object_id) != len(self.particles):
            raise InvalidArgumentError("object_id must label every particle")
        if not self.particles:
            raise InvalidArgumentError("scene has no particles")
        neighbours: dict[int, list[int]] = {i: [] for i in range(self.n_particles)}
        for rel in self.relations:
            for idx in (rel.sender, rel.receiver):
                if not 0 <= idx < self.n_particles:
                    raise InvalidArgumentError(f"relation references unknown particle {idx}")
            if self.object_id[rel.sender] != self.object_id[rel.receiver]:
                raise InvalidArgumentError(
                    f"relation {rel.sender}->{rel.receiver} crosses objects"
                )
            neighbours[rel.sender].append(rel.receiver)
            neighbours[rel.receiver].append(rel.sender)
        for obj in self.objects():
            members = self.members(obj)
            seen = {members[0]}
            queue = deque([members[0]])
            while queue:
                current = queue.popleft()
                for nxt in neighbours[current]:
                    if nxt not in seen:
                        seen.add(nxt)
                        queue.append(nxt)
            if len(seen) != len(members):
                raise InvalidArgumentError(
                    f"object {obj} is disconnected ({len(seen)} of {len(members)} "
                    "particles reachable); split it into separate objects first"
                )


@dataclass(frozen=True, eq=False)
class HierarchyGraph:
    nodes: list[Particle]
    level: tuple[int, ...]
    parent: tuple[int | None, ...]
    relations: list[Relation]
    object_id: tuple[int, ...]
    n_leaves: int
    node_material: np.ndarray = field(repr=False)
    flat: bool = False

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def material_dim(self) -> int:
        return int(self.node_material.shape[1])

    @cached_property
    def parent_array(self) -> np.ndarray:
        return np.array([-1 if p is None else p for p in self.parent], dtype=np.int64)

    @cached_property
    def is_root(self) -> np.ndarray:
        return self.parent_array < 0

    @cached_property
    def level_array(self) -> np.ndarray:
        return np.array(self.level, dtype=np.int64)

    @cached_property
    def children(self) -> list[list[int]]:
        result: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for node, par in enumerate(self.parent):
            if par is not None:
                result[par].append(node)
        return result

    @cached_property
    def ancestors(self) -> list[list[int]]:
        result = []
        for node in range(self.n_nodes):
            chain = []
            par = self.parent[node]
            while par is not None:
                chain.append(par)
                par = self.parent[par]
            result.append(sorted(chain))
        return result

    @cached_property
    def ancestor_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """(descendant, ancestor) index arrays over every ancestor relation."""
        desc = [d for d in range(self.n_nodes) for _ in self.ancestors[d]]
        anc = [a for d in range(self.n_nodes) for a in self.ancestors[d]]
        return np.array(desc, dtype=np.int64), np.array(anc, dtype=np.int64)

    @cached_property
    def leaf_membership(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(node, leaf) pairs for every non-leaf node plus the leaf count per node."""
        desc, anc = self.ancestor_pairs
        mask = desc < self.n_leaves
        nodes, leaves = anc[mask], desc[mask]
        counts = np.bincount(nodes, minlength=self.n_nodes)
        return nodes, leaves, counts

    @cached_property
    def object_root(self) -> np.ndarray:
        """Index of the top node of each node's object (the node itself in flat graphs)."""
        roots = np.arange(self.n_nodes)
        for node in range(self.n_nodes):
            if self.ancestors[node]:
                top = self.ancestors[node][0]
                while self.parent[top] is not None:
                    top = self.parent[top]
                roots[node] = top
        return roots

    @cached_property
    def _edges(self) -> dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]:
        grouped: dict[str, list[Relation]] = {kind: [] for kind in KINSHIP_KINDS}
        for rel in self.relations:
            grouped.setdefault(rel.kind, []).append(rel)
        result = {}
        for kind, rels in grouped.items():
            src = np.array([r.sender for r in rels], dtype=np.int64)
            dst = np.array([r.receiver for r in rels], dtype=np.int64)
            mat = np.array([r.material for r in rels], dtype=np.float64).reshape(
                len(rels), self.material_dim
            )
            result[kind] = (src, dst, mat)
        return result

    def edges(self, kind: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (sender, receiver, material) arrays for one relation kind."""
        if kind not in KINSHIP_KINDS:
            raise InvalidArgumentError(f"Unknown kinship kind: {kind}")
        return self._edges[kind]

    def sibling_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Unordered sibling pairs (i < j) from the WS edges."""
        src, dst, _ = self.edges(WITHIN_SIBLING)
        mask = src < dst
        return src[mask], dst[mask]

    def node_positions(self) -> np.ndarray:
        return np.array([p.position for p in self.nodes]).reshape(-1, 3)

    def node_masses(self) -> np.ndarray:
        return np.array([p.mass for p in self.nodes])

    def restiffened(self, stiffness_by_object: dict[int, float]) -> "HierarchyGraph":
        """Copy with material component 0 set per object (soft-body resets)."""
        if not stiffness_by_object:
            return self
        material = self.node_material.copy()
        for node, obj in enumerate(self.object_id):
            if obj in stiffness_by_object:
                material[node, 0] = stiffness_by_object[obj]
        material.flags.writeable = False
        relations = []
        for rel in self.relations:
            obj = self.object_id[rel.receiver]
            if obj in stiffness_by_object:
                rel = replace(
                    rel, material=(stiffness_by_object[obj],) + rel.material[1:]
                )
            relations.append(rel)
        return replace(self, relations=relations, node_material=material)


def split_seed(base_seed: int, obj: int, split_index: int) -> int:
    """Seed for the k-means call of one split, derived from the hierarchy seed."""
    state = np.random.SeedSequence([base_seed & 0xFFFFFFFFFFFFFFFF, obj, split_index])
    return int(state.generate_state(1, dtype=np.uint64)[0])


def _assign(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def _fill_empty(points: np.ndarray, labels: np.ndarray, centers: np.ndarray, k: int):
    labels = labels.copy()
    while True:
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return labels
        dist = ((points - centers[labels]) ** 2).sum(axis=1)
        movable = counts[labels] > 1
        candidate = int(np.argmax(np.where(movable, dist, -1.0)))
        labels[candidate] = empty[0]


def kmeans_cluster(
    points: Sequence[Sequence[float]] | np.ndarray,
    k: int,
    seed: int,
    max_iters: int = DEFAULT_KMEANS_ITERS,
) -> np.ndarray:
    """Lloyd k-means with farthest-point seeding; every cluster is non-empty."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if k < 1 or k > n:
        raise InvalidArgumentError(f"k must be in [1, {n}], got {k}")
    if not np.all(np.isfinite(pts)):
        raise InvalidArgumentError("k-means points must be finite")
    if k == 1:
        return np.zeros(n, dtype=np.int64)

    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    nearest = ((pts - pts[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        idx = int(np.argmax(nearest))
        chosen.append(idx)
        nearest = np.minimum(nearest, ((pts - pts[idx]) ** 2).sum(axis=1))
    centers = pts[chosen].copy()

    labels = _fill_empty(pts, _assign(pts, centers), centers, k)
    for _ in range(max_iters):
        centers = np.stack([pts[labels == c].mean(axis=0) for c in range(k)])
        updated = _fill_empty(pts, _assign(pts, centers), centers, k)
        if np.array_equal(updated, labels):
            break
        labels = updated
    return labels.astype(np.int64)


def aggregate_node(children: Sequence[Particle]) -> Particle:
    """Super-particle state: mean position, mean velocity, summed mass."""
    if not children:
        raise InvalidArgumentError("cannot aggregate an empty set of particles")
    pos = np.mean([c.position for c in children], axis=0)
    vel = np.mean([c.velocity for c in children], axis=0)
    mass = float(np.sum([c.mass for c in children]))
    return Particle(tuple(pos), tuple(vel), mass)


def _leaf_materials(scene: SceneGraph) -> np.ndarray:
    k = scene.material_dim
    sums = np.zeros((scene.n_particles, k))
    counts = np.zeros(scene.n_particles)
    for rel in scene.relations:
        sums[rel.sender] += rel.material
        counts[rel.sender] += 1
    counts[counts == 0] = 1
    return sums / counts[:, None]


class _TreeNode:
    __slots__ = ("leaves", "parent", "index")

    def __init__(self, leaves: list[int], parent: "_TreeNode | None"):
        self.leaves = leaves
        self.parent = parent
        self.index = -1

    def chain(self) -> list["_TreeNode"]:
        result = []
        node = self
        while node is not None:
            result.append(node)
            node = node.parent
        return result


def build_hierarchy(scene: SceneGraph, cfg: HierarchyConfig) -> HierarchyGraph:
    """Iterative hierarchical grouping of every object into a particle tree."""
    scene.validate()
    positions = scene.positions()
    n_leaves = scene.n_particles

    intermediates: list[_TreeNode] = []
    roots: list[_TreeNode] = []
    leaf_parent: dict[int, _TreeNode] = {}
    # (kind, sender, receiver) with _TreeNode or leaf int endpoints
    raw_edges: list[tuple[str, object, object]] = []

    for obj in scene.objects():
        members = scene.members(obj)
        root = _TreeNode(members, None)
        roots.append(root)
        for leaf in members:
            raw_edges.append((LEAF_TO_ANCESTOR, leaf, root))
            raw_edges.append((ANCESTOR_TO_DESCENDANT, root, leaf))

        queue = deque([root])
        split_index = 0
        while queue:
            current = queue.popleft()
            siblings: list[object] = []
            if len(current.leaves) > cfg.cluster_size:
                labels = kmeans_cluster(
                    positions[current.leaves],
                    cfg.cluster_size,
                    split_seed(cfg.seed, obj, split_index),
                    cfg.kmeans_iters,
                )
                split_index += 1
                for cluster in range(cfg.cluster_size):
                    subset = [
                        leaf
                        for leaf, label in zip(current.leaves, labels)
                        if label == cluster
                    ]
                    if len(subset) > 1:
                        node = _TreeNode(subset, current)
                        intermediates.append(node)
                        for anc in current.chain():
                            raw_edges.append((ANCESTOR_TO_DESCENDANT, anc, node))
                        for leaf in subset:
                            raw_edges.append((ANCESTOR_TO_DESCENDANT, node, leaf))
                            raw_edges.append((LEAF_TO_ANCESTOR, leaf, node))
                        siblings.append(node)
                        queue.append(node)
                    else:
                        leaf_parent[subset[0]] = current
                        siblings.append(subset[0])
            else:
                for leaf in current.leaves:
                    leaf_parent[leaf] = current
                siblings.extend(current.leaves)
            for a in siblings:
                for b in siblings:
                    if a is not b:
                        raw_edges.append((WITHIN_SIBLING, a, b))

    for offset, node in enumerate(intermediates + roots):
        node.index = n_leaves + offset

    def idx(endpoint) -> int:
        return endpoint.index if isinstance(endpoint, _TreeNode) else int(endpoint)

    leaf_states = list(scene.particles)
    upper = intermediates + roots
    nodes = leaf_states + [aggregate_node([leaf_states[i] for i in n.leaves]) for n in upper]
    parent: list[int | None] = [leaf_parent[i].index for i in range(n_leaves)]
    parent += [None if n.parent is None else n.parent.index for n in upper]
    object_id = list(scene.object_id) + [scene.object_id[n.leaves[0]] for n in upper]

    level = [0] * len(nodes)
    # children are created after their parents
    for n in list(reversed(intermediates)) + roots:
        child_levels = [level[c.index] for c in upper if c.parent is n]
        level[n.index] = 1 + max(child_levels, default=0)

    leaf_material = _leaf_materials(scene)
    node_material = np.vstack(
        [leaf_material]
        + [leaf_material[n.leaves].mean(axis=0, keepdims=True) for n in upper]
    )
    node_material.flags.writeable = False
    scene_material = {(r.sender, r.receiver): r.material for r in scene.relations}

    relations = []
    for kind, a, b in raw_edges:
        s, r = idx(a), idx(b)
        material = scene_material.get((s, r))
        if material is None:
            material = tuple(0.5 * (node_material[s] + node_material[r]))
        relations.append(Relation(s, r, material, kind))
    relations.sort(key=lambda rel: (KINSHIP_KINDS.index(rel.kind), rel.receiver, rel.sender))

    return HierarchyGraph(
        nodes=nodes,
        level=tuple(level),
        parent=tuple(parent),
        relations=relations,
        object_id=tuple(object_id),
        n_leaves=n_leaves,
        node_material=node_material,
    )


def flat_graph(scene: SceneGraph, sparse: bool = False) -> HierarchyGraph:
    """Leaf-only graph: fully connected per object, or material relations only."""
    scene.validate()
    leaf_material = _leaf_materials(scene)
    leaf_material.flags.writeable = False
    scene_material = {(r.sender, r.receiver): r.material for r in scene.relations}
    relations = []
    if sparse:
        pairs = sorted(scene_material)
    else:
        pairs = [
            (s, r)
            for obj in scene.objects()
            for r in scene.members(obj)
            for s in scene.members(obj)
            if s != r
        ]
    for s, r in pairs:
        material = scene_material.get((s, r))
        if material is None:
            material = tuple(0.5 * (leaf_material[s] + leaf_material[r]))
        relations.append(Relation(s, r, material, WITHIN_SIBLING))
    relations.sort(key=lambda rel: (rel.receiver, rel.sender))
    n = scene.n_particles
    return HierarchyGraph(
        nodes=list(scene.particles),
        level=(0,) * n,
        parent=(None,) * n,
        relations=relations,
        object_id=tuple(scene.object_id),
        n_leaves=n,
        node_material=leaf_material,
        flat=True,
    )


def kin(h: HierarchyGraph, node: int, kind: str) -> list[int]:
    """Kinship query: sib, anc, par, des or leaves of one node, sorted by id."""
    if not 0 <= node < h.n_nodes:
        raise InvalidArgumentError(f"Unknown node id: {node}")
    if kind not in KIN_QUERIES:
        raise InvalidArgumentError(f"Unknown kinship query: {kind}")
    if kind == "sib":
        src, dst, _ = h.edges(WITHIN_SIBLING)
        return sorted(int(s) for s in src[dst == node])
    if kind == "anc":
        return list(h.ancestors[node])
    if kind == "par":
        par = h.parent[node]
        return [] if par is None else [par]
    descendants = []
    stack = list(h.children[node])
    while stack:
        current = stack.pop()
        descendants.append(current)
        stack.extend(h.children[current])
    if kind == "leaves":
        return sorted(d for d in descendants if d < h.n_leaves)
    return sorted(descendants)


def reaggregate(
    h: HierarchyGraph, leaf_positions: np.ndarray, leaf_velocities: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Node positions and velocities recomputed from the current leaf states."""
    leaf_positions = np.asarray(leaf_positions, dtype=np.float64)
    leaf_velocities = np.asarray(leaf_velocities, dtype=np.float64)
    if leaf_positions.shape != (h.n_leaves, 3) or leaf_velocities.shape != (h.n_leaves, 3):
        raise InvalidArgumentError(
            f"expected leaf states of shape ({h.n_leaves}, 3), got "
            f"{leaf_positions.shape} and {leaf_velocities.shape}"
        )
    positions = np.zeros((h.n_nodes, 3))
    velocities = np.zeros((h.n_nodes, 3))
    positions[: h.n_leaves] = leaf_positions
    velocities[: h.n_leaves] = leaf_velocities
    nodes, leaves, counts = h.leaf_membership
    upper = np.arange(h.n_leaves, h.n_nodes)
    if upper.size:
        pos_sum = np.zeros((h.n_nodes, 3))
        vel_sum = np.zeros((h.n_nodes, 3))
        np.add.at(pos_sum, nodes, leaf_positions[leaves])
        np.add.at(vel_sum, nodes, leaf_velocities[leaves])
        positions[upper] = pos_sum[upper] / counts[upper, None]
        velocities[upper] = vel_sum[upper] / counts[upper, None]
    return positions, velocities
