import math
import unittest

import numpy as np
from scenes import combine, cube, random_scene, two_cubes

from hrn_physics.errors import InvalidArgumentError
from hrn_physics.graph import (
    ANCESTOR_TO_DESCENDANT,
    LEAF_TO_ANCESTOR,
    WITHIN_SIBLING,
    HierarchyConfig,
    Particle,
    Relation,
    SceneGraph,
    aggregate_node,
    build_hierarchy,
    flat_graph,
    kin,
    kmeans_cluster,
    reaggregate,
)


def edge_set(h, kind):
    src, dst, _ = h.edges(kind)
    return set(zip(src.tolist(), dst.tolist()))


def lloyd(points, k, seed, max_iters=50):
    """Plain-loop k-means with the same seeding and empty-cluster rule."""
    pts = [tuple(float(v) for v in p) for p in points]
    n = len(pts)

    def d2(a, b):
        return (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2 + (a[2] - b[2]) ** 2

    def nearest(p, centers):
        best = 0
        for c in range(1, k):
            if d2(p, centers[c]) < d2(p, centers[best]):
                best = c
        return best

    def fill(labels, centers):
        while True:
            counts = [labels.count(c) for c in range(k)]
            if 0 not in counts:
                return labels
            far, far_d = None, -1.0
            for i, p in enumerate(pts):
                if counts[labels[i]] > 1 and d2(p, centers[labels[i]]) > far_d:
                    far, far_d = i, d2(p, centers[labels[i]])
            labels[far] = counts.index(0)

    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    while len(chosen) < k:
        gaps = [min(d2(p, pts[c]) for c in chosen) for p in pts]
        chosen.append(gaps.index(max(gaps)))
    centers = [pts[c] for c in chosen]
    labels = fill([nearest(p, centers) for p in pts], centers)
    for _ in range(max_iters):
        centers = [
            tuple(np.mean([pts[i] for i in range(n) if labels[i] == c], axis=0))
            for c in range(k)
        ]
        updated = fill([nearest(p, centers) for p in pts], centers)
        if updated == labels:
            break
        labels = updated
    return labels


class TestHierarchyInvariants(unittest.TestCase):
    def check_invariants(self, scene, cfg):
        h = build_hierarchy(scene, cfg)
        n_leaves = scene.n_particles
        self.assertEqual(h.n_leaves, n_leaves)

        for obj in scene.objects():
            roots = [
                i for i in range(h.n_nodes) if h.parent[i] is None and h.object_id[i] == obj
            ]
            self.assertEqual(len(roots), 1)
            self.assertEqual(kin(h, roots[0], "leaves"), scene.members(obj))

        for node in range(h.n_nodes):
            self.assertLessEqual(len(h.children[node]), cfg.cluster_size)
            if node < n_leaves:
                self.assertEqual(h.level[node], 0)
                self.assertIsNotNone(h.parent[node])
            else:
                child_levels = [h.level[c] for c in h.children[node]]
                self.assertEqual(h.level[node], 1 + max(child_levels))
                leaves = kin(h, node, "leaves")
                expected = aggregate_node([scene.particles[i] for i in leaves])
                np.testing.assert_allclose(h.nodes[node].position, expected.position)
                self.assertAlmostEqual(h.nodes[node].mass, expected.mass)

        l2a = edge_set(h, LEAF_TO_ANCESTOR)
        a2d = edge_set(h, ANCESTOR_TO_DESCENDANT)
        ws = edge_set(h, WITHIN_SIBLING)
        expected_l2a = {(leaf, a) for leaf in range(n_leaves) for a in h.ancestors[leaf]}
        expected_a2d = {(a, d) for d in range(h.n_nodes) for a in h.ancestors[d]}
        self.assertEqual(l2a, expected_l2a)
        self.assertEqual(a2d, expected_a2d)
        for s, r in ws:
            self.assertIn((r, s), ws)
            self.assertEqual(h.parent[s], h.parent[r])
        for node in range(h.n_nodes):
            par = h.parent[node]
            expected = [] if par is None else sorted(set(h.children[par]) - {node})
            self.assertEqual(kin(h, node, "sib"), expected)
        depth = sum(len(h.ancestors[leaf]) for leaf in range(n_leaves))
        self.assertEqual(len(l2a), depth)
        bound = 4 * n_leaves * max(1.0, math.log2(n_leaves)) * cfg.cluster_size
        self.assertLessEqual(len(h.relations), bound)
        return h

    def test_random_objects(self):
        rng = np.random.default_rng(7)
        for trial in range(12):
            n = int(rng.integers(8, 120))
            n_objects = int(rng.integers(1, 3))
            cluster_size = int(rng.choice([4, 8, 10]))
            scene = random_scene(rng, n, n_objects)
            self.check_invariants(scene, HierarchyConfig(cluster_size=cluster_size, seed=trial))

    def test_cube_of_eight_stays_flat(self):
        h = build_hierarchy(cube(2), HierarchyConfig(cluster_size=8))
        self.assertEqual(h.n_nodes, 9)
        self.assertEqual(h.level[8], 1)
        self.assertEqual(len(h.children[8]), 8)

    def test_cube_of_27_is_split(self):
        h = self.check_invariants(cube(3), HierarchyConfig(cluster_size=8))
        self.assertGreater(h.n_nodes, 28)
        root = h.n_nodes - 1
        self.assertIsNone(h.parent[root])
        self.assertLessEqual(len(h.children[root]), 8)
        self.assertGreaterEqual(h.level[root], 2)

    def test_grid_of_64_has_three_levels(self):
        h = self.check_invariants(cube(4), HierarchyConfig(cluster_size=8, seed=7))
        self.assertEqual(h.n_leaves, 64)
        self.assertEqual(h.n_nodes, 73)
        self.assertEqual(set(h.level), {0, 1, 2})
        root = h.n_nodes - 1
        self.assertEqual(sorted(h.children[root]), list(range(64, 72)))
        for leaf in range(64):
            self.assertEqual(len(kin(h, leaf, "anc")), 2)

        # every edge follows from the parent links alone
        parent = h.parent
        chain = {}
        for node in range(h.n_nodes):
            up, p = [], parent[node]
            while p is not None:
                up.append(p)
                p = parent[p]
            chain[node] = up
        l2a = {(leaf, a) for leaf in range(64) for a in chain[leaf]}
        a2d = {(a, d) for d in range(h.n_nodes) for a in chain[d]}
        ws = {
            (s, r)
            for s in range(h.n_nodes)
            for r in range(h.n_nodes)
            if s != r and parent[s] is not None and parent[s] == parent[r]
        }
        self.assertEqual(edge_set(h, LEAF_TO_ANCESTOR), l2a)
        self.assertEqual(edge_set(h, ANCESTOR_TO_DESCENDANT), a2d)
        self.assertEqual(edge_set(h, WITHIN_SIBLING), ws)
        self.assertEqual(len(h.relations), 128 + 136 + 56 + 8 * 56)

    def test_edge_count_grows_as_n_log_n(self):
        rng = np.random.default_rng(11)

        def ratio(n, cluster_size, seed):
            scene = random_scene(rng, n)
            h = build_hierarchy(scene, HierarchyConfig(cluster_size=cluster_size, seed=seed))
            return len(h.relations) / (n * math.log2(n))

        for cluster_size in (4, 8, 10):
            with self.subTest(cluster_size=cluster_size):
                constant = 1.25 * max(ratio(64, cluster_size, seed) for seed in range(3))
                for n in (96, 128, 256, 512):
                    self.assertLessEqual(ratio(n, cluster_size, n), constant)

    def test_deterministic_for_seed(self):
        scene = cube(3)
        a = build_hierarchy(scene, HierarchyConfig(seed=3))
        b = build_hierarchy(scene, HierarchyConfig(seed=3))
        self.assertEqual(a.parent, b.parent)
        self.assertEqual(
            [(r.sender, r.receiver, r.kind) for r in a.relations],
            [(r.sender, r.receiver, r.kind) for r in b.relations],
        )

    def test_two_objects_have_separate_trees(self):
        h = build_hierarchy(two_cubes(), HierarchyConfig())
        for rel in h.relations:
            self.assertEqual(h.object_id[rel.sender], h.object_id[rel.receiver])
        self.assertEqual(int(h.is_root.sum()), 2)

    def test_material_of_kinship_edges(self):
        soft = cube(2, stiffness=0.5)
        hard = cube(2, stiffness=1.0)
        h = build_hierarchy(combine((soft, (0, 0, 0)), (hard, (1, 0, 0))), HierarchyConfig())
        np.testing.assert_allclose(h.node_material[:8, 0], 0.5)
        np.testing.assert_allclose(h.node_material[8:16, 0], 1.0)
        _, dst, mat = h.edges(LEAF_TO_ANCESTOR)
        np.testing.assert_allclose(mat[np.asarray(h.object_id)[dst] == 0, 0], 0.5)

    def test_restiffened(self):
        h = build_hierarchy(two_cubes(), HierarchyConfig())
        soft = h.restiffened({1: 0.25})
        obj = np.asarray(soft.object_id)
        np.testing.assert_allclose(soft.node_material[obj == 1, 0], 0.25)
        np.testing.assert_allclose(soft.node_material[obj == 0, 0], 1.0)
        for rel in soft.relations:
            if soft.object_id[rel.receiver] == 1:
                self.assertEqual(rel.material[0], 0.25)
        self.assertIs(h.restiffened({}), h)


class TestKin(unittest.TestCase):
    def setUp(self):
        self.h = build_hierarchy(cube(3), HierarchyConfig(cluster_size=8))

    def test_parent_and_ancestors(self):
        for node in range(self.h.n_nodes):
            par = kin(self.h, node, "par")
            anc = kin(self.h, node, "anc")
            if par:
                self.assertIn(par[0], anc)
                self.assertIn(node, kin(self.h, par[0], "des"))
            else:
                self.assertEqual(anc, [])

    def test_leaves_of_leaf_is_empty(self):
        self.assertEqual(kin(self.h, 0, "leaves"), [])

    def test_errors(self):
        with self.assertRaises(InvalidArgumentError):
            kin(self.h, self.h.n_nodes, "par")
        with self.assertRaises(InvalidArgumentError):
            kin(self.h, 0, "cousin")
        with self.assertRaises(InvalidArgumentError):
            self.h.edges("collision")


class TestReaggregate(unittest.TestCase):
    def test_translation_moves_every_node(self):
        scene = cube(3)
        h = build_hierarchy(scene, HierarchyConfig())
        shift = np.array([0.5, -1.0, 2.0])
        positions, velocities = reaggregate(
            h, scene.positions() + shift, np.tile([0.1, 0.0, 0.0], (h.n_leaves, 1))
        )
        np.testing.assert_allclose(positions, h.node_positions() + shift)
        np.testing.assert_allclose(
            velocities[h.n_leaves :], np.tile([0.1, 0.0, 0.0], (h.n_nodes - h.n_leaves, 1))
        )

    def test_shape_mismatch(self):
        h = build_hierarchy(cube(2), HierarchyConfig())
        with self.assertRaises(InvalidArgumentError):
            reaggregate(h, np.zeros((3, 3)), np.zeros((3, 3)))


class TestAggregate(unittest.TestCase):
    def test_mean_position_and_total_mass(self):
        node = aggregate_node(
            [Particle((0, 0, 0), (1, 0, 0), 1.0), Particle((2, 0, 0), (-1, 0, 0), 3.0)]
        )
        self.assertEqual(node.position, (1.0, 0.0, 0.0))
        self.assertEqual(node.velocity, (0.0, 0.0, 0.0))
        self.assertEqual(node.mass, 4.0)

    def test_single_child(self):
        child = Particle((0.5, -1.0, 2.0), (0.0, 3.0, 0.0), 2.5)
        self.assertEqual(aggregate_node([child]), child)

    def test_empty(self):
        with self.assertRaises(InvalidArgumentError):
            aggregate_node([])


class TestKmeans(unittest.TestCase):
    def test_every_cluster_is_used(self):
        points = np.random.default_rng(0).normal(size=(40, 3))
        labels = kmeans_cluster(points, 8, seed=1)
        self.assertEqual(sorted(set(labels.tolist())), list(range(8)))

    def test_duplicate_points(self):
        labels = kmeans_cluster(np.zeros((5, 3)), 3, seed=0)
        self.assertEqual(sorted(set(labels.tolist())), [0, 1, 2])

    def test_matches_plain_lloyd_on_a_grid(self):
        grid = np.array(
            [(x, y, z) for x in range(4) for y in range(4) for z in range(4)], dtype=float
        )
        for seed in (7, 8):
            labels = kmeans_cluster(grid, 8, seed=seed)
            self.assertEqual(labels.tolist(), lloyd(grid, 8, seed))

    def test_two_tight_pairs(self):
        points = [(0.0, 0.0, 0.0), (0.1, 0.0, 0.0), (5.0, 0.0, 0.0), (5.1, 0.0, 0.0)]
        labels = kmeans_cluster(points, 2, seed=3).tolist()
        self.assertEqual(labels[0], labels[1])
        self.assertEqual(labels[2], labels[3])
        self.assertNotEqual(labels[0], labels[2])

    def test_single_cluster(self):
        labels = kmeans_cluster(np.random.default_rng(2).normal(size=(6, 3)), 1, seed=0)
        self.assertEqual(labels.tolist(), [0] * 6)

    def test_k_out_of_range(self):
        with self.assertRaises(InvalidArgumentError):
            kmeans_cluster(np.zeros((2, 3)), 3, seed=0)


class TestFlatGraph(unittest.TestCase):
    def test_fully_connected_per_object(self):
        scene = two_cubes()
        h = flat_graph(scene)
        self.assertTrue(h.flat)
        self.assertEqual(h.n_nodes, 16)
        self.assertEqual(len(h.relations), 2 * 8 * 7)
        self.assertTrue(bool(h.is_root.all()))

    def test_sparse_keeps_material_relations(self):
        scene = two_cubes()
        h = flat_graph(scene, sparse=True)
        self.assertEqual(edge_set(h, WITHIN_SIBLING), scene.material_pairs())


class TestValidation(unittest.TestCase):
    def test_bad_particles_and_relations(self):
        with self.assertRaises(InvalidArgumentError):
            Particle((0, 0, 0), (0, 0, 0), 0.0)
        with self.assertRaises(InvalidArgumentError):
            Particle((0, 0, math.nan), (0, 0, 0), 1.0)
        with self.assertRaises(InvalidArgumentError):
            Relation(0, 0, (1.0,), WITHIN_SIBLING)
        with self.assertRaises(InvalidArgumentError):
            Relation(0, 1, (1.0,), "collision")
        with self.assertRaises(InvalidArgumentError):
            HierarchyConfig(cluster_size=1)

    def test_disconnected_object(self):
        particles = [Particle((float(i), 0, 0), (0, 0, 0), 1.0) for i in range(3)]
        relations = [Relation(0, 1, (1.0,), WITHIN_SIBLING)]
        with self.assertRaises(InvalidArgumentError):
            build_hierarchy(SceneGraph(particles, relations, [0, 0, 0]), HierarchyConfig())


if __name__ == "__main__":
    unittest.main()
