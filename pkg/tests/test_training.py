import math
import unittest
from dataclasses import replace
from types import SimpleNamespace
from unittest import mock

import numpy as np
from scenes import SMALL_CUBE, small_trajectories, two_cubes

from hrn_physics.errors import DivergenceError, InvalidArgumentError, InvalidStateError
from hrn_physics.graph import HierarchyConfig, build_hierarchy
from hrn_physics.model import ModelConfig, NormStats, StepOutput
from hrn_physics.scenarios import gen_scenario
from hrn_physics.training import (
    LOSS_PRESETS,
    LossConfig,
    OptimConfig,
    TrajectoryView,
    compute_loss,
    fit_norm_stats,
    loss_target,
    preservation_pairs,
    split_trajectories,
    train,
)

TINY_MODEL = ModelConfig(effect_dim=4, hidden=8, effect_layers=1, psi_layers=1)
TINY_OPTIM = OptimConfig(
    learning_rate=0.001,
    batch_size=4,
    epochs=2,
    decay_steps=(1000,),
    decay_factors=(2.0,),
    val_fraction=0.34,
    max_samples_per_epoch=6,
)


def prediction(local, world) -> StepOutput:
    n_leaves = 16
    return StepOutput(local, world, world[:n_leaves], world[:n_leaves])


class TestLoss(unittest.TestCase):
    def setUp(self):
        self.h = build_hierarchy(two_cubes(), HierarchyConfig())
        rng = np.random.default_rng(0)
        n = self.h.n_nodes
        self.positions = self.h.node_positions()
        self.target = loss_target(
            self.h, self.positions, self.positions + rng.normal(scale=0.05, size=(n, 3))
        )
        self.local = rng.normal(scale=0.05, size=(n, 3))
        self.world = rng.normal(scale=0.05, size=(n, 3))
        stats = NormStats(np.zeros((2, 3)), rng.uniform(0.5, 2.0, size=(2, 3)), np.ones((2, 3)))
        self.cfg = LossConfig(alpha=0.4, beta=0.7, local_weight=1.3, stats=stats)

    def test_gradients_match_finite_differences(self):
        result = compute_loss(prediction(self.local, self.world), self.target, self.h, self.cfg)
        step = 1e-6
        for name, grad in (("local", result.grad_local), ("world", result.grad_world)):
            numeric = np.zeros_like(grad)
            for idx in np.ndindex(*grad.shape):
                values = {"local": self.local.copy(), "world": self.world.copy()}
                values[name][idx] += step
                plus = compute_loss(prediction(**values), self.target, self.h, self.cfg).value
                values[name][idx] -= 2 * step
                minus = compute_loss(prediction(**values), self.target, self.h, self.cfg).value
                numeric[idx] = (plus - minus) / (2 * step)
            np.testing.assert_allclose(grad, numeric, rtol=1e-5, atol=1e-8)

    def test_terms_combine(self):
        r = compute_loss(prediction(self.local, self.world), self.target, self.h, self.cfg)
        expected = 0.4 * (1.3 * r.local_term + 0.7 * r.world_term) + 0.6 * r.preserve_term
        self.assertAlmostEqual(r.value, expected)
        self.assertGreater(r.preserve_term, 0.0)

    def test_exact_prediction_has_zero_loss(self):
        exact = prediction(self.target.local.copy(), self.target.world.copy())
        result = compute_loss(exact, self.target, self.h, self.cfg)
        self.assertAlmostEqual(result.value, 0.0, places=20)
        np.testing.assert_allclose(result.grad_world, 0.0, atol=1e-12)

    def test_world_deltas_of_target(self):
        np.testing.assert_allclose(
            self.target.positions + self.target.world, self.target.next_positions
        )

    def test_presets(self):
        r = compute_loss(prediction(self.local, self.world), self.target, self.h, self.cfg)
        local_only = replace(self.cfg, **LOSS_PRESETS["local-loss-only"])
        value = compute_loss(
            prediction(self.local, self.world), self.target, self.h, local_only
        ).value
        self.assertAlmostEqual(value, 1.3 * r.local_term)
        global_only = replace(self.cfg, **LOSS_PRESETS["global-loss-only"])
        result = compute_loss(prediction(self.local, self.world), self.target, self.h, global_only)
        self.assertAlmostEqual(result.value, r.world_term)
        np.testing.assert_array_equal(result.grad_local, 0.0)

    def test_needs_stats_and_shapes(self):
        with self.assertRaises(InvalidStateError):
            compute_loss(
                prediction(self.local, self.world), self.target, self.h, LossConfig()
            )
        with self.assertRaises(InvalidArgumentError):
            compute_loss(
                prediction(self.local[:-1], self.world), self.target, self.h, self.cfg
            )
        with self.assertRaises(InvalidArgumentError):
            LossConfig(alpha=1.5)


class TestData(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.trajectories = small_trajectories(3)

    def test_fit_norm_stats(self):
        stats = fit_norm_stats(self.trajectories)
        self.assertEqual(stats.n_levels, 2)
        self.assertTrue(np.all(stats.local_std > 0))
        self.assertTrue(np.all(np.isfinite(stats.local_mean)))
        flat = fit_norm_stats(self.trajectories, ModelConfig(ablations=("flat-graph",)))
        self.assertEqual(flat.n_levels, 1)
        with self.assertRaises(InvalidArgumentError):
            fit_norm_stats([])

    def test_split_is_whole_trajectory_and_deterministic(self):
        trajectories = small_trajectories(5, n_frames=3)
        train_set, val_set = split_trajectories(trajectories, 0.2, seed=4)
        self.assertEqual((len(train_set), len(val_set)), (4, 1))
        ids = {id(t) for t in train_set}
        self.assertFalse(ids & {id(t) for t in val_set})
        again, _ = split_trajectories(trajectories, 0.2, seed=4)
        self.assertEqual([id(t) for t in again], [id(t) for t in train_set])
        train_set, val_set = split_trajectories(trajectories[:2], 0.9, seed=0)
        self.assertEqual((len(train_set), len(val_set)), (1, 1))

    def test_sample_frames_avoid_resets(self):
        traj = small_trajectories(1, n_frames=10, episode_length=4)[0]
        view = TrajectoryView(traj, ModelConfig())
        self.assertEqual(view.sample_frames(2), [1, 2, 5, 6])
        self.assertEqual(view.step_input(2, 2).positions.shape, (2, view.graph.n_nodes, 3))

    def test_preservation_pairs(self):
        scene = two_cubes()
        h = build_hierarchy(scene, HierarchyConfig())
        i, j = preservation_pairs(ModelConfig(), h, scene.material_pairs())
        self.assertTrue(np.all(i < j))
        flat_cfg = ModelConfig(ablations=("flat-graph",))
        i, j = preservation_pairs(flat_cfg, h, scene.material_pairs())
        self.assertEqual(len(i), len(scene.material_pairs()) // 2)

    def test_optim_schedule(self):
        self.assertEqual(OptimConfig().schedule(100).boundaries, (50, 75, 90))
        with self.assertRaises(InvalidArgumentError):
            OptimConfig(batch_size=0)
        with self.assertRaises(InvalidArgumentError):
            OptimConfig(val_fraction=1.0)


class TestTrain(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.trajectories = small_trajectories(3)

    def run_training(self, optim=TINY_OPTIM, **kwargs):
        return train(
            self.trajectories, TINY_MODEL, LossConfig(), optim, seed=7, print_fn=lambda *a: None,
            **kwargs,
        )

    def test_curve_and_logging(self):
        lines = []
        result = train(
            self.trajectories, TINY_MODEL, LossConfig(), TINY_OPTIM, seed=7,
            print_fn=lines.append,
        )
        self.assertEqual([r.epoch for r in result.curve], [1, 2])
        self.assertEqual(result.epochs_done, 2)
        self.assertTrue(all(math.isfinite(r.train_loss) for r in result.curve))
        self.assertIsNotNone(result.curve[0].val_loss)
        self.assertEqual(len(lines), 2)
        self.assertTrue(lines[0].startswith("epoch"))
        self.assertAlmostEqual(result.model.cfg.radius, 0.375)
        self.assertIs(result.loss_cfg.stats, result.model.stats)

    def test_deterministic_for_seed(self):
        a = self.run_training()
        b = self.run_training()
        self.assertEqual(
            [r.train_loss for r in a.curve], [r.train_loss for r in b.curve]
        )
        for name in a.model.params.names():
            np.testing.assert_array_equal(
                a.model.params.values[name], b.model.params.values[name]
            )

    def test_resume_continues_the_curve(self):
        straight = self.run_training()
        first = self.run_training(replace(TINY_OPTIM, epochs=1))
        resumed = self.run_training(resume=first)
        self.assertEqual(resumed.epochs_done, 2)
        np.testing.assert_allclose(
            [r.train_loss for r in resumed.curve],
            [r.train_loss for r in straight.curve],
            rtol=1e-10,
        )

    def test_mlp_baseline_trains(self):
        cfg = replace(TINY_MODEL, ablations=("mlp-baseline",))
        result = train(
            self.trajectories, cfg, LossConfig(), replace(TINY_OPTIM, epochs=1), print_fn=len
        )
        self.assertEqual(result.model.cfg.n_particles, 16)

    def test_mlp_baseline_needs_fixed_particle_count(self):
        options = {"shapes": [SMALL_CUBE, {**SMALL_CUBE, "extent": [0.5, 0.5, 0.5]}]}
        bigger = gen_scenario("zero-g-collide", options, seed=0, n_frames=4)
        cfg = replace(TINY_MODEL, ablations=("mlp-baseline",))
        with self.assertRaises(InvalidArgumentError):
            train([self.trajectories[0], bigger], cfg, LossConfig(), TINY_OPTIM, print_fn=len)

    def test_divergence(self):
        bad = SimpleNamespace(value=math.nan)
        with mock.patch("hrn_physics.training.sample_loss", return_value=bad):
            with self.assertRaises(DivergenceError) as ctx:
                self.run_training()
        self.assertEqual((ctx.exception.epoch, ctx.exception.batch), (1, 0))

    def test_too_short_for_history(self):
        short = small_trajectories(1, n_frames=2)
        with self.assertRaises(InvalidArgumentError):
            train(short, TINY_MODEL, LossConfig(), TINY_OPTIM, print_fn=len)
        with self.assertRaises(InvalidArgumentError):
            train([], TINY_MODEL, LossConfig(), TINY_OPTIM, print_fn=len)


if __name__ == "__main__":
    unittest.main()
