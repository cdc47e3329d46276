import unittest

import numpy as np

from hrn_physics.diff import (
    AdamState,
    MlpSpec,
    ModelParams,
    StepDecaySchedule,
    adam_step,
    backward,
    gradient_check,
    init_mlp,
    mlp_forward,
    relative_error,
)
from hrn_physics.errors import InvalidArgumentError, InvalidStateError


def make_mlp(widths=(4, 8, 8, 3), seed=0):
    spec = MlpSpec(widths)
    params = ModelParams()
    init_mlp(params, "net", spec, np.random.default_rng(seed))
    for name in params.names():
        if ".b" in name:
            params.values[name][:] = np.random.default_rng(seed + 1).normal(
                scale=0.1, size=params.values[name].shape
            )
    return spec, params


class TestMlp(unittest.TestCase):
    def test_shapes_and_names(self):
        spec, params = make_mlp()
        self.assertEqual(spec.n_layers, 3)
        self.assertEqual(
            params.names(),
            ["net.b0", "net.b1", "net.b2", "net.w0", "net.w1", "net.w2"],
        )
        self.assertEqual(params.values["net.w1"].shape, (8, 8))
        self.assertEqual(params.size(), 4 * 8 + 8 + 8 * 8 + 8 + 8 * 3 + 3)

    def test_forward_matches_manual(self):
        spec, params = make_mlp((3, 5, 2))
        x = np.random.default_rng(1).normal(size=(7, 3))
        y, _ = mlp_forward(spec, params, "net", x)
        v = params.values
        hidden = np.maximum(x @ v["net.w0"] + v["net.b0"], 0.0)
        np.testing.assert_allclose(y, hidden @ v["net.w1"] + v["net.b1"])

    def test_gradients_match_finite_differences(self):
        spec, params = make_mlp()
        rng = np.random.default_rng(2)
        x = rng.normal(size=(6, 4))
        target = rng.normal(size=(6, 3))

        def loss():
            y, _ = mlp_forward(spec, params, "net", x)
            return float(0.5 * ((y - target) ** 2).sum())

        params.zero_grad()
        y, tape = mlp_forward(spec, params, "net", x)
        grad_x = backward(tape, params, y - target)
        analytic = {k: g.copy() for k, g in params.grads.items()}
        self.assertLess(gradient_check(loss, params, analytic, max_entries=None), 1e-4)

        h = 1e-6
        numeric = np.zeros_like(x)
        for idx in np.ndindex(*x.shape):
            x[idx] += h
            plus = loss()
            x[idx] -= 2 * h
            minus = loss()
            x[idx] += h
            numeric[idx] = (plus - minus) / (2 * h)
        np.testing.assert_allclose(grad_x, numeric, rtol=1e-5, atol=1e-8)

    def test_gradients_accumulate(self):
        spec, params = make_mlp()
        x = np.ones((2, 4))
        params.zero_grad()
        _, tape_a = mlp_forward(spec, params, "net", x)
        backward(tape_a, params, np.ones((2, 3)))
        once = params.grads["net.w0"].copy()
        _, tape_b = mlp_forward(spec, params, "net", x)
        backward(tape_b, params, np.ones((2, 3)))
        np.testing.assert_allclose(params.grads["net.w0"], 2 * once)

    def test_zero_weights_give_zero_output(self):
        spec = MlpSpec((3, 4, 2))
        shapes = spec.param_shapes("m")
        params = ModelParams({name: np.zeros(shape) for name, shape in shapes.items()})
        y, _ = mlp_forward(spec, params, "m", np.ones((5, 3)))
        np.testing.assert_array_equal(y, 0.0)

    def test_input_shape_is_checked(self):
        spec, params = make_mlp()
        with self.assertRaises(InvalidArgumentError):
            mlp_forward(spec, params, "net", np.ones((2, 5)))
        with self.assertRaises(InvalidArgumentError):
            MlpSpec((4,))


class TestTape(unittest.TestCase):
    def test_tape_is_consumed_once(self):
        spec, params = make_mlp()
        _, tape = mlp_forward(spec, params, "net", np.ones((1, 4)))
        backward(tape, params, np.ones((1, 3)))
        with self.assertRaises(InvalidStateError):
            backward(tape, params, np.ones((1, 3)))

    def test_stale_tape_after_update(self):
        spec, params = make_mlp()
        _, tape = mlp_forward(spec, params, "net", np.ones((1, 4)))
        params.touch()
        with self.assertRaises(InvalidStateError):
            backward(tape, params, np.ones((1, 3)))

    def test_gradient_shape_is_checked(self):
        spec, params = make_mlp()
        _, tape = mlp_forward(spec, params, "net", np.ones((2, 4)))
        with self.assertRaises(InvalidArgumentError):
            backward(tape, params, np.ones((1, 3)))


class TestAdam(unittest.TestCase):
    def test_first_step_moves_by_learning_rate(self):
        params = ModelParams({"w": np.array([1.0, -2.0, 0.5])})
        state = AdamState(StepDecaySchedule(0.1))
        adam_step(params, {"w": np.array([3.0, -0.5, 0.0])}, state)
        np.testing.assert_allclose(params.values["w"], [0.9, -1.9, 0.5], atol=1e-6)
        self.assertEqual(state.step, 1)
        self.assertEqual(params.version, 1)

    def test_minimizes_a_quadratic(self):
        params = ModelParams({"w": np.array([5.0, -3.0])})
        state = AdamState(StepDecaySchedule(0.1, (200, 300, 400), (10, 10, 10)))
        for _ in range(500):
            adam_step(params, {"w": 2 * params.values["w"]}, state)
        np.testing.assert_allclose(params.values["w"], 0.0, atol=1e-2)

    def test_gradient_shape_mismatch(self):
        params = ModelParams({"w": np.zeros(3)})
        with self.assertRaises(InvalidArgumentError):
            adam_step(params, {"w": np.zeros(2)}, AdamState())


class TestSchedule(unittest.TestCase):
    def test_step_decay(self):
        schedule = StepDecaySchedule(0.001, (10, 20, 30), (2, 5, 2))
        self.assertAlmostEqual(schedule(0), 0.001)
        self.assertAlmostEqual(schedule(10), 0.0005)
        self.assertAlmostEqual(schedule(25), 0.0001)
        self.assertAlmostEqual(schedule(30), 0.00005)

    def test_from_fractions(self):
        schedule = StepDecaySchedule.from_fractions(0.01, 100)
        self.assertEqual(schedule.boundaries, (50, 75, 90))

    def test_resumed_state_keeps_its_rate(self):
        state = AdamState(StepDecaySchedule(0.001, (10,), (2,)), step=12)
        self.assertAlmostEqual(state.lr, 0.0005)

    def test_invalid(self):
        with self.assertRaises(InvalidArgumentError):
            StepDecaySchedule(0.001, (20, 10), (2, 2))
        with self.assertRaises(InvalidArgumentError):
            StepDecaySchedule(0.001, (10, 20), (2,))


class TestRelativeError(unittest.TestCase):
    def test_floor(self):
        self.assertEqual(float(relative_error(np.array(0.0), np.array(0.0))), 0.0)
        self.assertAlmostEqual(float(relative_error(np.array(1.0), np.array(1.1))), 0.1 / 1.1)


if __name__ == "__main__":
    unittest.main()
