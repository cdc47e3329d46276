"""
Dense reverse-mode differentiation for chains of fully connected layers.

Every MLP is a sequence of affine layers with ReLU on the hidden layers and an
identity output. `mlp_forward` records a tape; `backward` replays it in reverse,
accumulates parameter gradients into the shared `ModelParams` buffers and
returns the gradient with respect to the input batch.
"""

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from hrn_physics.errors import InvalidArgumentError, InvalidStateError


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise InvalidArgumentError("an MLP needs at least input and output widths")
        if min(self.widths) < 1:
            raise InvalidArgumentError(f"MLP widths must be positive: {self.widths}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def param_shapes(self, name: str) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for layer in range(self.n_layers):
            shapes[f"{name}.w{layer}"] = (self.widths[layer], self.widths[layer + 1])
            shapes[f"{name}.b{layer}"] = (self.widths[layer + 1],)
        return shapes


class ModelParams:
    """Named float64 parameter arrays with matching gradient buffers."""

    def __init__(self, values: dict[str, np.ndarray] | None = None):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.version = 0
        for name, value in (values or {}).items():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.values:
            raise InvalidArgumentError(f"duplicate parameter name: {name}")
        array = np.array(value, dtype=np.float64)
        self.values[name] = array
        self.grads[name] = np.zeros_like(array)

    def names(self) -> list[str]:
        return sorted(self.values)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: tuple(self.values[name].shape) for name in self.names()}

    def zero_grad(self) -> None:
        for grad in self.grads.values():
            grad.fill(0.0)

    def touch(self) -> None:
        """Mark the values as changed; outstanding tapes become stale."""
        self.version += 1

    def copy(self) -> "ModelParams":
        return ModelParams({name: value.copy() for name, value in self.values.items()})

    def size(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def __contains__(self, name: str) -> bool:
        return name in self.values


def init_mlp(
    params: ModelParams, name: str, spec: MlpSpec, rng: np.random.Generator
) -> None:
    """Uniform fan-in initialization of one MLP's weights; biases start at zero."""
    for pname, shape in spec.param_shapes(name).items():
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            params.add(pname, rng.uniform(-bound, bound, size=shape))
        else:
            params.add(pname, np.zeros(shape))


@dataclass
class Tape:
    name: str
    spec: MlpSpec
    version: int
    layer_inputs: list[np.ndarray] = field(default_factory=list)
    pre_activations: list[np.ndarray] = field(default_factory=list)
    consumed: bool = False


def mlp_forward(
    spec: MlpSpec, params: ModelParams, name: str, x: np.ndarray
) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.n_in:
        raise InvalidArgumentError(
            f"{name}: expected input of shape (batch, {spec.n_in}), got {x.shape}"
        )
    tape = Tape(name, spec, params.version)
    h = x
    for layer in range(spec.n_layers):
        weight = params.values[f"{name}.w{layer}"]
        bias = params.values[f"{name}.b{layer}"]
        if weight.shape != (spec.widths[layer], spec.widths[layer + 1]):
            raise InvalidArgumentError(f"{name}.w{layer} has shape {weight.shape}")
        tape.layer_inputs.append(h)
        z = h @ weight + bias
        tape.pre_activations.append(z)
        h = np.maximum(z, 0.0) if layer < spec.n_layers - 1 else z
    return h, tape


def backward(tape: Tape, params: ModelParams, grad_out: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients for one tape; returns d(loss)/d(input)."""
    if tape.consumed:
        raise InvalidStateError(f"{tape.name}: tape was already consumed")
    if tape.version != params.version:
        raise InvalidStateError(f"{tape.name}: parameters changed since the forward pass")
    grad = np.asarray(grad_out, dtype=np.float64)
    expected = tape.pre_activations[-1].shape
    if grad.shape != expected:
        raise InvalidArgumentError(
            f"{tape.name}: output gradient shape {grad.shape} != {expected}"
        )
    tape.consumed = True
    for layer in reversed(range(tape.spec.n_layers)):
        if layer < tape.spec.n_layers - 1:
            grad = grad * (tape.pre_activations[layer] > 0.0)
        params.grads[f"{tape.name}.w{layer}"] += tape.layer_inputs[layer].T @ grad
        params.grads[f"{tape.name}.b{layer}"] += grad.sum(axis=0)
        grad = grad @ params.values[f"{tape.name}.w{layer}"].T
    return grad


@dataclass(frozen=True)
class StepDecaySchedule:
    """Piecewise-constant learning rate divided by `factors` at `boundaries`."""

    initial: float = 0.001
    boundaries: tuple[int, ...] = ()
    factors: tuple[float, ...] = (2.0, 5.0, 2.0)

    def __post_init__(self):
        object.__setattr__(self, "boundaries", tuple(int(b) for b in self.boundaries))
        object.__setattr__(self, "factors", tuple(float(f) for f in self.factors))
        if len(self.factors) < len(self.boundaries):
            raise InvalidArgumentError("need one decay factor per boundary")
        if list(self.boundaries) != sorted(self.boundaries):
            raise InvalidArgumentError("decay boundaries must be increasing")

    def __call__(self, step: int) -> float:
        lr = self.initial
        for boundary, factor in zip(self.boundaries, self.factors):
            if step >= boundary:
                lr /= factor
        return lr

    @classmethod
    def from_fractions(
        cls,
        initial: float,
        total_steps: int,
        fractions: Iterable[float] = (0.5, 0.75, 0.9),
        factors: Iterable[float] = (2.0, 5.0, 2.0),
    ) -> "StepDecaySchedule":
        boundaries = tuple(max(1, int(round(f * total_steps))) for f in fractions)
        return cls(initial, boundaries, tuple(factors))


@dataclass
class AdamState:
    schedule: StepDecaySchedule = field(default_factory=StepDecaySchedule)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def lr(self) -> float:
        return self.schedule(self.step)


def adam_step(
    params: ModelParams, grads: dict[str, np.ndarray], state: AdamState
) -> ModelParams:
    """One bias-corrected Adam update in place; bumps the parameter version."""
    lr = state.lr
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name in params.names():
        value = params.values[name]
        g = grads[name]
        if g.shape != value.shape:
            raise InvalidArgumentError(
                f"gradient for {name} has shape {g.shape}, expected {value.shape}"
            )
        if name not in state.m:
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        m, v = state.m[name], state.v[name]
        if m.shape != value.shape:
            raise InvalidArgumentError(f"Adam moments for {name} do not match its shape")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        value -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    params.touch()
    return params


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def gradient_check(
    loss_fn: Callable[[], float],
    params: ModelParams,
    analytic: dict[str, np.ndarray],
    h: float = 1e-5,
    max_entries: int | None = 200,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between `analytic` and central finite differences.

    `loss_fn` must evaluate the loss from the current `params.values`; entries
    are perturbed in place and restored afterwards.
    """
    rng = rng or np.random.default_rng(0)
    entries = [(name, idx) for name in params.names() for idx in range(params.values[name].size)]
    if max_entries is not None and len(entries) > max_entries:
        picks = rng.choice(len(entries), size=max_entries, replace=False)
        entries = [entries[i] for i in sorted(picks)]
    worst = 0.0
    for name, idx in entries:
        flat = params.values[name].reshape(-1)
        original = flat[idx]
        flat[idx] = original + h
        params.touch()
        plus = loss_fn()
        flat[idx] = original - h
        params.touch()
        minus = loss_fn()
        flat[idx] = original
        params.touch()
        numeric = (plus - minus) / (2.0 * h)
        err = float(relative_error(np.array(analytic[name].reshape(-1)[idx]), np.array(numeric)))
        worst = max(worst, err)
    return worst
