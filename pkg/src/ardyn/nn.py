"""Dense network engine: flat parameter buffers, backprop, optimizers.

Everything is float64 numpy. Parameters live in a single flat buffer so
optimizers, checkpoints, and gradient checks all operate on one array;
per-layer weight/bias matrices are views into it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    CacheError,
    ConfigError,
    DivergenceError,
    EmptyBatchError,
    NumericError,
    ShapeError,
)

ACTIVATIONS = ("relu", "tanh", "identity")


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully connected network.

    ``hidden_layers`` may be empty, in which case the network is a single
    affine map. Widths are free; the training-protocol grid restricts them
    separately when a sweep is declared grid-strict.
    """

    input_dim: int
    hidden_layers: tuple[int, ...]
    output_dim: int
    activation: str = "relu"

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_layers", tuple(int(w) for w in self.hidden_layers))
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.output_dim < 1:
            raise ConfigError(f"output_dim must be >= 1, got {self.output_dim}")
        if any(w < 1 for w in self.hidden_layers):
            raise ConfigError(f"hidden layer widths must be >= 1, got {self.hidden_layers}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(
                f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}"
            )

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_layers, self.output_dim)

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def num_params(self) -> int:
        dims = self.layer_dims
        return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(self.num_layers))


def _layer_slices(spec: MlpSpec) -> list[tuple[slice, slice, tuple[int, int]]]:
    """Flat-buffer layout: per layer, weights (row-major) then bias."""
    slices = []
    offset = 0
    dims = spec.layer_dims
    for i in range(spec.num_layers):
        fan_in, fan_out = dims[i], dims[i + 1]
        w = slice(offset, offset + fan_in * fan_out)
        offset += fan_in * fan_out
        b = slice(offset, offset + fan_out)
        offset += fan_out
        slices.append((w, b, (fan_in, fan_out)))
    return slices


def layer_of_param_index(spec: MlpSpec, index: int) -> tuple[int, str]:
    """Map a flat-buffer index to (layer, "weights"|"bias")."""
    for layer, (w, b, _) in enumerate(_layer_slices(spec)):
        if w.start <= index < w.stop:
            return layer, "weights"
        if b.start <= index < b.stop:
            return layer, "bias"
    raise ShapeError(f"parameter index {index} out of range for {spec.num_params} parameters")


class ParameterSet:
    """Flat float64 parameter buffer with per-layer weight/bias views.

    Mutable by design: the training loop updates ``flat`` in place through
    the optimizer. Treat instances as single-writer during training.
    """

    __slots__ = ("spec", "flat", "_slices")

    def __init__(self, spec: MlpSpec, flat: np.ndarray):
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (spec.num_params,):
            raise ShapeError(
                f"parameter buffer has shape {flat.shape}, expected ({spec.num_params},)"
            )
        self.spec = spec
        self.flat = flat
        self._slices = _layer_slices(spec)

    @classmethod
    def zeros(cls, spec: MlpSpec) -> "ParameterSet":
        return cls(spec, np.zeros(spec.num_params))

    @classmethod
    def init_random(cls, spec: MlpSpec, seed) -> "ParameterSet":
        """He-initialized weights (std sqrt(2/fan_in)), zero biases.

        ``seed`` is anything ``np.random.default_rng`` accepts. Weights are
        drawn layer by layer in a fixed order, so equal seeds give
        bit-identical buffers.
        """
        rng = np.random.default_rng(seed)
        params = cls.zeros(spec)
        for layer in range(spec.num_layers):
            w = params.weight(layer)
            w[...] = rng.normal(0.0, math.sqrt(2.0 / w.shape[0]), size=w.shape)
        return params

    def weight(self, layer: int) -> np.ndarray:
        w, _, (fan_in, fan_out) = self._slices[layer]
        return self.flat[w].reshape(fan_in, fan_out)

    def bias(self, layer: int) -> np.ndarray:
        return self.flat[self._slices[layer][1]]

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.spec, self.flat.copy())


@dataclass
class MlpCache:
    """Intermediate activations captured by a forward pass.

    ``layer_inputs[l]`` is the batch entering layer ``l`` (so entry 0 is the
    network input). The cache is tied to the exact ``params`` object and
    batch that produced it.
    """

    spec: MlpSpec
    params: ParameterSet
    layer_inputs: list[np.ndarray]
    batch_size: int


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad_from_output(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (a > 0.0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - a * a
    return np.ones_like(a)


def mlp_forward(
    spec: MlpSpec, params: ParameterSet, inputs: np.ndarray
) -> tuple[np.ndarray, MlpCache]:
    """Run a batch through the network.

    Args:
        inputs: array of shape (batch, input_dim), all entries finite.

    Returns:
        (outputs, cache) where outputs has shape (batch, output_dim) and
        cache feeds ``mlp_backward``.
    """
    if params.spec != spec:
        raise ShapeError("parameter buffer was built for a different architecture")
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"inputs have shape {x.shape}, expected (batch, {spec.input_dim})")
    if x.shape[0] == 0:
        raise EmptyBatchError("forward pass needs at least one row")
    if not np.all(np.isfinite(x)):
        raise NumericError("network inputs contain non-finite values")

    layer_inputs = [x]
    a = x
    for layer in range(spec.num_layers):
        z = a @ params.weight(layer) + params.bias(layer)
        if layer < spec.num_layers - 1:
            a = _activate(z, spec.activation)
            layer_inputs.append(a)
        else:
            a = z
    cache = MlpCache(spec=spec, params=params, layer_inputs=layer_inputs, batch_size=x.shape[0])
    return a, cache


def mlp_backward(
    spec: MlpSpec, params: ParameterSet, cache: MlpCache, grad_outputs: np.ndarray
) -> np.ndarray:
    """Backpropagate output gradients to a flat parameter-gradient buffer.

    The returned buffer is congruent with ``ParameterSet`` layout. The cache
    must come from a forward pass with these exact ``params``.
    """
    if cache.spec != spec or cache.params is not params:
        raise CacheError("cache does not match this spec/params pair")
    g = np.asarray(grad_outputs, dtype=np.float64)
    if g.shape != (cache.batch_size, spec.output_dim):
        raise CacheError(
            f"grad_outputs have shape {g.shape}, expected ({cache.batch_size}, {spec.output_dim})"
        )

    grads = np.zeros(spec.num_params)
    slices = _layer_slices(spec)
    delta = g
    for layer in reversed(range(spec.num_layers)):
        a_in = cache.layer_inputs[layer]
        w_slice, b_slice, (fan_in, fan_out) = slices[layer]
        grads[w_slice] = (a_in.T @ delta).reshape(fan_in * fan_out)
        grads[b_slice] = delta.sum(axis=0)
        if layer > 0:
            delta = delta @ params.weight(layer).T
            delta = delta * _activation_grad_from_output(cache.layer_inputs[layer], spec.activation)
    return grads


@dataclass
class OptimizerState:
    """Moment buffers and step counter for Adam or SGD with momentum.

    ``first_moment`` doubles as the momentum buffer for SGD.
    """

    kind: str
    first_moment: np.ndarray
    second_moment: np.ndarray | None
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9

    @classmethod
    def adam(cls, num_params: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        return cls("adam", np.zeros(num_params), np.zeros(num_params), beta1=beta1, beta2=beta2, eps=eps)

    @classmethod
    def sgd_momentum(cls, num_params: int, momentum: float = 0.9):
        return cls("sgd_momentum", np.zeros(num_params), None, momentum=momentum)


def optimizer_step(
    params: ParameterSet,
    grads: np.ndarray,
    state: OptimizerState,
    lr: float,
    weight_decay: float = 0.0,
) -> None:
    """Apply one update in place.

    Weight decay is decoupled: parameters shrink by ``lr * weight_decay``
    before the gradient-based update. Non-finite gradients abort with the
    offending layer named.
    """
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != params.flat.shape:
        raise ShapeError(f"gradient buffer shape {g.shape} != parameter shape {params.flat.shape}")
    finite = np.isfinite(g)
    if not finite.all():
        index = int(np.argmin(finite))
        layer, part = layer_of_param_index(params.spec, index)
        raise DivergenceError(f"non-finite gradient in layer {layer} {part}")
    if lr < 0.0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")

    if weight_decay != 0.0:
        params.flat *= 1.0 - lr * weight_decay

    if state.kind == "adam":
        state.step_count += 1
        t = state.step_count
        m, v = state.first_moment, state.second_moment
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        params.flat -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    elif state.kind == "sgd_momentum":
        state.step_count += 1
        buf = state.first_moment
        buf *= state.momentum
        buf += g
        params.flat -= lr * buf
    else:
        raise ConfigError(f"unknown optimizer kind {state.kind!r}")


@dataclass(frozen=True)
class LrSchedule:
    """Linear decay from ``initial_lr`` at step 0 to zero at ``total_steps``."""

    initial_lr: float
    total_steps: int

    def __post_init__(self) -> None:
        if not (self.initial_lr > 0.0) or not math.isfinite(self.initial_lr):
            raise ConfigError(f"initial_lr must be positive and finite, got {self.initial_lr}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate used at a given global step (clamped at zero past the end)."""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    return schedule.initial_lr * max(0.0, 1.0 - step / schedule.total_steps)
