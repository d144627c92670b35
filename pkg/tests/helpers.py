"""Shared oracles for the test suite, written independently of the library."""

import numpy as np

from ardyn.nn import MlpSpec, ParameterSet, mlp_backward, mlp_forward


def forward_oracle(spec, params, x):
    """Explicit per-layer forward pass, no caching."""
    a = np.asarray(x, dtype=np.float64)
    for layer in range(spec.num_layers):
        z = a @ params.weight(layer) + params.bias(layer)
        if layer == spec.num_layers - 1:
            a = z
        elif spec.activation == "relu":
            a = np.where(z > 0.0, z, 0.0)
        elif spec.activation == "tanh":
            a = np.tanh(z)
        else:
            a = z
    return a


def random_spec(rng, max_width=7):
    depth = int(rng.integers(0, 3))
    hidden = tuple(int(rng.integers(1, max_width + 1)) for _ in range(depth))
    activation = ("relu", "tanh", "identity")[int(rng.integers(0, 3))]
    return MlpSpec(
        input_dim=int(rng.integers(1, 5)),
        hidden_layers=hidden,
        output_dim=int(rng.integers(1, 5)),
        activation=activation,
    )


def random_net(rng, max_width=7):
    """Spec plus parameters with nonzero random biases.

    Zero biases leave relu layers able to emit exactly-zero preactivations
    (a fully dead previous layer feeds 0 @ W + 0), where the subgradient
    convention and a finite-difference secant legitimately disagree.
    """
    spec = random_spec(rng, max_width)
    params = ParameterSet.init_random(spec, rng.integers(2**31))
    for layer in range(spec.num_layers):
        bias = params.bias(layer)
        bias[:] = 0.3 * rng.normal(size=bias.shape)
    return spec, params


def numeric_grad(spec, params, x, c, h=1e-5):
    """Central differences of sum(output * c) wrt every parameter."""
    grad = np.zeros(spec.num_params)
    for i in range(spec.num_params):
        saved = params.flat[i]
        params.flat[i] = saved + h
        up = float((forward_oracle(spec, params, x) * c).sum())
        params.flat[i] = saved - h
        down = float((forward_oracle(spec, params, x) * c).sum())
        params.flat[i] = saved
        grad[i] = (up - down) / (2.0 * h)
    return grad


def gradcheck_max_error(num_nets, seed, max_width=5, h=1e-5):
    """Worst relative error between backprop and central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(num_nets):
        spec, params = random_net(rng, max_width)
        x = rng.normal(size=(int(rng.integers(1, 6)), spec.input_dim))
        c = rng.normal(size=(x.shape[0], spec.output_dim))
        _, cache = mlp_forward(spec, params, x)
        analytic = mlp_backward(spec, params, cache, c)
        numeric = numeric_grad(spec, params, x, c, h)
        err = np.abs(analytic - numeric) / np.maximum.reduce(
            [np.abs(analytic), np.abs(numeric), np.full_like(numeric, 1e-6)]
        )
        worst = max(worst, float(err.max()))
    return worst


class EnvModel:
    """Adapter exposing a true environment through the model sampling interface.

    Useful wherever a perfect dynamics model is needed: the environment's
    step_batch already matches the (states, actions, rngs) calling shape.
    """

    def __init__(self, env):
        self.env = env
        self.state_dim = env.state_dim
        self.action_dim = env.action_dim
        self.kind = "true_env"

    def sample_batch(self, states, actions, rngs):
        return self.env.step_batch(states, actions, rngs)
