"""Flat run configuration: "key = value" lines, '#' comments.

Every key lives in a closed registry with a typed parser and a default;
unknown keys are rejected so typos fail loudly. A resolved snapshot
(defaults plus file plus command-line overrides, canonically sorted) is
written next to every run's outputs and hashed into a short digest that
output files echo.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class ConfigKey:
    name: str
    kind: str  # int | float | bool | str | list[int] | list[float] | choice:a|b|c
    default: str
    help: str


def _key(name: str, kind: str, default: str, help_text: str) -> ConfigKey:
    return ConfigKey(name, kind, default, help_text)


CONFIG_KEYS: dict[str, ConfigKey] = {
    k.name: k
    for k in [
        _key("seed", "int", "0", "base seed for the command"),
        _key("env.kind", "choice:linear_gaussian|correlated_chain|pendulum", "linear_gaussian",
             "environment family"),
        _key("env.state_dim", "int", "4", "state dimension (linear families)"),
        _key("env.action_dim", "int", "1", "action dimension (linear families)"),
        _key("env.horizon", "int", "20", "episode length"),
        _key("env.seed", "int", "0", "seed for randomly drawn instances"),
        _key("env.rho", "float", "0.9", "chain noise correlation (correlated_chain)"),
        _key("env.noise_scale", "float", "0.1", "process noise scale"),
        _key("env.transition", "list[float]", "", "explicit transition matrix, row-major"),
        _key("env.control", "list[float]", "", "explicit control matrix, row-major"),
        _key("env.noise_cov", "list[float]", "", "explicit process noise covariance"),
        _key("env.state_cost", "list[float]", "", "explicit state cost matrix"),
        _key("env.action_cost", "list[float]", "", "explicit action cost matrix"),
        _key("env.init_mean", "list[float]", "", "explicit initial-state mean"),
        _key("env.init_cov", "list[float]", "", "explicit initial-state covariance"),
        _key("env.dt", "float", "0.05", "integration step (pendulum)"),
        _key("env.gravity", "float", "10.0", "gravity/length ratio (pendulum)"),
        _key("env.damping", "float", "0.1", "angular damping (pendulum)"),
        _key("env.noise_std", "list[float]", "0.001,0.05", "per-dim noise std (pendulum)"),
        _key("policies.count", "int", "5", "number of evaluation policies"),
        _key("policies.spread", "float", "1.0", "quality spread of the policy set"),
        _key("policies.seed", "int", "0", "policy generation seed"),
        _key("data.transitions", "int", "5000", "transitions to collect"),
        _key("data.behavior_index", "int", "-1", "behavior policy index (-1 = middle)"),
        _key("train.model_kind", "choice:feedforward|autoregressive", "feedforward",
             "model family to train"),
        _key("train.layers", "int", "3", "hidden layer count"),
        _key("train.width", "int", "512", "hidden layer width"),
        _key("train.input_noise", "float", "0", "std of Gaussian input perturbation"),
        _key("train.weight_decay", "float", "0", "decoupled weight decay"),
        _key("train.learning_rate", "float", "0.001", "initial learning rate"),
        _key("train.epochs", "int", "500", "training epochs"),
        _key("train.batch_size", "int", "256", "minibatch size"),
        _key("train.optimizer", "choice:adam|sgd_momentum", "adam", "optimizer"),
        _key("train.activation", "choice:relu|tanh|identity", "relu", "hidden activation"),
        _key("train.train_fraction", "float", "0.8", "training split fraction"),
        _key("train.split_seed", "int", "0", "split shuffle seed"),
        _key("train.seed", "int", "0", "training run seed"),
        _key("train.dimension_order", "list[int]", "",
             "state-dim generation order (autoregressive)"),
        _key("sweep.families", "choice:both|feedforward|autoregressive", "both",
             "model families to sweep"),
        _key("sweep.layers", "list[int]", "3,4", "grid: hidden layer counts"),
        _key("sweep.widths", "list[int]", "512,1024", "grid: hidden widths"),
        _key("sweep.input_noise", "list[float]", "0,1e-6,1e-7", "grid: input noise"),
        _key("sweep.weight_decay", "list[float]", "0,1e-6", "grid: weight decay"),
        _key("sweep.learning_rates", "list[float]", "0.001,0.0003", "grid: learning rates"),
        _key("sweep.epochs", "int", "500", "epochs per grid point"),
        _key("sweep.batch_size", "int", "256", "batch size per grid point"),
        _key("sweep.optimizer", "choice:adam|sgd_momentum", "adam", "optimizer"),
        _key("sweep.grid_strict", "bool", "false", "reject off-protocol grid values"),
        _key("sweep.seed", "int", "0", "run seed shared by all grid points"),
        _key("sweep.split_seed", "int", "0", "split shuffle seed"),
        _key("sweep.train_fraction", "float", "0.8", "training split fraction"),
        _key("ope.gamma", "float", "0.995", "evaluation discount factor"),
        _key("ope.horizon", "int", "20", "evaluation rollout length"),
        _key("ope.rollouts", "int", "1000", "model rollouts per policy"),
        _key("ope.seed", "int", "0", "rollout seed"),
        _key("ope.regret_k", "int", "1", "k for regret@k"),
        _key("ope.bootstrap", "int", "1000", "bootstrap resamples"),
        _key("ope.bootstrap_seed", "int", "0", "bootstrap seed"),
        _key("ope.truth", "choice:analytic|mc", "analytic", "ground-truth oracle"),
        _key("ope.truth_rollouts", "int", "100000", "rollouts for the MC oracle"),
        _key("plan.iterations", "int", "3", "planner refinement iterations"),
        _key("plan.candidates", "int", "16", "candidate sequences per iteration"),
        _key("plan.horizon", "int", "10", "planner rollout length"),
        _key("plan.beta", "float", "0.1", "softmax temperature"),
        _key("plan.sigma_sq", "float", "0.01", "resampling noise variance"),
        _key("plan.gamma", "float", "0.995", "planner/return discount"),
        _key("plan.episodes", "int", "1000", "paired evaluation episodes"),
        _key("plan.seed", "int", "0", "paired evaluation seed"),
        _key("plan.critic", "choice:zero|linear_quadratic", "linear_quadratic",
             "terminal critic"),
        _key("plan.policy_index", "int", "-1", "planned policy index (-1 = middle)"),
        _key("augment.ratio", "float", "1.0", "synthetic-to-real ratio"),
        _key("augment.seed", "int", "0", "augmentation seed"),
        _key("augment.policy_index", "int", "-1", "augmentation policy index (-1 = middle)"),
        _key("study.rollouts", "int", "500", "model rollouts per (model, policy) pair"),
        _key("study.seed", "int", "0", "study rollout seed"),
    ]
}


def parse_config_text(text: str) -> dict[str, str]:
    """Raw key -> value strings from config text; no schema applied yet."""
    result: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"config line {lineno}: empty key")
        if key in result:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        result[key] = value.strip()
    return result


def _parse_typed(key: ConfigKey, raw: str):
    kind = key.kind
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "str":
            return raw
        if kind.startswith("choice:"):
            choices = kind.split(":", 1)[1].split("|")
            if raw not in choices:
                raise ConfigError(f"{key.name}: {raw!r} is not one of {choices}")
            return raw
        if kind == "list[int]":
            if raw == "":
                return None
            return [int(part) for part in raw.split(",")]
        if kind == "list[float]":
            if raw == "":
                return None
            return [float(part) for part in raw.split(",")]
    except ConfigError:
        raise
    except ValueError:
        raise ConfigError(f"{key.name}: cannot parse {raw!r} as {kind}") from None
    raise ConfigError(f"{key.name}: unknown kind {kind!r}")


class RunConfig:
    """Fully resolved configuration: every key present, values validated."""

    def __init__(self, values: dict[str, str]):
        unknown = sorted(set(values) - set(CONFIG_KEYS))
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        resolved = {name: key.default for name, key in CONFIG_KEYS.items()}
        resolved.update(values)
        for name, raw in resolved.items():
            _parse_typed(CONFIG_KEYS[name], raw)  # fail fast on bad values
        self._raw = resolved

    @classmethod
    def from_sources(
        cls, file_text: str | None = None, overrides: dict[str, str] | None = None
    ) -> "RunConfig":
        values: dict[str, str] = {}
        if file_text is not None:
            values.update(parse_config_text(file_text))
        if overrides:
            values.update({k: str(v) for k, v in overrides.items()})
        return cls(values)

    def get(self, name: str):
        if name not in CONFIG_KEYS:
            raise ConfigError(f"unknown configuration key {name!r}")
        return _parse_typed(CONFIG_KEYS[name], self._raw[name])

    def raw(self, name: str) -> str:
        if name not in CONFIG_KEYS:
            raise ConfigError(f"unknown configuration key {name!r}")
        return self._raw[name]

    def resolved_text(self) -> str:
        lines = [f"{name} = {self._raw[name]}" for name in sorted(self._raw)]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.resolved_text().encode("utf-8")).hexdigest()[:12]
