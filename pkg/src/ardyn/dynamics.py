"""Probabilistic one-step dynamics models over (state, action) pairs.

Two families share a convention: the reward is appended to the next state
as one extra output dimension, so a model over an n-dim state predicts
n + 1 quantities.

* Feedforward: a single network maps (s, a) to a diagonal Gaussian over
  all n + 1 dimensions at once.
* Autoregressive: one network scores a single dimension conditioned on
  (s, a), the previously generated dimensions, and a one-hot dimension
  selector. The joint density is the chain-rule product over dimensions
  in a fixed order (states first, reward last).

Networks operate in z-scored space. Log-densities are reported in raw
units by adding the log-Jacobian of the normalization, so families with
different normalizations stay comparable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import TransitionDataset
from .errors import ConfigError, EmptyBatchError, MaskingError, NumericError, ShapeError
from .nn import MlpSpec, ParameterSet, mlp_forward

LOG_VARIANCE_MIN = -10.0
LOG_VARIANCE_MAX = 5.0
STD_FLOOR = 1e-8
_LOG_2PI = math.log(2.0 * math.pi)


def clamp_log_variance(raw: np.ndarray) -> np.ndarray:
    return np.clip(raw, LOG_VARIANCE_MIN, LOG_VARIANCE_MAX)


@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel z-score statistics, estimated on a training split.

    Standard deviations are floored at ``STD_FLOOR`` so constant channels
    stay usable. Next-state targets share the state statistics.
    """

    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray
    reward_mean: float
    reward_std: float

    @classmethod
    def identity(cls, state_dim: int, action_dim: int) -> "NormalizationStats":
        return cls(
            state_mean=np.zeros(state_dim),
            state_std=np.ones(state_dim),
            action_mean=np.zeros(action_dim),
            action_std=np.ones(action_dim),
            reward_mean=0.0,
            reward_std=1.0,
        )

    @property
    def state_dim(self) -> int:
        return self.state_mean.shape[0]

    @property
    def action_dim(self) -> int:
        return self.action_mean.shape[0]

    def normalize_states(self, states: np.ndarray) -> np.ndarray:
        return (states - self.state_mean) / self.state_std

    def denormalize_states(self, states: np.ndarray) -> np.ndarray:
        return states * self.state_std + self.state_mean

    def normalize_actions(self, actions: np.ndarray) -> np.ndarray:
        return (actions - self.action_mean) / self.action_std

    def denormalize_actions(self, actions: np.ndarray) -> np.ndarray:
        return actions * self.action_std + self.action_mean

    def normalize_rewards(self, rewards: np.ndarray) -> np.ndarray:
        return (rewards - self.reward_mean) / self.reward_std

    def denormalize_rewards(self, rewards: np.ndarray) -> np.ndarray:
        return rewards * self.reward_std + self.reward_mean

    def target_log_std_sum(self) -> float:
        """Log-Jacobian correction from normalized targets back to raw units."""
        return float(np.sum(np.log(self.state_std)) + math.log(self.reward_std))

    def per_target_log_std(self) -> np.ndarray:
        """Per-target-dimension log std (states then reward), length n + 1."""
        return np.concatenate([np.log(self.state_std), [math.log(self.reward_std)]])


def fit_normalization(dataset: TransitionDataset) -> NormalizationStats:
    """Estimate z-score stats (population std, floored) from a dataset."""
    dataset.require_nonempty()

    def _stats(column: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mean = column.mean(axis=0)
        std = np.maximum(column.std(axis=0), STD_FLOOR)
        return mean, std

    state_mean, state_std = _stats(dataset.states)
    action_mean, action_std = _stats(dataset.actions)
    reward_mean = float(dataset.rewards.mean())
    reward_std = float(max(dataset.rewards.std(), STD_FLOOR))
    return NormalizationStats(state_mean, state_std, action_mean, action_std,
                              reward_mean, reward_std)


@dataclass(frozen=True)
class GaussianPrediction:
    """Diagonal Gaussian in normalized space; log-variances are clamped."""

    mean: np.ndarray
    log_variance: np.ndarray

    def __post_init__(self) -> None:
        if self.mean.shape != self.log_variance.shape:
            raise ShapeError("mean and log_variance shapes disagree")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.log_variance))):
            raise NumericError("prediction contains non-finite values")
        if np.any(self.log_variance < LOG_VARIANCE_MIN) or np.any(self.log_variance > LOG_VARIANCE_MAX):
            raise NumericError("log_variance outside the clamp range")


@dataclass
class FeedforwardDynamics:
    """Diagonal-Gaussian model: input (s, a), output 2(n + 1) heads.

    The first n + 1 outputs are means, the rest raw log-variances.
    """

    spec: MlpSpec
    params: ParameterSet
    stats: NormalizationStats
    state_dim: int
    action_dim: int

    kind = "feedforward"

    def __post_init__(self) -> None:
        n, m = self.state_dim, self.action_dim
        if self.spec.input_dim != n + m:
            raise ShapeError(f"spec input_dim {self.spec.input_dim} != n + m = {n + m}")
        if self.spec.output_dim != 2 * (n + 1):
            raise ShapeError(f"spec output_dim {self.spec.output_dim} != 2(n + 1) = {2 * (n + 1)}")

    @classmethod
    def create(
        cls,
        state_dim: int,
        action_dim: int,
        hidden_layers: Sequence[int],
        seed,
        activation: str = "relu",
        stats: NormalizationStats | None = None,
    ) -> "FeedforwardDynamics":
        spec = MlpSpec(state_dim + action_dim, tuple(hidden_layers), 2 * (state_dim + 1), activation)
        params = ParameterSet.init_random(spec, seed)
        if stats is None:
            stats = NormalizationStats.identity(state_dim, action_dim)
        return cls(spec, params, stats, state_dim, action_dim)


@dataclass
class AutoregressiveDynamics:
    """Per-dimension Gaussian model with chain-rule factorization.

    Input layout (length 3n + m + 1): current state (n), action (m),
    previously generated target dims (n, zero where not yet revealed,
    z-scored where revealed), one-hot selector over the n + 1 targets.
    Output: one mean and one raw log-variance.

    ``dimension_order`` permutes the n state dimensions; the reward is
    always generated last.
    """

    spec: MlpSpec
    params: ParameterSet
    stats: NormalizationStats
    state_dim: int
    action_dim: int
    dimension_order: tuple[int, ...]

    kind = "autoregressive"

    def __post_init__(self) -> None:
        n, m = self.state_dim, self.action_dim
        self.dimension_order = tuple(int(i) for i in self.dimension_order)
        if sorted(self.dimension_order) != list(range(n)):
            raise ConfigError(f"dimension_order must permute 0..{n - 1}, got {self.dimension_order}")
        if self.spec.input_dim != 3 * n + m + 1:
            raise ShapeError(f"spec input_dim {self.spec.input_dim} != 3n + m + 1 = {3 * n + m + 1}")
        if self.spec.output_dim != 2:
            raise ShapeError(f"spec output_dim {self.spec.output_dim} != 2")
        # position of each physical state dim in the generation order
        positions = np.empty(n, dtype=np.int64)
        for k, j in enumerate(self.dimension_order):
            positions[j] = k
        self._positions = positions
        # reveal mask per generation step: step k sees dims at positions < k,
        # so the reward step (k = n) sees the whole generated state
        mask = np.zeros((n + 1, n))
        for k in range(n + 1):
            mask[k] = (positions < k).astype(np.float64)
        self._reveal_mask = mask
        one_hot = np.zeros((n + 1, n + 1))
        for k in range(n):
            one_hot[k, self.dimension_order[k]] = 1.0
        one_hot[n, n] = 1.0
        self._one_hot = one_hot

    @classmethod
    def create(
        cls,
        state_dim: int,
        action_dim: int,
        hidden_layers: Sequence[int],
        seed,
        activation: str = "relu",
        stats: NormalizationStats | None = None,
        dimension_order: Sequence[int] | None = None,
    ) -> "AutoregressiveDynamics":
        spec = MlpSpec(3 * state_dim + action_dim + 1, tuple(hidden_layers), 2, activation)
        params = ParameterSet.init_random(spec, seed)
        if stats is None:
            stats = NormalizationStats.identity(state_dim, action_dim)
        if dimension_order is None:
            dimension_order = tuple(range(state_dim))
        return cls(spec, params, stats, state_dim, action_dim, tuple(dimension_order))

    def target_index_at_step(self, step: int) -> int:
        """Physical target dim generated at a step (n means the reward)."""
        n = self.state_dim
        if not 0 <= step <= n:
            raise ConfigError(f"generation step must be in [0, {n}], got {step}")
        return self.dimension_order[step] if step < n else n


DynamicsModel = FeedforwardDynamics | AutoregressiveDynamics


def _check_pair_dims(model, states: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if states.ndim != 2 or states.shape[1] != model.state_dim:
        raise ShapeError(f"states have shape {states.shape}, expected (batch, {model.state_dim})")
    if actions.ndim != 2 or actions.shape[1] != model.action_dim:
        raise ShapeError(f"actions have shape {actions.shape}, expected (batch, {model.action_dim})")
    if states.shape[0] != actions.shape[0]:
        raise ShapeError("states and actions disagree on batch size")
    if states.shape[0] == 0:
        raise EmptyBatchError("need at least one (state, action) pair")
    return states, actions


def _check_dataset(model, dataset: TransitionDataset) -> None:
    dataset.require_nonempty()
    if dataset.state_dim != model.state_dim or dataset.action_dim != model.action_dim:
        raise ShapeError(
            f"dataset dims (n={dataset.state_dim}, m={dataset.action_dim}) do not match model "
            f"(n={model.state_dim}, m={model.action_dim})"
        )


def _normalized_targets(model, dataset: TransitionDataset) -> np.ndarray:
    """Targets as (batch, n + 1): z-scored next state then z-scored reward."""
    y_states = model.stats.normalize_states(dataset.next_states)
    y_reward = model.stats.normalize_rewards(dataset.rewards)
    return np.concatenate([y_states, y_reward[:, None]], axis=1)


def _gaussian_nll_terms(targets: np.ndarray, means: np.ndarray, log_vars: np.ndarray) -> np.ndarray:
    return 0.5 * _LOG_2PI + 0.5 * log_vars + 0.5 * np.square(targets - means) * np.exp(-log_vars)


def ff_predict_batch(
    model: FeedforwardDynamics, states: np.ndarray, actions: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Means and clamped log-variances, both (batch, n + 1), normalized space."""
    states, actions = _check_pair_dims(model, states, actions)
    x = np.concatenate(
        [model.stats.normalize_states(states), model.stats.normalize_actions(actions)], axis=1
    )
    out, _ = mlp_forward(model.spec, model.params, x)
    k = model.state_dim + 1
    return out[:, :k], clamp_log_variance(out[:, k:])


def ff_predict(model: FeedforwardDynamics, state: np.ndarray, action: np.ndarray) -> GaussianPrediction:
    """Single-pair prediction in normalized space."""
    means, log_vars = ff_predict_batch(model, np.asarray(state)[None, :], np.asarray(action)[None, :])
    return GaussianPrediction(mean=means[0], log_variance=log_vars[0])


def ff_nll_per_dim(model: FeedforwardDynamics, dataset: TransitionDataset) -> np.ndarray:
    """Mean NLL per target dimension (raw units), length n + 1, reward last."""
    _check_dataset(model, dataset)
    means, log_vars = ff_predict_batch(model, dataset.states, dataset.actions)
    targets = _normalized_targets(model, dataset)
    terms = _gaussian_nll_terms(targets, means, log_vars)
    return terms.mean(axis=0) + model.stats.per_target_log_std()


def ff_nll(model: FeedforwardDynamics, dataset: TransitionDataset) -> float:
    """Mean per-transition NLL in raw units (sum of per-dimension terms)."""
    return float(ff_nll_per_dim(model, dataset).sum())


def _ar_masked_inputs(
    model: AutoregressiveDynamics,
    s_norm: np.ndarray,
    a_norm: np.ndarray,
    y_states_norm: np.ndarray,
) -> np.ndarray:
    """Teacher-forced inputs for all generation steps: (batch, n + 1, input_dim)."""
    batch = s_norm.shape[0]
    n = model.state_dim
    steps = n + 1
    prev = y_states_norm[:, None, :] * model._reveal_mask[None, :, :]  # (batch, steps, n)
    rows = np.empty((batch, steps, model.spec.input_dim))
    rows[:, :, :n] = s_norm[:, None, :]
    rows[:, :, n : n + model.action_dim] = a_norm[:, None, :]
    rows[:, :, n + model.action_dim : 2 * n + model.action_dim] = prev
    rows[:, :, 2 * n + model.action_dim :] = model._one_hot[None, :, :]
    return rows


def ar_nll_per_dim(model: AutoregressiveDynamics, dataset: TransitionDataset) -> np.ndarray:
    """Mean NLL per physical target dim (raw units), reward last.

    Uses the masked-parallel path: each transition expands into n + 1 rows
    (one per generation step, ground-truth teacher forcing) and a single
    forward pass scores them all.
    """
    _check_dataset(model, dataset)
    n, m = model.state_dim, model.action_dim
    batch = len(dataset)
    s_norm = model.stats.normalize_states(dataset.states)
    a_norm = model.stats.normalize_actions(dataset.actions)
    y = _normalized_targets(model, dataset)
    rows = _ar_masked_inputs(model, s_norm, a_norm, y[:, :n]).reshape(batch * (n + 1), -1)
    out, _ = mlp_forward(model.spec, model.params, rows)
    means = out[:, 0].reshape(batch, n + 1)
    log_vars = clamp_log_variance(out[:, 1]).reshape(batch, n + 1)
    # step k targets physical dim order[k]; the reward step targets column n
    target_cols = np.array([model.target_index_at_step(k) for k in range(n + 1)])
    step_targets = y[:, target_cols]
    terms = _gaussian_nll_terms(step_targets, means, log_vars).mean(axis=0)
    per_dim = np.empty(n + 1)
    per_dim[target_cols] = terms
    return per_dim + model.stats.per_target_log_std()


def ar_nll(model: AutoregressiveDynamics, dataset: TransitionDataset) -> float:
    return float(ar_nll_per_dim(model, dataset).sum())


def ar_nll_sequential(model: AutoregressiveDynamics, dataset: TransitionDataset) -> float:
    """Reference NLL: one forward pass per transition per generation step.

    Exists as an independent route for validating the masked-parallel path.
    """
    _check_dataset(model, dataset)
    n = model.state_dim
    total = 0.0
    for i in range(len(dataset)):
        prev = np.zeros(n)
        for k in range(n + 1):
            target_dim = model.target_index_at_step(k)
            pred = ar_predict_dim(model, dataset.states[i], dataset.actions[i], prev, k)
            if target_dim < n:
                raw_target = dataset.next_states[i, target_dim]
                t = (raw_target - model.stats.state_mean[target_dim]) / model.stats.state_std[target_dim]
            else:
                t = (dataset.rewards[i] - model.stats.reward_mean) / model.stats.reward_std
            total += float(_gaussian_nll_terms(np.array([t]), pred.mean, pred.log_variance)[0])
            if target_dim < n:
                prev[target_dim] = dataset.next_states[i, target_dim]
        total += model.stats.target_log_std_sum()
    return total / len(dataset)


def ar_predict_dim(
    model: AutoregressiveDynamics,
    state: np.ndarray,
    action: np.ndarray,
    prev_dims: np.ndarray,
    index: int,
) -> GaussianPrediction:
    """Score/condition one generation step.

    Args:
        prev_dims: raw-unit next-state buffer, length n. Entries for dims
            at generation positions >= ``index`` must be exactly zero
            (nothing ahead of the current step may leak in).
        index: generation step in [0, n]; step n is the reward.

    Returns:
        One-dimensional Gaussian for the step's target, normalized space.
    """
    n = model.state_dim
    if not 0 <= index <= n:
        raise ConfigError(f"index must be in [0, {n}], got {index}")
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    prev = np.asarray(prev_dims, dtype=np.float64)
    if state.shape != (n,) or action.shape != (model.action_dim,) or prev.shape != (n,):
        raise ShapeError("state/action/prev_dims shapes do not match the model dimensions")
    hidden = model._positions >= index
    if np.any(prev[hidden] != 0.0):
        bad = int(np.nonzero(hidden & (prev != 0.0))[0][0])
        raise MaskingError(
            f"prev_dims[{bad}] is nonzero but dim {bad} is generated at or after step {index}"
        )
    revealed = ~hidden
    prev_norm = np.zeros(n)
    prev_norm[revealed] = (prev[revealed] - model.stats.state_mean[revealed]) / model.stats.state_std[revealed]
    row = np.concatenate([
        model.stats.normalize_states(state[None, :])[0],
        model.stats.normalize_actions(action[None, :])[0],
        prev_norm,
        model._one_hot[index],
    ])
    out, _ = mlp_forward(model.spec, model.params, row[None, :])
    return GaussianPrediction(mean=out[0, :1].copy(), log_variance=clamp_log_variance(out[0, 1:]).copy())


def _standard_normals(rngs, rows: int, cols: int) -> np.ndarray:
    """Draw a (rows, cols) standard-normal block.

    ``rngs`` is a single Generator (one vectorized draw) or a sequence of
    generators covering the rows in contiguous equal blocks (commonly one
    per row). Per-generator draw order is fixed, so batched sampling is
    bit-identical to running each block alone.
    """
    if isinstance(rngs, np.random.Generator):
        return rngs.standard_normal((rows, cols))
    count = len(rngs)
    if count == 0 or rows % count != 0:
        raise ShapeError(f"{count} generators cannot cover {rows} rows evenly")
    per = rows // count
    out = np.empty((rows, cols))
    for j, rng in enumerate(rngs):
        out[j * per : (j + 1) * per] = rng.standard_normal((per, cols))
    return out


def ff_sample_batch(
    model: FeedforwardDynamics, states: np.ndarray, actions: np.ndarray, rngs
) -> tuple[np.ndarray, np.ndarray]:
    """Draw (next_states, rewards) in raw units; one draw per target dim."""
    means, log_vars = ff_predict_batch(model, states, actions)
    eps = _standard_normals(rngs, means.shape[0], means.shape[1])
    y = means + np.exp(0.5 * log_vars) * eps
    n = model.state_dim
    return model.stats.denormalize_states(y[:, :n]), model.stats.denormalize_rewards(y[:, n])


def ff_sample(
    model: FeedforwardDynamics, state: np.ndarray, action: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, float]:
    next_states, rewards = ff_sample_batch(
        model, np.asarray(state)[None, :], np.asarray(action)[None, :], rng
    )
    return next_states[0], float(rewards[0])


def ar_sample_batch(
    model: AutoregressiveDynamics, states: np.ndarray, actions: np.ndarray, rngs
) -> tuple[np.ndarray, np.ndarray]:
    """Sequential generation in raw units: exactly n + 1 forward passes.

    Dimensions are generated in ``dimension_order`` with the reward last;
    each step conditions on the dims generated so far.
    """
    states, actions = _check_pair_dims(model, states, actions)
    batch = states.shape[0]
    n, m = model.state_dim, model.action_dim
    s_norm = model.stats.normalize_states(states)
    a_norm = model.stats.normalize_actions(actions)
    x = np.zeros((batch, n))  # generated dims so far, normalized
    row = np.empty((batch, model.spec.input_dim))
    row[:, :n] = s_norm
    row[:, n : n + m] = a_norm
    reward_norm = np.zeros(batch)
    for k in range(n + 1):
        row[:, n + m : 2 * n + m] = x
        row[:, 2 * n + m :] = model._one_hot[k]
        out, _ = mlp_forward(model.spec, model.params, row)
        mean = out[:, 0]
        log_var = clamp_log_variance(out[:, 1])
        eps = _standard_normals(rngs, batch, 1)[:, 0]
        value = mean + np.exp(0.5 * log_var) * eps
        if k < n:
            x[:, model.dimension_order[k]] = value
        else:
            reward_norm = value
    return model.stats.denormalize_states(x), model.stats.denormalize_rewards(reward_norm)


def ar_sample(
    model: AutoregressiveDynamics, state: np.ndarray, action: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, float]:
    next_states, rewards = ar_sample_batch(
        model, np.asarray(state)[None, :], np.asarray(action)[None, :], rng
    )
    return next_states[0], float(rewards[0])


def sample_batch(model, states: np.ndarray, actions: np.ndarray, rngs) -> tuple[np.ndarray, np.ndarray]:
    """Family-agnostic batched sampling dispatch."""
    if isinstance(model, FeedforwardDynamics):
        return ff_sample_batch(model, states, actions, rngs)
    if isinstance(model, AutoregressiveDynamics):
        return ar_sample_batch(model, states, actions, rngs)
    return model.sample_batch(states, actions, rngs)


def model_nll(model, dataset: TransitionDataset) -> float:
    """Family-agnostic mean NLL dispatch."""
    if isinstance(model, FeedforwardDynamics):
        return ff_nll(model, dataset)
    if isinstance(model, AutoregressiveDynamics):
        return ar_nll(model, dataset)
    raise ConfigError(f"unknown model type {type(model).__name__}")


def model_nll_per_dim(model, dataset: TransitionDataset) -> np.ndarray:
    if isinstance(model, FeedforwardDynamics):
        return ff_nll_per_dim(model, dataset)
    if isinstance(model, AutoregressiveDynamics):
        return ar_nll_per_dim(model, dataset)
    raise ConfigError(f"unknown model type {type(model).__name__}")


def gaussian_entropy_nats(log_variances: np.ndarray) -> float:
    """Differential entropy of a diagonal Gaussian given log-variances."""
    lv = np.asarray(log_variances, dtype=np.float64)
    return float(np.sum(0.5 * (_LOG_2PI + 1.0) + 0.5 * lv))
