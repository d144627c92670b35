"""Model-based off-policy evaluation and ranking/accuracy metrics.

A policy's value estimate is the mean discounted return of Monte-Carlo
rollouts through a learned model, started from states drawn out of the
dataset's empirical initial-state set. Each rollout owns an independent
counter-derived random stream, so results do not depend on how rollouts
are batched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .dynamics import sample_batch
from .envs import PolicySet
from .errors import (
    ConfigError,
    DegenerateBootstrapError,
    DegenerateInputError,
    DivergenceError,
    ShapeError,
)


@dataclass(frozen=True)
class OpeReport:
    """One policy-value estimate.

    ``n_rollouts`` counts the rollouts contributing to the mean; rollouts
    that produced non-finite values were dropped and counted in
    ``n_diverged``. ``stderr`` is sample std / sqrt(n_rollouts).
    """

    value: float
    stderr: float
    n_rollouts: int
    n_diverged: int
    gamma: float
    horizon: int


def _check_rollout_args(model, policy, initial_states, num_rollouts, gamma, horizon):
    s0 = np.asarray(initial_states, dtype=np.float64)
    if s0.ndim != 2 or s0.shape[0] == 0:
        raise ShapeError("initial_states must be a nonempty (count, state_dim) array")
    if s0.shape[1] != model.state_dim or policy.state_dim != model.state_dim:
        raise ShapeError("state dims of model, policy, and initial states disagree")
    if policy.action_dim != model.action_dim:
        raise ShapeError("action dims of model and policy disagree")
    if num_rollouts < 1:
        raise ConfigError(f"num_rollouts must be >= 1, got {num_rollouts}")
    if horizon < 0:
        raise ConfigError(f"horizon must be >= 0, got {horizon}")
    if not (math.isfinite(gamma) and gamma >= 0.0):
        raise ConfigError(f"gamma must be finite and >= 0, got {gamma}")
    return s0


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def _finish_report(returns, alive, num_rollouts, gamma, horizon) -> OpeReport:
    finished = returns[alive]
    if finished.size == 0:
        raise DivergenceError("every rollout diverged; no value estimate exists")
    value = float(finished.mean())
    stderr = float(finished.std(ddof=1) / math.sqrt(finished.size)) if finished.size > 1 else 0.0
    return OpeReport(
        value=value,
        stderr=stderr,
        n_rollouts=int(finished.size),
        n_diverged=int(num_rollouts - finished.size),
        gamma=gamma,
        horizon=horizon,
    )


def mb_ope(
    model, policy, initial_states, num_rollouts: int, gamma: float, horizon: int, seed
) -> OpeReport:
    """Estimate a policy's value by rolling the model forward.

    Each rollout r gets its own stream from SeedSequence(seed).spawn: it
    picks a start state, then alternates policy and model draws for
    ``horizon`` steps, accumulating sum_t gamma^t r_{t+1}. Rollouts that
    go non-finite are excluded from the estimate and counted.
    """
    s0 = _check_rollout_args(model, policy, initial_states, num_rollouts, gamma, horizon)
    rngs = [np.random.default_rng(c) for c in _seed_sequence(seed).spawn(num_rollouts)]
    start = np.array([int(rng.integers(s0.shape[0])) for rng in rngs])
    states = s0[start]
    returns = np.zeros(num_rollouts)
    alive = np.ones(num_rollouts, dtype=bool)
    alive_idx = np.arange(num_rollouts)
    for t in range(horizon):
        live_rngs = [rngs[i] for i in alive_idx]
        actions = policy.sample_batch(states, live_rngs)
        next_states, rewards = sample_batch(model, states, actions, live_rngs)
        ok = np.isfinite(next_states).all(axis=1) & np.isfinite(rewards)
        if not ok.all():
            alive[alive_idx[~ok]] = False
            alive_idx = alive_idx[ok]
            if alive_idx.size == 0:
                break
            next_states, rewards = next_states[ok], rewards[ok]
        returns[alive_idx] += gamma**t * rewards
        states = next_states
    return _finish_report(returns, alive, num_rollouts, gamma, horizon)


def ensemble_mb_ope(
    models: Sequence, policy, initial_states, num_rollouts: int, gamma: float, horizon: int, seed
) -> OpeReport:
    """Like ``mb_ope`` but each step of each rollout uses a uniformly drawn
    ensemble member.

    Member picks come from a separate per-rollout stream, so an ensemble
    of one is bit-identical to ``mb_ope`` with that model.
    """
    if len(models) < 1:
        raise ConfigError("ensemble needs at least one model")
    first = models[0]
    for other in models[1:]:
        if other.state_dim != first.state_dim or other.action_dim != first.action_dim:
            raise ShapeError("ensemble members disagree on dimensions")
    s0 = _check_rollout_args(first, policy, initial_states, num_rollouts, gamma, horizon)
    children = _seed_sequence(seed).spawn(num_rollouts)
    rngs = [np.random.default_rng(c) for c in children]
    member_rngs = [np.random.default_rng(c.spawn(1)[0]) for c in children]
    start = np.array([int(rng.integers(s0.shape[0])) for rng in rngs])
    states = s0[start]
    returns = np.zeros(num_rollouts)
    alive = np.ones(num_rollouts, dtype=bool)
    alive_idx = np.arange(num_rollouts)
    for t in range(horizon):
        live_rngs = [rngs[i] for i in alive_idx]
        actions = policy.sample_batch(states, live_rngs)
        members = np.array([int(member_rngs[i].integers(len(models))) for i in alive_idx])
        next_states = np.empty_like(states)
        rewards = np.empty(states.shape[0])
        for j in np.unique(members):
            rows = np.nonzero(members == j)[0]
            ns, rw = sample_batch(
                models[j], states[rows], actions[rows], [live_rngs[r] for r in rows]
            )
            next_states[rows] = ns
            rewards[rows] = rw
        ok = np.isfinite(next_states).all(axis=1) & np.isfinite(rewards)
        if not ok.all():
            alive[alive_idx[~ok]] = False
            alive_idx = alive_idx[ok]
            if alive_idx.size == 0:
                break
            next_states, rewards = next_states[ok], rewards[ok]
        returns[alive_idx] += gamma**t * rewards
        states = next_states
    return _finish_report(returns, alive, num_rollouts, gamma, horizon)


def _check_paired(estimates, truths, min_len: int) -> tuple[np.ndarray, np.ndarray]:
    e = np.asarray(estimates, dtype=np.float64).reshape(-1)
    t = np.asarray(truths, dtype=np.float64).reshape(-1)
    if e.shape != t.shape:
        raise ShapeError(f"estimates and truths lengths differ: {e.shape} vs {t.shape}")
    if e.shape[0] < min_len:
        raise ConfigError(f"need at least {min_len} pairs, got {e.shape[0]}")
    if not (np.all(np.isfinite(e)) and np.all(np.isfinite(t))):
        raise ConfigError("metric inputs must be finite")
    return e, t


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, ties get the mean of their positions."""
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    ranks = np.empty(values.shape[0])
    i = 0
    while i < values.shape[0]:
        j = i
        while j + 1 < values.shape[0] and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rho(estimates, truths) -> float:
    """Rank correlation with average ranks for ties.

    Computed over doubled ranks (always integers) in exact integer
    arithmetic, with a single float division at the end.
    """
    e, t = _check_paired(estimates, truths, min_len=2)
    rx = np.rint(2.0 * _average_ranks(e)).astype(np.int64)
    ry = np.rint(2.0 * _average_ranks(t)).astype(np.int64)
    count = int(e.shape[0])
    sum_x, sum_y = int(rx.sum()), int(ry.sum())
    sum_xy = int(np.dot(rx, ry))
    sum_xx, sum_yy = int(np.dot(rx, rx)), int(np.dot(ry, ry))
    num = count * sum_xy - sum_x * sum_y
    den_x = count * sum_xx - sum_x * sum_x
    den_y = count * sum_yy - sum_y * sum_y
    if den_x == 0 or den_y == 0:
        raise DegenerateInputError("rank correlation undefined: an input is all ties")
    return float(num) / math.sqrt(float(den_x) * float(den_y))


def pearson_r(estimates, truths) -> float:
    e, t = _check_paired(estimates, truths, min_len=2)
    de = e - e.mean()
    dt = t - t.mean()
    sxx = float(np.dot(de, de))
    syy = float(np.dot(dt, dt))
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInputError("correlation undefined: an input has zero variance")
    return float(np.dot(de, dt)) / math.sqrt(sxx * syy)


def absolute_error(estimates, truths) -> float:
    e, t = _check_paired(estimates, truths, min_len=1)
    return float(np.mean(np.abs(e - t)))


def regret_at_k(estimates, truths, k: int) -> tuple[float, float]:
    """Value lost by deploying the best of the top-k estimated policies.

    Returns (raw, normalized). Raw regret is max(truths) minus the best
    truth among the k highest estimates (ties broken toward lower index);
    normalized divides by the truth range, with 0/0 defined as 0.
    """
    e, t = _check_paired(estimates, truths, min_len=1)
    if not 1 <= k <= e.shape[0]:
        raise ConfigError(f"k must be in [1, {e.shape[0]}], got {k}")
    top = np.argsort(-e, kind="stable")[:k]
    best = float(t.max())
    raw = best - float(t[top].max())
    if raw == 0.0:
        return 0.0, 0.0
    return raw, raw / (best - float(t.min()))


def bootstrap_metric(
    metric_fn: Callable[[np.ndarray, np.ndarray], float],
    estimates,
    truths,
    num_resamples: int = 1000,
    seed=0,
) -> tuple[float, float]:
    """Nonparametric bootstrap of a paired metric.

    Resamples pairs with replacement; resamples on which the metric is
    degenerate are skipped. All-degenerate resampling is an error.
    """
    e, t = _check_paired(estimates, truths, min_len=1)
    if num_resamples < 1:
        raise ConfigError(f"num_resamples must be >= 1, got {num_resamples}")
    rng = np.random.default_rng(seed)
    values = []
    skipped = 0
    for _ in range(num_resamples):
        idx = rng.integers(0, e.shape[0], e.shape[0])
        try:
            values.append(float(metric_fn(e[idx], t[idx])))
        except DegenerateInputError:
            skipped += 1
    if not values:
        raise DegenerateBootstrapError(f"all {num_resamples} bootstrap resamples were degenerate")
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return mean, std


@dataclass(frozen=True)
class MetricValue:
    value: float
    boot_mean: float
    boot_std: float


@dataclass(frozen=True)
class MetricsReport:
    """Point values and bootstrap mean/std for the four ranking metrics."""

    spearman: MetricValue
    pearson: MetricValue
    abs_error: MetricValue
    regret_raw: MetricValue
    regret_normalized: MetricValue
    k: int
    num_policies: int


def compute_metrics(
    estimates, truths, k: int = 1, num_resamples: int = 1000, seed=0
) -> MetricsReport:
    e, t = _check_paired(estimates, truths, min_len=2)
    seeds = np.random.SeedSequence(seed).spawn(5)

    def with_boot(fn: Callable, boot_seed) -> MetricValue:
        mean, std = bootstrap_metric(fn, e, t, num_resamples, boot_seed)
        return MetricValue(value=float(fn(e, t)), boot_mean=mean, boot_std=std)

    return MetricsReport(
        spearman=with_boot(spearman_rho, seeds[0]),
        pearson=with_boot(pearson_r, seeds[1]),
        abs_error=with_boot(absolute_error, seeds[2]),
        regret_raw=with_boot(lambda a, b: regret_at_k(a, b, k)[0], seeds[3]),
        regret_normalized=with_boot(lambda a, b: regret_at_k(a, b, k)[1], seeds[4]),
        k=k,
        num_policies=int(e.shape[0]),
    )


@dataclass(frozen=True)
class StudyEntry:
    model_id: str
    validation_nll: float
    policy_id: str
    estimate: float
    stderr: float
    truth: float


@dataclass(frozen=True)
class StudyModelSummary:
    model_id: str
    validation_nll: float
    pearson: float | None


@dataclass(frozen=True)
class StudyReport:
    """Scatter table relating model NLL to downstream evaluation quality."""

    entries: list[StudyEntry]
    model_summaries: list[StudyModelSummary]
    trend_rank_corr: float | None


def nll_vs_ope_study(
    models: Sequence[tuple[str, float, object]],
    policy_set: PolicySet,
    oracle: Callable[[object], float],
    initial_states,
    num_rollouts: int,
    gamma: float,
    horizon: int,
    seed,
) -> StudyReport:
    """Run OPE for every (model, policy) pair and summarize per model.

    ``models`` holds (model_id, validation_nll, model) triples. The trend
    statistic is the rank correlation between model quality (negated NLL)
    and that model's truth correlation; None when undefined.
    """
    if len(models) < 1:
        raise ConfigError("study needs at least one model")
    if len(policy_set) < 1:
        raise ConfigError("study needs at least one policy")
    truths = np.array([float(oracle(p)) for p in policy_set.policies])
    pair_seeds = np.random.SeedSequence(seed).spawn(len(models) * len(policy_set))
    entries: list[StudyEntry] = []
    summaries: list[StudyModelSummary] = []
    for i, (model_id, val_nll, model) in enumerate(models):
        estimates = []
        for j, policy in enumerate(policy_set.policies):
            report = mb_ope(
                model,
                policy,
                initial_states,
                num_rollouts,
                gamma,
                horizon,
                pair_seeds[i * len(policy_set) + j],
            )
            estimates.append(report.value)
            entries.append(
                StudyEntry(
                    model_id=model_id,
                    validation_nll=float(val_nll),
                    policy_id=policy_set.names[j],
                    estimate=report.value,
                    stderr=report.stderr,
                    truth=float(truths[j]),
                )
            )
        pearson: float | None
        try:
            pearson = pearson_r(np.array(estimates), truths)
        except (DegenerateInputError, ConfigError):
            pearson = None
        summaries.append(StudyModelSummary(model_id, float(val_nll), pearson))
    trend: float | None = None
    usable = [s for s in summaries if s.pearson is not None]
    if len(usable) >= 2:
        try:
            trend = spearman_rho(
                np.array([-s.validation_nll for s in usable]),
                np.array([s.pearson for s in usable]),
            )
        except DegenerateInputError:
            trend = None
    return StudyReport(entries=entries, model_summaries=summaries, trend_rank_corr=trend)
