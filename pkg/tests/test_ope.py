"""OPE estimator and metric tests against hand-coded oracles."""

import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from ardyn.dynamics import FeedforwardDynamics
from ardyn.envs import GaussianLinearPolicy, PolicySet
from ardyn.errors import (
    ConfigError,
    DegenerateBootstrapError,
    DegenerateInputError,
    DivergenceError,
    ShapeError,
)
from ardyn.ope import (
    MetricsReport,
    absolute_error,
    bootstrap_metric,
    compute_metrics,
    ensemble_mb_ope,
    mb_ope,
    nll_vs_ope_study,
    pearson_r,
    regret_at_k,
    spearman_rho,
)


class StubPolicy:
    """Emits a constant action; enough interface for rollouts."""

    def __init__(self, value=0.0, state_dim=1, action_dim=1):
        self.value = value
        self.state_dim = state_dim
        self.action_dim = action_dim

    def sample_batch(self, states, rngs):
        return np.full((states.shape[0], self.action_dim), self.value)


class UnitRewardModel:
    """Deterministic stub: state is fixed, every step yields reward 1."""

    state_dim = 1
    action_dim = 1

    def sample_batch(self, states, actions, rngs):
        return states, np.ones(states.shape[0])


class SignRewardModel:
    """Diverges (inf reward) whenever the current state is positive."""

    state_dim = 1
    action_dim = 1

    def sample_batch(self, states, actions, rngs):
        rewards = np.where(states[:, 0] > 0, np.inf, 1.0)
        return states, rewards


class ActionRewardModel:
    """Reward echoes the (scaled) first action coordinate."""

    state_dim = 1
    action_dim = 1

    def __init__(self, scale=1.0):
        self.scale = scale

    def sample_batch(self, states, actions, rngs):
        return states, self.scale * actions[:, 0]


def geometric(gamma, horizon):
    return (1.0 - gamma**horizon) / (1.0 - gamma)


class TestMbOpe:
    def test_geometric_series_value(self):
        report = mb_ope(UnitRewardModel(), StubPolicy(), [[0.0]], 8, 0.995, 1000, seed=0)
        assert report.value == pytest.approx(geometric(0.995, 1000), rel=1e-12)
        assert report.value == pytest.approx(198.6692, abs=1e-3)
        assert report.stderr == 0.0
        assert report.n_rollouts == 8 and report.n_diverged == 0

    def test_zero_horizon(self):
        report = mb_ope(UnitRewardModel(), StubPolicy(), [[0.0]], 4, 0.9, 0, seed=0)
        assert report.value == 0.0 and report.stderr == 0.0

    def test_deterministic_per_seed(self):
        model = FeedforwardDynamics.create(2, 1, (8,), seed=0)
        policy = GaussianLinearPolicy(np.zeros((1, 2)), np.zeros(1), np.array([0.2]))
        s0 = np.random.default_rng(0).normal(size=(16, 2))
        a = mb_ope(model, policy, s0, 32, 0.9, 5, seed=3)
        b = mb_ope(model, policy, s0, 32, 0.9, 5, seed=3)
        c = mb_ope(model, policy, s0, 32, 0.9, 5, seed=4)
        assert a.value == b.value and a.stderr == b.stderr
        assert a.value != c.value

    def test_diverged_rollouts_counted_and_excluded(self):
        report = mb_ope(SignRewardModel(), StubPolicy(), [[-1.0], [1.0]], 40, 0.9, 3, seed=1)
        assert report.n_rollouts + report.n_diverged == 40
        assert 5 < report.n_diverged < 35
        assert report.value == pytest.approx(geometric(0.9, 3), rel=1e-12)

    def test_all_diverged_is_an_error(self):
        with pytest.raises(DivergenceError):
            mb_ope(SignRewardModel(), StubPolicy(), [[1.0]], 6, 0.9, 3, seed=1)

    def test_argument_validation(self):
        model, policy = UnitRewardModel(), StubPolicy()
        with pytest.raises(ShapeError):
            mb_ope(model, policy, np.zeros((0, 1)), 4, 0.9, 3, seed=0)
        with pytest.raises(ShapeError):
            mb_ope(model, policy, np.zeros((4, 2)), 4, 0.9, 3, seed=0)
        with pytest.raises(ConfigError):
            mb_ope(model, policy, [[0.0]], 0, 0.9, 3, seed=0)
        with pytest.raises(ConfigError):
            mb_ope(model, policy, [[0.0]], 4, 0.9, -1, seed=0)
        with pytest.raises(ConfigError):
            mb_ope(model, policy, [[0.0]], 4, -0.1, 3, seed=0)


class TestEnsemble:
    def setup_method(self):
        self.policy = GaussianLinearPolicy(np.zeros((1, 2)), np.zeros(1), np.array([0.2]))
        self.s0 = np.random.default_rng(0).normal(size=(16, 2))

    def test_singleton_matches_mb_ope_bitwise(self):
        model = FeedforwardDynamics.create(2, 1, (8,), seed=0)
        single = mb_ope(model, self.policy, self.s0, 24, 0.9, 6, seed=9)
        ens = ensemble_mb_ope([model], self.policy, self.s0, 24, 0.9, 6, seed=9)
        assert ens.value == single.value
        assert ens.stderr == single.stderr

    def test_identical_members_leave_rollout_streams_alone(self):
        model = FeedforwardDynamics.create(2, 1, (8,), seed=0)
        single = mb_ope(model, self.policy, self.s0, 24, 0.9, 6, seed=9)
        ens = ensemble_mb_ope([model, model], self.policy, self.s0, 24, 0.9, 6, seed=9)
        assert ens.value == pytest.approx(single.value, rel=1e-9)

    def test_two_member_mixture(self):
        models = [ActionRewardModel(1.0), ActionRewardModel(3.0)]
        report = ensemble_mb_ope(models, StubPolicy(1.0), [[0.0]], 400, 1.0, 1, seed=2)
        # each step picks a member uniformly: mean reward sits between 1 and 3
        assert report.value == pytest.approx(2.0, abs=0.2)
        assert report.stderr > 0.0

    def test_validation(self):
        with pytest.raises(ConfigError):
            ensemble_mb_ope([], StubPolicy(), [[0.0]], 4, 0.9, 3, seed=0)
        a = FeedforwardDynamics.create(2, 1, (8,), seed=0)
        b = FeedforwardDynamics.create(3, 1, (8,), seed=0)
        with pytest.raises(ShapeError):
            ensemble_mb_ope([a, b], self.policy, self.s0, 4, 0.9, 3, seed=0)


def rank_oracle(values):
    return scipy.stats.rankdata(values, method="average")


class TestMetricOracles:
    def test_spearman_hand_case_with_ties(self):
        rho = spearman_rho([1.0, 2.0, 2.0, 3.0], [1.0, 2.0, 3.0, 4.0])
        assert rho == pytest.approx(math.sqrt(0.9), rel=1e-15)

    def test_spearman_perfect_and_reversed(self):
        e = np.array([0.3, 0.7, 1.5, 9.0])
        assert spearman_rho(e, e * 2 + 1) == 1.0
        assert spearman_rho(e, -e) == -1.0

    def test_spearman_matches_scipy_with_ties(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            size = int(rng.integers(2, 11))
            e = rng.integers(0, 4, size).astype(float)
            t = rng.integers(0, 4, size).astype(float)
            if np.unique(e).size < 2 or np.unique(t).size < 2:
                continue
            expected = scipy.stats.spearmanr(e, t).statistic
            assert spearman_rho(e, t) == pytest.approx(expected, abs=1e-12)

    def test_pearson_matches_numpy(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            size = int(rng.integers(2, 11))
            e, t = rng.normal(size=size), rng.normal(size=size)
            assert pearson_r(e, t) == pytest.approx(np.corrcoef(e, t)[0, 1], abs=1e-12)

    def test_absolute_error(self):
        assert absolute_error([1.0, 2.0], [2.0, 4.0]) == 1.5
        assert absolute_error([5.0], [5.0]) == 0.0

    def test_regret_hand_cases(self):
        e, t = [3.0, 3.0, 1.0], [0.0, 5.0, 9.0]
        assert regret_at_k(e, t, 1) == (9.0, 1.0)  # tie broken toward index 0
        raw, norm = regret_at_k(e, t, 2)
        assert raw == 4.0 and norm == pytest.approx(4.0 / 9.0, rel=1e-15)
        assert regret_at_k(e, t, 3) == (0.0, 0.0)
        assert regret_at_k([1.0, 2.0], [7.0, 7.0], 1) == (0.0, 0.0)

    def test_regret_matches_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(300):
            size = int(rng.integers(1, 11))
            e = rng.integers(0, 5, size).astype(float)
            t = rng.integers(0, 5, size).astype(float)
            k = int(rng.integers(1, size + 1))
            # brute force: stable sort by descending estimate, then best truth
            order = sorted(range(size), key=lambda i: (-e[i], i))[:k]
            raw = t.max() - max(t[i] for i in order)
            got_raw, got_norm = regret_at_k(e, t, k)
            assert got_raw == raw
            if raw == 0.0:
                assert got_norm == 0.0
            else:
                assert got_norm == raw / (t.max() - t.min())

    def test_degenerate_and_shape_errors(self):
        with pytest.raises(DegenerateInputError):
            spearman_rho([1.0, 1.0], [1.0, 2.0])
        with pytest.raises(DegenerateInputError):
            pearson_r([1.0, 2.0], [3.0, 3.0])
        with pytest.raises(ShapeError):
            pearson_r([1.0, 2.0], [1.0, 2.0, 3.0])
        with pytest.raises(ConfigError):
            spearman_rho([1.0], [2.0])
        with pytest.raises(ConfigError):
            pearson_r([np.nan, 1.0], [0.0, 1.0])
        with pytest.raises(ConfigError):
            regret_at_k([1.0, 2.0], [0.0, 1.0], 3)

    @settings(deadline=None, max_examples=60)
    @given(st.lists(st.integers(-5, 5), min_size=2, max_size=8))
    def test_spearman_invariant_under_monotone_maps(self, raw):
        t = list(range(len(raw)))
        e = np.array(raw, dtype=float)
        if np.unique(e).size < 2:
            return
        base = spearman_rho(e, t)
        assert spearman_rho(e**3 + 2.0, t) == base
        assert spearman_rho(np.exp(e / 5.0), t) == base

    @settings(deadline=None, max_examples=60)
    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=8))
    def test_abs_error_translation_invariant(self, raw):
        e = np.array(raw)
        t = np.arange(len(raw), dtype=float)
        assert absolute_error(e + 3.5, t + 3.5) == pytest.approx(absolute_error(e, t), rel=1e-12)


class TestBootstrap:
    def test_matches_stream_oracle(self):
        e = np.array([1.0, 3.0, 2.0, 5.0, 4.0])
        t = np.array([1.5, 2.0, 2.5, 4.0, 6.0])
        mean, std = bootstrap_metric(absolute_error, e, t, num_resamples=200, seed=7)
        rng = np.random.default_rng(7)
        values = []
        for _ in range(200):
            idx = rng.integers(0, 5, 5)
            values.append(absolute_error(e[idx], t[idx]))
        assert mean == pytest.approx(np.mean(values), rel=1e-15)
        assert std == pytest.approx(np.std(values, ddof=1), rel=1e-15)

    def test_degenerate_resamples_skipped(self):
        e, t = np.array([1.0, 2.0]), np.array([3.0, 4.0])
        mean, std = bootstrap_metric(spearman_rho, e, t, num_resamples=50, seed=0)
        assert math.isfinite(mean) and math.isfinite(std)

    def test_all_degenerate_raises(self):
        with pytest.raises(DegenerateBootstrapError):
            bootstrap_metric(spearman_rho, [1.0, 1.0], [1.0, 2.0], num_resamples=10, seed=0)

    def test_validation(self):
        with pytest.raises(ConfigError):
            bootstrap_metric(absolute_error, [1.0], [1.0], num_resamples=0, seed=0)


class TestComputeMetrics:
    def test_point_values_match_direct_calls(self):
        rng = np.random.default_rng(3)
        e, t = rng.normal(size=8), rng.normal(size=8)
        report = compute_metrics(e, t, k=2, num_resamples=100, seed=5)
        assert isinstance(report, MetricsReport)
        assert report.spearman.value == spearman_rho(e, t)
        assert report.pearson.value == pearson_r(e, t)
        assert report.abs_error.value == absolute_error(e, t)
        raw, norm = regret_at_k(e, t, 2)
        assert report.regret_raw.value == raw
        assert report.regret_normalized.value == norm
        assert report.k == 2 and report.num_policies == 8
        for metric in (report.spearman, report.pearson, report.abs_error):
            assert math.isfinite(metric.boot_mean) and metric.boot_std >= 0.0


class TestStudy:
    def test_scatter_and_trend(self):
        policies = [StubPolicy(v) for v in (0.5, 1.0, 2.0)]
        ps = PolicySet(names=["p0", "p1", "p2"], policies=policies)
        models = [
            ("good", 1.0, ActionRewardModel(1.0)),
            ("bad", 2.0, ActionRewardModel(-1.0)),
        ]
        factor = geometric(0.5, 3)
        report = nll_vs_ope_study(
            models, ps, lambda p: p.value, [[0.0]], 4, 0.5, 3, seed=0
        )
        assert len(report.entries) == 6
        for entry in report.entries:
            sign = 1.0 if entry.model_id == "good" else -1.0
            assert entry.estimate == pytest.approx(sign * factor * entry.truth, rel=1e-12)
            assert entry.stderr == 0.0
        by_id = {s.model_id: s for s in report.model_summaries}
        assert by_id["good"].pearson == pytest.approx(1.0, rel=1e-12)
        assert by_id["bad"].pearson == pytest.approx(-1.0, rel=1e-12)
        # lower NLL pairs with higher correlation -> perfect positive trend
        assert report.trend_rank_corr == 1.0

    def test_validation(self):
        ps = PolicySet(names=["p0"], policies=[StubPolicy(1.0)])
        with pytest.raises(ConfigError):
            nll_vs_ope_study([], ps, lambda p: 0.0, [[0.0]], 4, 0.9, 3, seed=0)
