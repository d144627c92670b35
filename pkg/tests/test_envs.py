"""Environment, policy, and value-oracle tests."""

import math

import numpy as np
import pytest

from ardyn.envs import (
    CorrelatedChainEnv,
    GaussianLinearPolicy,
    LinearGaussianEnv,
    PendulumEnv,
    analytic_value_linear_gaussian,
    collect_dataset,
    lqr_gain,
    make_policy_set,
    spectral_radius,
    true_policy_value_mc,
)
from ardyn.errors import ConfigError, DegenerateInputError, ShapeError


def deterministic_env(a, q, mu0, horizon):
    """Noise-free scalar-family instance for closed-form value checks."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    n = a.shape[0]
    return LinearGaussianEnv(
        transition=a,
        control=np.zeros((n, 1)),
        noise_cov=np.zeros((n, n)),
        state_cost=np.atleast_2d(q),
        action_cost=np.zeros((1, 1)),
        init_mean=np.asarray(mu0, dtype=np.float64),
        init_cov=np.zeros((n, n)),
        horizon=horizon,
    )


def value_oracle_second_moment(env, policy, gamma, horizon):
    """Independent analytic value via second-moment recursion (zero-bias policies)."""
    assert np.all(policy.bias == 0.0)
    k = policy.gain
    f = env.transition + env.control @ k
    s_a = np.diag(policy.noise_std**2)
    second = env.init_cov + np.outer(env.init_mean, env.init_mean)
    value = 0.0
    for t in range(horizon):
        action_second = k @ second @ k.T + s_a
        value += gamma**t * -(
            np.trace(env.state_cost @ second) + np.trace(env.action_cost @ action_second)
        )
        second = (
            f @ second @ f.T
            + env.control @ s_a @ env.control.T
            + env.noise_cov
        )
    return value


class TestLinearGaussianEnv:
    def test_spectral_radius_matches_eigvals(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            m = rng.normal(size=(4, 4))
            assert spectral_radius(m) == pytest.approx(
                np.abs(np.linalg.eigvals(m)).max(), rel=1e-12
            )

    def test_unstable_transition_rejected(self):
        with pytest.raises(ConfigError, match="stable"):
            deterministic_env(np.eye(2) * 1.01, np.eye(2), np.zeros(2), 5)

    def test_non_psd_noise_rejected(self):
        with pytest.raises(ConfigError, match="positive semi-definite"):
            LinearGaussianEnv(
                transition=0.5 * np.eye(2),
                control=np.zeros((2, 1)),
                noise_cov=np.array([[1.0, 2.0], [2.0, 1.0]]),
                state_cost=np.eye(2),
                action_cost=np.eye(1),
                init_mean=np.zeros(2),
                init_cov=np.eye(2),
                horizon=5,
            )

    def test_reward_formula(self):
        env = LinearGaussianEnv.random_instance(3, 2, seed=1)
        rng = np.random.default_rng(2)
        s, a = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
        expected = [
            -(row_s @ env.state_cost @ row_s + row_a @ env.action_cost @ row_a)
            for row_s, row_a in zip(s, a)
        ]
        np.testing.assert_allclose(env.reward_batch(s, a), expected, rtol=1e-12)

    def test_step_noise_covariance_including_off_diagonals(self):
        env = CorrelatedChainEnv(state_dim=3, rho=0.9, noise_scale=0.1, seed=0)
        rng = np.random.default_rng(3)
        count = 60_000
        next_states, _ = env.step_batch(np.zeros((count, 3)), np.zeros((count, 1)), rng)
        sample_cov = np.cov(next_states.T)
        np.testing.assert_allclose(sample_cov, env.noise_cov, atol=5e-4)

    def test_reset_moments(self):
        env = LinearGaussianEnv.random_instance(3, 1, seed=4)
        rng = np.random.default_rng(5)
        states = env.reset_batch(rng, 60_000)
        np.testing.assert_allclose(states.mean(axis=0), env.init_mean, atol=5e-3)
        np.testing.assert_allclose(np.cov(states.T), env.init_cov, atol=5e-3)

    def test_reset_single_generator_needs_count(self):
        env = LinearGaussianEnv.random_instance(2, 1, seed=0)
        with pytest.raises(ConfigError):
            env.reset_batch(np.random.default_rng(0))

    def test_config_round_trip_is_exact(self):
        env = LinearGaussianEnv.random_instance(3, 2, seed=9, horizon=17)
        other = LinearGaussianEnv.from_config(env.to_config())
        for attr in ("transition", "control", "noise_cov", "state_cost",
                     "action_cost", "init_mean", "init_cov"):
            np.testing.assert_array_equal(getattr(env, attr), getattr(other, attr))
        assert other.horizon == 17


class TestPolicies:
    def test_sample_mean_and_noise(self):
        policy = GaussianLinearPolicy(np.array([[1.0, -2.0]]), np.array([0.5]), np.array([0.3]))
        rng = np.random.default_rng(0)
        states = np.tile([2.0, 1.0], (50_000, 1))
        actions = policy.sample_batch(states, rng)
        assert actions.mean() == pytest.approx(2.0 - 2.0 + 0.5, abs=0.01)
        assert actions.std() == pytest.approx(0.3, rel=0.02)

    def test_log_density_matches_formula(self):
        policy = GaussianLinearPolicy(np.array([[0.5]]), np.array([0.0]), np.array([0.2]))
        state, action = np.array([2.0]), np.array([1.3])
        z = (1.3 - 1.0) / 0.2
        expected = -0.5 * math.log(2 * math.pi) - math.log(0.2) - 0.5 * z * z
        assert policy.log_density(state, action) == pytest.approx(expected, rel=1e-12)

    def test_zero_noise_log_density_degenerate(self):
        policy = GaussianLinearPolicy(np.array([[0.5]]), np.array([0.0]), np.array([0.0]))
        with pytest.raises(DegenerateInputError):
            policy.log_density(np.array([1.0]), np.array([0.5]))

    def test_shape_validation(self):
        with pytest.raises(ShapeError):
            GaussianLinearPolicy(np.zeros(3), np.zeros(1), np.ones(1))
        with pytest.raises(ConfigError):
            GaussianLinearPolicy(np.zeros((1, 3)), np.zeros(1), np.array([-0.1]))


class TestCollectDataset:
    def test_episode_structure_and_truncation(self):
        env = LinearGaussianEnv.random_instance(2, 1, seed=6, horizon=10)
        policy = GaussianLinearPolicy(np.zeros((1, 2)), np.zeros(1), np.array([0.1]))
        ds, initial_states = collect_dataset(env, policy, 25, seed=7)
        assert len(ds) == 25
        assert initial_states.shape == (3, 2)  # ceil(25 / 10) resets
        np.testing.assert_array_equal(ds.states[0], initial_states[0])
        np.testing.assert_array_equal(ds.states[10], initial_states[1])
        np.testing.assert_array_equal(ds.states[20], initial_states[2])
        # within an episode the chain is contiguous; across a reset it is not
        np.testing.assert_array_equal(ds.states[1], ds.next_states[0])
        assert not np.array_equal(ds.states[10], ds.next_states[9])

    def test_deterministic_per_seed(self):
        env = LinearGaussianEnv.random_instance(2, 1, seed=6)
        policy = GaussianLinearPolicy(np.zeros((1, 2)), np.zeros(1), np.array([0.1]))
        a, s0a = collect_dataset(env, policy, 40, seed=8)
        b, s0b = collect_dataset(env, policy, 40, seed=8)
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.rewards, b.rewards)
        np.testing.assert_array_equal(s0a, s0b)

    def test_dimension_mismatch(self):
        env = LinearGaussianEnv.random_instance(2, 1, seed=6)
        policy = GaussianLinearPolicy(np.zeros((1, 3)), np.zeros(1), np.array([0.1]))
        with pytest.raises(ShapeError):
            collect_dataset(env, policy, 10, seed=0)


class TestValueOracles:
    def test_analytic_single_step_is_initial_cost(self):
        # horizon 1, zero action cost: value = -(tr(Q C0) + mu0^T Q mu0) = -n
        env = LinearGaussianEnv(
            transition=0.5 * np.eye(3),
            control=np.zeros((3, 1)),
            noise_cov=np.zeros((3, 3)),
            state_cost=np.eye(3),
            action_cost=np.zeros((1, 1)),
            init_mean=np.zeros(3),
            init_cov=np.eye(3),
            horizon=1,
        )
        policy = GaussianLinearPolicy(np.zeros((1, 3)), np.zeros(1), np.array([0.1]))
        assert analytic_value_linear_gaussian(env, policy, 0.9, 1) == pytest.approx(-3.0, abs=1e-12)

    def test_deterministic_geometric_rollout(self):
        env = deterministic_env([[0.5]], [[1.0]], [1.0], horizon=3)
        policy = GaussianLinearPolicy(np.zeros((1, 1)), np.zeros(1), np.array([0.0]))
        expected = -(1.0 + 0.9 * 0.25 + 0.81 * 0.0625)
        assert analytic_value_linear_gaussian(env, policy, 0.9, 3) == pytest.approx(expected, abs=1e-12)
        mc, stderr = true_policy_value_mc(env, policy, 0.9, 3, 16, seed=0)
        assert mc == pytest.approx(expected, abs=1e-12)
        assert stderr == 0.0

    def test_analytic_matches_second_moment_oracle(self):
        rng = np.random.default_rng(10)
        for trial in range(10):
            env = LinearGaussianEnv.random_instance(3, 2, seed=trial, noise_corr=0.5)
            gain = 0.1 * rng.normal(size=(2, 3))
            if spectral_radius(env.transition + env.control @ gain) >= 1.0:
                continue
            policy = GaussianLinearPolicy(gain, np.zeros(2), np.array([0.2, 0.1]))
            got = analytic_value_linear_gaussian(env, policy, 0.97, 15)
            want = value_oracle_second_moment(env, policy, 0.97, 15)
            assert got == pytest.approx(want, rel=1e-10)

    def test_analytic_matches_monte_carlo(self):
        rng = np.random.default_rng(11)
        checked = 0
        for trial in range(12):
            env = LinearGaussianEnv.random_instance(3, 1, seed=100 + trial)
            gain = 0.2 * rng.normal(size=(1, 3))
            if spectral_radius(env.transition + env.control @ gain) >= 0.98:
                continue
            policy = GaussianLinearPolicy(gain, np.array([0.05]), np.array([0.15]))
            exact = analytic_value_linear_gaussian(env, policy, 0.995, 20)
            mc, stderr = true_policy_value_mc(env, policy, 0.995, 20, 4000, seed=trial)
            assert abs(mc - exact) <= 3.0 * stderr + 1e-9
            checked += 1
        assert checked >= 8

    def test_mc_needs_two_rollouts(self):
        env = LinearGaussianEnv.random_instance(2, 1, seed=0)
        policy = GaussianLinearPolicy(np.zeros((1, 2)), np.zeros(1), np.array([0.1]))
        with pytest.raises(ConfigError):
            true_policy_value_mc(env, policy, 0.99, 5, 1, seed=0)

    def test_lqr_gain_beats_scaled_variants(self):
        env = LinearGaussianEnv.random_instance(3, 1, seed=12, horizon=40)
        k_star = lqr_gain(env)
        noise = np.array([0.01])
        best = analytic_value_linear_gaussian(
            env, GaussianLinearPolicy(k_star, np.zeros(1), noise), 0.999, 40
        )
        for scale in (0.3, 0.6, 1.5):
            value = analytic_value_linear_gaussian(
                env, GaussianLinearPolicy(scale * k_star, np.zeros(1), noise), 0.999, 40
            )
            assert best >= value - 1e-9

    def test_lqr_riccati_residual(self):
        env = LinearGaussianEnv.random_instance(3, 2, seed=13)
        k = -lqr_gain(env)  # solver convention: a = -k s
        a, b, q, r = env.transition, env.control, env.state_cost, env.action_cost + 1e-9 * np.eye(2)
        # fixed point of the closed-loop Bellman recursion for quadratic cost
        f = a - b @ k
        cost = q + k.T @ r @ k
        p = cost.copy()
        for _ in range(20_000):
            p = cost + f.T @ p @ f
        np.testing.assert_allclose(k, np.linalg.solve(r + b.T @ p @ b, b.T @ p @ a), atol=1e-6)


class TestPolicySet:
    def test_basic_properties(self):
        env = LinearGaussianEnv.random_instance(3, 1, seed=14)
        ps = make_policy_set(env, 6, 1.0, seed=2)
        assert len(ps) == 6
        assert ps.names == [f"policy_{i:02d}" for i in range(6)]
        values = ps.oracle_values
        assert len(np.unique(values)) == 6
        assert values[0] == values.max()  # index 0 stays closest to optimal
        assert values.max() - values.min() >= 0.2 * abs(values.max())
        for p in ps.policies:
            assert spectral_radius(env.transition + env.control @ p.gain) < 0.95

    def test_zero_spread_still_distinct(self):
        env = LinearGaussianEnv.random_instance(2, 1, seed=15)
        ps = make_policy_set(env, 4, 0.0, seed=3)
        assert len(np.unique(ps.oracle_values)) == 4

    def test_count_one(self):
        env = LinearGaussianEnv.random_instance(2, 1, seed=15)
        ps = make_policy_set(env, 1, 1.0, seed=3)
        assert len(ps) == 1


class TestCorrelatedChain:
    def test_gap_matches_closed_form(self):
        env = CorrelatedChainEnv(state_dim=4, rho=0.9, noise_scale=0.1, seed=0)
        closed_form = -0.5 * 3 * math.log(1.0 - 0.81)
        assert env.diag_gap_nats == pytest.approx(closed_form, rel=1e-10)
        assert env.diag_gap_nats == pytest.approx(2.4911, abs=5e-4)
        # scale invariance: the gap only depends on the correlation profile
        scaled = CorrelatedChainEnv(state_dim=4, rho=0.9, noise_scale=0.7, seed=0)
        assert scaled.diag_gap_nats == pytest.approx(env.diag_gap_nats, rel=1e-10)

    def test_rho_validation(self):
        with pytest.raises(ConfigError):
            CorrelatedChainEnv(rho=0.0)
        with pytest.raises(ConfigError):
            CorrelatedChainEnv(rho=1.0)


class TestPendulum:
    def test_semi_implicit_euler_step(self):
        env = PendulumEnv(dt=0.1, gravity=9.0, damping=0.2, noise_std=(0.0, 0.0))
        state = np.array([[0.3, -0.5]])
        action = np.array([[2.0]])
        next_states, rewards = env.step_batch(state, action, np.random.default_rng(0))
        accel = -9.0 * math.sin(0.3) - 0.2 * (-0.5) + 2.0
        omega_next = -0.5 + 0.1 * accel
        theta_next = 0.3 + 0.1 * omega_next
        np.testing.assert_allclose(next_states[0], [theta_next, omega_next], rtol=1e-12)
        assert rewards[0] == pytest.approx(-(0.09 + 0.1 * 0.25 + 0.001 * 4.0), rel=1e-12)

    def test_collect_and_mc_value_run(self):
        env = PendulumEnv(horizon=8)
        policy = GaussianLinearPolicy(np.array([[-4.0, -1.0]]), np.zeros(1), np.array([0.2]))
        ds, s0 = collect_dataset(env, policy, 30, seed=1)
        assert len(ds) == 30 and s0.shape == (4, 2)
        value, stderr = true_policy_value_mc(env, policy, 0.99, 8, 500, seed=2)
        assert value < 0 and stderr > 0
