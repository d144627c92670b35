"""Synthetic control environments with known-ground-truth policy values.

The linear-Gaussian family admits an exact policy-value oracle by moment
propagation, which is what makes end-to-end evaluation of the estimators
possible. A nonlinear pendulum variant is included for cases where only
the Monte-Carlo oracle applies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .data import TransitionDataset
from .dynamics import _standard_normals
from .errors import ConfigError, DegenerateInputError, NumericError, ShapeError

_LOG_2PI = math.log(2.0 * math.pi)


def spectral_radius(matrix: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(matrix))))


def _psd_factor(matrix: np.ndarray, name: str) -> np.ndarray:
    """A factor L with L L^T = matrix; rejects non-PSD input."""
    sym = 0.5 * (matrix + matrix.T)
    try:
        return np.linalg.cholesky(sym)
    except np.linalg.LinAlgError:
        eigvals, eigvecs = np.linalg.eigh(sym)
        if eigvals.min() < -1e-10 * max(1.0, eigvals.max()):
            raise ConfigError(f"{name} must be positive semi-definite") from None
        return eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))


def _check_psd(matrix: np.ndarray, name: str) -> np.ndarray:
    sym = 0.5 * (np.asarray(matrix, dtype=np.float64) + np.asarray(matrix, dtype=np.float64).T)
    if np.linalg.eigvalsh(sym).min() < -1e-10 * max(1.0, float(np.abs(sym).max())):
        raise ConfigError(f"{name} must be positive semi-definite")
    return sym


class GaussianLinearPolicy:
    """a = K s + bias + noise_std * eps, eps ~ N(0, I)."""

    __slots__ = ("gain", "bias", "noise_std")

    def __init__(self, gain: np.ndarray, bias: np.ndarray, noise_std: np.ndarray):
        self.gain = np.ascontiguousarray(gain, dtype=np.float64)
        self.bias = np.ascontiguousarray(bias, dtype=np.float64).reshape(-1)
        self.noise_std = np.ascontiguousarray(noise_std, dtype=np.float64).reshape(-1)
        if self.gain.ndim != 2:
            raise ShapeError("gain must be a (action_dim, state_dim) matrix")
        m = self.gain.shape[0]
        if self.bias.shape != (m,) or self.noise_std.shape != (m,):
            raise ShapeError("bias/noise_std lengths must match the gain's row count")
        if np.any(self.noise_std < 0.0):
            raise ConfigError("noise_std entries must be >= 0")

    @property
    def state_dim(self) -> int:
        return self.gain.shape[1]

    @property
    def action_dim(self) -> int:
        return self.gain.shape[0]

    def mean_actions(self, states: np.ndarray) -> np.ndarray:
        return states @ self.gain.T + self.bias

    def sample_batch(self, states: np.ndarray, rngs) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        eps = _standard_normals(rngs, states.shape[0], self.action_dim)
        return self.mean_actions(states) + self.noise_std * eps

    def sample(self, state: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return self.sample_batch(np.asarray(state)[None, :], rng)[0]

    def log_density(self, state: np.ndarray, action: np.ndarray) -> float:
        if np.any(self.noise_std == 0.0):
            raise DegenerateInputError("log_density undefined for zero-noise action dims")
        mean = self.mean_actions(np.asarray(state)[None, :])[0]
        z = (np.asarray(action) - mean) / self.noise_std
        return float(np.sum(-0.5 * _LOG_2PI - np.log(self.noise_std) - 0.5 * z * z))


@dataclass
class PolicySet:
    """Named evaluation policies plus their oracle values when known."""

    names: list[str]
    policies: list[GaussianLinearPolicy]
    oracle_values: np.ndarray | None = None

    def __post_init__(self) -> None:
        if len(self.names) != len(self.policies):
            raise ShapeError("names and policies must align")

    def __len__(self) -> int:
        return len(self.policies)


class LinearGaussianEnv:
    """s' = A s + B a + w with w ~ N(0, noise_cov); r = -(s^T Q s + a^T R a).

    The reward is computed on the current pair and returned alongside the
    next state, so a rollout of T steps accumulates T reward terms.
    """

    kind = "linear_gaussian"

    def __init__(
        self,
        transition: np.ndarray,
        control: np.ndarray,
        noise_cov: np.ndarray,
        state_cost: np.ndarray,
        action_cost: np.ndarray,
        init_mean: np.ndarray,
        init_cov: np.ndarray,
        horizon: int,
    ):
        self.transition = np.ascontiguousarray(transition, dtype=np.float64)
        self.control = np.ascontiguousarray(control, dtype=np.float64)
        n = self.transition.shape[0]
        if self.transition.shape != (n, n):
            raise ShapeError("transition matrix must be square")
        if self.control.ndim != 2 or self.control.shape[0] != n:
            raise ShapeError("control matrix must be (state_dim, action_dim)")
        m = self.control.shape[1]
        radius = spectral_radius(self.transition)
        if radius >= 1.0:
            raise ConfigError(f"transition matrix must be stable, spectral radius {radius:.4f}")
        self.noise_cov = _check_psd(noise_cov, "noise_cov")
        if self.noise_cov.shape != (n, n):
            raise ShapeError("noise_cov must be (state_dim, state_dim)")
        self.state_cost = _check_psd(state_cost, "state_cost")
        self.action_cost = _check_psd(action_cost, "action_cost")
        if self.state_cost.shape != (n, n) or self.action_cost.shape != (m, m):
            raise ShapeError("cost matrices must match state/action dims")
        self.init_mean = np.ascontiguousarray(init_mean, dtype=np.float64).reshape(n)
        self.init_cov = _check_psd(init_cov, "init_cov")
        if self.init_cov.shape != (n, n):
            raise ShapeError("init_cov must be (state_dim, state_dim)")
        if horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {horizon}")
        self.horizon = int(horizon)
        self._noise_factor = _psd_factor(self.noise_cov, "noise_cov")
        self._init_factor = _psd_factor(self.init_cov, "init_cov")

    @property
    def state_dim(self) -> int:
        return self.transition.shape[0]

    @property
    def action_dim(self) -> int:
        return self.control.shape[1]

    def reset_batch(self, rngs, count: int | None = None) -> np.ndarray:
        if count is None:
            if isinstance(rngs, np.random.Generator):
                raise ConfigError("count is required when a single generator is given")
            count = len(rngs)
        eps = _standard_normals(rngs, count, self.state_dim)
        return self.init_mean + eps @ self._init_factor.T

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return self.reset_batch(rng, 1)[0]

    def reward_batch(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        s_term = np.einsum("bi,ij,bj->b", states, self.state_cost, states)
        a_term = np.einsum("bi,ij,bj->b", actions, self.action_cost, actions)
        return -(s_term + a_term)

    def step_batch(self, states: np.ndarray, actions: np.ndarray, rngs) -> tuple[np.ndarray, np.ndarray]:
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        rewards = self.reward_batch(states, actions)
        eps = _standard_normals(rngs, states.shape[0], self.state_dim)
        next_states = states @ self.transition.T + actions @ self.control.T + eps @ self._noise_factor.T
        return next_states, rewards

    def step(self, state: np.ndarray, action: np.ndarray, rng: np.random.Generator):
        next_states, rewards = self.step_batch(
            np.asarray(state)[None, :], np.asarray(action)[None, :], rng
        )
        return next_states[0], float(rewards[0])

    def to_config(self) -> dict[str, str]:
        """Flatten to the key=value config vocabulary (matrices row-major)."""
        def flat(a: np.ndarray) -> str:
            return ",".join(repr(float(x)) for x in np.asarray(a).reshape(-1))

        return {
            "env.kind": "linear_gaussian",
            "env.state_dim": str(self.state_dim),
            "env.action_dim": str(self.action_dim),
            "env.horizon": str(self.horizon),
            "env.transition": flat(self.transition),
            "env.control": flat(self.control),
            "env.noise_cov": flat(self.noise_cov),
            "env.state_cost": flat(self.state_cost),
            "env.action_cost": flat(self.action_cost),
            "env.init_mean": flat(self.init_mean),
            "env.init_cov": flat(self.init_cov),
        }

    @classmethod
    def from_config(cls, items: dict[str, str]) -> "LinearGaussianEnv":
        try:
            n = int(items["env.state_dim"])
            m = int(items["env.action_dim"])

            def mat(key: str, rows: int, cols: int) -> np.ndarray:
                values = np.array([float(x) for x in items[key].split(",")])
                if values.size != rows * cols:
                    raise ConfigError(f"{key} must hold {rows * cols} values, got {values.size}")
                return values.reshape(rows, cols)

            return cls(
                transition=mat("env.transition", n, n),
                control=mat("env.control", n, m),
                noise_cov=mat("env.noise_cov", n, n),
                state_cost=mat("env.state_cost", n, n),
                action_cost=mat("env.action_cost", m, m),
                init_mean=mat("env.init_mean", 1, n)[0],
                init_cov=mat("env.init_cov", n, n),
                horizon=int(items["env.horizon"]),
            )
        except KeyError as missing:
            raise ConfigError(f"missing environment key {missing}") from None

    @classmethod
    def random_instance(
        cls,
        state_dim: int,
        action_dim: int,
        seed,
        horizon: int = 20,
        target_radius: float | None = None,
        noise_corr: float = 0.0,
        noise_scale: float = 0.1,
    ) -> "LinearGaussianEnv":
        """A random stable instance; optional chain correlation in the noise."""
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(state_dim, state_dim))
        if target_radius is None:
            target_radius = float(rng.uniform(0.5, 0.9))
        a *= target_radius / max(spectral_radius(a), 1e-12)
        b = rng.normal(size=(state_dim, action_dim)) / math.sqrt(state_dim)
        idx = np.arange(state_dim)
        corr = noise_corr ** np.abs(idx[:, None] - idx[None, :]) if noise_corr != 0.0 else np.eye(state_dim)
        noise_cov = noise_scale**2 * corr
        return cls(
            transition=a,
            control=b,
            noise_cov=noise_cov,
            state_cost=np.eye(state_dim),
            action_cost=0.1 * np.eye(action_dim),
            init_mean=np.zeros(state_dim),
            init_cov=0.25 * np.eye(state_dim),
            horizon=horizon,
        )


class CorrelatedChainEnv(LinearGaussianEnv):
    """Linear-Gaussian instance whose process noise is chain-correlated.

    noise_cov[i, j] = noise_scale^2 * rho^|i - j|. For rho != 0 the diagonal
    approximation provably underfits: the per-transition likelihood gap
    between the full and diagonalized noise Gaussian is
    0.5 * log(det diag(noise_cov) / det noise_cov), exposed as
    ``diag_gap_nats``.
    """

    kind = "correlated_chain"

    def __init__(
        self,
        state_dim: int = 4,
        action_dim: int = 1,
        rho: float = 0.9,
        noise_scale: float = 0.1,
        horizon: int = 20,
        seed: int = 0,
    ):
        if not -1.0 < rho < 1.0:
            raise ConfigError(f"rho must be in (-1, 1), got {rho}")
        if rho == 0.0:
            raise ConfigError("rho must be nonzero, otherwise the noise is already diagonal")
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(state_dim, state_dim))
        a *= 0.8 / max(spectral_radius(a), 1e-12)
        b = rng.normal(size=(state_dim, action_dim)) / math.sqrt(state_dim)
        idx = np.arange(state_dim)
        noise_cov = noise_scale**2 * rho ** np.abs(idx[:, None] - idx[None, :])
        super().__init__(
            transition=a,
            control=b,
            noise_cov=noise_cov,
            state_cost=np.eye(state_dim),
            action_cost=0.1 * np.eye(action_dim),
            init_mean=np.zeros(state_dim),
            init_cov=0.25 * np.eye(state_dim),
            horizon=horizon,
        )
        self.rho = float(rho)
        self.noise_scale = float(noise_scale)

    @property
    def diag_gap_nats(self) -> float:
        """Per-transition NLL advantage of full-covariance over diagonal noise."""
        sign, logdet = np.linalg.slogdet(self.noise_cov)
        if sign <= 0:
            raise NumericError("noise covariance is not positive definite")
        return float(0.5 * (np.sum(np.log(np.diag(self.noise_cov))) - logdet))


class PendulumEnv:
    """Damped noisy pendulum with quadratic cost; only the MC oracle applies."""

    kind = "pendulum"

    def __init__(
        self,
        dt: float = 0.05,
        gravity: float = 10.0,
        damping: float = 0.1,
        noise_std: tuple[float, float] = (1e-3, 0.05),
        horizon: int = 30,
    ):
        self.dt = float(dt)
        self.gravity = float(gravity)
        self.damping = float(damping)
        self.noise_std = np.array(noise_std, dtype=np.float64)
        if self.noise_std.shape != (2,) or np.any(self.noise_std < 0):
            raise ConfigError("noise_std must be two nonnegative values")
        if horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {horizon}")
        self.horizon = int(horizon)

    state_dim = 2
    action_dim = 1

    def reset_batch(self, rngs, count: int | None = None) -> np.ndarray:
        if count is None:
            if isinstance(rngs, np.random.Generator):
                raise ConfigError("count is required when a single generator is given")
            count = len(rngs)
        eps = _standard_normals(rngs, count, 2)
        return eps * np.array([0.5, 0.2])

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return self.reset_batch(rng, 1)[0]

    def reward_batch(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        theta, omega = states[:, 0], states[:, 1]
        u = actions[:, 0]
        return -(theta**2 + 0.1 * omega**2 + 0.001 * u**2)

    def step_batch(self, states: np.ndarray, actions: np.ndarray, rngs) -> tuple[np.ndarray, np.ndarray]:
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        rewards = self.reward_batch(states, actions)
        theta, omega = states[:, 0], states[:, 1]
        accel = -self.gravity * np.sin(theta) - self.damping * omega + actions[:, 0]
        omega_next = omega + self.dt * accel
        theta_next = theta + self.dt * omega_next
        eps = _standard_normals(rngs, states.shape[0], 2)
        next_states = np.stack([theta_next, omega_next], axis=1) + eps * self.noise_std
        return next_states, rewards

    def step(self, state: np.ndarray, action: np.ndarray, rng: np.random.Generator):
        next_states, rewards = self.step_batch(
            np.asarray(state)[None, :], np.asarray(action)[None, :], rng
        )
        return next_states[0], float(rewards[0])

    def to_config(self) -> dict[str, str]:
        return {
            "env.kind": "pendulum",
            "env.horizon": str(self.horizon),
            "env.dt": repr(self.dt),
            "env.gravity": repr(self.gravity),
            "env.damping": repr(self.damping),
            "env.noise_std": ",".join(repr(float(x)) for x in self.noise_std),
        }


def collect_dataset(env, policy, num_transitions: int, seed) -> tuple[TransitionDataset, np.ndarray]:
    """Roll the policy in the environment until enough transitions exist.

    Episodes run to the environment horizon; the final episode truncates.
    Returns the dataset and the stack of every initial state encountered
    (the empirical start-state set used by downstream evaluation).
    """
    if num_transitions < 1:
        raise ConfigError(f"num_transitions must be >= 1, got {num_transitions}")
    if policy.state_dim != env.state_dim or policy.action_dim != env.action_dim:
        raise ShapeError("policy dimensions do not match the environment")
    rng = np.random.default_rng(seed)
    states, actions, rewards, next_states, initial_states = [], [], [], [], []
    collected = 0
    while collected < num_transitions:
        state = env.reset(rng)
        initial_states.append(state.copy())
        for _ in range(env.horizon):
            action = policy.sample(state, rng)
            next_state, reward = env.step(state, action, rng)
            states.append(state.copy())
            actions.append(action.copy())
            rewards.append(reward)
            next_states.append(next_state.copy())
            state = next_state
            collected += 1
            if collected >= num_transitions:
                break
    dataset = TransitionDataset(
        np.array(states), np.array(actions), np.array(rewards), np.array(next_states)
    )
    return dataset, np.array(initial_states)


def true_policy_value_mc(
    env, policy, gamma: float, horizon: int, num_rollouts: int, seed
) -> tuple[float, float]:
    """Monte-Carlo estimate of E[sum_{t<horizon} gamma^t r_{t+1}] with its stderr."""
    if num_rollouts < 2:
        raise ConfigError("num_rollouts must be >= 2 for a standard error")
    if horizon < 0:
        raise ConfigError(f"horizon must be >= 0, got {horizon}")
    rng = np.random.default_rng(seed)
    returns = np.empty(num_rollouts)
    chunk = 65536
    done = 0
    while done < num_rollouts:
        size = min(chunk, num_rollouts - done)
        s = env.reset_batch(rng, size)
        acc = np.zeros(size)
        for t in range(horizon):
            a = policy.sample_batch(s, rng)
            s, r = env.step_batch(s, a, rng)
            acc += gamma**t * r
        returns[done : done + size] = acc
        done += size
    value = float(returns.mean())
    stderr = float(returns.std(ddof=1) / math.sqrt(num_rollouts))
    return value, stderr


def analytic_value_linear_gaussian(
    env: LinearGaussianEnv, policy: GaussianLinearPolicy, gamma: float, horizon: int
) -> float:
    """Exact policy value by propagating state mean and covariance.

    With s ~ N(mu, C) and a = K s + b + eps:
      E[r] = -(tr(Q C) + mu^T Q mu + tr(R (K C K^T + S_a)) + alpha^T R alpha)
    where alpha = K mu + b and S_a = diag(noise_std^2). The closed-loop
    moments advance as mu' = A mu + B alpha, C' = F C F^T + B S_a B^T + W
    with F = A + B K and W the process noise.
    """
    if not isinstance(env, LinearGaussianEnv):
        raise ConfigError("analytic oracle only applies to linear-Gaussian environments")
    if policy.state_dim != env.state_dim or policy.action_dim != env.action_dim:
        raise ShapeError("policy dimensions do not match the environment")
    if horizon < 0:
        raise ConfigError(f"horizon must be >= 0, got {horizon}")
    a_mat, b_mat = env.transition, env.control
    q_mat, r_mat = env.state_cost, env.action_cost
    k_mat, bias = policy.gain, policy.bias
    action_noise = np.diag(policy.noise_std**2)
    closed_loop = a_mat + b_mat @ k_mat
    mu = env.init_mean.copy()
    cov = env.init_cov.copy()
    value = 0.0
    for t in range(horizon):
        alpha = k_mat @ mu + bias
        action_cov = k_mat @ cov @ k_mat.T + action_noise
        expected_reward = -(
            np.trace(q_mat @ cov)
            + mu @ q_mat @ mu
            + np.trace(r_mat @ action_cov)
            + alpha @ r_mat @ alpha
        )
        value += gamma**t * expected_reward
        mu = a_mat @ mu + b_mat @ alpha
        cov = closed_loop @ cov @ closed_loop.T + b_mat @ action_noise @ b_mat.T + env.noise_cov
        if not np.isfinite(value) or np.abs(mu).max() > 1e9 or np.abs(cov).max() > 1e18:
            raise NumericError(f"moment propagation diverged at step {t}")
    return float(value)


def lqr_gain(env: LinearGaussianEnv) -> np.ndarray:
    """Optimal-regulator gain for the env's quadratic cost (a = gain @ s)."""
    ridge = 1e-9 * np.eye(env.action_dim)
    p = scipy.linalg.solve_discrete_are(
        env.transition, env.control, env.state_cost, env.action_cost + ridge
    )
    k = np.linalg.solve(
        env.action_cost + ridge + env.control.T @ p @ env.control,
        env.control.T @ p @ env.transition,
    )
    return -k


def make_policy_set(
    env: LinearGaussianEnv,
    count: int,
    quality_spread: float,
    seed,
    gamma: float = 0.995,
    horizon: int | None = None,
) -> PolicySet:
    """Generate policies ranging from near-optimal to clearly worse.

    Policy i interpolates the optimal regulator gain toward a random stable
    gain by quality_spread * i / (count - 1) and widens its action noise.
    Generation retries until the oracle values are pairwise distinct and
    span at least 20% of the best policy's magnitude (the spread check is
    skipped when quality_spread is 0, where values may legitimately tie).
    """
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    if quality_spread < 0.0:
        raise ConfigError(f"quality_spread must be >= 0, got {quality_spread}")
    if horizon is None:
        horizon = env.horizon
    k_star = lqr_gain(env)
    gain_scale = 1.0 + float(np.abs(k_star).mean())
    root = np.random.SeedSequence(seed)
    for attempt_seq in root.spawn(64):
        rng = np.random.default_rng(attempt_seq)
        policies = []
        for i in range(count):
            u = quality_spread * (i / (count - 1)) if count > 1 else 0.0
            gain = None
            for _ in range(128):
                candidate_gain = (1.0 - u) * k_star + u * rng.normal(
                    0.0, 0.5 * gain_scale, size=k_star.shape
                )
                if spectral_radius(env.transition + env.control @ candidate_gain) < 0.95:
                    gain = candidate_gain
                    break
            if gain is None:
                break
            bias = u * rng.normal(0.0, 0.1, size=env.action_dim)
            noise_std = (0.05 + 0.2 * u) * np.exp(rng.normal(0.0, 0.05, size=env.action_dim))
            policies.append(GaussianLinearPolicy(gain, bias, noise_std))
        if len(policies) != count:
            continue
        values = np.array(
            [analytic_value_linear_gaussian(env, p, gamma, horizon) for p in policies]
        )
        scale = 1.0 + float(np.abs(values).max())
        distinct = len(values) == 1 or np.min(np.diff(np.sort(values))) > 1e-9 * scale
        best = float(values.max())
        wide_enough = (
            quality_spread == 0.0
            or count == 1
            or float(values.max() - values.min()) >= 0.2 * abs(best)
        )
        if distinct and wide_enough:
            names = [f"policy_{i:02d}" for i in range(count)]
            return PolicySet(names=names, policies=policies, oracle_values=values)
    raise NumericError("could not generate a policy set meeting the spread requirements")
