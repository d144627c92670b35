"""Truncated MPPI planning through a learned model, plus augmentation.

The planner refines a proposal over M iterations. Each iteration rolls N
candidate action sequences H steps through the model, scores them with
discounted rewards plus a terminal critic bootstrap, and reweights by a
softmax at temperature beta. Later iterations resample candidate actions
from the previous iteration's weighted mixture with added Gaussian
exploration noise (variance sigma_sq per action dim).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .data import TransitionDataset
from .dynamics import _standard_normals, sample_batch
from .envs import GaussianLinearPolicy, LinearGaussianEnv, spectral_radius
from .errors import ConfigError, PlanningFailureError, ShapeError


@dataclass(frozen=True)
class MppiConfig:
    """Planner hyperparameters."""

    iterations: int = 3
    candidates: int = 16
    horizon: int = 10
    beta: float = 0.1
    sigma_sq: float = 0.01
    gamma: float = 0.995

    def __post_init__(self) -> None:
        if self.iterations < 1 or self.candidates < 1:
            raise ConfigError("iterations and candidates must be >= 1")
        if self.horizon < 0:
            raise ConfigError(f"horizon must be >= 0, got {self.horizon}")
        if not self.beta > 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if self.sigma_sq < 0:
            raise ConfigError(f"sigma_sq must be >= 0, got {self.sigma_sq}")
        if not 0.0 <= self.gamma:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")


class ZeroCritic:
    """No bootstrap: plan on model rewards alone."""

    def q_values(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return np.zeros(np.asarray(states).shape[0])


class LinearQuadraticCritic:
    """Exact discounted Q-function of a linear policy in a linear env.

    V(s) = s^T P s + q^T s + c solves the policy's Bellman equation in
    closed form (P via a discounted Lyapunov equation); Q(s, a) adds one
    exact expectation step through the true dynamics. Serves as the
    ground-truth critic for planner experiments.
    """

    def __init__(self, env: LinearGaussianEnv, policy: GaussianLinearPolicy, gamma: float):
        if not 0.0 < gamma < 1.0:
            raise ConfigError(f"gamma must be in (0, 1), got {gamma}")
        if policy.state_dim != env.state_dim or policy.action_dim != env.action_dim:
            raise ShapeError("policy dimensions do not match the environment")
        a_mat, b_mat = env.transition, env.control
        q_mat, r_mat = env.state_cost, env.action_cost
        k_mat, bias = policy.gain, policy.bias
        closed_loop = a_mat + b_mat @ k_mat
        if gamma * spectral_radius(closed_loop) ** 2 >= 1.0:
            raise ConfigError("discounted closed loop is unstable; V diverges")
        action_noise = np.diag(policy.noise_std**2)
        drift = b_mat @ bias
        step_noise_cov = b_mat @ action_noise @ b_mat.T + env.noise_cov

        # P = -(Q + K^T R K) + gamma F^T P F
        quad_cost = -(q_mat + k_mat.T @ r_mat @ k_mat)
        p_mat = scipy.linalg.solve_discrete_lyapunov(
            math.sqrt(gamma) * closed_loop.T, quad_cost
        )
        # (I - gamma F^T) q = -2 K^T R bias + 2 gamma F^T P drift
        rhs = -2.0 * k_mat.T @ r_mat @ bias + 2.0 * gamma * closed_loop.T @ p_mat @ drift
        q_vec = np.linalg.solve(np.eye(env.state_dim) - gamma * closed_loop.T, rhs)
        const = (
            -(bias @ r_mat @ bias + np.trace(r_mat @ action_noise))
            + gamma
            * (np.trace(p_mat @ step_noise_cov) + drift @ p_mat @ drift + q_vec @ drift)
        ) / (1.0 - gamma)

        self.env = env
        self.gamma = float(gamma)
        self.p_mat = p_mat
        self.q_vec = q_vec
        self.const = float(const)

    def state_values(self, states: np.ndarray) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64)
        return np.einsum("bi,ij,bj->b", s, self.p_mat, s) + s @ self.q_vec + self.const

    def q_values(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64)
        a = np.asarray(actions, dtype=np.float64)
        rewards = self.env.reward_batch(s, a)
        mean_next = s @ self.env.transition.T + a @ self.env.control.T
        expected_v = (
            np.einsum("bi,ij,bj->b", mean_next, self.p_mat, mean_next)
            + mean_next @ self.q_vec
            + self.const
            + np.trace(self.p_mat @ self.env.noise_cov)
        )
        return rewards + self.gamma * expected_v


def softmax_weights(values: np.ndarray, temperature: float) -> np.ndarray:
    """Row-wise softmax of values / temperature; -inf entries get weight 0."""
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    v = np.asarray(values, dtype=np.float64) / temperature
    v = np.atleast_2d(v)
    shift = np.max(v, axis=1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    w = np.exp(v - shift)
    w[~np.isfinite(v)] = 0.0
    total = w.sum(axis=1, keepdims=True)
    if np.any(total <= 0.0):
        raise PlanningFailureError("no candidate received positive weight")
    return w / total


def _mppi_plan_batch(
    states: np.ndarray, policy, model, critic, config: MppiConfig, rngs: list
) -> np.ndarray:
    """Plan one action per row of ``states``; rngs holds one stream per row."""
    states = np.asarray(states, dtype=np.float64)
    episodes = states.shape[0]
    if len(rngs) != episodes:
        raise ShapeError("need exactly one generator per planning state")
    n_cand = config.candidates
    horizon = config.horizon
    m = policy.action_dim
    flat_states = np.repeat(states, n_cand, axis=0)  # episode-major blocks
    sigma = math.sqrt(config.sigma_sq)
    prev_actions: np.ndarray | None = None  # (episodes, n_cand, horizon + 1, m)
    prev_weights: np.ndarray | None = None  # (episodes, n_cand)

    for iteration in range(config.iterations):
        actions = np.empty((episodes, n_cand, horizon + 1, m))
        sim_states = flat_states.copy()
        alive = np.ones(episodes * n_cand, dtype=bool)
        returns = np.zeros(episodes * n_cand)
        for tau in range(horizon + 1):
            if iteration == 0:
                a_flat = policy.sample_batch(sim_states, rngs)
            else:
                picks = np.empty((episodes, n_cand), dtype=np.int64)
                for e in range(episodes):
                    picks[e] = rngs[e].choice(n_cand, size=n_cand, p=prev_weights[e])
                base = prev_actions[np.arange(episodes)[:, None], picks, tau]
                noise = _standard_normals(rngs, episodes * n_cand, m)
                a_flat = base.reshape(episodes * n_cand, m) + sigma * noise
            actions[:, :, tau] = a_flat.reshape(episodes, n_cand, m)
            if tau < horizon:
                next_states, rewards = sample_batch(model, sim_states, a_flat, rngs)
                ok = np.isfinite(next_states).all(axis=1) & np.isfinite(rewards)
                alive &= ok
                rewards = np.where(alive, rewards, 0.0)
                next_states[~alive] = 0.0
                returns += config.gamma**tau * rewards
                sim_states = next_states
        boot = critic.q_values(sim_states, a_flat)
        alive &= np.isfinite(boot)
        returns += config.gamma**horizon * np.where(alive, boot, 0.0)
        scores = np.where(alive, returns, -np.inf).reshape(episodes, n_cand)
        if np.any(~np.isfinite(scores).any(axis=1)):
            bad = int(np.nonzero(~np.isfinite(scores).any(axis=1))[0][0])
            raise PlanningFailureError(f"every candidate diverged for planning state {bad}")
        prev_weights = softmax_weights(scores, config.beta)
        prev_actions = actions

    chosen = np.empty((episodes, m))
    for e in range(episodes):
        pick = int(rngs[e].choice(n_cand, p=prev_weights[e]))
        chosen[e] = prev_actions[e, pick, 0]
    return chosen


def mppi_plan(state: np.ndarray, policy, model, critic, config: MppiConfig, seed) -> np.ndarray:
    """Plan a single action from one state.

    The first iteration proposes with the policy itself; every later
    iteration proposes from the previous iteration's softmax-weighted
    mixture over candidate actions (variance sigma_sq). The returned
    action is drawn from the final iteration's weights over first
    actions.
    """
    state = np.asarray(state, dtype=np.float64)
    if state.ndim != 1 or state.shape[0] != model.state_dim:
        raise ShapeError(f"state has shape {state.shape}, expected ({model.state_dim},)")
    rng = np.random.default_rng(seed)
    return _mppi_plan_batch(state[None, :], policy, model, critic, config, [rng])[0]


@dataclass(frozen=True)
class PlannerEvalReport:
    """Paired comparison of raw policy vs planner on the true environment."""

    raw_mean: float
    raw_stderr: float
    planned_mean: float
    planned_stderr: float
    diff_mean: float
    diff_stderr: float
    z_score: float
    n_episodes: int
    gamma: float
    raw_returns: np.ndarray = field(repr=False, default=None)
    planned_returns: np.ndarray = field(repr=False, default=None)


def evaluate_planner(
    env,
    policy,
    model,
    critic,
    config: MppiConfig,
    n_episodes: int,
    seed,
    episode_chunk: int = 2048,
) -> PlannerEvalReport:
    """Run both arms on the true env with shared per-episode streams.

    Episode e uses the same environment stream (reset and process noise)
    in both arms, so the comparison is paired; action streams differ by
    construction. Returns are discounted by ``config.gamma``.
    """
    if n_episodes < 2:
        raise ConfigError(f"n_episodes must be >= 2, got {n_episodes}")
    episode_seqs = np.random.SeedSequence(seed).spawn(n_episodes)
    raw_returns = np.empty(n_episodes)
    planned_returns = np.empty(n_episodes)
    for lo in range(0, n_episodes, episode_chunk):
        hi = min(lo + episode_chunk, n_episodes)
        seqs = [episode_seqs[i].spawn(3) for i in range(lo, hi)]
        for arm in ("raw", "planned"):
            env_rngs = [np.random.default_rng(s[0]) for s in seqs]
            act_rngs = [np.random.default_rng(s[1 if arm == "raw" else 2]) for s in seqs]
            s = env.reset_batch(env_rngs)
            acc = np.zeros(hi - lo)
            for t in range(env.horizon):
                if arm == "raw":
                    a = policy.sample_batch(s, act_rngs)
                else:
                    a = _mppi_plan_batch(s, policy, model, critic, config, act_rngs)
                s, r = env.step_batch(s, a, env_rngs)
                acc += config.gamma**t * r
            if arm == "raw":
                raw_returns[lo:hi] = acc
            else:
                planned_returns[lo:hi] = acc
    diffs = planned_returns - raw_returns
    diff_stderr = float(diffs.std(ddof=1) / math.sqrt(n_episodes))
    z = float(diffs.mean() / diff_stderr) if diff_stderr > 0 else math.inf
    return PlannerEvalReport(
        raw_mean=float(raw_returns.mean()),
        raw_stderr=float(raw_returns.std(ddof=1) / math.sqrt(n_episodes)),
        planned_mean=float(planned_returns.mean()),
        planned_stderr=float(planned_returns.std(ddof=1) / math.sqrt(n_episodes)),
        diff_mean=float(diffs.mean()),
        diff_stderr=diff_stderr,
        z_score=z,
        n_episodes=n_episodes,
        gamma=config.gamma,
        raw_returns=raw_returns,
        planned_returns=planned_returns,
    )


def augment_dataset(
    dataset: TransitionDataset, policy, model, ratio: float = 1.0, seed=0
) -> TransitionDataset:
    """Generate ceil(ratio * N) synthetic transitions.

    For each synthetic row: draw a dataset state uniformly, an action from
    the policy at that state, and the (next state, reward) from the model.
    The result carries synthetic=True flags; the input is untouched. Merge
    with ``TransitionDataset.concat`` when a combined set is wanted.
    """
    if not ratio > 0.0:
        raise ConfigError(f"ratio must be > 0, got {ratio}")
    dataset.require_nonempty()
    if policy.state_dim != dataset.state_dim or policy.action_dim != dataset.action_dim:
        raise ShapeError("policy dimensions do not match the dataset")
    if model.state_dim != dataset.state_dim or model.action_dim != dataset.action_dim:
        raise ShapeError("model dimensions do not match the dataset")
    count = math.ceil(ratio * len(dataset))
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(dataset), count)
    states = dataset.states[idx]
    actions = policy.sample_batch(states, rng)
    next_states, rewards = sample_batch(model, states, actions, rng)
    return TransitionDataset(
        states, actions, rewards, next_states, synthetic=np.ones(count, dtype=bool)
    )
