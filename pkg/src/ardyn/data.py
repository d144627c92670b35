"""Transition records and the array-backed dataset used everywhere."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyBatchError, NumericError, ShapeError


@dataclass(frozen=True)
class Transition:
    """One environment step: (s, a, r, s')."""

    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray


class TransitionDataset:
    """Columnar storage for transitions, all float64.

    ``synthetic`` flags mark model-generated rows produced by augmentation;
    real data defaults to all-False.
    """

    __slots__ = ("states", "actions", "rewards", "next_states", "synthetic")

    def __init__(
        self,
        states: np.ndarray,
        actions: np.ndarray,
        rewards: np.ndarray,
        next_states: np.ndarray,
        synthetic: np.ndarray | None = None,
    ):
        states = np.ascontiguousarray(states, dtype=np.float64)
        actions = np.ascontiguousarray(actions, dtype=np.float64)
        rewards = np.ascontiguousarray(rewards, dtype=np.float64).reshape(-1)
        next_states = np.ascontiguousarray(next_states, dtype=np.float64)
        if states.ndim != 2 or actions.ndim != 2 or next_states.ndim != 2:
            raise ShapeError("states, actions, next_states must be 2-D arrays")
        count = states.shape[0]
        if actions.shape[0] != count or rewards.shape[0] != count or next_states.shape[0] != count:
            raise ShapeError("column lengths disagree")
        if next_states.shape[1] != states.shape[1]:
            raise ShapeError(
                f"next_states dim {next_states.shape[1]} != states dim {states.shape[1]}"
            )
        for name, col in (("states", states), ("actions", actions), ("rewards", rewards),
                          ("next_states", next_states)):
            if not np.all(np.isfinite(col)):
                raise NumericError(f"dataset column {name} contains non-finite values")
        if synthetic is None:
            synthetic = np.zeros(count, dtype=bool)
        else:
            synthetic = np.ascontiguousarray(synthetic, dtype=bool).reshape(-1)
            if synthetic.shape[0] != count:
                raise ShapeError("synthetic flag length disagrees with transition count")
        self.states = states
        self.actions = actions
        self.rewards = rewards
        self.next_states = next_states
        self.synthetic = synthetic

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def __len__(self) -> int:
        return self.states.shape[0]

    def __getitem__(self, index: int) -> Transition:
        return Transition(
            state=self.states[index].copy(),
            action=self.actions[index].copy(),
            reward=float(self.rewards[index]),
            next_state=self.next_states[index].copy(),
        )

    def subset(self, indices: np.ndarray) -> "TransitionDataset":
        idx = np.asarray(indices)
        return TransitionDataset(
            self.states[idx],
            self.actions[idx],
            self.rewards[idx],
            self.next_states[idx],
            self.synthetic[idx],
        )

    def require_nonempty(self) -> None:
        if len(self) == 0:
            raise EmptyBatchError("dataset has no transitions")

    @staticmethod
    def concat(first: "TransitionDataset", second: "TransitionDataset") -> "TransitionDataset":
        if first.state_dim != second.state_dim or first.action_dim != second.action_dim:
            raise ShapeError("cannot concatenate datasets with different dimensions")
        return TransitionDataset(
            np.concatenate([first.states, second.states]),
            np.concatenate([first.actions, second.actions]),
            np.concatenate([first.rewards, second.rewards]),
            np.concatenate([first.next_states, second.next_states]),
            np.concatenate([first.synthetic, second.synthetic]),
        )
