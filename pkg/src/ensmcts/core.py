"""Deterministic environment/model contract shared by every environment and the planner.

Environments here are pure: ``step`` maps ``(state, action)`` to a
:class:`StepOutcome` without touching the input state, so the same object
serves as the real environment and as the planner's model. A learned model
only has to provide the same ``step`` signature.
"""
from __future__ import annotations

import abc
from dataclasses import dataclass
from typing import Any, Hashable, Sequence

import numpy as np


class EnvError(ValueError):
    """Raised on contract violations (bad action, stepping a terminal state, ...)."""


@dataclass(frozen=True)
class EnvSpec:
    action_count: int
    max_episode_len: int
    observation_len: int

    def __post_init__(self):
        if self.action_count < 2:
            raise EnvError(f"action_count must be >= 2, got {self.action_count}")
        if self.max_episode_len < 1 or self.observation_len < 1:
            raise EnvError("max_episode_len and observation_len must be positive")


@dataclass(frozen=True)
class StepOutcome:
    next_state: Any
    reward: float
    done: bool
    solved: bool = False


@dataclass
class Episode:
    """A real trajectory ``(s_t, a_t, r_t)`` plus the state reached after the last action.

    ``root_values`` holds, per step, the root's transposition-table value
    vector as stored at the end of the episode (used for bootstrap targets).
    """

    states: list
    actions: list
    rewards: list
    final_state: Any
    solved: bool
    root_values: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.states)

    @property
    def transitions(self) -> list[tuple]:
        return list(zip(self.states, self.actions, self.rewards))

    @property
    def total_return(self) -> float:
        return float(sum(self.rewards))


class Environment(abc.ABC):
    """Base class for deterministic, cloneable environments.

    Subclasses implement ``_initial_state``, ``_transition``, ``is_terminal``,
    ``state_key`` and ``encode``. Instances are immutable after construction.
    """

    spec: EnvSpec

    @property
    def action_count(self) -> int:
        return self.spec.action_count

    def reset(self, seed: int | None = None):
        """Initial state, deterministic given the configuration and ``seed``."""
        return self._initial_state(seed)

    def step(self, state, action: int) -> StepOutcome:
        if not 0 <= action < self.spec.action_count:
            raise EnvError(f"action {action} out of range [0, {self.spec.action_count})")
        if self.is_terminal(state):
            raise EnvError("cannot step a terminal state")
        return self._transition(state, int(action))

    @abc.abstractmethod
    def _initial_state(self, seed: int | None): ...

    @abc.abstractmethod
    def _transition(self, state, action: int) -> StepOutcome: ...

    @abc.abstractmethod
    def is_terminal(self, state) -> bool: ...

    @abc.abstractmethod
    def state_key(self, state) -> bytes: ...

    @abc.abstractmethod
    def encode(self, state) -> np.ndarray:
        """Flat float observation of length ``spec.observation_len``."""

    def encode_batch(self, states: Sequence) -> np.ndarray:
        out = np.zeros((len(states), self.spec.observation_len))
        for i, s in enumerate(states):
            out[i] = self.encode(s)
        return out

    def episode_extras(self, states: Sequence) -> dict[str, Hashable]:
        """Environment-specific per-episode metrics (e.g. rooms visited)."""
        return {}

    def coverage(self, states: Sequence) -> set:
        """Coarse regions touched by ``states`` (rooms for Toy MR); empty when undefined."""
        return set()


def reset(env: Environment, seed: int | None = None):
    return env.reset(seed)


def model_step(env: Environment, state, action: int) -> StepOutcome:
    return env.step(state, action)


def state_key(env: Environment, state) -> bytes:
    return env.state_key(state)
