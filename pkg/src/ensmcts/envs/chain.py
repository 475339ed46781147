"""Deterministic chain MDP used for planning sanity checks.

States ``0..length``; one action steps forward, the other steps back
(clamped at 0). The per-state meaning of the actions is drawn from the seed.
Reaching ``length`` ends the episode with reward 1.
"""
from __future__ import annotations

import struct

import numpy as np

from ..core import EnvError, Environment, EnvSpec, StepOutcome


class Chain(Environment):
    def __init__(self, length: int = 5, seed: int = 0, max_episode_len: int | None = None):
        if length < 1:
            raise EnvError("chain length must be >= 1")
        self.length = length
        self.forward_action = np.random.default_rng(seed).integers(0, 2, size=length).tolist()
        self.spec = EnvSpec(2, max_episode_len or 2 * length, length)

    def _initial_state(self, seed):
        return 0

    def is_terminal(self, state) -> bool:
        return state >= self.length

    def _transition(self, state, action):
        if action == self.forward_action[state]:
            nxt = state + 1
        else:
            nxt = max(state - 1, 0)
        if nxt == self.length:
            return StepOutcome(nxt, 1.0, True, True)
        return StepOutcome(nxt, 0.0, False, False)

    def state_key(self, state) -> bytes:
        return struct.pack("<i", state)

    def encode(self, state) -> np.ndarray:
        obs = np.zeros(self.length)
        obs[min(state, self.length - 1)] = 1.0
        return obs

    def optimal_values(self, gamma: float) -> np.ndarray:
        """Exact optimal state values ``gamma ** (length - 1 - s)`` for non-terminal ``s``."""
        return gamma ** (self.length - 1 - np.arange(self.length, dtype=float))

    def optimal_actions(self) -> list[int]:
        return list(self.forward_action)
