"""Deep-sea: an N x N grid where only the all-right trajectory is rewarded.

The agent starts at (0, 0). Every step increases ``y`` by one; the action
chooses between a step left and a step right, with the meaning of each action
index drawn per cell from the construction seed and then frozen. A step right
costs ``0.01 / N``. After ``N`` steps the episode ends with reward +1 iff the
agent reached ``x == N``, i.e. every step was a step right.
"""
from __future__ import annotations

import struct
from typing import NamedTuple

import numpy as np

from ..core import EnvError, Environment, EnvSpec, StepOutcome


class DeepSeaState(NamedTuple):
    x: int
    y: int


class DeepSea(Environment):
    def __init__(self, N: int, seed: int = 0):
        if N < 2:
            raise EnvError(f"Deep-sea needs N >= 2, got {N}")
        self.N = N
        self.seed = seed
        self.move_cost = 0.01 / N
        rng = np.random.default_rng(seed)
        # right_action[y, x]: the action index that moves right at cell (x, y)
        self.right_action = rng.integers(0, 2, size=(N, N)).astype(np.int8)
        self._right = self.right_action.tolist()
        self.spec = EnvSpec(action_count=2, max_episode_len=N, observation_len=N * N)

    @property
    def action_mask(self) -> np.ndarray:
        """Boolean N x N table: True where action 1 is the step right."""
        return self.right_action.astype(bool)

    def _initial_state(self, seed):
        return DeepSeaState(0, 0)

    def is_terminal(self, state) -> bool:
        return state[1] >= self.N

    def _transition(self, state, action):
        x, y = state
        if action == self._right[y][x]:
            x += 1
            reward = -self.move_cost
        else:
            x = max(x - 1, 0)
            reward = 0.0
        y += 1
        done = y == self.N
        solved = done and x == self.N
        if solved:
            reward += 1.0
        return StepOutcome(DeepSeaState(x, y), reward, done, solved)

    def state_key(self, state) -> bytes:
        return struct.pack("<ii", state[0], state[1])

    def index(self, state) -> int:
        # terminal rows (y == N) are clamped; the planner never evaluates them
        return min(state[1], self.N - 1) * self.N + min(state[0], self.N - 1)

    def encode(self, state) -> np.ndarray:
        obs = np.zeros(self.N * self.N)
        obs[self.index(state)] = 1.0
        return obs

    def encode_batch(self, states) -> np.ndarray:
        out = np.zeros((len(states), self.N * self.N))
        out[np.arange(len(states)), [self.index(s) for s in states]] = 1.0
        return out

    def cell_states(self):
        """Every (x, y) cell of the grid in row-major order, for heatmaps."""
        return [DeepSeaState(x, y) for y in range(self.N) for x in range(self.N)]
