"""Value targets for finished episodes and the solved/unsolved replay buffer."""
from __future__ import annotations

from bisect import bisect_right
from collections import deque
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .core import Episode

TARGET_MODES = ("bootstrap", "factual")


def evaluate_episode(episode: Episode, mode: str = "bootstrap", gamma: float = 0.99,
                     penalty_e: float = 0.1, solved: bool | None = None) -> np.ndarray:
    """Training targets, one per step of ``episode``.

    ``bootstrap`` averages each step's stored root vector over members and adds
    back ``penalty_e``. ``factual`` runs ``values[t-1] = gamma * values[t] + r[t]``
    backwards from zeros, with ``r`` zero except a final 1 when solved.
    """
    solved = episode.solved if solved is None else solved
    T = len(episode)
    if mode == "bootstrap":
        if episode.root_values is None:
            raise ValueError("bootstrap targets need the episode's stored root values")
        rv = np.asarray(episode.root_values, dtype=float).reshape(T, -1)
        return rv.mean(axis=1) + penalty_e
    if mode == "factual":
        values = np.zeros(T)
        if T == 0:
            return values
        r = np.zeros(T)
        r[-1] = 1.0 if solved else 0.0
        for t in range(T - 1, 0, -1):
            values[t - 1] = gamma * values[t] + r[t]
        return values
    raise ValueError(f"unknown target mode {mode!r}; expected one of {TARGET_MODES}")


@dataclass
class BufferConfig:
    capacity: int = 100_000  # transitions
    solved_ratio: float = 0.5
    batch_size: int = 32

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if not 0.0 <= self.solved_ratio <= 1.0:
            raise ValueError("solved_ratio must be in [0, 1]")


class EpisodeRecord(NamedTuple):
    states: list
    values: np.ndarray
    masks: np.ndarray | None  # (T, K) or None
    solved: bool
    serial: int


class Batch(NamedTuple):
    states: list
    values: np.ndarray
    masks: np.ndarray | None
    solved: np.ndarray


def select_solved(slot: int, ratio: float) -> bool:
    """Slot ``b`` (1-based) draws from the solved population iff ``b * ratio % 1 != 0``."""
    return (slot * ratio) % 1 != 0


class _Population:
    """FIFO list of episodes with cumulative start offsets for length-weighted draws."""

    def __init__(self):
        self.episodes: deque[EpisodeRecord] = deque()
        self.starts: list[int] = []  # global offset of every episode ever added
        self.head = 0  # index into starts of the oldest live episode
        self.end = 0  # offset one past the newest transition

    def __len__(self):
        return len(self.episodes)

    @property
    def transitions(self) -> int:
        return self.end - self.starts[self.head] if self.episodes else 0

    def append(self, rec: EpisodeRecord) -> None:
        self.starts.append(self.end)
        self.end += len(rec.states)
        self.episodes.append(rec)

    def popleft(self) -> EpisodeRecord:
        self.head += 1
        if self.head > 4096 and self.head * 2 > len(self.starts):
            del self.starts[:self.head]
            self.head = 0
        return self.episodes.popleft()

    def draw_games(self, rng: np.random.Generator, n: int) -> list[int]:
        """Episode positions drawn with probability proportional to episode length."""
        base = self.starts[self.head]
        offs = rng.integers(self.transitions, size=n) + base
        return [bisect_right(self.starts, int(u), self.head) - 1 - self.head for u in offs]


class ReplayBuffer:
    """Episodes split into solved and unsolved populations, evicted oldest-first.

    Observations are kept as environment states and encoded when a batch is
    assembled, which keeps memory proportional to the state size.
    """

    def __init__(self, cfg: BufferConfig | None = None):
        self.cfg = cfg or BufferConfig()
        self._pops = {True: _Population(), False: _Population()}
        self._serial = 0

    def __len__(self) -> int:
        return self.transitions

    @property
    def transitions(self) -> int:
        return self._pops[True].transitions + self._pops[False].transitions

    @property
    def episodes(self) -> int:
        return len(self._pops[True]) + len(self._pops[False])

    def population(self, solved: bool) -> list[EpisodeRecord]:
        return list(self._pops[bool(solved)].episodes)

    def add(self, episode: Episode, values, solved: bool | None = None, masks=None,
            hindsight: Callable | None = None) -> EpisodeRecord | None:
        """Insert one episode; ``hindsight(episode, values, masks)`` may rewrite failures.

        The mapping returns ``(episode, values, masks)`` or None to keep the
        original. Empty episodes are ignored.
        """
        solved = episode.solved if solved is None else bool(solved)
        values = np.asarray(values, dtype=float)
        if len(values) != len(episode):
            raise ValueError(f"{len(values)} values for an episode of length {len(episode)}")
        if masks is not None:
            masks = np.asarray(masks, dtype=float)
            if len(masks) != len(episode):
                raise ValueError("masks length does not match the episode")
        if hindsight is not None and not solved:
            mapped = hindsight(episode, values, masks)
            if mapped is not None:
                episode, values, masks = mapped
                solved = episode.solved
        if len(episode) == 0:
            return None
        rec = EpisodeRecord(list(episode.states), values, masks, solved, self._serial)
        self._serial += 1
        self._pops[solved].append(rec)
        self._evict()
        return rec

    def _evict(self) -> None:
        while self.transitions > self.cfg.capacity and self.episodes > 1:
            s, u = self._pops[True], self._pops[False]
            if not s:
                u.popleft()
            elif not u:
                s.popleft()
            else:
                (s if s.episodes[0].serial < u.episodes[0].serial else u).popleft()

    def slot_populations(self, size: int) -> list[bool]:
        ratio = self.cfg.solved_ratio
        want = [select_solved(b, ratio) for b in range(1, size + 1)]
        have = {k: len(p) > 0 for k, p in self._pops.items()}
        if not have[True] and not have[False]:
            raise ValueError("cannot draw a batch from an empty replay buffer")
        return [w if have[w] else (not w) for w in want]

    def batch(self, rng: np.random.Generator, size: int | None = None) -> Batch:
        size = size or self.cfg.batch_size
        slots = self.slot_populations(size)
        states, values, masks, solved = [None] * size, np.zeros(size), [None] * size, np.zeros(size, dtype=bool)
        for pop_key in (True, False):
            rows = [i for i, s in enumerate(slots) if s == pop_key]
            if not rows:
                continue
            pop = self._pops[pop_key]
            games = pop.draw_games(rng, len(rows))
            for i, g in zip(rows, games):
                rec = pop.episodes[g]
                t = int(rng.integers(len(rec.states)))
                states[i] = rec.states[t]
                values[i] = rec.values[t]
                masks[i] = None if rec.masks is None else rec.masks[t]
                solved[i] = pop_key
        if any(m is None for m in masks):
            mask_arr = None
        else:
            mask_arr = np.array(masks)
        return Batch(states, values, mask_arr, solved)


def sokoban_hindsight(rng: np.random.Generator, gamma: float = 0.99, max_redraws: int = 10):
    """Hindsight mapping for :meth:`ReplayBuffer.add` on Sokoban episodes.

    Relabels the targets of a failed episode and recomputes factual values for
    the truncated trajectory; degenerate draws keep the original episode.
    """
    from .envs.sokoban import relabel_episode

    def mapping(episode, values, masks):
        relabelled = relabel_episode(episode, rng, max_redraws)
        if relabelled is None:
            return None
        T = len(relabelled)
        new_masks = None if masks is None else masks[:T]
        return relabelled, evaluate_episode(relabelled, "factual", gamma, 0.0), new_masks

    return mapping
