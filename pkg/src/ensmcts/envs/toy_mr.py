"""Toy Montezuma's Revenge: a lattice of square rooms with keys, doors and traps.

Map text format::

    rooms R C size S
    <S lines of S tiles for room (0, 0)>

    <S lines for room (0, 1)>
    ...

Rooms are listed row-major and separated by blank lines. Tiles: ``#`` wall,
``.`` floor, ``K`` key, ``D`` door, ``T`` trap, ``S`` start, ``G`` goal.
Keys are generic; opening any door consumes one held key. Walking off a room
edge enters the neighbouring room on the opposite edge.
"""
from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from importlib import resources
from typing import NamedTuple

import numpy as np

from ..core import EnvError, Environment, EnvSpec, StepOutcome

TILES = set("#.KDTSG")
_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))  # up, down, left, right


class MapParseError(EnvError):
    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


@dataclass(frozen=True)
class ToyMrMap:
    room_rows: int
    room_cols: int
    room_size: int
    rooms: tuple  # rooms[i] is a tuple of S strings, i = row * room_cols + col

    @property
    def n_rooms(self) -> int:
        return self.room_rows * self.room_cols

    def tile(self, room: int, pos: int) -> str:
        r, c = divmod(pos, self.room_size)
        return self.rooms[room][r][c]

    def find(self, ch: str) -> list[tuple[int, int]]:
        S = self.room_size
        return [(i, r * S + c) for i, room in enumerate(self.rooms)
                for r, row in enumerate(room) for c, t in enumerate(row) if t == ch]


def parse_map(text: str) -> ToyMrMap:
    lines = text.splitlines()
    if not lines:
        raise MapParseError("empty map", 1)
    head = lines[0].split()
    if len(head) != 5 or head[0] != "rooms" or head[3] != "size":
        raise MapParseError("expected header 'rooms R C size S'", 1)
    try:
        R, C, S = int(head[1]), int(head[2]), int(head[4])
    except ValueError:
        raise MapParseError("room counts and size must be integers", 1) from None
    if R < 1 or C < 1 or S < 2:
        raise MapParseError("room lattice and size must be positive", 1)
    rooms, current = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            if current:
                raise MapParseError(f"room has {len(current)} rows, expected {S}", lineno)
            continue
        if len(line) != S:
            raise MapParseError(f"room row has {len(line)} tiles, expected {S}", lineno, min(len(line), S) + 1)
        for col, ch in enumerate(line, start=1):
            if ch not in TILES:
                raise MapParseError(f"unknown tile {ch!r}", lineno, col)
        current.append(line)
        if len(current) == S:
            rooms.append(tuple(current))
            current = []
    if current:
        raise MapParseError(f"room has {len(current)} rows, expected {S}", len(lines))
    if len(rooms) != R * C:
        raise MapParseError(f"found {len(rooms)} rooms, expected {R * C}", len(lines))
    m = ToyMrMap(R, C, S, tuple(rooms))
    starts = m.find("S")
    if len(starts) != 1:
        raise MapParseError(f"map needs exactly one start tile, found {len(starts)}", 1)
    if not m.find("G"):
        raise MapParseError("map has no goal tile", 1)
    return m


def load_bundled_map(name: str) -> str:
    return resources.files("ensmcts.envs").joinpath("maps", f"{name}.txt").read_text(encoding="utf-8")


class ToyMrState(NamedTuple):
    room: int
    pos: int
    keys_held: int
    keys_taken: int  # bit set over the map's keys
    doors_open: int  # bit set over the map's doors


class ToyMR(Environment):
    def __init__(self, map_text: str | ToyMrMap, max_episode_len: int = 300):
        self.map = map_text if isinstance(map_text, ToyMrMap) else parse_map(map_text)
        m = self.map
        self._keys = {loc: i for i, loc in enumerate(m.find("K"))}
        self._doors = {loc: i for i, loc in enumerate(m.find("D"))}
        self._start = m.find("S")[0]
        self.n_keys, self.n_doors = len(self._keys), len(self._doors)
        S = m.room_size
        self._tiles = [[row[c] for row in room for c in range(S)] for room in m.rooms]
        obs_len = m.n_rooms + S * S + self.n_keys + self.n_doors
        self.spec = EnvSpec(4, max_episode_len, obs_len)

    def _initial_state(self, seed):
        room, pos = self._start
        return ToyMrState(room, pos, 0, 0, 0)

    def is_terminal(self, state) -> bool:
        return self._tiles[state.room][state.pos] in "TG"

    def _transition(self, state, action):
        m = self.map
        S = m.room_size
        room, pos, held, taken, opened = state
        r, c = divmod(pos, S)
        rr, rc = divmod(room, m.room_cols)
        dr, dc = _MOVES[action]
        r, c = r + dr, c + dc
        if r < 0:
            rr, r = rr - 1, S - 1
        elif r >= S:
            rr, r = rr + 1, 0
        elif c < 0:
            rc, c = rc - 1, S - 1
        elif c >= S:
            rc, c = rc + 1, 0
        if not (0 <= rr < m.room_rows and 0 <= rc < m.room_cols):
            return StepOutcome(state, 0.0, False, False)
        room, pos = rr * m.room_cols + rc, r * S + c
        tile = self._tiles[room][pos]
        if tile == "#":
            return StepOutcome(state, 0.0, False, False)
        if tile == "D":
            bit = 1 << self._doors[(room, pos)]
            if not opened & bit:
                if held == 0:
                    return StepOutcome(state, 0.0, False, False)
                held -= 1
                opened |= bit
        elif tile == "K":
            bit = 1 << self._keys[(room, pos)]
            if not taken & bit:
                held += 1
                taken |= bit
        nxt = ToyMrState(room, pos, held, taken, opened)
        if tile == "T":
            return StepOutcome(nxt, 0.0, True, False)
        if tile == "G":
            return StepOutcome(nxt, 1.0, True, True)
        return StepOutcome(nxt, 0.0, False, False)

    def state_key(self, state) -> bytes:
        return struct.pack("<HHHQQ", *state)

    def encode(self, state) -> np.ndarray:
        m = self.map
        obs = np.zeros(self.spec.observation_len)
        obs[state.room] = 1.0
        base = m.n_rooms
        obs[base + state.pos] = 1.0
        base += m.room_size ** 2
        for i in range(self.n_keys):
            if state.keys_taken >> i & 1:
                obs[base + i] = 1.0
        base += self.n_keys
        for i in range(self.n_doors):
            if state.doors_open >> i & 1:
                obs[base + i] = 1.0
        return obs

    def episode_extras(self, states):
        return {"rooms": len(self.coverage(states))}

    def coverage(self, states):
        return {s.room for s in states}

    def shortest_solution(self) -> int | None:
        """Breadth-first search for the length of the shortest solving path."""
        start = self.reset()
        seen = {start}
        queue = deque([(start, 0)])
        while queue:
            s, d = queue.popleft()
            for a in range(4):
                out = self._transition(s, a)
                if out.solved:
                    return d + 1
                if out.done or out.next_state in seen:
                    continue
                seen.add(out.next_state)
                queue.append((out.next_state, d + 1))
        return None
