"""Sparse-reward Sokoban: boards, text format, reverse-play generator, dynamics.

Positions are flat indices ``row * width + col``. A state carries a reference
to its :class:`Layout` (walls and targets), so boards from different levels,
or hindsight-relabelled targets, coexist in one replay buffer.
"""
from __future__ import annotations

import struct
from array import array
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from ..core import EnvError, Environment, EnvSpec, Episode, StepOutcome

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
INVERSE = (DOWN, UP, RIGHT, LEFT)

# observation channels
WALL, FLOOR, TARGET, BOX, BOX_ON_TARGET, AGENT, AGENT_ON_TARGET = range(7)
N_CHANNELS = 7


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SokobanBoard:
    """A level: static walls/targets plus the initial boxes and agent (flat indices)."""

    width: int
    height: int
    walls: frozenset
    targets: frozenset
    boxes: frozenset
    agent: int
    solution: tuple | None = field(default=None, compare=False)

    def __post_init__(self):
        n = self.width * self.height
        if len(self.boxes) != len(self.targets):
            raise EnvError(f"{len(self.boxes)} boxes but {len(self.targets)} targets")
        if not self.boxes:
            raise EnvError("board has no boxes")
        cells = set(self.boxes) | {self.agent} | set(self.targets)
        if any(not 0 <= c < n for c in cells):
            raise EnvError("position outside the board")
        if (set(self.boxes) | {self.agent} | set(self.targets)) & self.walls:
            raise EnvError("box, target or agent on a wall")
        if self.agent in self.boxes:
            raise EnvError("agent on a box")

    @property
    def solved(self) -> bool:
        return self.boxes == self.targets

    def to_text(self) -> str:
        rows = []
        for r in range(self.height):
            line = []
            for c in range(self.width):
                p = r * self.width + c
                if p in self.walls:
                    ch = "#"
                elif p in self.boxes:
                    ch = "*" if p in self.targets else "$"
                elif p == self.agent:
                    ch = "+" if p in self.targets else "@"
                else:
                    ch = "." if p in self.targets else " "
                line.append(ch)
            rows.append("".join(line))
        return "\n".join(rows)


def parse_board(text: str) -> SokobanBoard:
    lines = [ln.rstrip("\n") for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith(";")]
    if not lines:
        raise EnvError("empty board")
    height, width = len(lines), max(len(ln) for ln in lines)
    walls, targets, boxes, agents = set(), set(), set(), []
    for r, line in enumerate(lines):
        for c, ch in enumerate(line.ljust(width)):
            p = r * width + c
            if ch == "#":
                walls.add(p)
            elif ch in "@+":
                agents.append(p)
            if ch in "$*":
                boxes.add(p)
            if ch in ".*+":
                targets.add(p)
            if ch not in "#@+$*. -_":
                raise EnvError(f"line {r + 1}, column {c + 1}: unknown tile {ch!r}")
    if len(agents) != 1:
        raise EnvError(f"board needs exactly one agent, found {len(agents)}")
    return SokobanBoard(width, height, frozenset(walls), frozenset(targets), frozenset(boxes), agents[0])


def parse_boards(text: str) -> list[SokobanBoard]:
    """Parse blank-line separated level blocks (``;`` lines are comments)."""
    blocks, current = [], []
    for line in text.splitlines():
        if line.strip():
            current.append(line)
        elif current:
            blocks.append("\n".join(current))
            current = []
    if current:
        blocks.append("\n".join(current))
    return [parse_board(b) for b in blocks]


def format_boards(boards: Iterable[SokobanBoard]) -> str:
    return "\n\n".join(b.to_text() for b in boards) + "\n"


# --- generator -------------------------------------------------------------

_BRUSHES = (
    ((0, 0),),
    ((0, 0), (0, 1)),
    ((0, 0), (1, 0)),
    ((0, 0), (0, 1), (1, 0), (1, 1)),
    ((0, 0), (1, 0), (1, 1)),
)


def _carve_room(width: int, height: int, rng: np.random.Generator) -> set[int]:
    floor = set()
    r, c = int(rng.integers(1, height - 1)), int(rng.integers(1, width - 1))
    dirs = ((-1, 0), (1, 0), (0, -1), (0, 1))
    d = dirs[int(rng.integers(4))]
    for _ in range(3 * (width + height)):
        if rng.random() < 0.35:
            d = dirs[int(rng.integers(4))]
        brush = _BRUSHES[int(rng.integers(len(_BRUSHES)))]
        for dr, dc in brush:
            rr, cc = r + dr, c + dc
            if 1 <= rr < height - 1 and 1 <= cc < width - 1:
                floor.add(rr * width + cc)
        r = min(max(r + d[0], 1), height - 2)
        c = min(max(c + d[1], 1), width - 2)
    return floor


def _deepest_start(floor, targets, width, depth, rng):
    """Reverse BFS over (agent, boxes) from the solved set; returns (boxes, agent, solution) or None."""
    delta = (-width, width, -1, 1)
    targets = frozenset(targets)
    layer = [(a, targets) for a in sorted(floor) if a not in targets]
    parent = {st: None for st in layer}
    for _ in range(depth):
        nxt = []
        for st in layer:
            agent, boxes = st
            for d in range(4):
                new = agent + delta[d]
                if new not in floor or new in boxes:
                    continue
                cands = [(new, boxes)]
                behind = agent - delta[d]
                if behind in boxes:
                    cands.append((new, (boxes - {behind}) | {agent}))
                for c in cands:
                    if c not in parent:
                        parent[c] = (st, INVERSE[d])
                        nxt.append(c)
        if not nxt:
            break
        layer = nxt
    if depth > 0 and all(parent[st] is None for st in layer):
        return None
    st = layer[int(rng.integers(len(layer)))]
    agent, boxes = st
    solution = []
    while parent[st] is not None:
        st, a = parent[st]
        solution.append(a)
    return boxes, agent, tuple(solution)


def generate_board(width: int = 10, height: int = 10, num_boxes: int = 4, pull_steps: int = 30,
                   seed: int = 0, p_pull: float = 0.8, max_retries: int = 200,
                   method: str = "walk") -> SokobanBoard:
    """Generate a board that is solvable by construction.

    Boxes start on targets and the agent walks backwards ``pull_steps`` times,
    dragging a box behind it with probability ``p_pull`` when one is there.
    Reversing the walk gives a solution, stored in ``board.solution``.
    Outputs that end up already solved are rejected when ``pull_steps > 0``.

    ``method="deepest"`` replaces the random walk with a breadth-first reverse
    search from every solved configuration and starts from a state whose
    optimal solution is ``pull_steps`` moves long (or as long as the room
    allows); the stored solution is then optimal.
    """
    if method not in ("walk", "deepest"):
        raise EnvError(f"unknown generation method {method!r}")
    if num_boxes < 1:
        raise EnvError("num_boxes must be >= 1")
    if width < 3 or height < 3 or (width - 2) * (height - 2) < num_boxes + 1:
        raise EnvError("board too small for the requested boxes")
    rng = np.random.default_rng(seed)
    delta = (-width, width, -1, 1)
    for _ in range(max_retries):
        floor = _carve_room(width, height, rng)
        if len(floor) < num_boxes + 2:
            continue
        cells = sorted(floor)
        picks = rng.choice(len(cells), size=num_boxes + 1, replace=False)
        targets = frozenset(cells[i] for i in picks[:-1])
        agent = cells[picks[-1]]
        boxes = set(targets)
        if method == "deepest":
            found = _deepest_start(floor, targets, width, pull_steps, rng)
            if found is None:
                continue
            boxes, agent, solution = found
            walls = frozenset(range(width * height)) - frozenset(floor)
            return SokobanBoard(width, height, walls, targets, boxes, agent, solution)
        moves: list[int] = []
        attempts = 0
        while len(moves) < pull_steps and attempts < 20 * max(pull_steps, 1):
            attempts += 1
            d = int(rng.integers(4))
            nxt = agent + delta[d]
            if nxt not in floor or nxt in boxes:
                continue
            behind = agent - delta[d]
            if behind in boxes and rng.random() < p_pull:
                boxes.remove(behind)
                boxes.add(agent)
            agent = nxt
            moves.append(d)
        if pull_steps > 0 and boxes == targets:
            continue
        walls = frozenset(range(width * height)) - frozenset(floor)
        solution = tuple(INVERSE[d] for d in reversed(moves))
        return SokobanBoard(width, height, walls, targets, frozenset(boxes), agent, solution)
    raise GenerationError(f"no board generated after {max_retries} retries")


# --- dynamics ----------------------------------------------------------------

class Layout:
    """Static part of a board: walls, targets and a cached observation base."""

    __slots__ = ("width", "height", "walls", "targets", "key", "_base", "_cell_map")

    def __init__(self, width, height, walls, targets, obs_height, obs_width):
        if height > obs_height or width > obs_width:
            raise EnvError(f"board {height}x{width} exceeds observation {obs_height}x{obs_width}")
        self.width, self.height = width, height
        self.walls = frozenset(walls)
        self.targets = frozenset(targets)
        self.key = struct.pack("<HH", width, height) + bytes(
            2 if p in self.walls else (1 if p in self.targets else 0) for p in range(width * height))
        base = np.zeros((obs_height, obs_width, N_CHANNELS))
        base[:, :, WALL] = 1.0
        cell_map = np.zeros(width * height, dtype=np.int64)
        for p in range(width * height):
            r, c = divmod(p, width)
            cell_map[p] = r * obs_width + c
            if p in self.walls:
                continue
            base[r, c, WALL] = 0.0
            base[r, c, TARGET if p in self.targets else FLOOR] = 1.0
        self._base = base.reshape(-1, N_CHANNELS)
        self._cell_map = cell_map

    def with_targets(self, targets) -> "Layout":
        new = Layout.__new__(Layout)
        new.width, new.height, new.walls = self.width, self.height, self.walls
        new.targets = frozenset(targets)
        new.key = struct.pack("<HH", self.width, self.height) + bytes(
            2 if p in self.walls else (1 if p in new.targets else 0) for p in range(self.width * self.height))
        base = self._base.copy()
        new._cell_map = self._cell_map
        for p in range(self.width * self.height):
            if p in self.walls:
                continue
            q = self._cell_map[p]
            base[q, FLOOR] = 0.0 if p in new.targets else 1.0
            base[q, TARGET] = 1.0 if p in new.targets else 0.0
        new._base = base
        return new


class SokobanState(NamedTuple):
    layout: Layout
    boxes: frozenset
    agent: int

    @property
    def solved(self) -> bool:
        return self.boxes == self.layout.targets


class Sokoban(Environment):
    """Sokoban over one board or a pool of boards (multi-board).

    With several boards, ``reset(seed)`` picks one uniformly using ``seed``.
    Blocked moves are no-ops that still consume a step of the episode budget.
    """

    def __init__(self, boards, max_episode_len: int = 100, obs_height: int | None = None,
                 obs_width: int | None = None):
        if isinstance(boards, SokobanBoard):
            boards = [boards]
        boards = list(boards)
        if not boards:
            raise EnvError("no boards")
        self.boards = boards
        self.obs_height = obs_height or max(b.height for b in boards)
        self.obs_width = obs_width or max(b.width for b in boards)
        self._layouts = [Layout(b.width, b.height, b.walls, b.targets, self.obs_height, self.obs_width)
                         for b in boards]
        self.spec = EnvSpec(4, max_episode_len, self.obs_height * self.obs_width * N_CHANNELS)

    def _initial_state(self, seed):
        i = 0
        if len(self.boards) > 1:
            i = int(np.random.default_rng(seed).integers(len(self.boards)))
        b = self.boards[i]
        return SokobanState(self._layouts[i], b.boxes, b.agent)

    def state_for(self, board: SokobanBoard, index: int = 0) -> SokobanState:
        return SokobanState(self._layouts[index], board.boxes, board.agent)

    def is_terminal(self, state) -> bool:
        return state.boxes == state.layout.targets

    def _transition(self, state, action):
        layout = state.layout
        w = layout.width
        d = (-w, w, -1, 1)[action]
        agent = state.agent
        nxt = agent + d
        if not self._inside(agent, action, w, layout.height) or nxt in layout.walls:
            return StepOutcome(state, 0.0, False, False)
        boxes = state.boxes
        if nxt in boxes:
            beyond = nxt + d
            if (not self._inside(nxt, action, w, layout.height) or beyond in layout.walls
                    or beyond in boxes):
                return StepOutcome(state, 0.0, False, False)
            boxes = (boxes - {nxt}) | {beyond}
        new = SokobanState(layout, boxes, nxt)
        if boxes == layout.targets:
            return StepOutcome(new, 1.0, True, True)
        return StepOutcome(new, 0.0, False, False)

    @staticmethod
    def _inside(p, action, w, h):
        r, c = divmod(p, w)
        if action == UP:
            return r > 0
        if action == DOWN:
            return r < h - 1
        if action == LEFT:
            return c > 0
        return c < w - 1

    def state_key(self, state) -> bytes:
        return state.layout.key + array("H", (state.agent, *sorted(state.boxes))).tobytes()

    def encode(self, state) -> np.ndarray:
        layout = state.layout
        obs = layout._base.copy()
        cm = layout._cell_map
        for p in state.boxes:
            q = cm[p]
            obs[q] = 0.0
            obs[q, BOX_ON_TARGET if p in layout.targets else BOX] = 1.0
        q = cm[state.agent]
        obs[q] = 0.0
        obs[q, AGENT_ON_TARGET if state.agent in layout.targets else AGENT] = 1.0
        return obs.reshape(-1)

    def to_board(self, state) -> SokobanBoard:
        lay = state.layout
        return SokobanBoard(lay.width, lay.height, lay.walls, lay.targets, state.boxes, state.agent)


def replay_solution(board: SokobanBoard, actions) -> bool:
    """Forward-replay ``actions`` on ``board``; True iff the board ends solved."""
    env = Sokoban(board)
    state = env.state_for(board)
    if env.is_terminal(state):
        return True
    for a in actions:
        out = env.step(state, a)
        state = out.next_state
        if out.solved:
            return True
    return False


class HindsightError(ValueError):
    pass


def relabel_episode(episode, rng: np.random.Generator, max_redraws: int = 10):
    """Hindsight relabelling of a failed Sokoban episode.

    Draws a time-step ``t`` uniformly from ``1..T``, moves the targets onto the
    box positions at ``t`` and cuts the episode at the first step whose boxes
    already match them; that step becomes a solved terminal with reward 1.
    Draws whose match is the initial state are redrawn (up to ``max_redraws``);
    returns None when every draw is degenerate.
    """
    if episode.solved:
        raise HindsightError("hindsight relabelling applies to unsolved episodes only")
    seq = list(episode.states) + [episode.final_state]
    T = len(episode.states)
    if T == 0:
        return None
    for _ in range(max_redraws):
        t = int(rng.integers(1, T + 1))
        goal = seq[t].boxes
        cut = next(j for j in range(t + 1) if seq[j].boxes == goal)
        if cut == 0:
            continue
        layout = seq[0].layout.with_targets(goal)
        states = [SokobanState(layout, s.boxes, s.agent) for s in seq[:cut]]
        final = SokobanState(layout, seq[cut].boxes, seq[cut].agent)
        rewards = [0.0] * (cut - 1) + [1.0]
        return Episode(states, list(episode.actions[:cut]), rewards, final, True)
    return None
