"""Risk-sensitive MCTS over a transposition table of ensemble value vectors.

Tree nodes are per search path; values live in the :class:`TranspositionTable`
keyed by environment state, so every tree node for the same state reads and
writes one shared value vector (one component per selected ensemble member).
Stored values are running means: ``update`` averages a new backup into the
entry, and the loop penalties act directly on that mean.
"""
from __future__ import annotations

import json
import math
import operator
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import Environment, Episode
from .risk import RiskMeasure, argmax_random, column_scores, score_actions


@dataclass
class PlannerConfig:
    num_mcts_passes: int = 10
    max_episode_len: int | None = None  # None: the environment's own cap
    penalty_p: float = 0.1
    penalty_e: float = 0.1
    dead_end_value: float = -2.0
    gamma: float = 0.99
    avoid_loops: bool = True

    def __post_init__(self):
        if self.num_mcts_passes < 1:
            raise ValueError("num_mcts_passes must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")


@dataclass
class GraphEntry:
    value: np.ndarray
    count: int


class TranspositionTable:
    """State key -> value vector and visit count.

    Rows are plain lists of floats: the vectors are short and the planner
    touches them one at a time, where list arithmetic is cheaper than NumPy.
    """

    def __init__(self, dim: int):
        self.dim = dim
        self.values: list[list[float]] = []
        self.counts: list[int] = []
        self._index: dict[bytes, int] = {}

    def __len__(self) -> int:
        return len(self.counts)

    def __contains__(self, key) -> bool:
        return key in self._index

    def get(self, key) -> int | None:
        return self._index.get(key)

    def add(self, key: bytes, value) -> int:
        idx = len(self.counts)
        if isinstance(value, (int, float)):
            row = [float(value)] * self.dim
        else:
            row = [float(x) for x in value]
            if len(row) != self.dim:
                raise ValueError(f"value has dimension {len(row)}, table expects {self.dim}")
        self.values.append(row)
        self.counts.append(0)
        self._index[key] = idx
        return idx

    def update(self, idx: int, v) -> None:
        """Running mean: ``value <- (value * count + v) / (count + 1)``; ``count += 1``."""
        c = self.counts[idx]
        if c == 0:
            self.values[idx] = [float(b) for b in v]
        else:
            self.values[idx] = [(a * c + b) / (c + 1) for a, b in zip(self.values[idx], v)]
        self.counts[idx] = c + 1

    def shift(self, idx: int, delta: float) -> None:
        self.values[idx] = [a + delta for a in self.values[idx]]

    def entry(self, key) -> GraphEntry:
        idx = self._index[key]
        return GraphEntry(np.array(self.values[idx]), self.counts[idx])

    def array(self, rows=None) -> np.ndarray:
        rows = range(len(self.values)) if rows is None else rows
        return np.array([self.values[i] for i in rows], dtype=float).reshape(-1, self.dim)


def update(table: TranspositionTable, idx: int, v) -> None:
    table.update(idx, v)


class TreeNode:
    """Search-tree node. ``children`` stays None until the node is expanded.

    ``rewards``, ``child_idx`` and ``alive`` are per-action lists; ``alive``
    is 0 for edges whose model step reported done.
    """

    __slots__ = ("state", "key", "idx", "terminal", "children", "rewards", "child_idx", "alive")

    def __init__(self, state, key: bytes, idx: int, terminal: bool = False):
        self.state = state
        self.key = key
        self.idx = idx
        self.terminal = terminal
        self.children = None
        self.rewards = None
        self.child_idx = None
        self.alive = None

    @property
    def is_leaf(self) -> bool:
        return self.children is None


def _q_column(node: TreeNode, a: int, values, gamma: float) -> list:
    r = node.rewards[a]
    if not node.alive[a]:
        return [r] * len(values[node.child_idx[a]])
    return [r + gamma * x for x in values[node.child_idx[a]]]


def q_hat(node: TreeNode, action: int, table: TranspositionTable, gamma: float) -> np.ndarray:
    """``reward(a) + gamma * child(a).value`` per member; terminal children count 0."""
    if node.children is None:
        raise ValueError("node is not expanded")
    return np.array(_q_column(node, action, table.values, gamma))


def q_matrix(node: TreeNode, table: TranspositionTable, gamma: float) -> np.ndarray:
    """(members, actions) matrix of :func:`q_hat` columns."""
    if node.children is None:
        raise ValueError("node is not expanded")
    return np.array([_q_column(node, a, table.values, gamma) for a in range(len(node.children))]).T


class Planner:
    """MCTS planner; one instance may run many episodes, each with a fresh table."""

    def __init__(self, model: Environment, cfg: PlannerConfig | None = None,
                 measure: RiskMeasure | None = None, rng: np.random.Generator | None = None,
                 trace: Callable[[dict], None] | None = None):
        self.model = model
        self.cfg = cfg or PlannerConfig()
        self.measure = measure or RiskMeasure("mean")
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.trace = trace
        self.table: TranspositionTable | None = None
        self.value_fn = None
        self.evaluated = 0  # states evaluated by the value function

    # -- tree primitives ----------------------------------------------------

    def new_search(self, value_fn) -> None:
        self.value_fn = value_fn
        self.table = TranspositionTable(value_fn.size)

    def node_for(self, state, terminal: bool = False) -> TreeNode:
        key = self.model.state_key(state)
        idx = self.table.get(key)
        if idx is None:
            value = 0.0 if terminal else self._evaluate([state])[0]
            idx = self.table.add(key, value)
        return TreeNode(state, key, idx, terminal)

    def _evaluate(self, states) -> np.ndarray:
        self.evaluated += len(states)
        return self.value_fn(self.model.encode_batch(states))

    def choose_action(self, node: TreeNode, seen) -> int | None:
        """Risk-sensitive choice among actions whose child state is not in ``seen``."""
        avoid = self.cfg.avoid_loops
        values, gamma = self.table.values, self.cfg.gamma
        tag, kappa = self.measure.tag, self.measure.kappa
        if tag != "mean" and tag != "mean_std":
            cand = [a for a, ch in enumerate(node.children) if not (avoid and ch.key in seen)]
            if not cand:
                return None
            cols = [_q_column(node, a, values, gamma) for a in cand]
            return cand[argmax_random(column_scores(cols, tag, kappa, self.rng), self.rng)]
        # mean and std of r + gamma*v follow from those of v; saves building the columns
        rewards, alive, child_idx = node.rewards, node.alive, node.child_idx
        plain = tag == "mean" or kappa == 0.0
        cand, scores = [], []
        for a, ch in enumerate(node.children):
            if avoid and ch.key in seen:
                continue
            cand.append(a)
            if not alive[a]:
                scores.append(rewards[a])
                continue
            v = values[child_idx[a]]
            n = len(v)
            if n == 1:
                scores.append(rewards[a] + gamma * v[0])
                continue
            m = sum(v) / n
            if plain:
                scores.append(rewards[a] + gamma * m)
            else:
                d = [x - m for x in v]
                scores.append(rewards[a] + gamma * m + kappa * gamma * math.sqrt(sum(map(operator.mul, d, d)) / n))
        if not cand:
            return None
        return cand[argmax_random(scores, self.rng)]

    def traversal(self, root: TreeNode):
        """Descend from ``root`` to a leaf, subtracting ``penalty_p`` at every non-leaf visited.

        Returns ``(path, last, dead_end)``; ``path`` lists ``(node, action)`` and
        excludes ``last``. ``dead_end`` is True when ``last`` is an expanded
        node whose children all lie on the path.
        """
        shift = self.table.shift
        pen = self.cfg.penalty_p
        path = []
        seen = set()
        n = root
        while n.children is not None:
            shift(n.idx, -pen)
            seen.add(n.key)
            a = self.choose_action(n, seen)
            if a is None:
                return path, n, True
            path.append((n, a))
            n = n.children[a]
        return path, n, False

    def expand_leaf(self, leaf: TreeNode, dead_end: bool = False) -> np.ndarray:
        table = self.table
        dim = table.dim
        if leaf.terminal:
            zero = [0.0] * dim
            table.update(leaf.idx, zero)
            return zero
        if dead_end:
            # undo the traversal penalty on the final node, then record the dead end
            table.shift(leaf.idx, self.cfg.penalty_p)
            v = [float(self.cfg.dead_end_value)] * dim
            table.update(leaf.idx, v)
            return v
        model = self.model
        A = model.action_count
        outcomes = [model.step(leaf.state, a) for a in range(A)]
        keys = [model.state_key(o.next_state) for o in outcomes]
        idx = [table.get(k) for k in keys]
        new = {}
        for a, (o, k, i) in enumerate(zip(outcomes, keys, idx)):
            if i is None and k not in new and not o.done:
                new[k] = o.next_state
        if new:
            vals = self._evaluate(list(new.values()))
            for k, v in zip(new, vals):
                table.add(k, v)
        for a, (o, k) in enumerate(zip(outcomes, keys)):
            if idx[a] is None:
                idx[a] = table.get(k)
                if idx[a] is None:  # terminal state seen for the first time
                    idx[a] = table.add(k, 0.0)
        leaf.children = [TreeNode(o.next_state, k, i, o.done) for o, k, i in zip(outcomes, keys, idx)]
        leaf.rewards = [float(o.reward) for o in outcomes]
        leaf.child_idx = idx
        leaf.alive = [not o.done for o in outcomes]
        return list(table.values[leaf.idx])

    def backpropagate(self, v, path) -> None:
        table = self.table
        pen, gamma = self.cfg.penalty_p, self.cfg.gamma
        for n, a in reversed(path):
            table.shift(n.idx, pen)
            r = n.rewards[a]
            v = [r + gamma * x for x in v]
            table.update(n.idx, v)

    def mcts_pass(self, root: TreeNode) -> None:
        path, leaf, dead_end = self.traversal(root)
        v = self.expand_leaf(leaf, dead_end)
        self.backpropagate(v, path)
        if self.trace is not None:
            self.trace({"event": "pass", "path": [n.key.hex() for n, _ in path],
                        "actions": [a for _, a in path], "leaf": leaf.key.hex(), "dead_end": dead_end})

    # -- episodes -------------------------------------------------------------

    def run_episode(self, env: Environment, state, value_fn) -> Episode:
        """Plan and act from ``state`` until done or the episode cap.

        ``value_fn`` maps an observation batch to (batch, members) values; the
        member selection is fixed for the whole episode.
        """
        cfg = self.cfg
        max_len = cfg.max_episode_len or env.spec.max_episode_len
        self.new_search(value_fn)
        root = self.node_for(state)
        states, actions, rewards, roots = [], [], [], []
        solved = False
        for step in range(max_len):
            self.table.shift(root.idx, -cfg.penalty_e)
            for p in range(cfg.num_mcts_passes):
                self.mcts_pass(root)
            a = self.choose_action(root, {root.key})
            if a is None:
                a = int(self.rng.integers(env.action_count))
            if self.trace is not None:
                Q = q_matrix(root, self.table, cfg.gamma)
                self.trace({"event": "step", "step": step, "root": root.key.hex(), "action": a,
                            "scores": score_actions(Q, self.measure, None).tolist()})
            out = env.step(root.state, a)
            states.append(root.state)
            actions.append(a)
            rewards.append(out.reward)
            roots.append(root.idx)
            child = root.children[a]
            if child.key == env.state_key(out.next_state):
                root = child
            else:
                root = self.node_for(out.next_state, out.done)
            if out.done:
                solved = out.solved
                break
        root_values = self.table.array(roots)
        return Episode(states, actions, rewards, root.state, solved, root_values)


def run_episode(env: Environment, state, value_fn, cfg: PlannerConfig | None = None,
                measure: RiskMeasure | None = None, rng=None, model: Environment | None = None) -> Episode:
    return Planner(model or env, cfg, measure, rng).run_episode(env, state, value_fn)


class JsonlTrace:
    """Callable trace sink writing one JSON object per line."""

    def __init__(self, fh, episode: int = 0):
        self.fh = fh
        self.episode = episode
        self.n_pass = 0

    def __call__(self, record: dict) -> None:
        record = {"episode": self.episode, **record}
        if record["event"] == "pass":
            record["pass"] = self.n_pass
            self.n_pass += 1
        self.fh.write(json.dumps(record) + "\n")
