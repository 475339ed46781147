"""Risk measures turning an ensemble's action-value matrix into per-action scores.

``Q`` has one row per ensemble member and one column per candidate action.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MEASURES = ("mean", "mean_std", "var_load", "exp", "vote")


@dataclass(frozen=True)
class RiskMeasure:
    tag: str = "mean"
    kappa: float = 0.0

    def __post_init__(self):
        if self.tag not in MEASURES:
            raise ValueError(f"unknown risk measure {self.tag!r}; expected one of {MEASURES}")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")


def argmax_random(scores, rng: np.random.Generator | None) -> int:
    """Index of the maximum with ties broken uniformly (lowest index without ``rng``)."""
    s = scores.tolist() if isinstance(scores, np.ndarray) else scores
    best = max(s)
    if rng is None or s.count(best) == 1:
        return s.index(best)
    ties = [i for i, x in enumerate(s) if x == best]
    return ties[int(rng.integers(len(ties)))]


def score_actions(Q, measure: RiskMeasure, rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-action scores of ``Q`` (members x actions).

    mean      column means
    mean_std  column mean + kappa * population std
    var_load  mean over members of ``q + kappa * q**2``
    exp       mean over members of ``exp(kappa * q)``
    vote      number of members whose row-argmax is the action
    """
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] < 1 or Q.shape[1] < 1:
        raise ValueError("Q must be a non-empty (members, actions) matrix")
    return np.array(column_scores(Q.T.tolist(), measure.tag, measure.kappa, rng))


def column_scores(cols: list, tag: str, kappa: float, rng) -> list:
    """Unchecked core of :func:`score_actions` on plain lists, one list of member values per action.

    The planner calls this in its inner loop, where vectors are short and
    Python floats beat NumPy's per-call overhead.
    """
    n = len(cols[0])
    if tag == "mean":
        return [sum(c) / n for c in cols]
    if tag == "mean_std":
        out = []
        for c in cols:
            m = sum(c) / n
            if kappa == 0.0 or n == 1:
                out.append(m)
            else:
                out.append(m + kappa * math.sqrt(sum((x - m) * (x - m) for x in c) / n))
        return out
    if tag == "var_load":
        return [sum(x + kappa * x * x for x in c) / n for c in cols]
    if tag == "exp":
        return [sum(math.exp(kappa * x) for x in c) / n for c in cols]
    votes = [0.0] * len(cols)
    for row in zip(*cols):
        votes[argmax_random(row, rng)] += 1.0
    return votes
