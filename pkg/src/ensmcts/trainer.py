"""Outer training loop: plan an episode, value it, store it, take gradient steps, log."""
from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import RunConfig
from .core import Environment, Episode
from .ensemble import Ensemble, MaskGenerator, MaskPolicy, dynamic_split, subsample
from .envs.deep_sea import DeepSea
from .planner import JsonlTrace, Planner
from .replay import ReplayBuffer, evaluate_episode, sokoban_hindsight
from .risk import RiskMeasure

log = logging.getLogger(__name__)

METRICS_HEADER = ("episode", "env_steps", "solved", "length", "return", "win_rate_1000",
                  "explored_states", "extra")

# one generator per concern, all derived from the run seed
STREAMS = {"env": 0, "subsample": 1, "masks": 2, "ties": 3, "buffer": 4, "init": 5, "hindsight": 6}


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, STREAMS[name]])


class Metrics:
    """Per-episode rows plus the running aggregates they are computed from."""

    def __init__(self, window: int = 1000, path=None):
        self.window = window
        self.rows: list[dict] = []
        self.explored: set = set()
        self.regions: set = set()
        self.first_solve: int | None = None  # env steps at the end of the first solved episode
        self._recent: deque = deque(maxlen=window)
        self._fh = None
        self._writer = None
        if path is not None:
            self._fh = open(path, "w", newline="", encoding="utf-8")
            self._writer = csv.writer(self._fh)
            self._writer.writerow(METRICS_HEADER)
            self._fh.flush()

    @property
    def env_steps(self) -> int:
        return self.rows[-1]["env_steps"] if self.rows else 0

    @property
    def win_rate(self) -> float:
        return sum(self._recent) / len(self._recent) if self._recent else 0.0

    @property
    def solved_count(self) -> int:
        return sum(r["solved"] for r in self.rows)

    def record(self, episode: Episode, env: Environment) -> dict:
        states = list(episode.states) + [episode.final_state]
        record_explored_graph(self, states, env)
        self.regions |= env.coverage(states)
        steps = self.env_steps + len(episode)
        self._recent.append(1 if episode.solved else 0)
        if episode.solved and self.first_solve is None:
            self.first_solve = steps
        extras = env.episode_extras(states)
        if "rooms" in extras:
            extras["rooms_total"] = len(self.regions)
        row = {
            "episode": len(self.rows),
            "env_steps": steps,
            "solved": int(episode.solved),
            "length": len(episode),
            "return": episode.total_return,
            "win_rate_1000": self.win_rate,
            "explored_states": len(self.explored),
            "extra": ";".join(f"{k}={v}" for k, v in extras.items()),
        }
        self.rows.append(row)
        if self._writer is not None:
            self._writer.writerow([_fmt(row[k]) for k in METRICS_HEADER])
            self._fh.flush()
        return row

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def record_explored_graph(metrics: Metrics, states, env: Environment) -> int:
    """Add the keys of real-trajectory states to the explored set; returns its size."""
    metrics.explored.update(env.state_key(s) for s in states)
    return len(metrics.explored)


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@dataclass
class TrainResult:
    cfg: RunConfig
    metrics: Metrics
    model: object
    env: Environment
    buffer: ReplayBuffer
    converged: bool = False
    extras: dict = field(default_factory=dict)

    @property
    def first_solve(self) -> int | None:
        return self.metrics.first_solve


def build_model(cfg: RunConfig, env: Environment) -> Ensemble:
    n, o = cfg.net, cfg.optim
    return Ensemble.create(n.arch, env.spec.observation_len, cfg.ensemble.K, stream(cfg.train.seed, "init"),
                           hidden=n.hidden, lr=o.lr, rho=o.rho, eps=o.eps, prior_scale=n.prior_scale)


def train(cfg: RunConfig, out_dir=None, model=None, env: Environment | None = None) -> TrainResult:
    """Run the training loop until the step budget, convergence or (optionally) the first solve.

    ``model`` may be a prebuilt :class:`Ensemble` or :class:`LearnedAggregator`;
    otherwise a fresh ensemble is initialized from the run seed. With
    ``out_dir`` the resolved config, metrics CSV, final checkpoint and an
    optional search trace are written there.
    """
    config_mod.validate(cfg)
    env = env or config_mod.make_env(cfg.env)
    model = model if model is not None else build_model(cfg, env)
    t, ens_cfg = cfg.train, cfg.ensemble
    K = model.K
    if ens_cfg.mask == "dynamic_equal_split":
        dynamic_split(cfg.buffer.batch_size * K, K, np.random.default_rng(0))  # validates divisibility early

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config_mod.dump(cfg, out / "config.json")
    metrics = Metrics(t.win_rate_window, out / "metrics.csv" if out is not None else None)

    rng_env, rng_sub = stream(t.seed, "env"), stream(t.seed, "subsample")
    rng_mask, rng_buf = stream(t.seed, "masks"), stream(t.seed, "buffer")
    measure = RiskMeasure(ens_cfg.measure, ens_cfg.kappa)
    planner = Planner(env, cfg.planner, measure, stream(t.seed, "ties"))
    policy = MaskPolicy(ens_cfg.mask, ens_cfg.mask_p)
    masks_gen = MaskGenerator(policy, K, rng_mask)
    buffer = ReplayBuffer(cfg.buffer)
    hindsight = sokoban_hindsight(stream(t.seed, "hindsight"), cfg.planner.gamma) if t.hindsight else None
    size = None if ens_cfg.subsample is None else min(ens_cfg.subsample, K)
    trace_fh = open(out / "trace.jsonl", "w", encoding="utf-8") if out is not None and t.trace_episodes else None

    converged = False
    try:
        while metrics.env_steps < t.total_env_steps:
            ep_idx = len(metrics.rows)
            selection = subsample(K, size, rng_sub)
            value_fn = model.snapshot(selection)
            planner.trace = JsonlTrace(trace_fh, ep_idx) if trace_fh and ep_idx < t.trace_episodes else None
            state = env.reset(int(rng_env.integers(2**31)))
            episode = planner.run_episode(env, state, value_fn)
            values = evaluate_episode(episode, t.target, cfg.planner.gamma, cfg.planner.penalty_e)
            masks = masks_gen.episode_masks(ep_idx, len(episode)) if policy.static else None
            masks_gen.forget(ep_idx)
            buffer.add(episode, values, episode.solved, masks, hindsight)
            if buffer.episodes:
                for _ in range(t.updates_per_episode):
                    _update(model, buffer, env, cfg, policy, rng_buf, rng_mask)
            metrics.record(episode, env)
            if t.stop_on_solve and episode.solved:
                break
            if (t.converge_win_rate is not None and len(metrics.rows) >= t.converge_min_games
                    and metrics.win_rate >= t.converge_win_rate):
                converged = True
                break
    finally:
        metrics.close()
        if trace_fh is not None:
            trace_fh.close()
    if out is not None:
        model.save(out / "checkpoint.npz", {"config": cfg.to_dict(), "env_steps": metrics.env_steps})
    log.info("trained %d episodes, %d env steps, %d solved", len(metrics.rows), metrics.env_steps,
             metrics.solved_count)
    return TrainResult(cfg, metrics, model, env, buffer, converged)


def _update(model, buffer: ReplayBuffer, env, cfg: RunConfig, policy: MaskPolicy, rng_buf, rng_mask) -> None:
    K = model.K
    B = cfg.buffer.batch_size
    if policy.dynamic:
        # every member sees a full batch of its own rows
        batch = buffer.batch(rng_buf, B * K)
        masks = dynamic_split(B * K, K, rng_mask)
    else:
        batch = buffer.batch(rng_buf, B)
        masks = batch.masks if batch.masks is not None else np.ones((B, K))
    X = env.encode_batch(batch.states)
    model.train_step(X, batch.values, masks, cfg.net.zeta)


def deep_sea_std_heatmap(model, env) -> np.ndarray:
    """Population std over members of each cell's value; row ``y``, column ``x``."""
    if not isinstance(env, DeepSea):
        raise ValueError("the value-spread heatmap is defined for Deep-sea only")
    X = env.encode_batch(env.cell_states())
    values = model.evaluate(X)
    return values.std(axis=1).reshape(env.N, env.N)


def evaluate_policy(cfg: RunConfig, model, episodes: int = 10, seed: int = 0,
                    env: Environment | None = None) -> dict:
    """Plan with the full ensemble and no learning; returns win rate and mean length."""
    env = env or config_mod.make_env(cfg.env)
    measure = RiskMeasure(cfg.ensemble.measure, cfg.ensemble.kappa)
    planner = Planner(env, cfg.planner, measure, np.random.default_rng([seed, STREAMS["ties"]]))
    rng_env = np.random.default_rng([seed, STREAMS["env"]])
    solved, lengths = 0, []
    for _ in range(episodes):
        ep = planner.run_episode(env, env.reset(int(rng_env.integers(2**31))), model.snapshot())
        solved += ep.solved
        lengths.append(len(ep))
    return {"episodes": episodes, "win_rate": solved / episodes if episodes else 0.0,
            "mean_length": float(np.mean(lengths)) if lengths else 0.0}
