"""Ensemble value learning with risk-sensitive Monte-Carlo tree search."""
from .config import ConfigError, RunConfig, apply_overrides, load, make_env, preset
from .core import EnvError, Environment, Episode, StepOutcome
from .ensemble import Ensemble, LearnedAggregator
from .planner import Planner, PlannerConfig, TranspositionTable, run_episode
from .replay import BufferConfig, ReplayBuffer, evaluate_episode
from .risk import RiskMeasure, score_actions
from .trainer import Metrics, TrainResult, deep_sea_std_heatmap, evaluate_policy, train

__version__ = "0.1.0"

__all__ = [
    "BufferConfig", "ConfigError", "Ensemble", "EnvError", "Environment", "Episode", "LearnedAggregator",
    "Metrics", "Planner", "PlannerConfig", "ReplayBuffer", "RiskMeasure", "RunConfig", "StepOutcome",
    "TrainResult", "TranspositionTable", "apply_overrides", "deep_sea_std_heatmap", "evaluate_episode",
    "evaluate_policy", "load", "make_env", "preset", "run_episode", "score_actions", "train",
]
