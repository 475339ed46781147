"""Run configuration: nested dataclasses, named presets, JSON files and key=value overrides."""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .core import Environment
from .ensemble import MASK_TAGS
from .planner import PlannerConfig
from .replay import TARGET_MODES, BufferConfig
from .risk import MEASURES

ENV_NAMES = ("deep_sea", "toy_mr", "sokoban", "chain")


class ConfigError(ValueError):
    """Invalid configuration: unknown keys, bad values or inconsistent settings."""


@dataclass
class EnvConfig:
    name: str = "deep_sea"
    N: int = 10  # deep-sea side / chain length
    env_seed: int = 0  # deep-sea action layout, chain action layout
    map: str = "six_rooms"  # bundled Toy MR map name or a path to a map file
    max_episode_len: int | None = None  # None: environment default
    boards_file: str | None = None  # Sokoban level file; generated boards otherwise
    board_index: int | None = 0  # single board from the pool; None uses every board
    board_count: int = 1
    board_seed: int = 0  # generated board i uses seed board_seed + i
    width: int = 10
    height: int = 10
    boxes: int = 4
    pull_steps: int = 30
    generator: str = "walk"  # "walk" (random reverse walk) or "deepest" (optimal length pull_steps)


@dataclass
class NetConfig:
    arch: str = "mlp"
    hidden: tuple = (50, 50)
    zeta: float = 1e-4
    prior_scale: float = 0.0


@dataclass
class EnsembleConfig:
    K: int = 20
    subsample: int | None = 10
    measure: str = "mean_std"
    kappa: float = 50.0
    mask: str = "static_bernoulli"
    mask_p: float = 0.5


@dataclass
class OptimConfig:
    lr: float = 2.5e-4
    rho: float = 0.9
    eps: float = 1e-8


@dataclass
class TrainConfig:
    seed: int = 0
    total_env_steps: int = 400_000
    updates_per_episode: int = 1
    target: str = "bootstrap"
    win_rate_window: int = 1000
    converge_win_rate: float | None = 0.95
    converge_min_games: int = 100
    stop_on_solve: bool = False
    hindsight: bool = False
    trace_episodes: int = 0  # episodes written to trace.jsonl (0 disables tracing)


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    net: NetConfig = field(default_factory=NetConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    buffer: BufferConfig = field(default_factory=BufferConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def copy(self) -> "RunConfig":
        return from_dict(self.to_dict())


# --- presets -------------------------------------------------------------------

def _preset_deep_sea() -> RunConfig:
    cfg = RunConfig()
    cfg.env = EnvConfig(name="deep_sea", N=10)
    cfg.ensemble = EnsembleConfig(K=20, subsample=10, measure="mean_std", kappa=50.0, mask="static_bernoulli")
    return cfg


def _preset_toy_mr() -> RunConfig:
    cfg = RunConfig()
    cfg.env = EnvConfig(name="toy_mr", map="six_rooms")
    cfg.ensemble = EnsembleConfig(K=20, subsample=10, measure="mean_std", kappa=3.0, mask="static_bernoulli")
    cfg.train.total_env_steps = 300_000
    return cfg


def _preset_sokoban_single() -> RunConfig:
    cfg = RunConfig()
    cfg.env = EnvConfig(name="sokoban", max_episode_len=100)
    cfg.ensemble = EnsembleConfig(K=20, subsample=10, measure="mean_std", kappa=9.0, mask="static_bernoulli")
    cfg.train.total_env_steps = 200_000
    return cfg


def _preset_sokoban_multi() -> RunConfig:
    cfg = RunConfig()
    cfg.env = EnvConfig(name="sokoban", max_episode_len=200, board_index=None, board_count=250)
    cfg.ensemble = EnsembleConfig(K=3, subsample=None, measure="vote", kappa=0.0, mask="dynamic_equal_split")
    cfg.train.converge_win_rate = None
    cfg.train.total_env_steps = 1_000_000
    return cfg


PRESETS = {
    "deep_sea": _preset_deep_sea,
    "toy_mr": _preset_toy_mr,
    "sokoban_single": _preset_sokoban_single,
    "sokoban_multi": _preset_sokoban_multi,
}


def preset(name: str) -> RunConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None


# --- (de)serialization -----------------------------------------------------------

def _section_types() -> dict[str, type]:
    return typing.get_type_hints(RunConfig)


def _coerce(value, hint, where: str):
    """Check ``value`` against a field annotation, converting where JSON loses type."""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or origin is types.UnionType:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if hint is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(int(v) for v in value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(data: dict, base: RunConfig | None = None) -> RunConfig:
    """Build a config from nested dicts, layered over ``base`` (defaults when None).

    Unknown sections or keys raise :class:`ConfigError` naming the key.
    """
    if not isinstance(data, dict):
        raise ConfigError("config document must be an object")
    data = dict(data)
    preset_name = data.pop("preset", None)
    if preset_name is not None:
        base = preset(preset_name)
    cfg = base.copy() if base is not None else RunConfig()
    sections = _section_types()
    for section, values in data.items():
        if section not in sections:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be an object")
        current = dataclasses.asdict(getattr(cfg, section))
        hints = typing.get_type_hints(sections[section])
        for key, value in values.items():
            if key not in hints:
                raise ConfigError(f"unknown config key {section}.{key}")
            current[key] = _coerce(value, hints[key], f"{section}.{key}")
        try:
            setattr(cfg, section, sections[section](**current))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}: {exc}") from None
    validate(cfg)
    return cfg


def load(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(data)


def dump(cfg: RunConfig, path) -> None:
    Path(path).write_text(cfg.to_json() + "\n", encoding="utf-8")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``key=value`` strings; keys are ``section.field`` or an unambiguous bare field name."""
    sections = _section_types()
    owners: dict[str, list[str]] = {}
    for section, t in sections.items():
        for f in dataclasses.fields(t):
            owners.setdefault(f.name, []).append(section)
    patch: dict[str, dict] = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        key = key.strip()
        if "." in key:
            section, name = key.split(".", 1)
        else:
            sections = owners.get(key)
            if not sections:
                raise ConfigError(f"unknown config key {key!r}")
            if len(sections) > 1:
                raise ConfigError(f"ambiguous key {key!r}; use one of " + ", ".join(f"{s}.{key}" for s in sections))
            section, name = sections[0], key
        patch.setdefault(section, {})[name] = _parse_value(text.strip())
    return from_dict(patch, base=cfg)


def validate(cfg: RunConfig) -> None:
    e, n, ens, t = cfg.env, cfg.net, cfg.ensemble, cfg.train
    if e.name not in ENV_NAMES:
        raise ConfigError(f"env.name must be one of {ENV_NAMES}, got {e.name!r}")
    if n.arch not in ("linear", "mlp"):
        raise ConfigError(f"net.arch must be 'linear' or 'mlp', got {n.arch!r}")
    if n.zeta < 0:
        raise ConfigError("net.zeta must be >= 0")
    if ens.K < 1:
        raise ConfigError("ensemble.K must be >= 1")
    if ens.subsample is not None and not 1 <= ens.subsample <= ens.K:
        raise ConfigError(f"ensemble.subsample must be in [1, K={ens.K}] or null")
    if ens.measure not in MEASURES:
        raise ConfigError(f"ensemble.measure must be one of {MEASURES}")
    if ens.kappa < 0:
        raise ConfigError("ensemble.kappa must be >= 0")
    if ens.mask not in MASK_TAGS:
        raise ConfigError(f"ensemble.mask must be one of {MASK_TAGS}")
    if not 0 < ens.mask_p <= 1:
        raise ConfigError("ensemble.mask_p must be in (0, 1]")
    if t.target not in TARGET_MODES:
        raise ConfigError(f"train.target must be one of {TARGET_MODES}")
    if t.total_env_steps < 0 or t.updates_per_episode < 0:
        raise ConfigError("train.total_env_steps and train.updates_per_episode must be >= 0")
    if t.win_rate_window < 1:
        raise ConfigError("train.win_rate_window must be >= 1")
    if t.hindsight and e.name != "sokoban":
        raise ConfigError("train.hindsight is only defined for Sokoban")


# --- environment factory -----------------------------------------------------------

def sokoban_boards(e: EnvConfig) -> list:
    from .envs import sokoban

    if e.boards_file:
        boards = sokoban.parse_boards(Path(e.boards_file).read_text(encoding="utf-8"))
    else:
        boards = [sokoban.generate_board(e.width, e.height, e.boxes, e.pull_steps, e.board_seed + i,
                                          method=e.generator)
                  for i in range(e.board_count if e.board_index is None else e.board_index + 1)]
    if e.board_index is not None:
        if not 0 <= e.board_index < len(boards):
            raise ConfigError(f"env.board_index {e.board_index} out of range for {len(boards)} boards")
        boards = [boards[e.board_index]]
    return boards


def make_env(e: EnvConfig) -> Environment:
    from .envs import Chain, DeepSea, Sokoban, ToyMR, load_bundled_map

    if e.name == "deep_sea":
        return DeepSea(e.N, e.env_seed)
    if e.name == "chain":
        return Chain(e.N, e.env_seed, e.max_episode_len)
    if e.name == "toy_mr":
        path = Path(e.map)
        text = path.read_text(encoding="utf-8") if path.suffix == ".txt" or path.exists() else load_bundled_map(e.map)
        return ToyMR(text, e.max_episode_len or 300)
    return Sokoban(sokoban_boards(e), e.max_episode_len or 100)
