"""Command-line front end: ``ensmcts train | gen-boards | export-heatmap | eval``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import ConfigError
from .core import EnvError

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("ensmcts")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def resolve_config(args) -> config_mod.RunConfig:
    if args.config:
        cfg = config_mod.load(args.config)
    elif args.preset:
        cfg = config_mod.preset(args.preset)
    else:
        cfg = config_mod.RunConfig()
    if args.preset and args.config:
        raise ConfigError("give either --config or --preset, not both")
    return config_mod.apply_overrides(cfg, args.overrides or [])


def cmd_train(args) -> int:
    from .trainer import train

    cfg = resolve_config(args)
    seeds = args.seeds if args.seeds else [cfg.train.seed]
    out = Path(args.out)
    for seed in seeds:
        run_cfg = config_mod.apply_overrides(cfg, [f"train.seed={seed}"])
        run_dir = out / f"seed_{seed}" if len(seeds) > 1 else out
        result = train(run_cfg, run_dir)
        m = result.metrics
        print(json.dumps({"run_dir": str(run_dir), "seed": seed, "episodes": len(m.rows),
                          "env_steps": m.env_steps, "solved": m.solved_count, "first_solve": m.first_solve,
                          "win_rate": m.win_rate, "explored_states": len(m.explored)}))
    return EXIT_OK


def cmd_gen_boards(args) -> int:
    from .envs.sokoban import format_boards, generate_board

    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    boards = [generate_board(args.width, args.height, args.boxes, args.pull_steps, args.seed + i)
              for i in range(args.count)]
    text = f"; {args.count} boards {args.width}x{args.height}, {args.boxes} boxes, " \
           f"{args.pull_steps} pulls, seeds {args.seed}..{args.seed + args.count - 1}\n" + format_boards(boards)
    if args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text, encoding="utf-8")
    return EXIT_OK


def _load_model(path):
    from .ensemble import Ensemble

    if not Path(path).exists():
        raise ConfigError(f"checkpoint {path} not found")
    return Ensemble.load(path)


def _checkpoint_config(args, meta) -> config_mod.RunConfig:
    if args.config or args.preset:
        return resolve_config(args)
    if "config" in meta:
        return config_mod.apply_overrides(config_mod.from_dict(meta["config"]), args.overrides or [])
    raise ConfigError("checkpoint carries no config; pass --config or --preset")


def write_heatmap(grid: np.ndarray, prefix) -> tuple[Path, Path]:
    """Writes ``prefix.pgm`` (plain graymap, largest cell white) and ``prefix.csv``."""
    prefix = Path(prefix)
    top = float(grid.max()) if grid.size else 0.0
    levels = np.zeros(grid.shape, dtype=int) if top <= 0 else np.rint(255 * grid / top).astype(int)
    h, w = grid.shape
    pgm = prefix.with_suffix(".pgm")
    lines = ["P2", f"{w} {h}", "255"] + [" ".join(str(v) for v in row) for row in levels]
    pgm.write_text("\n".join(lines) + "\n", encoding="ascii")
    csv_path = prefix.with_suffix(".csv")
    np.savetxt(csv_path, grid, delimiter=",", fmt="%.10g")
    return pgm, csv_path


def cmd_export_heatmap(args) -> int:
    from .envs.deep_sea import DeepSea
    from .trainer import deep_sea_std_heatmap

    model, meta = _load_model(args.checkpoint)
    cfg = _checkpoint_config(args, meta)
    env = config_mod.make_env(cfg.env)
    if not isinstance(env, DeepSea):
        raise ConfigError(f"heatmaps need a deep_sea environment, config has {cfg.env.name!r}")
    if model.params.input_len != env.spec.observation_len:
        raise ConfigError(f"checkpoint input length {model.params.input_len} does not match N={env.N}")
    pgm, csv_path = write_heatmap(deep_sea_std_heatmap(model, env), args.out)
    print(json.dumps({"pgm": str(pgm), "csv": str(csv_path)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import evaluate_policy

    model, meta = _load_model(args.checkpoint)
    cfg = _checkpoint_config(args, meta)
    print(json.dumps(evaluate_policy(cfg, model, args.episodes, args.seed)))
    return EXIT_OK


def _config_args(p):
    p.add_argument("--config", help="JSON experiment file")
    p.add_argument("--preset", choices=sorted(config_mod.PRESETS), help="start from a named preset")
    p.add_argument("overrides", nargs="*", metavar="KEY=VALUE",
                   help="overrides such as N=12 or ensemble.kappa=0")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ensmcts", description="Ensemble risk-sensitive MCTS experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one run per seed")
    _config_args(p)
    p.add_argument("--seeds", type=int, nargs="+", help="one run directory per seed")
    p.add_argument("--out", default="runs/run", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gen-boards", help="generate Sokoban levels")
    p.add_argument("--count", type=int, default=250)
    p.add_argument("--width", type=int, default=10)
    p.add_argument("--height", type=int, default=10)
    p.add_argument("--boxes", type=int, default=4)
    p.add_argument("--pull-steps", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-", help="output file, '-' for stdout")
    p.set_defaults(func=cmd_gen_boards)

    p = sub.add_parser("export-heatmap", help="Deep-sea value-spread heatmap from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _config_args(p)
    p.add_argument("--out", required=True, help="output prefix; writes PREFIX.pgm and PREFIX.csv")
    p.set_defaults(func=cmd_export_heatmap)

    p = sub.add_parser("eval", help="plan with a trained checkpoint, no learning")
    p.add_argument("--checkpoint", required=True)
    _config_args(p)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, EnvError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
