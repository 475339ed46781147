"""Bundled environments."""
from .chain import Chain
from .deep_sea import DeepSea, DeepSeaState
from .sokoban import (Sokoban, SokobanBoard, SokobanState, generate_board, parse_board, parse_boards,
                      format_boards, relabel_episode, replay_solution)
from .toy_mr import MapParseError, ToyMR, ToyMrMap, load_bundled_map, parse_map

__all__ = [
    "Chain", "DeepSea", "DeepSeaState", "Sokoban", "SokobanBoard", "SokobanState", "generate_board",
    "parse_board", "parse_boards", "format_boards", "relabel_episode", "replay_solution",
    "MapParseError", "ToyMR", "ToyMrMap", "load_bundled_map", "parse_map",
]
