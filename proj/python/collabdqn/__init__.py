"""Shared-trunk multi-agent DQN for landmark localization in 3D volumes."""

from ._core import (
    CollabQNet,
    Error,
    aggregate,
    bellman_targets,
    build,
    generate,
    load_checkpoint,
    load_volume,
    reduction_ratio,
    run_cli,
    start_grid,
)

__all__ = [
    "CollabQNet",
    "Error",
    "aggregate",
    "bellman_targets",
    "build",
    "generate",
    "load_checkpoint",
    "load_volume",
    "reduction_ratio",
    "run_cli",
    "start_grid",
]
