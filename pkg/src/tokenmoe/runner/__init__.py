"""Config files, ablation presets and the command-line interface."""

from tokenmoe.runner.cli import cmd_ablate, cmd_aggregate, cmd_plot, cmd_train, main
from tokenmoe.runner.config import ConfigError, RunConfig, load_config, parse_config
from tokenmoe.runner.presets import PRESETS, preset_grid

__all__ = [
    "ConfigError",
    "PRESETS",
    "RunConfig",
    "cmd_ablate",
    "cmd_aggregate",
    "cmd_plot",
    "cmd_train",
    "load_config",
    "main",
    "parse_config",
    "preset_grid",
]
