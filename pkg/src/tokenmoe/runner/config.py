"""Run configuration files.

A config is an INI-style text file read with :mod:`configparser`::

    [run]
    game = pixel_catch
    arch = softmoe
    agent = dqn_mse
    seed = 0
    total_env_steps = 30000

    [arch]
    experts = 1
    expert_scale = 4

    [agent]
    lr = 1e-3

    [intervention]
    intervention = reset_subset
    intervention_period = 10000

``[run]`` is required and must name ``game``, ``arch``, ``agent`` and
``total_env_steps``. The other sections hold overrides of the chosen presets.
Every key is checked before anything runs; problems are reported with the
line they came from.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from tokenmoe.envs import GAMES
from tokenmoe.netzoo import ARCH_PRESETS, ArchSpec, arch_preset
from tokenmoe.plasticity import InterventionSchedule
from tokenmoe.rlcore.agent import AGENT_PRESETS, AgentConfig, TrainSettings, agent_preset

REQUIRED_RUN_KEYS = ("game", "arch", "agent", "total_env_steps")
OPTIONAL_RUN_KEYS = ("seed", "name", "out_dir")
ARCH_KEYS = tuple(f.name for f in fields(ArchSpec) if f.name not in ("obs_shape", "num_actions"))
AGENT_KEYS = tuple(f.name for f in fields(AgentConfig))
# config key -> InterventionSchedule field
INTERVENTION_KEYS = {
    "intervention": "kind",
    "intervention_period": "period",
    "include_router": "include_router",
    "intervention_count": "count",
    "snp_alpha": "snp_alpha",
    "snp_beta": "snp_beta",
    "dormant_tau": "dormant_tau",
    "prune_stages": "prune_stages",
    "eval_batch": "eval_batch",
}
SECTIONS = ("run", "arch", "agent", "intervention")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` holds one message per offending line or key."""

    def __init__(self, source: str, problems: list[str]):
        self.source = source
        self.problems = problems
        super().__init__("\n".join(f"{source}: {p}" for p in problems))


@dataclass(frozen=True)
class RunConfig:
    game: str
    arch_name: str
    agent_name: str
    total_env_steps: int
    seed: int = 0
    name: str | None = None
    out_dir: str | None = None
    arch_overrides: dict[str, Any] = field(default_factory=dict)
    agent_overrides: dict[str, Any] = field(default_factory=dict)
    intervention: dict[str, Any] = field(default_factory=dict)

    @property
    def label(self) -> str:
        return self.name or self.arch_name

    @property
    def run_id(self) -> str:
        return f"{self.game}-{self.label}-s{self.seed}"

    def arch(self) -> ArchSpec:
        return arch_preset(self.arch_name, **self.arch_overrides)

    def agent(self) -> AgentConfig:
        return agent_preset(self.agent_name, **self.agent_overrides)

    def schedule(self) -> InterventionSchedule:
        return InterventionSchedule(**{INTERVENTION_KEYS[k]: v for k, v in self.intervention.items()})

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed)

    def settings(self) -> TrainSettings:
        return TrainSettings(game=self.game, arch=self.arch(), agent=self.agent(), seed=self.seed,
                             total_env_steps=self.total_env_steps, arch_name=self.label, run_id=self.run_id,
                             schedule=self.schedule())

    def to_text(self) -> str:
        """Canonical config text; parsing it gives back an equal config."""
        lines = ["[run]", f"game = {self.game}", f"arch = {self.arch_name}", f"agent = {self.agent_name}",
                 f"seed = {self.seed}", f"total_env_steps = {self.total_env_steps}"]
        if self.name:
            lines.append(f"name = {self.name}")
        if self.out_dir:
            lines.append(f"out_dir = {self.out_dir}")
        for section, values in (("arch", self.arch_overrides), ("agent", self.agent_overrides),
                                ("intervention", self.intervention)):
            if values:
                lines += ["", f"[{section}]"] + [f"{k} = {_render(v)}" for k, v in values.items()]
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        """One line listing every setting that differs from the presets."""
        parts = [f"game={self.game}", f"arch={self.arch_name}", f"agent={self.agent_name}",
                 f"seed={self.seed}", f"total_env_steps={self.total_env_steps}"]
        for values in (self.arch_overrides, self.agent_overrides, self.intervention):
            parts += [f"{k}={_render(v)}" for k, v in values.items()]
        return " ".join(parts)

    def validate(self) -> None:
        problems = []
        try:
            self.arch().validate()
        except ValueError as exc:
            problems.append(str(exc))
        try:
            self.agent().validate()
        except ValueError as exc:
            problems.append(str(exc))
        arch = self.arch()
        try:
            self.schedule().validate(arch.experts if arch.moe != "none" else None)
        except ValueError as exc:
            problems.append(str(exc))
        if problems:
            raise ConfigError(self.run_id, problems)


def _render(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(raw: str, default: Any) -> Any:
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int) or default is None:
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"expected a number, got {raw!r}") from None
    # str-valued fields; slots_per_expert also accepts an integer
    if re.fullmatch(r"[+-]?\d+", raw) and isinstance(default, str) and default == "auto":
        return int(raw)
    return raw


def _line_index(text: str) -> dict[tuple[str, str], int]:
    """(section, key) -> 1-based line number, for diagnostics."""
    where: dict[tuple[str, str], int] = {}
    section = ""
    for i, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.fullmatch(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            where[(section, "")] = i
        elif s and not s.startswith(("#", ";")) and ("=" in s or ":" in s):
            key = re.split(r"[=:]", s, maxsplit=1)[0].strip().lower()
            where.setdefault((section, key), i)
    return where


_ARCH_DEFAULTS = {f.name: f.default for f in fields(ArchSpec)}
_AGENT_DEFAULTS = {f.name: f.default for f in fields(AgentConfig)}
_SCHED_DEFAULTS = {f.name: f.default for f in fields(InterventionSchedule)}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(source, [" ".join(str(exc).split())]) from exc
    lines = _line_index(text)
    problems: list[str] = []

    def at(section: str, key: str = "") -> str:
        n = lines.get((section, key))
        return f"line {n}: " if n else ""

    for section in parser.sections():
        if section not in SECTIONS:
            problems.append(f"{at(section)}unknown section [{section}]; expected one of {', '.join(SECTIONS)}")
    if not parser.has_section("run"):
        problems.append("missing section [run]")
        raise ConfigError(source, problems)

    run = parser["run"]
    for key in REQUIRED_RUN_KEYS:
        if key not in run:
            problems.append(f"missing required key '{key}' in [run]")
    for key in run:
        if key not in REQUIRED_RUN_KEYS + OPTIONAL_RUN_KEYS:
            problems.append(f"{at('run', key)}unknown key '{key}' in [run]")

    game = run.get("game", "").strip()
    if "game" in run and game not in GAMES:
        problems.append(f"{at('run', 'game')}game must be one of {', '.join(GAMES)}, got {game!r}")
    arch_name = run.get("arch", "").strip()
    if "arch" in run and arch_name not in ARCH_PRESETS:
        problems.append(f"{at('run', 'arch')}arch must be one of {', '.join(ARCH_PRESETS)}, got {arch_name!r}")
    agent_name = run.get("agent", "").strip()
    if "agent" in run and agent_name not in AGENT_PRESETS:
        problems.append(f"{at('run', 'agent')}agent must be one of {', '.join(AGENT_PRESETS)}, "
                        f"got {agent_name!r}")

    ints = {}
    for key, lo in (("total_env_steps", 1), ("seed", 0)):
        if key in run:
            try:
                ints[key] = int(run[key])
                if ints[key] < lo:
                    raise ValueError(f"must be >= {lo}")
            except ValueError as exc:
                problems.append(f"{at('run', key)}{key}: {exc}")

    def overrides(section: str, allowed, defaults: dict[str, Any], rename=None) -> dict[str, Any]:
        out: dict[str, Any] = {}
        if not parser.has_section(section):
            return out
        for key, raw in parser[section].items():
            if key not in allowed:
                problems.append(f"{at(section, key)}unknown key '{key}' in [{section}]")
                continue
            try:
                out[key] = _coerce(raw, defaults[rename[key] if rename else key])
            except ValueError as exc:
                problems.append(f"{at(section, key)}{key}: {exc}")
        return out

    arch_over = overrides("arch", ARCH_KEYS, _ARCH_DEFAULTS)
    agent_over = overrides("agent", AGENT_KEYS, _AGENT_DEFAULTS)
    interv = overrides("intervention", tuple(INTERVENTION_KEYS), _SCHED_DEFAULTS, INTERVENTION_KEYS)
    if problems:
        raise ConfigError(source, problems)

    cfg = RunConfig(game=game, arch_name=arch_name, agent_name=agent_name,
                    total_env_steps=ints["total_env_steps"], seed=ints.get("seed", 0),
                    name=run.get("name", "").strip() or None, out_dir=run.get("out_dir", "").strip() or None,
                    arch_overrides=arch_over, agent_overrides=agent_over, intervention=interv)
    try:
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError(source, exc.problems) from exc
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(str(path), [f"cannot read config: {exc.strerror}"]) from exc
    return parse_config(text, str(path))
