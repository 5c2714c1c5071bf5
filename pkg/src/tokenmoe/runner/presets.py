"""Ablation grids. Each preset is an ordered list of arms run over games x seeds."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from tokenmoe.envs import GAMES
from tokenmoe.runner.config import RunConfig

# The optimiser settings from the agent presets do not learn within a desk-scale
# budget; every ablation grid raises the learning rate (see the README).
DESK_AGENT = {"lr": 1e-3}
DEFAULT_STEPS = 30_000
DEFAULT_SEEDS = 5


@dataclass(frozen=True)
class Arm:
    name: str
    arch: str
    arch_overrides: dict[str, Any] = field(default_factory=dict)
    agent: str = "dqn_mse"
    intervention: str = "none"


def _softmoe(n: int, **kw: Any) -> dict[str, Any]:
    return {"experts": n, **kw}


SCALE = {"expert_scale": 4.0}

PRESETS: dict[str, list[Arm]] = {
    "expert_sweep": [
        Arm("baseline", "baseline"),
        Arm("baseline_scaled", "baseline_scaled"),
        Arm("softmoe-1", "softmoe", _softmoe(1)),
        Arm("softmoe-2", "softmoe", _softmoe(2)),
        Arm("softmoe-4", "softmoe", _softmoe(4)),
        Arm("softmoe-8", "softmoe", _softmoe(8)),
        Arm("softmoe-1-scaled", "softmoe", _softmoe(1, **SCALE)),
    ],
    "components": [
        Arm("baseline", "baseline"),
        Arm("softmoe-4", "softmoe", _softmoe(4)),
        Arm("expert_choice-4", "expert_choice", _softmoe(4)),
        Arm("softmoe-4-slots_eq_tokens", "softmoe", _softmoe(4, slots_per_expert="tokens")),
        Arm("baseline_scaled", "baseline_scaled"),
        Arm("softmoe-4-scaled", "softmoe", _softmoe(4, **SCALE)),
        Arm("baseline_extra_layer", "baseline_extra_layer"),
    ],
    "tokenizers": [
        Arm(f"softmoe-1{suffix}-{tok}", "softmoe", _softmoe(1, tokenizer=tok, **extra))
        for suffix, extra in (("", {}), ("-scaled", SCALE))
        for tok in ("per_conv", "per_feat", "per_patch", "shuffled")
    ],
    "slots": [
        Arm(f"{kind}-1-scaled-{label}", kind, _softmoe(1, **SCALE, **extra))
        for kind in ("softmoe", "expert_choice")
        for label, extra in (("all", {}), ("10pct", {"slot_fraction": 0.1}), ("one", {"slots_per_expert": 1}))
    ],
    "plasticity": [
        Arm(f"softmoe-4-{kind}", "softmoe", _softmoe(4), intervention=kind)
        for kind in ("none", "reset_all", "reset_subset", "snp_all", "snp_subset")
    ],
    "tokenized_baseline": [
        Arm(f"{arch}{suffix}", arch, extra, agent="rainbow_lite")
        for suffix, extra in (("", {}), ("-scaled", {"penultimate": "dense_scaled"}))
        for arch in ("baseline", "tokenized_sum", "tokenized_mean")
    ],
}


def preset_grid(preset: str, steps: int = DEFAULT_STEPS, seeds: int = DEFAULT_SEEDS,
                games: tuple[str, ...] = GAMES) -> list[RunConfig]:
    """Every run of ``preset`` in a fixed order: arm, then game, then seed."""
    if preset not in PRESETS:
        raise KeyError(f"unknown preset {preset!r}; known: {', '.join(PRESETS)}")
    if steps < 1 or seeds < 1:
        raise ValueError("steps and seeds must be positive")
    out = []
    for arm in PRESETS[preset]:
        interv = {}
        if arm.intervention != "none":
            # three interventions per run, whatever the budget
            interv = {"intervention": arm.intervention, "intervention_period": max(1, steps // 3)}
        for game in games:
            for seed in range(seeds):
                out.append(RunConfig(game=game, arch_name=arm.arch, agent_name=arm.agent, total_env_steps=steps,
                                     seed=seed, name=arm.name, arch_overrides=dict(arm.arch_overrides),
                                     agent_overrides=dict(DESK_AGENT), intervention=interv))
    return out


def arm_names(preset: str) -> list[str]:
    return [a.name for a in PRESETS[preset]]
