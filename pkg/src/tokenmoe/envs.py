"""Deterministic 10x10 binary-pixel games with three actions (left, stay, right).

pixel_catch
    A ball starts in row 0 and falls one row per step; the paddle sits in the
    bottom row. When the ball reaches the bottom the episode ends with +1 if
    the paddle is under it and -1 otherwise.
pixel_dodge
    One object at a time falls towards the player in the bottom row. Each
    object that lands beside the player pays +1 and a new one spawns; a hit
    pays -1 and ends the episode. The episode ends after ``DODGE_OBJECTS``
    objects.
pixel_chase
    A target falls from row 0 while drifting sideways on a seeded walk (only
    when entering rows 2, 4 and 6). The agent starts in column 4 of the bottom
    row. Interception pays +1; a miss pays 0. Both end the episode.

States are immutable; all randomness is drawn from ``make_rng(seed, ...)``
keyed by the episode seed and an event counter, so a ``(seed, actions)`` pair
always replays the same trajectory.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from tokenmoe.diffcore import make_rng

GRID = 10
NUM_ACTIONS = 3
MAX_STEPS = 200
DODGE_OBJECTS = 5
CHASE_START_COL = 4
CHASE_DRIFT_ROWS = (2, 4, 6)
GAMES = ("pixel_catch", "pixel_dodge", "pixel_chase")


@dataclass(frozen=True)
class EnvSpec:
    name: str
    grid: int = GRID
    num_actions: int = NUM_ACTIONS
    max_steps: int = MAX_STEPS

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return (self.grid, self.grid, 1)


def make_spec(name: str) -> EnvSpec:
    if name not in GAMES:
        raise ValueError(f"unknown game {name!r}; known: {', '.join(GAMES)}")
    return EnvSpec(name)


@dataclass(frozen=True)
class EnvState:
    spec: EnvSpec
    seed: int
    obj_row: int
    obj_col: int
    agent_col: int
    step_count: int = 0
    done: bool = False
    events: int = 0  # spawns (dodge) / drifts (chase) drawn so far
    score: int = 0   # objects dodged

    @property
    def observation(self) -> np.ndarray:
        g = self.spec.grid
        obs = np.zeros((g, g, 1))
        if 0 <= self.obj_row < g:
            obs[self.obj_row, self.obj_col, 0] = 1.0
        obs[g - 1, self.agent_col, 0] = 1.0
        return obs


def _draw(seed: int, what: str, k: int, n: int) -> int:
    return int(make_rng(seed, what, k).integers(n))


def env_reset(spec: EnvSpec, seed: int) -> EnvState:
    g = spec.grid
    rng = make_rng(seed, "reset", spec.name)
    obj_col = int(rng.integers(g))
    if spec.name == "pixel_chase":
        agent_col = CHASE_START_COL
    else:
        agent_col = int(rng.integers(g))
    return EnvState(spec=spec, seed=seed, obj_row=0, obj_col=obj_col, agent_col=agent_col)


def env_step(state: EnvState, action: int) -> tuple[EnvState, float, bool]:
    if state.done:
        raise ValueError("episode is over; call env_reset")
    spec = state.spec
    if not 0 <= action < spec.num_actions:
        raise ValueError(f"action {action} outside [0, {spec.num_actions})")
    g = spec.grid
    bottom = g - 1
    agent = min(max(state.agent_col + action - 1, 0), g - 1)
    row = state.obj_row + 1
    col = state.obj_col
    events = state.events
    score = state.score
    reward = 0.0
    done = False

    if spec.name == "pixel_catch":
        if row == bottom:
            reward = 1.0 if agent == col else -1.0
            done = True
    elif spec.name == "pixel_dodge":
        if row == bottom:
            if agent == col:
                reward, done = -1.0, True
            else:
                reward = 1.0
                score += 1
                if score >= DODGE_OBJECTS:
                    done = True
                else:
                    events += 1
                    row, col = 0, _draw(state.seed, "spawn", events, g)
    elif spec.name == "pixel_chase":
        if row in CHASE_DRIFT_ROWS:
            events += 1
            col = min(max(col + _draw(state.seed, "drift", events, 3) - 1, 0), g - 1)
        if row == bottom:
            reward = 1.0 if agent == col else 0.0
            done = True
    else:
        raise ValueError(f"unknown game {spec.name!r}")

    steps = state.step_count + 1
    if steps >= spec.max_steps:
        done = True
    nxt = replace(state, obj_row=row, obj_col=col, agent_col=agent, step_count=steps, done=done,
                  events=events, score=score)
    return nxt, reward, done


def reference_action(state: EnvState) -> int:
    """Scripted optimal policy."""
    if state.spec.name == "pixel_dodge":
        if state.agent_col != state.obj_col:
            return 1
        return 0 if state.agent_col > 0 else 2
    diff = state.obj_col - state.agent_col
    return 1 + int(np.sign(diff))


def play_episode(spec: EnvSpec, seed: int, policy) -> float:
    state = env_reset(spec, seed)
    total = 0.0
    while not state.done:
        state, r, _ = env_step(state, policy(state))
        total += r
    return total


def monte_carlo_random_score(spec: EnvSpec, episodes: int = 10_000, seed: int = 0) -> float:
    rng = make_rng(seed, "random_policy", spec.name)
    total = 0.0
    for ep in range(episodes):
        total += play_episode(spec, ep, lambda _s: int(rng.integers(spec.num_actions)))
    return total / episodes


def reference_score(spec: EnvSpec, episodes: int = 100) -> float:
    return sum(play_episode(spec, ep, reference_action) for ep in range(episodes)) / episodes


BASELINES_FILE = "baselines.tsv"


def _baselines_path() -> Path:
    return Path(str(resources.files("tokenmoe") / "data" / BASELINES_FILE))


def load_baselines(path: str | Path | None = None) -> dict[str, tuple[float, float]]:
    """``game -> (random_score, reference_score)`` from the committed table."""
    p = Path(path) if path is not None else _baselines_path()
    out = {}
    with open(p, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            out[row["game"]] = (float(row["random_score"]), float(row["reference_score"]))
    return out


def baseline_returns(spec: EnvSpec | str) -> tuple[float, float]:
    name = spec if isinstance(spec, str) else spec.name
    table = load_baselines()
    if name not in table:
        raise ValueError(f"no baseline scores recorded for {name!r}")
    return table[name]


def write_baselines(path: str | Path, episodes: int = 10_000, seed: int = 0) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["game", "random_score", "reference_score"])
        for name in GAMES:
            spec = make_spec(name)
            w.writerow([name, repr(monte_carlo_random_score(spec, episodes, seed)), repr(reference_score(spec))])
