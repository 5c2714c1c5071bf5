"""Agent presets, the gradient step and the full training run."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from tokenmoe.diffcore import Adam, Tensor, derive_seed, make_rng, mul, no_grad, save_checkpoint, tsum
from tokenmoe.envs import env_reset, env_step, make_spec
from tokenmoe.netzoo import ArchSpec, QNetwork, build_network, q_forward
from tokenmoe.plasticity import InterventionSchedule, apply_schedule, dormant_fraction
from tokenmoe.rlcore.losses import c51_loss, c51_project, dqn_mse_loss, select_action_values
from tokenmoe.rlcore.replay import NStepAccumulator, ReplayBuffer, per_sample, per_update

METRICS_HEADER = ["run_id", "game", "seed", "arch", "env_step", "episode_return", "loss", "dormant_fraction"]
EVENTS_HEADER = ["run_id", "env_step", "kind", "experts", "params_changed", "progress"]

# Atari values for DQN / Rainbow / DER as reported in the hyper-parameter table.
PUBLISHED_DEFAULTS = {
    "dqn": {"adam_eps": 1.5e-4, "lr": 6.25e-5, "batch_size": 32, "gamma": 0.99, "epsilon_final": 0.01,
            "epsilon_decay_steps": 250_000, "min_replay_history": 20_000, "replay_capacity": 1_000_000,
            "n_step": 1, "update_period": 4, "atoms": 0},
    "rainbow": {"adam_eps": 1.5e-4, "lr": 6.25e-5, "batch_size": 32, "gamma": 0.99, "epsilon_final": 0.01,
                "epsilon_decay_steps": 250_000, "min_replay_history": 20_000, "replay_capacity": 1_000_000,
                "n_step": 3, "update_period": 4, "atoms": 51},
    "der": {"adam_eps": 1.5e-4, "lr": 1e-4, "batch_size": 32, "gamma": 0.99, "epsilon_final": 0.01,
            "epsilon_decay_steps": 2000, "min_replay_history": 1600, "replay_capacity": 1_000_000,
            "n_step": 10, "update_period": 1, "atoms": 51},
}


@dataclass(frozen=True)
class AgentConfig:
    loss: str = "mse"  # mse | c51
    prioritized: bool = False
    gamma: float = 0.99
    n_step: int = 1
    lr: float = 6.25e-5
    adam_eps: float = 1.5e-4
    batch_size: int = 32
    epsilon_final: float = 0.01
    epsilon_decay_steps: int = 5000
    epsilon_eval: float = 0.001
    min_replay_history: int = 1000
    target_update_period: int = 1000
    update_period: int = 4
    replay_capacity: int = 50_000
    per_alpha: float = 0.5
    per_beta: float = 0.5
    atoms: int = 21
    v_min: float = -2.0
    v_max: float = 2.0
    eval_period: int = 2000
    eval_episodes: int = 10
    final_evals: int = 3
    dormant_tau: float = 0.025

    def validate(self) -> None:
        if self.loss not in ("mse", "c51"):
            raise ValueError(f"loss must be 'mse' or 'c51', got {self.loss!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        for name in ("epsilon_final", "epsilon_eval"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("n_step", "batch_size", "update_period", "target_update_period", "replay_capacity",
                     "eval_period", "eval_episodes", "final_evals", "epsilon_decay_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.min_replay_history < self.batch_size:
            raise ValueError("min_replay_history must be at least batch_size")


# Desk-scale schedules; optimiser, discount, horizon and batch follow the table above.
AGENT_PRESETS: dict[str, AgentConfig] = {
    "dqn_mse": AgentConfig(),
    "rainbow_lite": AgentConfig(loss="c51", prioritized=True, n_step=3),
    "der_lite": AgentConfig(loss="c51", prioritized=True, n_step=10, lr=1e-4, update_period=1,
                            min_replay_history=1600, epsilon_decay_steps=2000, target_update_period=1),
}


def agent_preset(name: str, **overrides) -> AgentConfig:
    if name not in AGENT_PRESETS:
        raise ValueError(f"unknown agent preset {name!r}; known: {', '.join(AGENT_PRESETS)}")
    return replace(AGENT_PRESETS[name], **overrides)


def linearly_decaying_epsilon(step: int, cfg: AgentConfig) -> float:
    steps_left = cfg.epsilon_decay_steps + cfg.min_replay_history - step
    bonus = (1.0 - cfg.epsilon_final) * steps_left / cfg.epsilon_decay_steps
    return cfg.epsilon_final + float(np.clip(bonus, 0.0, 1.0 - cfg.epsilon_final))


def epsilon_greedy(q, epsilon: float, rng: np.random.Generator) -> int:
    """Uniform action with probability ``epsilon``, else argmax (ties: lowest index)."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    q = np.asarray(q.data if isinstance(q, Tensor) else q).ravel()
    if rng.random() < epsilon:
        return int(rng.integers(q.size))
    return int(np.argmax(q))


class Agent:
    def __init__(self, cfg: AgentConfig, arch: ArchSpec, seed: int) -> None:
        cfg.validate()
        if cfg.loss == "c51":
            arch = replace(arch, head="c51", atoms=cfg.atoms, v_min=cfg.v_min, v_max=cfg.v_max)
        else:
            arch = replace(arch, head="q_values")
        self.cfg = cfg
        self.arch = arch
        self.seed = seed
        self.online: QNetwork = build_network(arch, derive_seed(seed, "network"))
        self.target: QNetwork = self.online.clone()
        self.optimizer = Adam(self.online.parameters(), lr=cfg.lr, eps=cfg.adam_eps)
        self.buffer = ReplayBuffer(cfg.replay_capacity, arch.obs_shape, cfg.prioritized, cfg.per_alpha,
                                   cfg.per_beta)
        self.accumulator = NStepAccumulator(cfg.n_step, cfg.gamma)
        self.act_rng = make_rng(seed, "act")
        self.replay_rng = make_rng(seed, "replay")
        self.env_steps = 0
        self.updates = 0
        self.target_syncs = 0
        self.plasticity_state: dict = {}

    # -- acting

    def q_values(self, obs: np.ndarray) -> np.ndarray:
        with no_grad():
            return q_forward(self.online, obs).data[0]

    def act(self, obs: np.ndarray, epsilon: float, rng: np.random.Generator | None = None) -> int:
        return epsilon_greedy(self.q_values(obs), epsilon, rng or self.act_rng)

    def observe(self, obs, action: int, reward: float, next_obs, done: bool) -> None:
        for t in self.accumulator.push(obs, action, reward, next_obs, done):
            self.buffer.add(t)

    # -- learning

    def ready(self) -> bool:
        return self.env_steps >= self.cfg.min_replay_history and self.buffer.size >= self.cfg.batch_size

    def after_env_step(self) -> dict | None:
        """Count one env step; run the gradient update and target sync when due."""
        self.env_steps += 1
        metrics = None
        if self.ready():
            if self.env_steps % self.cfg.update_period == 0:
                metrics = train_step(self)
            if self.env_steps % self.cfg.target_update_period == 0:
                self.sync_target()
        return metrics

    def sync_target(self) -> None:
        self.target.copy_from(self.online)
        self.target_syncs += 1

    def targets(self, batch: dict[str, np.ndarray]) -> np.ndarray:
        with no_grad():
            out = self.target(batch["next_obs"]).data
        if self.cfg.loss == "mse":
            return batch["reward"] + batch["discount"] * out.max(axis=1)
        probs = np.exp(out - out.max(axis=-1, keepdims=True))
        probs /= probs.sum(axis=-1, keepdims=True)
        best = np.argmax(probs @ self.online.support(), axis=1)
        next_dist = probs[np.arange(len(best)), best]
        return c51_project(next_dist, batch["reward"], batch["discount"], self.online.support(),
                           self.cfg.v_min, self.cfg.v_max)

    def loss_terms(self, batch: dict[str, np.ndarray], target: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Per-sample losses (on the tape) and the priority signal for each sample."""
        out = self.online(batch["obs"])
        if self.cfg.loss == "mse":
            per = dqn_mse_loss(out, batch["action"], target)
            q = select_action_values(out, batch["action"]).data
            return per, np.abs(q - target)
        per = c51_loss(select_action_values(out, batch["action"]), target)
        return per, per.data.copy()


def train_step(agent: Agent) -> dict:
    """One gradient update: sample, bootstrap from the target net, Adam, priorities."""
    if not agent.ready():
        raise RuntimeError("replay warm-up not finished")
    cfg = agent.cfg
    batch, idx, weights = per_sample(agent.buffer, cfg.batch_size, cfg.per_beta, agent.replay_rng)
    target = agent.targets(batch)
    agent.optimizer.zero_grad()
    per, prio = agent.loss_terms(batch, target)
    loss = mul(tsum(mul(per, weights)), 1.0 / cfg.batch_size)
    loss.backward()
    agent.optimizer.step()
    per_update(agent.buffer, idx, prio)
    agent.updates += 1
    return {
        "loss": float(loss.data),
        "td_mean": float(np.mean(prio)),
        "td_max": float(np.max(prio)),
        "dormant_fraction": network_dormant_fraction(agent.online.activations, cfg.dormant_tau),
    }


def network_dormant_fraction(activations: dict[str, np.ndarray], tau: float) -> float:
    """Unit-weighted dormant fraction over the tracked hidden layers."""
    total, dormant = 0, 0.0
    for a in activations.values():
        if a.shape[0] == 0:
            continue
        units = a.shape[1]
        dormant += dormant_fraction(a, tau) * units
        total += units
    return dormant / total if total else math.nan


# ---------------------------------------------------------------- runs


@dataclass
class TrainSettings:
    game: str
    arch: ArchSpec
    agent: AgentConfig
    seed: int = 0
    total_env_steps: int = 30_000
    arch_name: str = "baseline"
    run_id: str | None = None
    schedule: InterventionSchedule = field(default_factory=InterventionSchedule)
    checkpoint: bool = True

    def resolved_run_id(self) -> str:
        return self.run_id or f"{self.game}-{self.arch_name}-s{self.seed}"


@dataclass
class RunRecord:
    run_id: str
    rows: list[dict]
    events: list[dict]
    final_score: float
    wall_seconds: float
    out_dir: Path | None


def evaluate(agent: Agent, game: str, episodes: int, epsilon: float, seed: int) -> float:
    spec = make_spec(game)
    rng = make_rng(seed, "eval_act")
    total = 0.0
    for ep in range(episodes):
        state = env_reset(spec, derive_seed(seed, "eval_episode", ep))
        while not state.done:
            state, r, _ = env_step(state, agent.act(state.observation, epsilon, rng))
            total += r
    return total / episodes


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def write_csv(path: Path, header: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row[h]) for h in header])


def run_training(settings: TrainSettings, out_dir: str | Path | None = None) -> RunRecord:
    """Train one agent; deterministic given ``settings`` (including the seed)."""
    cfg = settings.agent
    spec = make_spec(settings.game)
    arch = replace(settings.arch, obs_shape=spec.obs_shape, num_actions=spec.num_actions)
    agent = Agent(cfg, arch, settings.seed)
    layer = agent.online.moe_layer
    settings.schedule.validate(layer.n if layer is not None else None)
    run_id = settings.resolved_run_id()
    start = time.perf_counter()

    rows: list[dict] = []
    events: list[dict] = []
    losses: list[float] = []
    last_dormant = math.nan
    episode = 0
    state = env_reset(spec, derive_seed(settings.seed, "train_episode", episode))
    for step in range(1, settings.total_env_steps + 1):
        obs = state.observation
        eps = linearly_decaying_epsilon(agent.env_steps, cfg)
        action = agent.act(obs, eps)
        state, reward, done = env_step(state, action)
        agent.observe(obs, action, reward, state.observation, done)
        metrics = agent.after_env_step()
        if metrics is not None:
            losses.append(metrics["loss"])
            last_dormant = metrics["dormant_fraction"]
        event = apply_schedule(agent, settings.schedule, step)
        if event is not None:
            events.append({"run_id": run_id, **event,
                           "experts": ";".join(str(e) for e in event["experts"])})
        if done:
            episode += 1
            agent.accumulator.reset()
            state = env_reset(spec, derive_seed(settings.seed, "train_episode", episode))
        if step % cfg.eval_period == 0 or step == settings.total_env_steps:
            score = evaluate(agent, settings.game, cfg.eval_episodes, cfg.epsilon_eval,
                             derive_seed(settings.seed, "eval", step))
            rows.append({
                "run_id": run_id, "game": settings.game, "seed": settings.seed, "arch": settings.arch_name,
                "env_step": step, "episode_return": score,
                "loss": float(np.mean(losses)) if losses else math.nan,
                "dormant_fraction": last_dormant,
            })
            losses = []

    final = float(np.mean([r["episode_return"] for r in rows[-cfg.final_evals:]]))
    out_path = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        try:
            write_csv(out_path / "metrics.csv", METRICS_HEADER, rows)
            if settings.schedule.kind != "none":
                write_csv(out_path / "events.csv", EVENTS_HEADER, events)
            if settings.checkpoint:
                save_checkpoint(out_path / "checkpoint.bin", agent.online.state())
        except OSError as exc:
            raise OSError(f"writing run outputs to {out_path}: {exc}") from exc
    return RunRecord(run_id, rows, events, final, time.perf_counter() - start, out_path)


def settings_dict(settings: TrainSettings) -> dict:
    return asdict(settings)
