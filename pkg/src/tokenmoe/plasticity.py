"""Dormant-unit measurement, resets, shrink-and-perturb and expert pruning."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable, Mapping

import numpy as np

from tokenmoe.diffcore import Adam, Parameter, derive_seed, make_rng, no_grad, sample_init
from tokenmoe.moe import SoftMoELayer, moe_forward

KINDS = ("none", "reset_all", "reset_subset", "snp_all", "snp_subset", "prune_once", "prune_gradual")
ROUTER_NAMES = ("phi", "gate")


def dormant_scores(activations: np.ndarray) -> np.ndarray:
    a = np.abs(np.asarray(activations, dtype=np.float64))
    if a.ndim != 2 or a.shape[0] < 1:
        raise ValueError(f"expected [batch, units] activations, got {a.shape}")
    per_unit = a.mean(axis=0)
    layer = per_unit.mean()
    if layer == 0.0:
        return np.zeros_like(per_unit)
    return per_unit / layer


def dormant_fraction(activations: np.ndarray, tau: float = 0.025) -> float:
    """Fraction of units whose normalised mean |activation| is at most ``tau``.

    A layer that is zero everywhere counts as fully dormant.
    """
    return float(np.mean(dormant_scores(activations) <= tau))


def expert_dormant_fractions(layer, tokens, tau: float = 0.025) -> np.ndarray:
    """Dormant fraction of each expert's hidden units on ``tokens``; pruned experts get -1."""
    with no_grad():
        moe_forward(tokens, layer)
    out = np.full(layer.n, -1.0)
    for e, ex in enumerate(layer.experts):
        if ex.last_hidden is not None and ex.last_hidden.shape[0] > 0:
            out[e] = dormant_fraction(ex.last_hidden, tau)
        ex.last_hidden = None
    if isinstance(layer, SoftMoELayer):
        out[list(layer.pruned)] = -1.0
    return out


def select_experts_to_reset(layer, eval_batch, count: int, tau: float = 0.025) -> list[int]:
    """The ``count`` experts with the most dormant hidden units (ties: lowest index)."""
    if not 0 <= count <= layer.n:
        raise ValueError(f"count {count} must lie in [0, {layer.n}]")
    fractions = expert_dormant_fractions(layer, eval_batch, tau)
    return sorted(int(e) for e in np.argsort(-fractions, kind="stable")[:count])


def _is_router(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in ROUTER_NAMES


def _fresh(name: str, p: Parameter, seed: int) -> np.ndarray:
    return sample_init(p.init_spec.with_seed(derive_seed(seed, name)), p.shape)


def reset_params(
    params: Mapping[str, Parameter],
    seed: int,
    include_router: bool = False,
    optimizer: Adam | None = None,
) -> list[str]:
    """Redraw parameters from their init descriptor; parameter ``name`` uses ``derive_seed(seed, name)``.

    Router tables are skipped unless ``include_router``. Adam moments of the
    redrawn parameters are zeroed. Returns the names that were reset.
    """
    done = []
    for name, p in params.items():
        if _is_router(name) and not include_router:
            continue
        p.data[...] = _fresh(name, p, seed)
        done.append(name)
    if optimizer is not None:
        optimizer.reset_moments([n for n in done if n in optimizer.m])
    return done


def shrink_perturb(
    params: Mapping[str, Parameter],
    alpha: float = 0.8,
    beta: float = 0.2,
    seed: int = 0,
    include_router: bool = False,
) -> list[str]:
    """``value <- alpha * value + beta * fresh`` with ``fresh`` drawn like :func:`reset_params`."""
    if not (0.0 <= alpha <= 1.0 and 0.0 <= beta <= 1.0):
        raise ValueError("alpha and beta must lie in [0, 1]")
    done = []
    for name, p in params.items():
        if _is_router(name) and not include_router:
            continue
        p.data[...] = alpha * p.data + beta * _fresh(name, p, seed)
        done.append(name)
    return done


def prune_experts(layer: SoftMoELayer, experts: Iterable[int], mode: str = "once", progress: float = 1.0) -> None:
    """Take experts out of a SoftMoE layer.

    ``once`` removes their slots from dispatch and combine immediately.
    ``gradual`` scales their unnormalised combine weights by ``1 - progress``
    (an additive ``log(1 - progress)`` on the logits); at ``progress >= 1``
    they are removed exactly as in ``once`` mode.
    """
    if not isinstance(layer, SoftMoELayer):
        raise TypeError("expert pruning is defined for SoftMoE layers")
    experts = set(int(e) for e in experts)
    if not experts <= set(range(layer.n)):
        raise ValueError(f"experts {sorted(experts)} not all in [0, {layer.n})")
    if len(layer.pruned | experts) >= layer.n:
        raise ValueError("cannot prune every expert")
    if mode == "once" or progress >= 1.0:
        layer.pruned |= experts
        for e in experts:
            layer.fading.pop(e, None)
    elif mode == "gradual":
        if progress < 0.0:
            raise ValueError("progress must be non-negative")
        for e in experts - layer.pruned:
            layer.fading[e] = float(progress)
    else:
        raise ValueError(f"unknown pruning mode {mode!r}")


@dataclass(frozen=True)
class InterventionSchedule:
    kind: str = "none"
    period: int = 10_000
    include_router: bool = False
    count: int | None = None  # subset size; defaults to half the experts
    snp_alpha: float = 0.8
    snp_beta: float = 0.2
    dormant_tau: float = 0.025
    prune_stages: int = 3
    eval_batch: int = 32

    def validate(self, n_experts: int | None) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"intervention must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "none":
            return
        if self.period <= 0:
            raise ValueError("intervention_period must be positive")
        if n_experts is None:
            raise ValueError(f"intervention {self.kind!r} needs an MoE architecture")
        if self.subset_size(n_experts) > n_experts:
            raise ValueError("intervention_count exceeds the number of experts")
        if self.kind.startswith("prune") and self.subset_size(n_experts) >= n_experts:
            raise ValueError("pruning must leave at least one expert")
        if self.prune_stages < 1:
            raise ValueError("prune_stages must be >= 1")

    def subset_size(self, n_experts: int) -> int:
        return self.count if self.count is not None else max(1, n_experts // 2)

    def due(self, env_step: int) -> bool:
        return self.kind != "none" and env_step > 0 and env_step % self.period == 0


def _eval_tokens(agent: Any, seed: int, size: int):
    buf = agent.buffer
    rng = make_rng(seed, "eval_batch")
    idx = rng.integers(buf.size, size=min(size, buf.size))
    with no_grad():
        return agent.online.tokens(buf.obs[idx].astype(np.float64))


def apply_schedule(agent: Any, schedule: InterventionSchedule, env_step: int) -> dict | None:
    """Run the scheduled intervention if ``env_step`` is a multiple of the period.

    ``agent`` exposes ``online`` (network), ``optimizer``, ``buffer``, ``seed``
    and a mutable ``plasticity_state`` dict. Returns an event record or None.
    """
    if not schedule.due(env_step):
        return None
    layer = agent.online.moe_layer
    state = agent.plasticity_state
    k = state.get("events", 0) + 1
    state["events"] = k
    seed = derive_seed(agent.seed, "intervention", k)
    count = schedule.subset_size(layer.n)
    kind = schedule.kind

    if kind in ("reset_subset", "snp_subset") or (kind.startswith("prune") and "pruned" not in state):
        if agent.buffer.size > 0:
            chosen = select_experts_to_reset(layer, _eval_tokens(agent, seed, schedule.eval_batch), count,
                                             schedule.dormant_tau)
        else:
            chosen = list(range(count))
        if kind.startswith("prune"):
            state["pruned"] = chosen
    else:
        chosen = list(range(layer.n))

    params = {}
    full = agent.online.parameters()
    for e in chosen:
        for n in layer.expert_parameter_names(e):
            params[f"moe.{n}"] = full[f"moe.{n}"]
    if schedule.include_router:
        params[f"moe.{layer.router_name}"] = full[f"moe.{layer.router_name}"]

    if kind in ("reset_all", "reset_subset"):
        changed = reset_params(params, seed, schedule.include_router, agent.optimizer)
    elif kind in ("snp_all", "snp_subset"):
        changed = shrink_perturb(params, schedule.snp_alpha, schedule.snp_beta, seed, schedule.include_router)
    else:
        chosen = state["pruned"]
        progress = 1.0 if kind == "prune_once" else min(1.0, k / schedule.prune_stages)
        prune_experts(layer, chosen, "once" if kind == "prune_once" else "gradual", progress)
        if hasattr(agent, "target"):
            tl = agent.target.moe_layer
            tl.pruned, tl.fading = set(layer.pruned), dict(layer.fading)
        return {"env_step": env_step, "kind": kind, "experts": chosen, "params_changed": 0,
                "progress": progress}
    return {"env_step": env_step, "kind": kind, "experts": chosen, "params_changed": len(changed),
            "progress": 1.0}
