"""Soft and hard mixture-of-experts layers over token matrices.

Every layer maps ``[m, d_tok]`` (or ``[B, m, d_tok]``) tokens to a tensor of
the same shape. Expert ``e`` owns slot columns ``[e*p, (e+1)*p)``.
"""

from __future__ import annotations

import math

import numpy as np

from tokenmoe.diffcore import (
    Parameter,
    Tensor,
    as_tensor,
    bias,
    concat,
    derive_seed,
    gather_rows,
    identity,
    matmul,
    relu,
    reshape,
    scatter_rows,
    softmax,
    swap_last,
    take,
    weight,
)
from tokenmoe.tokenize import TokenMatrix

ACTIVATIONS = {"relu": relu, "linear": identity}


def _tokens(x) -> Tensor:
    return x.tokens if isinstance(x, TokenMatrix) else as_tensor(x)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise ValueError(f"expected tokens [m, d] or [B, m, d], got {x.shape}")


def _unbatch(y: Tensor, single: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if single else y


class Expert:
    """Two-layer MLP whose output projection restores the token width."""

    def __init__(self, d_tok: int, d_hidden: int, seed: int, activation: str = "relu") -> None:
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.d_tok = d_tok
        self.d_hidden = d_hidden
        self.activation = activation
        self.W1 = weight((d_tok, d_hidden), d_tok, derive_seed(seed, "W1"))
        self.b1 = bias((d_hidden,))
        self.W2 = weight((d_hidden, d_tok), d_hidden, derive_seed(seed, "W2"))
        self.b2 = bias((d_tok,))
        self.last_hidden: np.ndarray | None = None

    def __call__(self, x: Tensor) -> Tensor:
        h = ACTIVATIONS[self.activation](matmul(x, self.W1) + self.b1)
        self.last_hidden = h.data.reshape(-1, self.d_hidden)
        return matmul(h, self.W2) + self.b2

    def parameters(self) -> dict[str, Parameter]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def load_from(self, other: "Expert") -> None:
        for name, p in self.parameters().items():
            p.data[...] = other.parameters()[name].data


def default_slot_count(m: int, n: int, slots: str | int = "auto", slot_fraction: float = 1.0) -> int:
    """Slots per expert: ``max(1, m // n)`` by default, ``m`` for ``"tokens"``."""
    if n < 1:
        raise ValueError("need at least one expert")
    if slots == "auto":
        p = max(1, m // n)
    elif slots == "tokens":
        p = m
    else:
        p = int(slots)
        if p < 1:
            raise ValueError(f"slots per expert must be positive, got {slots}")
    # tolerance guards against products like 0.1 * 70 landing just below an integer
    return max(1, math.floor(p * slot_fraction + 1e-9))


class _ExpertLayer:
    router_name = "router"

    def __init__(self, d_tok: int, n: int, d_hidden: int, seed: int, activation: str) -> None:
        if n < 1:
            raise ValueError("need at least one expert")
        self.d_tok = d_tok
        self.n = n
        self.experts = [Expert(d_tok, d_hidden, derive_seed(seed, "expert", e), activation) for e in range(n)]

    @property
    def router(self) -> Parameter:
        return getattr(self, self.router_name)

    def parameters(self) -> dict[str, Parameter]:
        out = {self.router_name: self.router}
        for e, ex in enumerate(self.experts):
            for k, p in ex.parameters().items():
                out[f"expert{e}.{k}"] = p
        return out

    def expert_parameter_names(self, e: int) -> list[str]:
        return [f"expert{e}.{k}" for k in ("W1", "b1", "W2", "b2")]

    def _check(self, x: Tensor) -> None:
        if x.shape[-1] != self.d_tok:
            raise ValueError(f"token width {x.shape[-1]} does not match layer width {self.d_tok}")


# ---------------------------------------------------------------- SoftMoE


class SoftMoELayer(_ExpertLayer):
    router_name = "phi"

    def __init__(self, d_tok: int, n: int, p: int, d_hidden: int, seed: int = 0, activation: str = "relu") -> None:
        super().__init__(d_tok, n, d_hidden, seed, activation)
        if p < 1:
            raise ValueError("need at least one slot per expert")
        self.p = p
        self.phi = weight((d_tok, n * p), d_tok, derive_seed(seed, "phi"))
        # experts removed from routing, and experts fading out (value = progress in [0, 1))
        self.pruned: set[int] = set()
        self.fading: dict[int, float] = {}

    def active_experts(self) -> list[int]:
        return [e for e in range(self.n) if e not in self.pruned]

    def active_slots(self) -> np.ndarray:
        return np.concatenate([np.arange(e * self.p, (e + 1) * self.p) for e in self.active_experts()])

    def combine_offsets(self) -> np.ndarray:
        """Additive combine-logit offsets; ``log(1 - progress)`` for fading experts."""
        off = np.zeros(self.p * len(self.active_experts()))
        for j, e in enumerate(self.active_experts()):
            if e in self.fading:
                off[j * self.p : (j + 1) * self.p] = math.log1p(-self.fading[e])
        return off


def softmoe_dispatch(x, phi) -> tuple[Tensor, Tensor]:
    """Dispatch weights (softmax over tokens, per slot) and slot inputs."""
    x, phi = _tokens(x), as_tensor(phi)
    logits = matmul(x, phi)
    d = softmax(logits, axis=-2)
    return d, matmul(swap_last(d), x)


def softmoe_combine(logits, slot_outputs) -> Tensor:
    """Mix slot outputs back into tokens with a softmax over slots, per token."""
    c = softmax(as_tensor(logits), axis=-1)
    return matmul(c, as_tensor(slot_outputs))


def softmoe_forward(x, layer: SoftMoELayer) -> Tensor:
    x = _tokens(x)
    layer._check(x)
    logits = matmul(x, layer.phi)
    if layer.pruned:
        logits = take(logits, layer.active_slots(), axis=-1)
    d = softmax(logits, axis=-2)
    slots = matmul(swap_last(d), x)
    p = layer.p
    outs = []
    for j, e in enumerate(layer.active_experts()):
        outs.append(layer.experts[e](take(slots, np.arange(j * p, (j + 1) * p), axis=-2)))
    slot_out = concat(outs, axis=-2)
    if layer.fading:
        logits = logits + layer.combine_offsets()
    return softmoe_combine(logits, slot_out)


# ---------------------------------------------------------------- hard routing


class ExpertChoiceLayer(_ExpertLayer):
    router_name = "gate"

    def __init__(self, d_tok: int, n: int, p: int, d_hidden: int, seed: int = 0, activation: str = "relu") -> None:
        super().__init__(d_tok, n, d_hidden, seed, activation)
        if p < 1:
            raise ValueError("need at least one slot per expert")
        self.p = p
        self.gate = weight((d_tok, n), d_tok, derive_seed(seed, "gate"))


class TokenChoiceLayer(ExpertChoiceLayer):
    def __init__(self, d_tok: int, n: int, p: int, k: int, d_hidden: int, seed: int = 0,
                 activation: str = "relu") -> None:
        super().__init__(d_tok, n, p, d_hidden, seed, activation)
        if not 1 <= k <= n:
            raise ValueError(f"top_k must lie in [1, {n}], got {k}")
        self.k = k


def expert_choice_assign(logits: np.ndarray, p: int) -> np.ndarray:
    """Token indices ``[..., n, p]``: each expert's top-``p`` tokens by gate logit."""
    logits = np.asarray(logits)
    m = logits.shape[-2]
    if not 1 <= p <= m:
        raise ValueError(f"slots per expert {p} must lie in [1, {m}] tokens")
    order = np.argsort(-np.swapaxes(logits, -1, -2), axis=-1, kind="stable")
    return order[..., :p]


def token_choice_assign(weights: np.ndarray, k: int, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Capacity-limited assignment for one token matrix.

    ``weights`` is ``[m, n]`` gate probabilities. Returns ``idx [n, p]`` and a
    boolean ``valid [n, p]``; unfilled slots point at token 0 and are invalid.
    """
    w = np.asarray(weights)
    m, n = w.shape
    if not 1 <= k <= n:
        raise ValueError(f"top_k must lie in [1, {n}], got {k}")
    choice = np.argsort(-w, axis=1, kind="stable")[:, :k]
    chosen = np.zeros((m, n), dtype=bool)
    chosen[np.arange(m)[:, None], choice] = True
    idx = np.zeros((n, p), dtype=np.intp)
    valid = np.zeros((n, p), dtype=bool)
    for e in range(n):
        cand = np.flatnonzero(chosen[:, e])
        ranked = cand[np.argsort(-w[cand, e], kind="stable")][:p]
        idx[e, : ranked.size] = ranked
        valid[e, : ranked.size] = True
    return idx, valid


def _hard_forward(x: Tensor, layer: ExpertChoiceLayer, idx: np.ndarray, valid: np.ndarray | None,
                  probs: Tensor) -> Tensor:
    # idx: [B, n, p]
    m = x.shape[1]
    out = None
    for e, ex in enumerate(layer.experts):
        ie = idx[:, e, :]
        ye = ex(gather_rows(x, ie))
        we = gather_rows(take(probs, [e], axis=-1), ie)
        if valid is not None:
            we = we * valid[:, e, :, None]
            ex.last_hidden = ex.last_hidden[valid[:, e, :].reshape(-1)]
        contrib = scatter_rows(ye * we, ie, m)
        out = contrib if out is None else out + contrib
    return out


def expert_choice_forward(x, layer: ExpertChoiceLayer) -> Tensor:
    x, single = _batched(_tokens(x))
    layer._check(x)
    if layer.p > x.shape[1]:
        raise ValueError(f"slots per expert {layer.p} exceed token count {x.shape[1]}")
    logits = matmul(x, layer.gate)
    probs = softmax(logits, axis=-1)
    idx = expert_choice_assign(logits.data, layer.p)
    return _unbatch(_hard_forward(x, layer, idx, None, probs), single)


def token_choice_forward(x, layer: TokenChoiceLayer) -> Tensor:
    x, single = _batched(_tokens(x))
    layer._check(x)
    probs = softmax(matmul(x, layer.gate), axis=-1)
    idx = np.zeros((x.shape[0], layer.n, layer.p), dtype=np.intp)
    valid = np.zeros_like(idx, dtype=bool)
    for b in range(x.shape[0]):
        idx[b], valid[b] = token_choice_assign(probs.data[b], layer.k, layer.p)
    return _unbatch(_hard_forward(x, layer, idx, valid, probs), single)


def moe_forward(x, layer) -> Tensor:
    if isinstance(layer, SoftMoELayer):
        return softmoe_forward(x, layer)
    if isinstance(layer, TokenChoiceLayer):
        return token_choice_forward(x, layer)
    if isinstance(layer, ExpertChoiceLayer):
        return expert_choice_forward(x, layer)
    raise TypeError(f"not an MoE layer: {type(layer).__name__}")
