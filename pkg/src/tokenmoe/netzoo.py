"""Q-network assembly for every architecture variant.

Five shapes of network come out of :func:`build_network`:

* baseline:            encoder -> flatten -> dense -> head
* scaled baseline:     same, with the dense width multiplied by ``width_scale``
* extra-layer baseline: encoder -> flatten -> dense -> dense -> head
* tokenized baseline:  encoder -> tokens -> shared per-token dense -> pool -> head
* MoE network:         encoder -> tokens -> MoE layer -> flatten -> head
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any

import numpy as np

from tokenmoe.diffcore import (
    Parameter,
    Tensor,
    as_tensor,
    bias,
    conv2d,
    derive_seed,
    matmul,
    pad2d,
    relu,
    reshape,
    softmax,
    weight,
)
from tokenmoe.moe import (
    ExpertChoiceLayer,
    SoftMoELayer,
    TokenChoiceLayer,
    default_slot_count,
    moe_forward,
)
from tokenmoe.tokenize import flatten, shuffle_permutation, token_pool, token_shape, tokenize

ENCODERS = ("mini_cnn", "mini_resnet")
MOE_KINDS = ("none", "softmoe", "expert_choice", "token_choice")
PENULTIMATES = ("dense", "dense_scaled", "dense_extra_layer")
HEADS = ("q_values", "c51")


@dataclass(frozen=True)
class ArchSpec:
    encoder: str = "mini_cnn"
    tokenizer: str = "flatten"
    patch_rho: int = 2
    shuffle_seed: int = 0
    shuffle_granularity: str = "scalar"
    moe: str = "none"
    experts: int = 4
    slots_per_expert: str | int = "auto"
    slot_fraction: float = 1.0
    expert_scale: float = 1.0
    expansion: float = 4.0
    top_k: int = 1
    expert_activation: str = "relu"
    penultimate: str = "dense"
    width: int = 64
    width_scale: float = 4.0
    pool_before_dense: bool = False
    head: str = "q_values"
    atoms: int = 21
    v_min: float = -2.0
    v_max: float = 2.0
    obs_shape: tuple[int, int, int] = (10, 10, 1)
    num_actions: int = 3

    @property
    def kind(self) -> str:
        if self.moe != "none":
            return "moe"
        if self.tokenizer in ("pooled_sum", "pooled_mean"):
            return "tokenized"
        return {"dense": "baseline", "dense_scaled": "scaled", "dense_extra_layer": "extra_layer"}[self.penultimate]

    @property
    def dense_width(self) -> int:
        if self.penultimate == "dense_scaled":
            return int(round(self.width * self.width_scale))
        return self.width

    def validate(self) -> None:
        def bad(msg: str) -> None:
            raise ValueError(f"inconsistent architecture: {msg}")

        if self.encoder not in ENCODERS:
            bad(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if self.moe not in MOE_KINDS:
            bad(f"moe must be one of {MOE_KINDS}, got {self.moe!r}")
        if self.penultimate not in PENULTIMATES:
            bad(f"penultimate must be one of {PENULTIMATES}, got {self.penultimate!r}")
        if self.head not in HEADS:
            bad(f"head must be one of {HEADS}, got {self.head!r}")
        if self.tokenizer not in ("flatten", "per_conv", "per_feat", "per_patch", "shuffled",
                                  "pooled_sum", "pooled_mean"):
            bad(f"unknown tokenizer {self.tokenizer!r}")
        if self.moe != "none":
            if self.tokenizer in ("flatten", "pooled_sum", "pooled_mean"):
                bad(f"an MoE block needs a token-producing tokenizer, got {self.tokenizer!r}")
            if self.penultimate != "dense":
                bad("the MoE block replaces the penultimate layer; use expert_scale to widen experts")
            if self.experts < 1:
                bad("experts must be >= 1")
            if self.moe == "token_choice" and not 1 <= self.top_k <= self.experts:
                bad(f"top_k={self.top_k} must lie in [1, experts={self.experts}]")
        elif self.tokenizer in ("per_conv", "per_feat", "per_patch", "shuffled"):
            bad(f"tokenizer {self.tokenizer!r} without an MoE block needs pooling (pooled_sum/pooled_mean)")
        if self.head == "c51" and (self.atoms < 2 or self.v_max <= self.v_min):
            bad("c51 head needs atoms >= 2 and v_max > v_min")
        if min(self.obs_shape) < 1 or self.num_actions < 1:
            bad("observation extents and action count must be positive")
        if self.encoder_shape()[0] < 1 or self.encoder_shape()[1] < 1:
            bad(f"observation {self.obs_shape} too small for encoder {self.encoder}")
        if self.moe != "none":
            token_shape(self.encoder_shape(), self.tokenizer, self.patch_rho)

    def encoder_shape(self) -> tuple[int, int, int]:
        h, w, _ = self.obs_shape
        return h - 4, w - 4, 16


ARCH_PRESETS: dict[str, dict[str, Any]] = {
    "baseline": {},
    "baseline_scaled": {"penultimate": "dense_scaled"},
    "baseline_extra_layer": {"penultimate": "dense_extra_layer"},
    "tokenized_sum": {"tokenizer": "pooled_sum"},
    "tokenized_mean": {"tokenizer": "pooled_mean"},
    "softmoe": {"moe": "softmoe", "tokenizer": "per_conv"},
    "expert_choice": {"moe": "expert_choice", "tokenizer": "per_conv"},
    "token_choice": {"moe": "token_choice", "tokenizer": "per_conv"},
}


def arch_preset(name: str, **overrides: Any) -> ArchSpec:
    if name not in ARCH_PRESETS:
        raise ValueError(f"unknown arch preset {name!r}; known: {', '.join(ARCH_PRESETS)}")
    return replace(ArchSpec(), **{**ARCH_PRESETS[name], **overrides})


class Dense:
    def __init__(self, d_in: int, d_out: int, seed: int) -> None:
        self.W = weight((d_in, d_out), d_in, derive_seed(seed, "W"))
        self.b = bias((d_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.W) + self.b

    def parameters(self) -> dict[str, Parameter]:
        return {"W": self.W, "b": self.b}


class Conv:
    def __init__(self, c_in: int, c_out: int, k: int, seed: int, stride: int = 1, pad: int = 0) -> None:
        self.K = weight((k, k, c_in, c_out), k * k * c_in, derive_seed(seed, "K"))
        self.b = bias((c_out,))
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(pad2d(x, self.pad), self.K, self.stride) + self.b

    def parameters(self) -> dict[str, Parameter]:
        return {"K": self.K, "b": self.b}


class QNetwork:
    """A built network; parameters are exposed as a flat ordered name map."""

    def __init__(self, spec: ArchSpec, seed: int) -> None:
        spec.validate()
        self.spec = spec
        self.seed = seed
        self.modules: dict[str, Any] = {}
        self.activations: dict[str, np.ndarray] = {}
        s = lambda *k: derive_seed(seed, *k)  # noqa: E731

        c_in = spec.obs_shape[2]
        self.modules["conv0"] = Conv(c_in, 8, 3, s("conv0"))
        self.modules["conv1"] = Conv(8, 16, 3, s("conv1"))
        if spec.encoder == "mini_resnet":
            for r in range(2):
                self.modules[f"res{r}a"] = Conv(16, 16, 3, s("res", r, "a"), pad=1)
                self.modules[f"res{r}b"] = Conv(16, 16, 3, s("res", r, "b"), pad=1)

        enc = spec.encoder_shape()
        self.perm = None
        if spec.tokenizer == "shuffled":
            self.perm = shuffle_permutation(enc, spec.shuffle_seed, spec.shuffle_granularity)

        kind = spec.kind
        if kind == "moe":
            m, d_tok = token_shape(enc, spec.tokenizer, spec.patch_rho)
            self.num_tokens, self.d_tok = m, d_tok
            d_hidden = max(1, int(round(d_tok * spec.expansion * spec.expert_scale)))
            p = default_slot_count(m, spec.experts, spec.slots_per_expert, spec.slot_fraction)
            if spec.moe == "softmoe":
                layer = SoftMoELayer(d_tok, spec.experts, p, d_hidden, s("moe"), spec.expert_activation)
            elif spec.moe == "expert_choice":
                if p > m:
                    raise ValueError(f"inconsistent architecture: {p} slots per expert exceed {m} tokens")
                layer = ExpertChoiceLayer(d_tok, spec.experts, p, d_hidden, s("moe"), spec.expert_activation)
            else:
                layer = TokenChoiceLayer(d_tok, spec.experts, p, spec.top_k, d_hidden, s("moe"),
                                         spec.expert_activation)
            self.modules["moe"] = layer
            head_in = m * d_tok
        elif kind == "tokenized":
            d_in = enc[2]
            self.modules["dense0"] = Dense(d_in, spec.dense_width, s("dense0"))
            head_in = spec.dense_width
        else:
            d_in = enc[0] * enc[1] * enc[2]
            self.modules["dense0"] = Dense(d_in, spec.dense_width, s("dense0"))
            if kind == "extra_layer":
                self.modules["dense1"] = Dense(spec.dense_width, spec.dense_width, s("dense1"))
            head_in = spec.dense_width
        n_out = spec.num_actions * (spec.atoms if spec.head == "c51" else 1)
        self.modules["head"] = Dense(head_in, n_out, s("head"))

    # -- parameters

    def parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for mname, mod in self.modules.items():
            for pname, p in mod.parameters().items():
                out[f"{mname}.{pname}"] = p
        return out

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    @property
    def moe_layer(self):
        return self.modules.get("moe")

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            raise ValueError("parameter names do not match this network")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p.data[...] = state[k]

    def copy_from(self, other: "QNetwork") -> None:
        for k, p in self.parameters().items():
            p.data[...] = other.parameters()[k].data
        moe, src = self.moe_layer, other.moe_layer
        if isinstance(moe, SoftMoELayer):
            moe.pruned = set(src.pruned)
            moe.fading = dict(src.fading)

    def clone(self) -> "QNetwork":
        twin = QNetwork(self.spec, self.seed)
        twin.copy_from(self)
        return twin

    # -- forward

    def encode(self, obs: Tensor) -> Tensor:
        m = self.modules
        x = relu(m["conv0"](obs))
        x = relu(m["conv1"](x))
        if self.spec.encoder == "mini_resnet":
            for r in range(2):
                y = m[f"res{r}b"](relu(m[f"res{r}a"](relu(x))))
                x = x + y
            x = relu(x)
        return x

    def _prepare(self, obs) -> Tensor:
        obs = as_tensor(obs)
        if obs.shape[-3:] != tuple(self.spec.obs_shape) or obs.ndim not in (3, 4):
            raise ValueError(f"observation shape {obs.shape} does not match {self.spec.obs_shape}")
        if obs.ndim == 3:
            obs = reshape(obs, (1,) + obs.shape)
        return obs

    def tokens(self, obs) -> Tensor:
        """Tokens fed to the MoE block (or to the per-token dense layer)."""
        spec = self.spec
        x = self.encode(self._prepare(obs))
        scheme = spec.tokenizer if spec.kind == "moe" else "per_conv"
        return tokenize(x, scheme, spec.patch_rho, spec.shuffle_seed, spec.shuffle_granularity, self.perm).tokens

    def __call__(self, obs) -> Tensor:
        """Head output ``[B, A]`` (q_values) or logits ``[B, A, atoms]`` (c51)."""
        obs = self._prepare(obs)
        spec = self.spec
        x = self.encode(obs)
        self.activations = {}
        B = x.shape[0]
        kind = spec.kind
        if kind == "moe":
            t = tokenize(x, spec.tokenizer, spec.patch_rho, spec.shuffle_seed, spec.shuffle_granularity,
                         self.perm).tokens
            layer = self.moe_layer
            y = moe_forward(t, layer)
            for e, ex in enumerate(layer.experts):
                if ex.last_hidden is not None:
                    self.activations[f"expert{e}"] = ex.last_hidden
                ex.last_hidden = None
            feat = reshape(y, (B, -1))
        elif kind == "tokenized":
            t = tokenize(x, "per_conv").tokens
            mode = "sum" if spec.tokenizer == "pooled_sum" else "mean"
            dense = self.modules["dense0"]
            if spec.pool_before_dense:
                feat = relu(dense(token_pool(t, mode)))
                self.activations["dense0"] = feat.data
            else:
                h = relu(dense(t))
                self.activations["dense0"] = h.data.reshape(-1, h.shape[-1])
                feat = token_pool(h, mode)
        else:
            feat = relu(self.modules["dense0"](flatten(x)))
            self.activations["dense0"] = feat.data
            if kind == "extra_layer":
                feat = relu(self.modules["dense1"](feat))
                self.activations["dense1"] = feat.data
        out = self.modules["head"](feat)
        if spec.head == "c51":
            out = reshape(out, (B, spec.num_actions, spec.atoms))
        return out

    def support(self) -> np.ndarray:
        return np.linspace(self.spec.v_min, self.spec.v_max, self.spec.atoms)


def build_network(spec: ArchSpec, seed: int = 0) -> QNetwork:
    return QNetwork(spec, seed)


def dist_forward(net: QNetwork, obs) -> Tensor:
    """Per-action atom probabilities ``[B, A, atoms]``."""
    if net.spec.head != "c51":
        raise ValueError("dist_forward needs a c51 head")
    return softmax(net(obs), axis=-1)


def q_forward(net: QNetwork, obs) -> Tensor:
    """Q estimates ``[B, A]``; c51 heads report the expected return."""
    out = net(obs)
    if net.spec.head == "c51":
        probs = softmax(out, axis=-1)
        return matmul(probs, Tensor(net.support()[:, None])).reshape(probs.shape[:-1])
    return out
