"""Turning an encoder output ``[h, w, d]`` into tokens.

All functions accept an optional leading batch axis and are linear maps, so
they sit on the tape like any other op.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tokenmoe.diffcore import Tensor, as_tensor, make_rng, mean, reshape, swap_last, take, tsum

SCHEMES = ("flatten", "per_conv", "per_feat", "per_patch", "shuffled", "pooled_sum", "pooled_mean")


@dataclass
class TokenMatrix:
    tokens: Tensor
    scheme: str

    @property
    def m(self) -> int:
        return self.tokens.shape[-2]

    @property
    def d_tok(self) -> int:
        return self.tokens.shape[-1]


def _check_rank(x: Tensor) -> None:
    if x.ndim not in (3, 4):
        raise ValueError(f"expected [h, w, d] or [B, h, w, d], got shape {x.shape}")


def flatten(x) -> Tensor:
    """Row-major flatten of the trailing ``[h, w, d]`` axes."""
    x = as_tensor(x)
    _check_rank(x)
    h, w, d = x.shape[-3:]
    return reshape(x, x.shape[:-3] + (h * w * d,))


def per_conv(x) -> TokenMatrix:
    """``h*w`` tokens of size ``d``; token ``i`` is ``x[i // w, i % w, :]``."""
    x = as_tensor(x)
    _check_rank(x)
    h, w, d = x.shape[-3:]
    return TokenMatrix(reshape(x, x.shape[:-3] + (h * w, d)), "per_conv")


def per_feat(x) -> TokenMatrix:
    """``d`` tokens of size ``h*w``; token ``j`` is the flattened channel ``j``."""
    t = per_conv(x).tokens
    return TokenMatrix(swap_last(t), "per_feat")


def per_patch(x, rho: int) -> TokenMatrix:
    """Mean-pool non-overlapping ``rho x rho`` patches, then tokenize per position."""
    x = as_tensor(x)
    _check_rank(x)
    h, w, d = x.shape[-3:]
    if rho < 1 or h % rho or w % rho:
        raise ValueError(f"patch size {rho} must divide spatial extent {h}x{w}")
    lead = x.shape[:-3]
    split = reshape(x, lead + (h // rho, rho, w // rho, rho, d))
    k = len(lead)
    pooled = mean(split, axis=(k + 1, k + 3))
    return TokenMatrix(per_conv(pooled).tokens, "per_patch")


def shuffle_permutation(shape: tuple[int, int, int], seed: int, granularity: str = "scalar") -> np.ndarray:
    h, w, d = shape
    rng = make_rng(seed, "shuffle", granularity)
    if granularity == "scalar":
        return rng.permutation(h * w * d)
    if granularity == "spatial":
        return rng.permutation(h * w)
    raise ValueError(f"unknown shuffle granularity {granularity!r}")


def shuffled(x, perm_seed: int = 0, granularity: str = "scalar", perm: np.ndarray | None = None) -> TokenMatrix:
    """Apply a fixed permutation, then :func:`per_conv`.

    ``scalar`` permutes all ``h*w*d`` entries; ``spatial`` permutes whole
    positions and keeps each channel vector intact.
    """
    x = as_tensor(x)
    _check_rank(x)
    h, w, d = x.shape[-3:]
    if perm is None:
        perm = shuffle_permutation((h, w, d), perm_seed, granularity)
    lead = x.shape[:-3]
    if granularity == "scalar":
        flat = take(flatten(x), perm, axis=-1)
        return TokenMatrix(reshape(flat, lead + (h * w, d)), "shuffled")
    if granularity == "spatial":
        return TokenMatrix(take(per_conv(x).tokens, perm, axis=-2), "shuffled")
    raise ValueError(f"unknown shuffle granularity {granularity!r}")


def token_pool(t: TokenMatrix | Tensor, mode: str) -> Tensor:
    """Reduce over tokens: ``[..., m, d_tok] -> [..., d_tok]``."""
    tokens = t.tokens if isinstance(t, TokenMatrix) else as_tensor(t)
    if mode == "sum":
        return tsum(tokens, axis=-2)
    if mode == "mean":
        return mean(tokens, axis=-2)
    raise ValueError(f"pool mode must be 'sum' or 'mean', got {mode!r}")


def tokenize(x, scheme: str, patch_rho: int = 2, shuffle_seed: int = 0,
             shuffle_granularity: str = "scalar", perm: np.ndarray | None = None) -> TokenMatrix:
    """Dispatch on a config scheme name. Pooled schemes tokenize per position."""
    if scheme in ("per_conv", "pooled_sum", "pooled_mean"):
        return per_conv(x)
    if scheme == "per_feat":
        return per_feat(x)
    if scheme == "per_patch":
        return per_patch(x, patch_rho)
    if scheme == "shuffled":
        return shuffled(x, shuffle_seed, shuffle_granularity, perm)
    raise ValueError(f"scheme {scheme!r} does not produce tokens")


def token_shape(enc_shape: tuple[int, int, int], scheme: str, patch_rho: int = 2) -> tuple[int, int]:
    """``(m, d_tok)`` a scheme yields for an encoder output shape."""
    h, w, d = enc_shape
    if scheme in ("per_conv", "shuffled", "pooled_sum", "pooled_mean"):
        return h * w, d
    if scheme == "per_feat":
        return d, h * w
    if scheme == "per_patch":
        if h % patch_rho or w % patch_rho:
            raise ValueError(f"patch size {patch_rho} must divide spatial extent {h}x{w}")
        return (h // patch_rho) * (w // patch_rho), d
    raise ValueError(f"scheme {scheme!r} does not produce tokens")
