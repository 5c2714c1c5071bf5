"""Parameters, initialisation descriptors and seeded generator derivation.

Randomness: every stream is a numpy ``PCG64`` generator seeded through
``SeedSequence(entropy=seed, spawn_key=keys)``, where ``keys`` are the CRC-32
checksums of the purpose strings (integers pass through unchanged). Both
``PCG64`` and ``SeedSequence`` are documented by numpy as stable across
releases, so a ``(seed, purpose...)`` pair names the same stream forever.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import numpy as np

from tokenmoe.diffcore.tensor import DTYPE, Tensor


def _key(part: int | str) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def derive_seed(seed: int, *purpose: int | str) -> int:
    """Deterministic 63-bit child seed for ``(seed, *purpose)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(p) for p in purpose))
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> np.uint64(1))


def make_rng(seed: int, *purpose: int | str) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(p) for p in purpose))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class InitSpec:
    """How a parameter is drawn: ``uniform_fan_in``, ``zeros`` or ``constant``."""

    family: str = "uniform_fan_in"
    fan_in: int = 1
    seed: int = 0
    value: float = 0.0

    def with_seed(self, seed: int) -> "InitSpec":
        return replace(self, seed=seed)


def sample_init(spec: InitSpec, shape: tuple[int, ...]) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ValueError(f"shape must have positive extents, got {shape}")
    if spec.family == "zeros":
        return np.zeros(shape, dtype=DTYPE)
    if spec.family == "constant":
        return np.full(shape, spec.value, dtype=DTYPE)
    if spec.family == "uniform_fan_in":
        bound = np.sqrt(3.0 / spec.fan_in)
        return make_rng(spec.seed, "init").uniform(-bound, bound, size=shape).astype(DTYPE)
    raise ValueError(f"unknown init family {spec.family!r}")


class Parameter(Tensor):
    """Trainable tensor that remembers how (and to what) it was initialised."""

    __slots__ = ("init_snapshot", "init_spec")

    def __init__(self, value: np.ndarray, init_spec: InitSpec) -> None:
        super().__init__(np.array(value, dtype=DTYPE), requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.init_snapshot = self.data.copy()
        self.init_snapshot.flags.writeable = False
        self.init_spec = init_spec

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        self.grad += g

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, init={self.init_spec.family})"


def init_params(spec: InitSpec, shape: tuple[int, ...], seed: int | None = None) -> Parameter:
    """Draw a new :class:`Parameter`; ``seed`` overrides ``spec.seed`` when given."""
    if seed is not None:
        spec = spec.with_seed(seed)
    return Parameter(sample_init(spec, shape), spec)


def weight(shape: tuple[int, ...], fan_in: int, seed: int) -> Parameter:
    return init_params(InitSpec("uniform_fan_in", fan_in=fan_in, seed=seed), shape)


def bias(shape: tuple[int, ...]) -> Parameter:
    return init_params(InitSpec("zeros"), shape)
