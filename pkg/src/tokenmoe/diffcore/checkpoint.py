"""Flat binary checkpoints.

Layout (all header lines are ASCII, terminated by a single ``\\n``)::

    TOKENMOE-CKPT 1
    <N>                      number of parameters
    <name> <d0>,<d1>,...     N lines, in storage order
    END
    <payload>                little-endian float64 values, row-major,
                             parameters concatenated in header order

A scalar parameter is written with an empty shape field (``<name> ``).
Names must not contain whitespace.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = "TOKENMOE-CKPT 1"


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    lines = [MAGIC, str(len(arrays))]
    for name, a in arrays.items():
        if not name or any(c.isspace() for c in name):
            raise ValueError(f"invalid parameter name {name!r}")
        lines.append(f"{name} {','.join(str(int(d)) for d in np.shape(a))}")
    lines.append("END")
    header = ("\n".join(lines) + "\n").encode("ascii")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    Path(path).write_bytes(header + payload)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    pos = 0

    def line() -> str:
        nonlocal pos
        end = raw.index(b"\n", pos)
        text = raw[pos:end].decode("ascii")
        pos = end + 1
        return text

    if line() != MAGIC:
        raise ValueError(f"{path}: not a tokenmoe checkpoint")
    count = int(line())
    specs = []
    for _ in range(count):
        name, _, dims = line().partition(" ")
        shape = tuple(int(d) for d in dims.split(",") if d)
        specs.append((name, shape))
    if line() != "END":
        raise ValueError(f"{path}: malformed header")
    out: dict[str, np.ndarray] = {}
    for name, shape in specs:
        n = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return out
