"""Normalised-score aggregates with stratified bootstrap intervals."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from tokenmoe.diffcore import make_rng

METRICS = ("iqm", "median", "mean", "optimality_gap")
REPORT_HEADER = ["arch", "metric", "value", "ci_low", "ci_high"]


def normalize_score(raw: float, random_score: float, reference_score: float) -> float:
    if reference_score == random_score:
        raise ValueError("reference and random scores coincide; normalisation undefined")
    return (raw - random_score) / (reference_score - random_score)


def iqm(scores: Sequence[float]) -> float:
    """Mean after dropping ``floor(N/4)`` scores from each end."""
    s = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    if s.size == 0:
        raise ValueError("iqm of an empty score list")
    cut = s.size // 4
    return float(s[cut : s.size - cut].mean())


def optimality_gap(scores: Sequence[float], target: float = 1.0) -> float:
    s = np.asarray(scores, dtype=np.float64).ravel()
    return float(np.mean(np.maximum(0.0, target - s)))


def mean(scores: Sequence[float]) -> float:
    return float(np.mean(np.asarray(scores, dtype=np.float64)))


def median(scores: Sequence[float]) -> float:
    return float(np.median(np.asarray(scores, dtype=np.float64)))


STATISTICS: dict[str, Callable[[Sequence[float]], float]] = {
    "iqm": iqm,
    "median": median,
    "mean": mean,
    "optimality_gap": optimality_gap,
}


@dataclass
class ScoreTable:
    """Normalised (or raw) final scores, one array of seeds per game."""

    scores: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.scores = {g: np.asarray(v, dtype=np.float64).ravel() for g, v in self.scores.items()}
        for g, v in self.scores.items():
            if v.size < 1:
                raise ValueError(f"game {g!r} has no seeds")

    @property
    def games(self) -> list[str]:
        return list(self.scores)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.scores[g] for g in self.games])


def stratified_bootstrap_ci(
    table: ScoreTable,
    statistic: Callable[[Sequence[float]], float] = iqm,
    B: int = 2000,
    level: float = 0.95,
    seed: int = 0,
) -> tuple[float, float]:
    """Percentile interval from ``B`` resamples that redraw seeds within each game.

    Resample ``b`` uses the generator ``make_rng(seed, "bootstrap", b)``.
    """
    if B < 1:
        raise ValueError("need at least one resample")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    games = table.games
    stats = np.empty(B)
    for b in range(B):
        rng = make_rng(seed, "bootstrap", b)
        parts = [v[rng.integers(v.size, size=v.size)] for v in (table.scores[g] for g in games)]
        stats[b] = statistic(np.concatenate(parts))
    tail = (1.0 - level) / 2.0
    lo, hi = np.percentile(stats, [100.0 * tail, 100.0 * (1.0 - tail)])
    return float(lo), float(hi)


@dataclass
class ReportRow:
    arch: str
    metric: str
    value: float
    ci_low: float
    ci_high: float


def aggregate_report(tables: Mapping[str, ScoreTable], B: int = 2000, seed: int = 0) -> list[ReportRow]:
    """Point estimates and intervals of every metric for every architecture."""
    if not tables:
        raise ValueError("no architectures to report")
    game_sets = {arch: sorted(t.games) for arch, t in tables.items()}
    ref = next(iter(game_sets.values()))
    for arch, gs in game_sets.items():
        if gs != ref:
            raise ValueError(f"arch {arch!r} covers games {gs}, expected {ref}")
    rows = []
    for arch, table in tables.items():
        flat = table.flat()
        for metric in METRICS:
            stat = STATISTICS[metric]
            lo, hi = stratified_bootstrap_ci(table, stat, B, 0.95, seed)
            rows.append(ReportRow(arch, metric, stat(flat), lo, hi))
    return rows


def _fmt(x: float) -> str:
    return repr(float(x))


def write_report(path: str | Path, rows: Sequence[ReportRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in rows:
            w.writerow([r.arch, r.metric, _fmt(r.value), _fmt(r.ci_low), _fmt(r.ci_high)])


def read_report(path: str | Path) -> list[ReportRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != REPORT_HEADER:
            raise ValueError(f"{path}: expected header {','.join(REPORT_HEADER)}, got {header}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(REPORT_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(REPORT_HEADER)} fields, got {len(rec)}")
            try:
                rows.append(ReportRow(rec[0], rec[1], float(rec[2]), float(rec[3]), float(rec[4])))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return rows


def final_score(returns: Sequence[float], last: int = 3) -> float:
    r = list(returns)
    if not r:
        return math.nan
    return float(np.mean(r[-last:]))
