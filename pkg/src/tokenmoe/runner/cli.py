"""``tokenmoe train|ablate|aggregate|plot``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from tokenmoe.envs import load_baselines
from tokenmoe.evalstats import (
    ReportRow,
    ScoreTable,
    aggregate_report,
    final_score,
    normalize_score,
    read_report,
    write_report,
)
from tokenmoe.rlcore.agent import METRICS_HEADER, run_training
from tokenmoe.runner.config import ConfigError, RunConfig, load_config
from tokenmoe.runner.presets import DEFAULT_SEEDS, DEFAULT_STEPS, PRESETS, preset_grid
from tokenmoe.svgplot import render_report_svg

log = logging.getLogger("tokenmoe")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
FINAL_EVALS = 3


class InputError(ValueError):
    """Bad input files; exits with the usage code."""


def output_root(out: str | None) -> Path:
    return Path(out or os.environ.get("TOKENMOE_OUT") or "runs")


# -- train


def _train_one(cfg: RunConfig, out_dir: Path) -> tuple[str, str | None]:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.ini").write_text(cfg.to_text())
        rec = run_training(cfg.settings(), out_dir)
        log.info("%s: final score %.3f in %.1fs", rec.run_id, rec.final_score, rec.wall_seconds)
        return cfg.run_id, None
    except Exception as exc:  # recorded, the grid carries on
        return cfg.run_id, f"{type(exc).__name__}: {exc}"


def cmd_train(config_path: str, seed: int | None = None, out: str | None = None) -> int:
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    if seed is not None:
        cfg = cfg.with_seed(seed)
    out_dir = Path(out) if out else Path(cfg.out_dir) if cfg.out_dir else output_root(None) / cfg.run_id
    run_id, err = _train_one(cfg, out_dir)
    if err:
        print(f"{run_id}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    print(out_dir / "metrics.csv")
    return EXIT_OK


# -- aggregate


@dataclass
class RunMetrics:
    path: Path
    arch: str
    game: str
    seed: int
    steps: list[int]
    returns: list[float]


def read_metrics(path: Path) -> RunMetrics:
    problems = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METRICS_HEADER:
            raise InputError(f"{path}: header must be {','.join(METRICS_HEADER)}, got {header}")
        recs = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(METRICS_HEADER):
                problems.append(f"{path}:{lineno}: expected {len(METRICS_HEADER)} fields, got {len(rec)}")
                continue
            row = dict(zip(METRICS_HEADER, rec))
            try:
                recs.append((row["arch"], row["game"], int(row["seed"]), int(row["env_step"]),
                             float(row["episode_return"])))
            except ValueError as exc:
                problems.append(f"{path}:{lineno}: {exc}")
    if not problems and not recs:
        problems.append(f"{path}: no evaluation rows")
    if not problems and len({r[:3] for r in recs}) != 1:
        problems.append(f"{path}: rows mix several (arch, game, seed) runs")
    if problems:
        raise InputError("\n".join(problems))
    recs.sort(key=lambda r: r[3])
    arch, game, seed = recs[0][:3]
    return RunMetrics(path, arch, game, seed, [r[3] for r in recs], [r[4] for r in recs])


def find_metrics(run_dirs: Sequence[str | Path]) -> list[Path]:
    found = []
    for d in run_dirs:
        d = Path(d)
        if d.is_file():
            found.append(d)
        elif (d / "metrics.csv").is_file():
            found.append(d / "metrics.csv")
        elif d.is_dir():
            found.extend(sorted(d.rglob("metrics.csv")))
        else:
            raise InputError(f"{d}: no such run directory")
    if not found:
        raise InputError("no metrics.csv files found")
    return found


def collect_runs(run_dirs: Sequence[str | Path]) -> list[RunMetrics]:
    runs, problems = [], []
    for path in find_metrics(run_dirs):
        try:
            runs.append(read_metrics(path))
        except InputError as exc:
            problems.append(str(exc))
    if problems:
        raise InputError("\n".join(problems))
    seen: dict[tuple, Path] = {}
    for r in runs:
        key = (r.arch, r.game, r.seed)
        if key in seen:
            raise InputError(f"{r.path}: duplicates run {key} from {seen[key]}")
        seen[key] = r.path
    return runs


def score_tables(runs: Sequence[RunMetrics], baselines: dict[str, tuple[float, float]] | None = None
                 ) -> dict[str, ScoreTable]:
    """Normalised final scores per architecture, in first-seen order."""
    baselines = baselines if baselines is not None else load_baselines()
    grouped: dict[str, dict[str, list[tuple[int, float]]]] = defaultdict(lambda: defaultdict(list))
    for r in runs:
        if r.game not in baselines:
            raise InputError(f"{r.path}: no baseline scores for game {r.game!r}")
        rand, ref = baselines[r.game]
        grouped[r.arch][r.game].append((r.seed, normalize_score(final_score(r.returns, FINAL_EVALS), rand, ref)))
    return {arch: ScoreTable({g: [s for _, s in sorted(v)] for g, v in sorted(games.items())})
            for arch, games in grouped.items()}


def learning_curves(runs: Sequence[RunMetrics]) -> dict[str, list[tuple[int, float]]]:
    """Mean raw evaluation return per env step for each architecture."""
    acc: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in runs:
        for s, v in zip(r.steps, r.returns):
            acc[r.arch][s].append(v)
    return {a: [(s, math.fsum(v) / len(v)) for s, v in sorted(d.items())] for a, d in acc.items()}


def write_outputs(rows: list[ReportRow], out: Path, curves=None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "report.csv", rows)
    (out / "report.svg").write_text(render_report_svg(rows, curves=curves))


def aggregate_dirs(run_dirs: Sequence[str | Path], out: Path, resamples: int = 2000, seed: int = 0) -> list[ReportRow]:
    runs = collect_runs(run_dirs)
    try:
        rows = aggregate_report(score_tables(runs), B=resamples, seed=seed)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    write_outputs(rows, out, learning_curves(runs))
    return rows


def cmd_aggregate(run_dirs: Sequence[str], out: str | None = None, resamples: int = 2000, seed: int = 0) -> int:
    out_dir = Path(out) if out else output_root(None)
    try:
        aggregate_dirs(run_dirs, out_dir, resamples, seed)
    except InputError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    print(out_dir / "report.csv")
    return EXIT_OK


# -- plot


def cmd_plot(report_csv: str, out: str | None = None, curves: Sequence[str] = ()) -> int:
    try:
        rows = read_report(report_csv)
        if not rows:
            raise InputError(f"{report_csv}: report has no rows")
        curve_data = learning_curves(collect_runs(curves)) if curves else None
        svg = render_report_svg(rows, curves=curve_data)
    except (OSError, ValueError) as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    target = Path(out) if out else Path(report_csv).with_suffix(".svg")
    target.write_text(svg)
    print(target)
    return EXIT_OK


# -- ablate


def run_dir_for(root: Path, cfg: RunConfig) -> Path:
    return root / "runs" / cfg.label / cfg.game / f"seed{cfg.seed}"


def cmd_ablate(preset: str, steps: int = DEFAULT_STEPS, seeds: int = DEFAULT_SEEDS, jobs: int = 1,
               out: str | None = None, dry_run: bool = False, resamples: int = 2000) -> int:
    if preset not in PRESETS:
        print(f"unknown preset {preset!r}; known: {', '.join(PRESETS)}", file=sys.stderr)
        return EXIT_USAGE
    try:
        grid = preset_grid(preset, steps, seeds)
        for cfg in grid:
            cfg.validate()
    except (ValueError, ConfigError) as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    root = output_root(out) / preset
    if dry_run:
        for cfg in grid:
            print(f"{run_dir_for(root, cfg)}\t{cfg.summary()}")
        return EXIT_OK

    dirs = [run_dir_for(root, cfg) for cfg in grid]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_one, grid, dirs))
    else:
        results = [_train_one(cfg, d) for cfg, d in zip(grid, dirs)]

    failed = [(rid, err) for rid, err in results if err]
    root.mkdir(parents=True, exist_ok=True)
    (root / "failures.txt").write_text("".join(f"{rid}\t{err}\n" for rid, err in failed))
    done = [d for d, (_, err) in zip(dirs, results) if not err]
    for rid, err in failed:
        log.warning("run %s failed: %s", rid, err)
    if not done:
        print("every run failed; nothing to aggregate", file=sys.stderr)
        return EXIT_RUNTIME
    if failed:
        log.warning("aggregating %d of %d runs", len(done), len(grid))
    try:
        aggregate_dirs(done, root, resamples)
    except InputError as exc:
        print(exc, file=sys.stderr)
        return EXIT_RUNTIME
    print(root / "report.csv")
    return EXIT_RUNTIME if failed else EXIT_OK


# -- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tokenmoe", description="MoE and tokenisation probes for value-based RL")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one agent from a config file")
    t.add_argument("config")
    t.add_argument("--seed", type=int, default=None, help="override the config seed")
    t.add_argument("--out", default=None, help="run directory (default: $TOKENMOE_OUT/<run id>)")

    a = sub.add_parser("ablate", help="run an ablation grid, then aggregate and plot")
    a.add_argument("preset", help=f"one of {', '.join(PRESETS)}")
    a.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    a.add_argument("--seeds", type=int, default=DEFAULT_SEEDS)
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--out", default=None, help="output root (default: $TOKENMOE_OUT or ./runs)")
    a.add_argument("--dry-run", action="store_true", help="list the grid without running it")
    a.add_argument("--resamples", type=int, default=2000, help="bootstrap resamples")

    g = sub.add_parser("aggregate", help="build report.csv and report.svg from run directories")
    g.add_argument("run_dirs", nargs="+")
    g.add_argument("--out", default=None)
    g.add_argument("--resamples", type=int, default=2000)
    g.add_argument("--seed", type=int, default=0)

    pl = sub.add_parser("plot", help="render report.csv as SVG")
    pl.add_argument("report_csv")
    pl.add_argument("--out", default=None)
    pl.add_argument("--curves", nargs="*", default=(), help="run directories for learning curves")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "train":
        return cmd_train(args.config, args.seed, args.out)
    if args.command == "ablate":
        if args.steps < 1 or args.seeds < 1 or args.jobs < 1 or args.resamples < 1:
            print("--steps, --seeds, --jobs and --resamples must be positive", file=sys.stderr)
            return EXIT_USAGE
        return cmd_ablate(args.preset, args.steps, args.seeds, args.jobs, args.out, args.dry_run, args.resamples)
    if args.command == "aggregate":
        return cmd_aggregate(args.run_dirs, args.out, args.resamples, args.seed)
    return cmd_plot(args.report_csv, args.out, args.curves)


if __name__ == "__main__":
    sys.exit(main())
