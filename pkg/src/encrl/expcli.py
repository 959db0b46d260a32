"""Command-line experiment runner.

Subcommands::

    encrl train  --config CFG [--out DIR] [--seed-offset N] [--jobs K] [--set key=value ...]
    encrl eval   RUN_DIR [--episodes N]
    encrl bench  [--reps N] [--sizes 5,6,8,16] [--schemes noop,shuffle,aes_ecb,aes_cbc] [--out FILE]
    encrl table  RUN_DIR ... [--by scheme|key_len|padding] [--out FILE]
    encrl curves RUN_DIR ... [--window W] [--out FILE]

A run directory holds ``config.txt``, one ``metrics_seed<S>.csv`` and
``params_seed<S>.bin`` per seed, and ``summary.csv``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from encrl import config as cfgmod
from encrl import tensornet as tn
from encrl.cipher import SchemeSpec
from encrl.config import ExperimentConfig
from encrl.dqncore import EpisodeRecord, evaluate, moving_average, train_run
from encrl.errors import ConfigError, EncRLError

log = logging.getLogger("encrl")

METRIC_COLUMNS = ("seed", "episode", "steps", "return", "epsilon", "mean_loss")
SUMMARY_COLUMNS = ("config", "env", "start_mode", "scheme", "padding", "n_seeds", "mean", "std", "cell")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


# -- metrics files -------------------------------------------------------------

def format_metrics(records: list[EpisodeRecord]) -> str:
    buf = io.StringIO()
    buf.write(",".join(METRIC_COLUMNS) + "\n")
    for r in records:
        buf.write(f"{r.seed},{r.episode},{r.steps},{r.ret:.6f},{r.epsilon:.6f},{r.mean_loss:.6f}\n")
    return buf.getvalue()


@dataclass
class SeedMetrics:
    seed: int
    episode: np.ndarray
    steps: np.ndarray
    returns: np.ndarray
    epsilon: np.ndarray
    mean_loss: np.ndarray


def read_metrics(path: Path) -> SeedMetrics:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != METRIC_COLUMNS:
            raise EncRLError(f"{path}: unexpected header {header}")
        rows = list(reader)
    if not rows:
        raise EncRLError(f"{path}: no episodes")
    cols = list(zip(*rows))
    seeds = {int(s) for s in cols[0]}
    if len(seeds) != 1:
        raise EncRLError(f"{path}: mixed seeds")
    return SeedMetrics(
        seed=seeds.pop(),
        episode=np.array(cols[1], dtype=int),
        steps=np.array(cols[2], dtype=int),
        returns=np.array(cols[3], dtype=float),
        epsilon=np.array(cols[4], dtype=float),
        mean_loss=np.array(cols[5], dtype=float),
    )


def metrics_path(run_dir: Path, seed: int) -> Path:
    return run_dir / f"metrics_seed{seed}.csv"


def params_path(run_dir: Path, seed: int) -> Path:
    return run_dir / f"params_seed{seed}.bin"


# -- train ---------------------------------------------------------------------

def _train_one(config: ExperimentConfig, seed: int, run_dir: str) -> int:
    m = train_run(config, seed)
    d = Path(run_dir)
    metrics_path(d, seed).write_text(format_metrics(m.episodes))
    with open(params_path(d, seed), "wb") as fh:
        tn.save_params(m.net, m.net_spec, fh)
    return seed


def summarize(run_dir: Path, config: ExperimentConfig) -> dict:
    """Per-seed final-window means, then mean and std (ddof=0) across seeds, from the files on disk."""
    finals = []
    for seed in config.seeds:
        sm = read_metrics(metrics_path(run_dir, seed))
        finals.append(float(sm.returns[-config.train.final_window:].mean()))
    arr = np.array(finals)
    mean, std = float(arr.mean()), float(arr.std())
    return {
        "config": config.name,
        "env": config.env.label,
        "start_mode": config.env.start_mode if config.env.kind == "gridroom" else "",
        "scheme": config.scheme.label,
        "padding": config.padding.mode,
        "n_seeds": len(finals),
        "mean": f"{mean:.6f}",
        "std": f"{std:.6f}",
        "cell": f"{mean:.3f}±{std:.3f}",
    }


def write_summary(run_dir: Path, row: dict) -> None:
    with open(run_dir / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerow(row)


def run(config: ExperimentConfig, out_dir: str | Path | None = None, jobs: int = 1) -> Path:
    """Train every seed of ``config`` and write metrics, parameters and the summary."""
    base = Path(out_dir if out_dir is not None else config.out_dir)
    run_dir = base / config.name
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(cfgmod.serialize(config))
    except OSError as exc:
        raise EncRLError(f"cannot write to {run_dir}: {exc}") from exc
    if jobs > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_train_one, config, s, str(run_dir)) for s in config.seeds]
            for f in futures:
                log.info("seed %d done", f.result())
    else:
        for s in config.seeds:
            _train_one(config, s, str(run_dir))
            log.info("seed %d done", s)
    write_summary(run_dir, summarize(run_dir, config))
    return run_dir


def load_run(run_dir: Path) -> tuple[ExperimentConfig, list[SeedMetrics]]:
    run_dir = Path(run_dir)
    config = cfgmod.load(run_dir / "config.txt")
    return config, [read_metrics(metrics_path(run_dir, s)) for s in config.seeds]


# -- table / curves -------------------------------------------------------------

_SHORT = {"noop": "Plain", "shuffle": "Shuffle", "aes_ecb": "ECB", "aes_cbc": "CBC"}
_PAD = {"custom": "Custom", "pkcs7": "PKCS"}


def ablation_label(config: ExperimentConfig, by: str) -> str:
    short = _SHORT.get(config.scheme.kind, config.scheme.kind)
    if by == "key_len":
        return f"{short}({config.scheme.key_len})" if config.scheme.kind.startswith("aes") else short
    if by == "padding":
        return f"{short} + {_PAD[config.padding.mode]}"
    if by == "scheme":
        return short
    raise ConfigError(f"unknown grouping {by!r}")


def table(run_dirs: list[Path], by: str = "scheme") -> list[list[str]]:
    """Ablation grid: one row per scheme/key/padding label, one column per environment."""
    if not run_dirs:
        raise EncRLError("table needs at least one run directory")
    cells: dict[tuple[str, str], str] = {}
    cols: dict[str, tuple] = {}
    for d in run_dirs:
        config, _ = load_run(d)
        with open(Path(d) / "summary.csv", newline="") as fh:
            summary = next(csv.DictReader(fh))
        env = config.env.label + ("" if config.env.start_mode == "fixed" or config.env.kind != "gridroom"
                                  else "-random")
        cols[env] = (config.env.kind, config.env.size, env)
        cells[(ablation_label(config, by), env)] = summary["cell"]
    col_order = sorted(cols, key=lambda c: cols[c])
    rows = sorted({r for r, _ in cells})
    out = [["encryption"] + col_order]
    for r in rows:
        out.append([r] + [cells.get((r, c), "") for c in col_order])
    return out


def curves(run_dirs: list[Path], window: int = 100) -> list[list]:
    """Moving-average return per seed, indexed by both episode and cumulative env step."""
    if window < 1:
        raise ConfigError("window must be >= 1")
    out = [["config", "seed", "episode", "env_step", "moving_avg"]]
    for d in run_dirs:
        config, metrics = load_run(d)
        for sm in metrics:
            ma = moving_average(sm.returns, window)
            steps = np.cumsum(sm.steps)
            for i, v in enumerate(ma):
                end = i + window - 1
                out.append([config.name, sm.seed, int(sm.episode[end]), int(steps[end]), f"{v:.6f}"])
    return out


def _emit(rows: list[list], out: str | None, delimiter: str = ",") -> None:
    text = "".join(delimiter.join(str(c) for c in row) + "\n" for row in rows)
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# -- CLI -----------------------------------------------------------------------

def _parse_sets(pairs: list[str]) -> dict[str, str]:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise ConfigError(f"--set expects key=value, got {p!r}")
        k, _, v = p.partition("=")
        out[k.strip()] = v
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="encrl", description="DQN on encrypted states")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="train all seeds of a configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--seed-offset", type=int, default=0)
    t.add_argument("--jobs", type=int, default=1)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    e = sub.add_parser("eval", help="greedy evaluation of trained parameters")
    e.add_argument("run_dir")
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--out")

    b = sub.add_parser("bench", help="encryption latency benchmark")
    b.add_argument("--reps", type=int, default=1000)
    b.add_argument("--warmup", type=int, default=100)
    b.add_argument("--sizes", default="5,6,8,16")
    b.add_argument("--schemes", default="noop,shuffle,aes_ecb,aes_cbc")
    b.add_argument("--key-len", type=int, default=32)
    b.add_argument("--padding", default="custom", choices=("custom", "pkcs7"))
    b.add_argument("--out")

    tb = sub.add_parser("table", help="ablation grid from run directories")
    tb.add_argument("run_dirs", nargs="+")
    tb.add_argument("--by", default="scheme", choices=("scheme", "key_len", "padding"))
    tb.add_argument("--out")

    c = sub.add_parser("curves", help="moving-average learning curves")
    c.add_argument("run_dirs", nargs="+")
    c.add_argument("--window", type=int, default=100)
    c.add_argument("--out")
    return ap


def _cmd_train(args) -> None:
    try:
        config = cfgmod.load(args.config)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    config = config.with_overrides(_parse_sets(args.set))
    if args.seed_offset:
        config = config.replace(seeds=tuple(s + args.seed_offset for s in config.seeds))
    run_dir = run(config, args.out, args.jobs)
    sys.stdout.write((run_dir / "summary.csv").read_text())


def _cmd_eval(args) -> None:
    run_dir = Path(args.run_dir)
    config = cfgmod.load(run_dir / "config.txt")
    rows = [["config", "seed", "episodes", "mean", "std"]]
    for seed in config.seeds:
        with open(params_path(run_dir, seed), "rb") as fh:
            net, _ = tn.load_params(fh)
        mean, std = evaluate(net, config, args.episodes, seed)
        rows.append([config.name, seed, args.episodes, f"{mean:.6f}", "" if std is None else f"{std:.6f}"])
    _emit(rows, args.out)


def _cmd_bench(args) -> None:
    from encrl.cryptobench import bench_report, run_benchmarks
    from encrl.pipeline import PaddingSpec

    sizes = [int(s) for s in args.sizes.split(",")]
    schemes = [SchemeSpec(k.strip(), args.key_len) for k in args.schemes.split(",")]
    results = run_benchmarks(schemes, sizes, args.reps, PaddingSpec(args.padding), args.warmup)
    report = bench_report(results)
    if args.out:
        Path(args.out).write_text(report)
    else:
        sys.stdout.write(report)
    log.info("homomorphic schemes are not timed: no backend is bundled")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.cmd == "train":
            _cmd_train(args)
        elif args.cmd == "eval":
            _cmd_eval(args)
        elif args.cmd == "bench":
            _cmd_bench(args)
        elif args.cmd == "table":
            _emit(table([Path(d) for d in args.run_dirs], args.by), args.out)
        elif args.cmd == "curves":
            _emit(curves([Path(d) for d in args.run_dirs], args.window), args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EncRLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
