"""Command line front door: ``vnfsim run | compare | selftest``."""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import os
import platform
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ExperimentConfig, config_dict, config_hash, load_config
from .errors import BadConfig, ConfigInvalid
from .selftest import run_selftest
from .simengine import CSV_COLUMNS, ExperimentResult, PipelineConfig, metrics_row, run_experiment

OUT_ENV = "VNFSIM_OUT"
DEFAULT_OUT = "vnfsim-out"
EXIT_CONFIG, EXIT_RUNTIME, EXIT_SELFTEST = 1, 2, 3
SUMMARY_COLUMNS = (
    "variant", "seed", "episodes", "window", "sar", "sar_high", "sar_low",
    "sar_hd", "sar_nhd", "remaining_cpu_avg", "starvation_count",
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors count as configuration errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def metrics_csv(result: ExperimentResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for m in result.metrics:
        w.writerow([_fmt(v) for v in metrics_row(m, result.grid)])
    return buf.getvalue()


def read_metrics_csv(path: str | Path) -> dict[str, list[float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {c: [float(r[c]) for r in rows] for c in CSV_COLUMNS}


def final_window_mean(values: Sequence[float], window: int) -> float:
    vals = [v for v in values[-window:] if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def combined_stream_hash(result: ExperimentResult) -> str:
    h = hashlib.sha256()
    for m in result.metrics:
        h.update(m.stream_hash.encode())
    return h.hexdigest()[:16]


def _manifest(cfg: PipelineConfig, name: str, result: ExperimentResult, files: dict) -> dict:
    return {
        "scenario": name,
        "seed": cfg.seed,
        "episodes": cfg.episodes,
        "config_hash": config_hash(cfg),
        "config": config_dict(cfg),
        "stream_hash": combined_stream_hash(result),
        "files": files,
        "versions": {
            "vnfsim": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
    }


def run_one(cfg: PipelineConfig, name: str, out: Path) -> tuple[ExperimentResult, Path]:
    """One seeded run; writes metrics CSV, event log and manifest under ``out``."""
    stem = f"{name}_seed{cfg.seed}"
    log_path = out / f"{stem}.events.log"
    with open(log_path, "w", newline="\n") as fh:
        result = run_experiment(cfg, log=lambda line: fh.write(line + "\n"))
    csv_path = out / f"{stem}.csv"
    csv_path.write_text(metrics_csv(result), newline="\n")
    files = {"metrics": csv_path.name, "events": log_path.name}
    manifest = _manifest(cfg, name, result, files)
    (out / f"{stem}.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", newline="\n")
    return result, csv_path


def _resolve(args) -> tuple[ExperimentConfig, Path]:
    exp = load_config(args.config, args.set or [])
    if args.seed:
        exp.seeds = list(args.seed)
    out = Path(args.out or exp.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    return exp, out


def cmd_run(args) -> int:
    exp, out = _resolve(args)
    out.mkdir(parents=True, exist_ok=True)
    for seed in exp.seeds:
        cfg = exp.with_seed(seed)
        result, path = run_one(cfg, exp.name, out)
        print(f"seed {seed}: {len(result.metrics)} episodes, final SAR "
              f"{result.metrics[-1].sar:.3f} -> {path}")
    return 0


def summary_rows(name: str, seed: int, result: ExperimentResult, window: int) -> list:
    w = min(window, len(result.metrics))
    cols = {c: result.series(c) for c in CSV_COLUMNS}
    return [
        name, seed, len(result.metrics), w,
        *(final_window_mean(cols[c], w) for c in
          ("sar", "sar_high", "sar_low", "sar_hd", "sar_nhd", "remaining_cpu_avg", "starvation_count")),
    ]


def cmd_compare(args) -> int:
    exp, out = _resolve(args)
    if args.window < 1:
        raise ConfigInvalid("--window must be >= 1")
    if len(exp.variants) < 2:
        raise ConfigInvalid("compare needs at least two [[variant]] tables")
    pipelines = [(v.name, exp.variant_pipeline(v)) for v in exp.variants]
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    streams: dict[int, dict[str, str]] = {}
    for seed in exp.seeds:
        for name, base in pipelines:
            cfg = copy.deepcopy(base)
            cfg.seed = seed
            result, _ = run_one(cfg, f"{exp.name}-{name}", out)
            rows.append(summary_rows(name, seed, result, args.window))
            streams.setdefault(seed, {})[name] = combined_stream_hash(result)
            print(f"seed {seed} {name}: final-window SAR {rows[-1][4]:.3f}")
    for name, _ in pipelines:
        mine = [r for r in rows if r[0] == name]
        rows.append([name, "mean", mine[0][2], mine[0][3],
                     *(float(np.nanmean([r[i] for r in mine])) if not all(math.isnan(r[i]) for r in mine)
                       else float("nan") for i in range(4, len(SUMMARY_COLUMNS)))])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    for seed, per in streams.items():
        same = "yes" if len(set(per.values())) == 1 else "no"
        w.writerow([f"# streams seed={seed} identical={same} "
                    + " ".join(f"{k}={v}" for k, v in per.items())])
    path = out / f"{exp.name}.summary.csv"
    path.write_text(buf.getvalue(), newline="\n")
    print(f"summary -> {path}")
    return 0


def cmd_selftest(args) -> int:
    results = run_selftest()
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_SELFTEST if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vnfsim", description="SFC placement and scheduling simulator")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, helptext in (("run", "run seeded experiments"), ("compare", "run and summarise config variants")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", help="TOML config file (defaults apply when omitted)")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
        sp.add_argument("--seed", type=int, action="append", help="seed; repeat for several")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted override, e.g. adsch.gamma=0.95; repeatable")
        if name == "compare":
            sp.add_argument("--window", type=int, default=100, help="final moving-average window")
    sub.add_parser("selftest", help="run the fast oracle checks")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return int(exc.code or 0)
    handler = {"run": cmd_run, "compare": cmd_compare, "selftest": cmd_selftest}[args.command]
    try:
        return handler(args)
    except (ConfigInvalid, BadConfig) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported, not swallowed
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
