"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 oracle failure,
3 numerical failure at run time.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from .config import load_config, resolve
from .errors import ConfigError, NumericalError
from .metrics import read_records, summarize_run

EXIT_OK, EXIT_CONFIG, EXIT_ORACLE, EXIT_NUMERICAL = 0, 1, 2, 3


def _parse_value(text: str):
    return yaml.safe_load(text)


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError([f"override '{item}' must look like key=value"])
        key, value = item.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def _load(args):
    cfg = load_config(args.config) if args.config else resolve({})
    over = _overrides(args.set)
    if args.output:
        over["output_dir"] = args.output
    return cfg.with_overrides(over) if over else cfg


def cmd_run(args) -> int:
    from .runner import run_experiment, write_outputs

    cfg = _load(args)
    result = run_experiment(cfg)
    out = write_outputs(result)
    print(f"wrote {len(result.records)} records for {len(result.summaries)} runs to {out}")
    return EXIT_OK


def _sweep_grid(cfg, grid_args) -> dict:
    grid = dict(cfg["sweep"] or {})
    for item in grid_args or []:
        key, _, values = item.partition("=")
        if not values:
            raise ConfigError([f"grid '{item}' must look like key=v1,v2"])
        grid[key.strip()] = [_parse_value(v) for v in values.split(",")]
    if not grid:
        raise ConfigError(["sweep needs a 'sweep' section or at least one --grid key=v1,v2"])
    return grid


def cmd_sweep(args) -> int:
    from .runner import run_experiment, write_outputs

    cfg = _load(args)
    grid = _sweep_grid(cfg, args.grid)
    keys = sorted(grid)
    combos = [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]
    # validate every combination before running any
    resolved = []
    problems = []
    for combo in combos:
        try:
            resolved.append((combo, cfg.with_overrides({**combo, "sweep": None})))
        except ConfigError as exc:
            problems.extend(f"{combo}: {p}" for p in exc.problems)
    if problems:
        raise ConfigError(problems)
    root = Path(cfg["output_dir"])
    index = []
    for combo, sub in resolved:
        name = "__".join(f"{k}={combo[k]}" for k in keys).replace("/", "_")
        result = run_experiment(sub)
        write_outputs(result, root / name)
        index.append({"name": name, "overrides": combo})
        print(f"{name}: {len(result.summaries)} runs")
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "sweep.json", "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return EXIT_OK


def cmd_oracle(args) -> int:
    from .oracles import run_oracle_checks

    report = run_oracle_checks(seed=args.seed)
    print(report.text())
    if args.json:
        Path(args.json).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK if report.passed else EXIT_ORACLE


def cmd_export(args) -> int:
    """CSV series for regret curves, boxplot quantiles and safe-set trajectories."""
    from .metrics import regret_curve

    src = Path(args.results)
    records = read_records(src / "records.csv")
    runs: dict = {}
    for r in records:
        runs.setdefault(r.run_id, []).append(r)
    summaries = [summarize_run(v) for v in runs.values()]
    out = Path(args.output or src / "plots")
    out.mkdir(parents=True, exist_ok=True)

    by_policy: dict = {}
    for s in summaries:
        by_policy.setdefault(s.policy, []).append(s)
    with open(out / "regret_curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "round", "mean", "lower", "upper"])
        for policy in sorted(by_policy):
            group = by_policy[policy]
            length = min(s.rounds for s in group)
            for s in group:
                s.regret = s.regret[:length]
            c = regret_curve(group, band=0.25)
            for i in range(length):
                w.writerow([policy, int(c["round"][i]), repr(float(c["mean"][i])),
                            repr(float(c["lower"][i])), repr(float(c["upper"][i]))])
    with open(out / "boxplot.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "metric", "min", "q1", "median", "q3", "max"])
        for policy in sorted(by_policy):
            group = by_policy[policy]
            for metric in ("cumulative_regret", "mean_abs_error", "hypo", "hyper"):
                vals = [s.cumulative if metric == "cumulative_regret" else getattr(s, metric) for s in group]
                q = np.quantile(vals, [0.0, 0.25, 0.5, 0.75, 1.0])
                w.writerow([policy, metric] + [repr(float(v)) for v in q])
    safe = src / "safe_sets.csv"
    if safe.exists():
        (out / "safe_set_trajectories.csv").write_text(safe.read_text())
    print(f"wrote plot series to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="escada", description="Safe GP bandits for leveling tasks")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", nargs="?", help="YAML experiment configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")
        sp.add_argument("--output", help="output directory (overrides output_dir)")

    r = sub.add_parser("run", help="run one experiment")
    common(r)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run a cartesian grid of configurations")
    common(s)
    s.add_argument("--grid", action="append", metavar="KEY=V1,V2", help="swept key and its values")
    s.set_defaults(func=cmd_sweep)

    o = sub.add_parser("oracle-check", help="run the reference-computation checks")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--json", help="also write the report as JSON")
    o.set_defaults(func=cmd_oracle)

    e = sub.add_parser("export-plots", help="derive plot series from a results directory")
    e.add_argument("results", help="directory holding records.csv")
    e.add_argument("--output", help="destination directory (default RESULTS/plots)")
    e.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print("configuration error:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
