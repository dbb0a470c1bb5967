"""Command-line experiment runner.

    poisson-polymer run <experiment>[,<experiment>...] [--config PATH] [--seed N]
                        [--out DIR] [--t-grid a,b,c] [--threads N]

Writes results.csv (long format), summary.txt and manifest.json into the
output directory.  Exit codes: 0 all checks pass, 1 a check failed, 2 usage
or config error, 3 time budget exceeded (partial results are written).
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import math
import multiprocessing
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .errors import BudgetExceededError, ConfigError
from .experiments import (CSV_COLUMNS, EXPERIMENTS, RUN_KEYS, SCHEMA_VERSION, Check, Row, computation_key,
                          resolve_config, run_task)

OUT_ENV = "POISSON_POLYMER_OUT"
EXIT_PASS, EXIT_FAIL, EXIT_USAGE, EXIT_BUDGET = 0, 1, 2, 3


@dataclass
class RunResult:
    out_dir: Path
    rows: list
    verdicts: dict
    exit_code: int
    wall_clock: float
    budget_exceeded: bool = False
    configs: dict = field(default_factory=dict)


def load_config(path) -> tuple[dict, dict]:
    """Parse an INI file into ([run] settings, {experiment: raw section})."""
    if path is None:
        return {}, {}
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    run, sections = {}, {}
    for name in cp.sections():
        items = dict(cp.items(name))
        if name == "run":
            unknown = sorted(set(items) - set(RUN_KEYS))
            if unknown:
                raise ConfigError(f"[run] unknown keys: {', '.join(unknown)}")
            run = {k: RUN_KEYS[k].parse(f"run.{k}", v) for k, v in items.items()}
        elif name in EXPERIMENTS:
            sections[name] = items
        else:
            raise ConfigError(f"unknown config section [{name}]")
    return run, sections


def format_number(v) -> str:
    return "%.17g" % v


def write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r.experiment, "" if r.t is None else format_number(r.t), r.statistic,
                    format_number(r.value), format_number(r.stderr), str(int(r.n))])
    return buf.getvalue()


def read_results(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ConfigError(f"{path}: unexpected columns {header}")
        return [Row(e, None if t == "" else float(t), s, float(v), float(se), int(n))
                for e, t, s, v, se, n in reader]


def verdicts_from_rows(configs: dict, rows) -> dict:
    """Per-experiment checks, recomputed from rows (as read back from results.csv)."""
    out = {}
    for name, cfg in configs.items():
        mine = [r for r in rows if r.experiment == name]
        try:
            checks = EXPERIMENTS[name].checks(cfg, mine)
        except KeyError as exc:
            checks = [Check("results complete", False, f"missing statistic {exc}")]
        out[name] = checks
    return out


def _summary(result: RunResult) -> str:
    lines = [f"poisson-polymer {__version__}  wall clock {result.wall_clock:.1f} s"]
    if result.budget_exceeded:
        lines.append("BUDGET EXCEEDED: results are partial")
    for name, checks in result.verdicts.items():
        ok = all(c.passed for c in checks)
        lines.append(f"\n[{name}] {'PASS' if ok else 'FAIL'}")
        for c in checks:
            lines.append(f"  {'pass' if c.passed else 'FAIL'}  {c.name}: {c.detail}")
    return "\n".join(lines) + "\n"


def _json_cfg(cfg):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()
            if not k.startswith("_") and not (isinstance(v, float) and not math.isfinite(v))}


def run(experiments, config_path=None, seed=None, out=None, t_grid=None, threads=None) -> RunResult:
    """Run experiments and write results.csv, summary.txt and manifest.json.

    Command-line values override the config file; the output directory falls
    back to $POISSON_POLYMER_OUT and then ./poisson-polymer-out/<experiments>.
    """
    t0 = time.perf_counter()
    names = [experiments] if isinstance(experiments, str) else list(experiments)
    run_cfg, sections = load_config(config_path)
    if not names or names == [""]:
        names = [n for n in str(run_cfg.get("experiment", "")).split(",") if n]
    if not names:
        raise ConfigError("no experiment given")
    for n in names:
        if n not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {n!r}; choose from {', '.join(EXPERIMENTS)}")
    seed = run_cfg.get("seed", 0) if seed is None else seed
    threads = run_cfg.get("threads", 1) if threads is None else threads
    if seed < 0 or threads < 1:
        raise ConfigError("seed must be >= 0 and threads >= 1")
    budget = run_cfg.get("budget_seconds", math.inf)
    out_dir = Path(out or run_cfg.get("out") or os.environ.get(OUT_ENV)
                   or Path("poisson-polymer-out") / "+".join(names))

    configs = {}
    for n in names:
        section = dict(sections.get(n, {}))
        key = EXPERIMENTS[n].t_grid_key
        if t_grid is not None:
            if key is None:
                raise ConfigError(f"experiment {n!r} has no t grid")
            section[key] = t_grid
        cfg = resolve_config(n, section, seed)
        cfg["_name"] = n
        configs[n] = cfg

    # group experiments that can share one computation
    groups: dict = {}
    for n in names:
        groups.setdefault(computation_key(n, configs[n]), []).append(n)

    rows, exceeded = [], False
    pool = None
    if threads > 1:
        pool = ProcessPoolExecutor(max_workers=threads, mp_context=multiprocessing.get_context("spawn"))
    try:
        for (comp_name, _), members in groups.items():
            cfg = {k: v for k, v in configs[members[0]].items() if not k.startswith("_")}
            comp = EXPERIMENTS[members[0]].computation
            tasks = comp.tasks(cfg)
            payloads = []
            try:
                if pool is None:
                    for task in tasks:
                        payloads.append(run_task(comp_name, cfg, task))
                        if time.perf_counter() - t0 > budget:
                            raise BudgetExceededError("time budget exceeded", len(payloads) / len(tasks))
                else:
                    futs = [pool.submit(run_task, comp_name, cfg, task) for task in tasks]
                    for f in futs:
                        payloads.append(f.result())
                        if time.perf_counter() - t0 > budget:
                            for g in futs:
                                g.cancel()
                            raise BudgetExceededError("time budget exceeded", len(payloads) / len(tasks))
            except BudgetExceededError:
                exceeded = True
                break
            for n in members:
                rows.extend(EXPERIMENTS[n].reduce(configs[n], payloads))
    finally:
        if pool is not None:
            pool.shutdown(wait=True, cancel_futures=True)

    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "results.csv"
    write_atomic(csv_path, rows_to_csv(rows))
    verdicts = verdicts_from_rows(configs, read_results(csv_path))
    passed = all(c.passed for cs in verdicts.values() for c in cs)
    code = EXIT_BUDGET if exceeded else (EXIT_PASS if passed else EXIT_FAIL)
    wall = time.perf_counter() - t0
    result = RunResult(out_dir, rows, verdicts, code, wall, exceeded, configs)
    write_atomic(out_dir / "summary.txt", _summary(result))
    manifest = {
        "library_version": __version__,
        "csv_schema_version": SCHEMA_VERSION,
        "csv_columns": list(CSV_COLUMNS),
        "experiments": names,
        "seed": seed,
        "threads": threads,
        "config_file": None if config_path is None else str(config_path),
        "config": {n: _json_cfg(c) for n, c in configs.items()},
        "wall_clock_seconds": wall,
        "budget_exceeded": exceeded,
        "verdicts": {n: {"passed": all(c.passed for c in cs), "checks": [asdict(c) for c in cs]}
                     for n, cs in verdicts.items()},
        "exit_code": code,
    }
    write_atomic(out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return result


def _parser():
    p = argparse.ArgumentParser(prog="poisson-polymer",
                                description="Directed polymer in a Poisson environment: experiment runner.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one or more experiments")
    r.add_argument("experiment", help="experiment name, or a comma-separated list sharing one output")
    r.add_argument("--config", help="INI file with a [run] section and one section per experiment")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help=f"output directory (default ${OUT_ENV})")
    r.add_argument("--t-grid", help="comma-separated t values, e.g. 10,100,1000")
    r.add_argument("--threads", type=int, help="worker processes")
    sub.add_parser("list", help="list experiments")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "list":
        for name, e in EXPERIMENTS.items():
            print(f"{name:22s} {e.description}")
        return EXIT_PASS
    try:
        res = run(args.experiment.split(","), args.config, args.seed, args.out, args.t_grid, args.threads)
    except ConfigError as exc:
        print(f"poisson-polymer: {exc}", file=sys.stderr)
        return EXIT_USAGE
    sys.stdout.write(_summary(res))
    print(f"results written to {res.out_dir}")
    return res.exit_code


if __name__ == "__main__":
    sys.exit(main())
