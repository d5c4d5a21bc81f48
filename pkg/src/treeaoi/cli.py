"""Command-line sweeps: ``analyze``, ``simulate`` and ``optimize``.

Every subcommand writes one row per grid point with the same columns::

    U,rho,rhoU,lmax,mode,delta,delta_norm,ps,mean_delay,mean_Y,stderr_delta,seed_count

``lmax`` is ``inf`` for plain CTM.  Exit status: 0 on success, 1 on a
configuration error, 2 if at least one grid point failed numerically.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .analysis import average_aoi, optimize_lmax
from .markov import ProtocolConfig
from .sim import default_warmup, run_replicas

log = logging.getLogger("treeaoi")

COLUMNS = ["U", "rho", "rhoU", "lmax", "mode", "delta", "delta_norm", "ps",
           "mean_delay", "mean_Y", "stderr_delta", "seed_count"]
WORKERS_ENV = "TREEAOI_WORKERS"
DEFAULT_OPT_GRID = tuple(range(2, 31)) + (None,)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class SweepSpec:
    points: list  # (users, rho, l_max); l_max None = plain
    mode: str = "analyze"
    horizon: int = 10**6
    seeds: int = 1
    seed: int = 0
    warmup: int | None = None
    output: str | None = None
    fmt: str = "csv"
    workers: int = 1
    lmax_grid: tuple = field(default=DEFAULT_OPT_GRID)

    def validate(self) -> None:
        if not self.points:
            raise ConfigError("empty grid")
        for users, rho, lm in self.points:
            try:
                ProtocolConfig(users, rho, lm)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if self.mode not in ("analyze", "simulate", "both", "optimize"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode in ("simulate", "both"):
            if self.seeds < 1:
                raise ConfigError("seeds must be >= 1 when simulating")
            w = default_warmup(self.horizon) if self.warmup is None else self.warmup
            if not self.horizon > w >= 0:
                raise ConfigError("need horizon > warmup >= 0")
        if self.fmt not in ("csv", "json"):
            raise ConfigError(f"unknown format {self.fmt!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


def _fmt_lmax(l_max) -> str:
    return "inf" if l_max is None else str(l_max)


def _num(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return format(x, ".12g")


def _base(users, rho, l_max, mode) -> dict:
    return {"U": users, "rho": rho, "rhoU": rho * users, "lmax": _fmt_lmax(l_max), "mode": mode}


def _failed(users, rho, l_max, mode) -> dict:
    row = _base(users, rho, l_max, mode)
    row.update({k: math.nan for k in COLUMNS if k not in row})
    row["seed_count"] = 0
    return row


def _analyze_point(users, rho, l_max) -> dict:
    rep = average_aoi(ProtocolConfig(users, rho, l_max))
    row = _base(users, rho, l_max, "analyze")
    row.update(delta=rep.delta, delta_norm=rep.delta_norm, ps=rep.delivery_rate,
               mean_delay=rep.mean_d, mean_Y=rep.mean_y, stderr_delta=0.0, seed_count=0)
    return row


def _simulate_point(users, rho, l_max, horizon, warmup, seeds) -> dict:
    m = run_replicas(ProtocolConfig(users, rho, l_max), horizon, seeds, warmup)
    row = _base(users, rho, l_max, "simulate")
    row.update(delta=m.delta, delta_norm=m.delta / users, ps=m.delivery_rate,
               mean_delay=m.mean_delay, mean_Y=m.mean_y, stderr_delta=m.stderr("delta"),
               seed_count=m.seed_count)
    return row


def _optimize_point(users, rho, grid) -> dict:
    best, delta, _ = optimize_lmax(users, rho, grid)
    rep = average_aoi(ProtocolConfig(users, rho, best))
    row = _base(users, rho, best, "optimize")
    row.update(delta=delta, delta_norm=delta / users, ps=rep.delivery_rate,
               mean_delay=rep.mean_d, mean_Y=rep.mean_y, stderr_delta=0.0, seed_count=0)
    return row


def _run_task(task) -> tuple[list[dict], bool]:
    """Evaluate one grid point; returns its rows and whether it failed."""
    kind, args = task
    users, rho, l_max = args[:3]
    modes = {"both": ("analyze", "simulate")}.get(kind, (kind,))
    rows, failed = [], False
    for mode in modes:
        try:
            if mode == "analyze":
                rows.append(_analyze_point(users, rho, l_max))
            elif mode == "simulate":
                rows.append(_simulate_point(users, rho, l_max, *args[3:]))
            else:
                rows.append(_optimize_point(users, rho, args[3]))
        except (ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
            log.error("grid point U=%s rho=%s lmax=%s failed: %s", users, rho, _fmt_lmax(l_max), exc)
            rows.append(_failed(users, rho, l_max, mode))
            failed = True
    return rows, failed


def _tasks(spec: SweepSpec) -> list:
    warmup = default_warmup(spec.horizon) if spec.warmup is None else spec.warmup
    seeds = tuple(range(spec.seed, spec.seed + spec.seeds))
    tasks = []
    if spec.mode == "optimize":
        seen = []
        for users, rho, _ in spec.points:
            if (users, rho) not in seen:
                seen.append((users, rho))
                tasks.append(("optimize", (users, rho, None, spec.lmax_grid)))
        return tasks
    for users, rho, lm in spec.points:
        if spec.mode == "analyze":
            tasks.append(("analyze", (users, rho, lm)))
        else:
            tasks.append((spec.mode, (users, rho, lm, spec.horizon, warmup, seeds)))
    return tasks


def run_sweep(spec: SweepSpec) -> tuple[list[dict], int]:
    """Run every grid point in input order; returns rows and the exit status."""
    spec.validate()
    tasks = _tasks(spec)
    if spec.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        results = [_run_task(t) for t in tasks]
    rows = [r for rs, _ in results for r in rs]
    status = EXIT_NUMERIC if any(f for _, f in results) else EXIT_OK
    return rows, status


def render(rows: list[dict], fmt: str) -> str:
    if fmt == "json":
        out = [{k: _json_value(row[k]) for k in COLUMNS} for row in rows]
        return json.dumps(out, indent=2) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for row in rows:
        w.writerow([row[k] if k in ("lmax", "mode") else _num(row[k]) for k in COLUMNS])
    return buf.getvalue()


def _json_value(x):
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return int(x)
    x = float(x)
    return None if math.isnan(x) else float(_num(x))


# ---------------------------------------------------------------- parsing

def _parse_floats(text: str) -> list[float]:
    """Comma list; items may be ``start:stop:step`` ranges (stop inclusive)."""
    out = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        if ":" in item:
            start, stop, step = (float(v) for v in item.split(":"))
            if step <= 0:
                raise ConfigError(f"range step must be positive: {item!r}")
            n = int(math.floor((stop - start) / step + 1e-9)) + 1
            out.extend(round(start + i * step, 12) for i in range(n))
        else:
            out.append(float(item))
    return out


def _parse_lmax(text) -> list:
    if isinstance(text, (list, tuple)):
        items = [str(v) for v in text]
    else:
        items = [s.strip() for s in str(text).split(",") if s.strip()]
    out = []
    for item in items:
        if item.lower() in ("inf", "plain", "none"):
            out.append(None)
        elif ":" in item:
            a, b = (int(v) for v in item.split(":"))
            out.extend(range(a, b + 1))
        else:
            out.append(int(item))
    return out


def _parse_ints(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(s) for s in str(text).split(",") if s.strip()]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="treeaoi", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file with defaults for any option below")
    common.add_argument("-U", "--users", help="population size(s), comma separated")
    g = common.add_mutually_exclusive_group()
    g.add_argument("--rho", help="per-user generation probabilities (list or start:stop:step)")
    g.add_argument("--rho-u", dest="rho_u", help="aggregate rates rho*U (list or start:stop:step)")
    common.add_argument("--lmax", help="truncation lengths, e.g. 2,5,10,inf")
    common.add_argument("-o", "--output", help="output path (default stdout)")
    common.add_argument("--format", dest="fmt", choices=("csv", "json"))
    common.add_argument("--workers", type=int, help=f"worker processes (default ${WORKERS_ENV} or 1)")

    sim = _Parser(add_help=False)
    sim.add_argument("--horizon", type=int, help="slots per replica")
    sim.add_argument("--warmup", type=int, help="slots discarded at start (default 10%%, >= 1e4)")
    sim.add_argument("--seeds", type=int, help="number of replicas")
    sim.add_argument("--seed", type=int, help="first seed; replicas use seed, seed+1, ...")

    sub.add_parser("analyze", parents=[common], help="analytical AoI, delivery rate and delay")
    p = sub.add_parser("simulate", parents=[common, sim], help="Monte Carlo simulation")
    p.add_argument("--with-analysis", action="store_true", help="also emit the analytical row")
    sub.add_parser("optimize", parents=[common], help="best truncation length per rate")
    return parser


DEFAULTS = {
    "users": "100",
    "lmax": "inf",
    "fmt": "csv",
    "horizon": 10**6,
    "seeds": 1,
    "seed": 0,
    "warmup": None,
    "output": None,
}


def spec_from_args(args: argparse.Namespace) -> SweepSpec:
    """Merge defaults < config file < command-line flags into a sweep spec."""
    opts = dict(DEFAULTS)
    opts["workers"] = int(os.environ.get(WORKERS_ENV, "1"))
    lmax_given = args.lmax is not None
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        opts.update(cfg)
        lmax_given = lmax_given or "lmax" in cfg
    for key, val in vars(args).items():
        if val is not None and key not in ("config", "command", "verbose"):
            opts[key] = val

    has_rho = opts.get("rho") is not None
    has_rho_u = opts.get("rho_u") is not None
    if has_rho == has_rho_u:
        raise ConfigError("give exactly one of --rho or --rho-u")
    try:
        users = _parse_ints(opts["users"])
        raw = opts["rho"] if has_rho else opts["rho_u"]
        rates = list(map(float, raw)) if isinstance(raw, (list, tuple)) else _parse_floats(str(raw))
        lmaxes = _parse_lmax(opts["lmax"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    points = []
    for u in users:
        for r in rates:
            rho = r if has_rho else r / u
            if args.command == "optimize":
                points.append((u, rho, None))
            else:
                points.extend((u, rho, lm) for lm in lmaxes)

    mode = args.command
    if mode == "simulate" and opts.get("with_analysis"):
        mode = "both"
    spec = SweepSpec(
        points=points,
        mode=mode,
        horizon=int(opts["horizon"]),
        seeds=int(opts["seeds"]),
        seed=int(opts["seed"]),
        warmup=None if opts["warmup"] is None else int(opts["warmup"]),
        output=opts["output"],
        fmt=opts["fmt"],
        workers=int(opts["workers"]),
    )
    if args.command == "optimize" and lmax_given:
        # the plain-CTM sentinel is always a candidate
        spec.lmax_grid = tuple(dict.fromkeys(lmaxes + [None]))
    return spec


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        spec = spec_from_args(args)
        rows, status = run_sweep(spec)
    except ConfigError as exc:
        print(f"treeaoi: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    text = render(rows, spec.fmt)
    if spec.output:
        with open(spec.output, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return status


if __name__ == "__main__":
    sys.exit(main())
