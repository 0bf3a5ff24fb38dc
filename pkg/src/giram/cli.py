"""Command line entry point: ``giram synth | ingest | run | report``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import METHODS, ExperimentConfig
from .experiment import ExperimentError, METRIC_COLUMNS, read_metrics_csv, run_experiment
from .ingest import (CategoryMap, ConfigError, DataError, build_trajectories, load_category_map,
                     load_checkins, prepare, write_category_map, write_checkins)
from .synth import SynthSpec, category_map, generate

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("giram")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text  # bare strings such as paths


def _apply_sets(raw: dict, assignments: list[str]) -> dict:
    """Apply ``section.key=value`` (or top-level ``key=value``) overrides to a config dict."""
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) > 2:
            raise ConfigError(f"--set key too deep: {key!r}")
        target = raw
        if len(parts) == 2:
            target = raw.setdefault(parts[0], {})
            if not isinstance(target, dict):
                raise ConfigError(f"{parts[0]!r} is not a config section")
        target[parts[-1]] = _parse_value(value)
    return raw


def build_config(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    if args.config and not isinstance(raw, dict):
        raise ConfigError(f"{args.config}: top level must be an object")
    raw = _apply_sets(raw, args.set or [])
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.method:
        raw["methods"] = [m for chunk in args.method for m in chunk.split(",") if m]
    data = raw.setdefault("data", {})
    if args.data:
        data["path"] = args.data
    if args.category_map:
        data["category_map"] = args.category_map
    if args.n_blocks is not None:
        data["n_blocks"] = args.n_blocks
    if args.users is not None:
        raw.setdefault("synth", {})["n_users"] = args.users
    if args.output:
        raw["output_dir"] = args.output
    if args.no_checkpoint:
        raw["checkpoint"] = False
    return ExperimentConfig.from_dict(raw)


# ---------------------------------------------------------------- verbs

def cmd_synth(args) -> int:
    fields = {f.name for f in dataclasses.fields(SynthSpec)}
    raw = _apply_sets({}, args.set or [])
    bad = set(raw) - fields
    if bad:
        raise ConfigError(f"unknown synth fields {sorted(bad)}")
    for name in ("n_users", "n_pois", "n_blocks", "drift", "noise", "seed"):
        v = getattr(args, name)
        if v is not None:
            raw[name] = v
    try:
        spec = SynthSpec(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    checkins = generate(spec)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_checkins(args.out, checkins)
    cmap_path = args.category_map or str(Path(args.out).with_suffix("")) + "_categories.csv"
    write_category_map(cmap_path, category_map(spec))
    print(f"wrote {len(checkins)} check-ins to {args.out} and category map to {cmap_path}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    cmap = load_category_map(args.category_map) if args.category_map else CategoryMap()
    checkins = load_checkins(args.path)
    vocab, base, blocks = prepare(checkins, n_blocks=args.n_blocks, min_count=args.min_count,
                                  interval=args.interval_days * 86400, cmap=cmap)
    print(f"{len(checkins)} check-ins read; {len(vocab.users)} users, {vocab.n_pois} POIs, "
          f"{len(vocab.derived_categories)} derived categories after filtering")
    print(f"{'block':>5} {'checkins':>9} {'users':>6} {'trajs':>6} {'days':>6}")
    for b in [base, *blocks]:
        trajs = b.trajectories if b.trajectories else build_trajectories(b, args.interval_days * 86400)
        users = len({c.user_id for c in b.checkins})
        print(f"{b.index:>5} {len(b.checkins):>9} {users:>6} {len(trajs):>6} {(b.time_span[1] - b.time_span[0]) / 86400:>6.1f}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = build_config(args)
    if args.dump_config:
        print(cfg.to_json())
        return EXIT_OK
    result = run_experiment(cfg, write=True, resume=args.resume)
    print(_render(result.rows + [
        {"block": "mean", "method": m, **{c: result.mean(m, c) for c in METRIC_COLUMNS},
         "N": sum(r["N"] for r in result.rows if r["method"] == m)} for m in cfg.methods]))
    print(f"reports written to {cfg.output_dir}")
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        path = path / "metrics.csv"
    if not path.exists():
        raise DataError(f"no report at {path}")
    rows = read_metrics_csv(path)
    if args.metric:
        if args.metric not in METRIC_COLUMNS:
            raise ConfigError(f"unknown metric {args.metric!r}; choose from {METRIC_COLUMNS}")
        print(_pivot(rows, args.metric))
    else:
        print(_render(rows))
    return EXIT_OK


def _render(rows: list[dict]) -> str:
    head = f"{'block':>5}  {'method':<12}" + "".join(f"{c:>9}" for c in METRIC_COLUMNS) + f"{'N':>7}"
    lines = [head]
    for r in rows:
        lines.append(f"{str(r['block']):>5}  {r['method']:<12}"
                     + "".join(f"{r[c]:>9.4f}" for c in METRIC_COLUMNS) + f"{r['N']:>7}")
    return "\n".join(lines)


def _pivot(rows: list[dict], metric: str) -> str:
    """Methods down, blocks across, in the usual results-table layout."""
    blocks = [b for b in dict.fromkeys(r["block"] for r in rows)]
    methods = list(dict.fromkeys(r["method"] for r in rows))
    cell = {(r["method"], r["block"]): r[metric] for r in rows}
    lines = [f"{metric:<12}" + "".join(f"{('T' + str(b)) if b != 'mean' else 'Mean':>9}" for b in blocks)]
    for m in methods:
        lines.append(f"{m:<12}" + "".join(f"{cell[(m, b)]:>9.4f}" for b in blocks))
    return "\n".join(lines)


# ---------------------------------------------------------------- parser

def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="giram", description="Continual next-POI recommendation experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("synth", help="write a synthetic check-in CSV and its category map")
    s.add_argument("--out", required=True)
    s.add_argument("--category-map", help="default: <out>_categories.csv")
    s.add_argument("--users", dest="n_users", type=int)
    s.add_argument("--pois", dest="n_pois", type=int)
    s.add_argument("--blocks", dest="n_blocks", type=int)
    s.add_argument("--drift", type=float)
    s.add_argument("--noise", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", metavar="FIELD=VALUE", help="any other SynthSpec field")
    s.set_defaults(func=cmd_synth)

    i = sub.add_parser("ingest", help="validate a check-in CSV and print block statistics")
    i.add_argument("path")
    i.add_argument("--category-map")
    i.add_argument("--n-blocks", type=int, default=5)
    i.add_argument("--min-count", type=int, default=10)
    i.add_argument("--interval-days", type=int, default=7)
    i.set_defaults(func=cmd_ingest)

    r = sub.add_parser("run", help="run the continual experiment and write reports")
    r.add_argument("--config", help="JSON config; unspecified keys keep their defaults")
    r.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config value, e.g. fusion.gamma=0.3 (repeatable)")
    r.add_argument("--seed", type=int)
    r.add_argument("--method", action="append", help=f"comma list from {', '.join(METHODS)}")
    r.add_argument("--data", help="check-in CSV; synthetic data when omitted")
    r.add_argument("--category-map")
    r.add_argument("--n-blocks", type=int)
    r.add_argument("--users", type=int, help="synthetic user count")
    r.add_argument("--output")
    r.add_argument("--no-checkpoint", action="store_true")
    r.add_argument("--resume", action="store_true", help="continue after the newest matching checkpoint")
    r.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    r.set_defaults(func=cmd_run)

    rp = sub.add_parser("report", help="print a finished run's metrics")
    rp.add_argument("path", help="run directory or metrics.csv")
    rp.add_argument("--metric", help="pivot one metric into a method x block table")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _code_for(exc.cause)
    except (ConfigError, DataError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _code_for(exc)


def _code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, FloatingPointError):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, OSError)):
        return EXIT_DATA
    raise exc


if __name__ == "__main__":
    sys.exit(main())
