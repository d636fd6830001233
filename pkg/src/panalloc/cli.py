"""Command-line harness: cost sweeps, uptime studies, validation and protocol hex tools."""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import acceptance, experiments, protocol
from .core import load_energy_catalog
from .errors import PanError, ProtocolError
from .simulator import load_scenario, run

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
CATALOG_ENV = "AFV_CATALOG"


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_range(text: str) -> tuple[int, ...]:
    """``"1-20"`` or ``"1,2,5"``."""
    try:
        if "-" in text and "," not in text:
            lo, hi = (int(x) for x in text.split("-"))
            return tuple(range(lo, hi + 1))
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a range like 1-20 or a list like 1,2,5, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--catalog", type=Path, default=None,
                        help=f"energy catalog JSON (default: ${CATALOG_ENV}, then the bundled catalog)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=Path, default=None, help="directory for CSV/JSON outputs")

    sweep = argparse.ArgumentParser(add_help=False)
    sweep.add_argument("--trials", type=int, default=1000)
    sweep.add_argument("--parallel", type=int, default=1, help="worker processes")
    sweep.add_argument("--devices", type=int, default=5)
    sweep.add_argument("--requests", type=int, default=10, help="requests per function")
    sweep.add_argument("--sigma", type=float, default=0.1, help="standard deviation as a fraction of the mean")
    sweep.add_argument("--origins", choices=experiments.ORIGIN_MODES, default="random")

    p = argparse.ArgumentParser(prog="panalloc", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sweep-ratio", parents=[common, sweep], help="cost reduction against F/C ratio")
    s.add_argument("--ratios", type=_float_list, default=acceptance.COST_RATIOS)

    s = sub.add_parser("sweep-functions", parents=[common, sweep], help="cost reduction against function count")
    s.add_argument("--functions", type=_int_range, default=tuple(range(1, 21)))
    s.add_argument("--ratio", type=float, default=1.0)

    s = sub.add_parser("uptime", parents=[common], help="battery uptime of a scenario against baselines")
    s.add_argument("scenario", type=Path)
    s.add_argument("--baseline", type=Path, action="append", default=[])
    s.add_argument("--soc-sweep", type=int, metavar="DEVICE_ID", default=None,
                   help="also sweep this device's initial SoC over 10..100%%")
    s.add_argument("--trace", action="store_true", help="write the scenario's SoC series and event log")

    s = sub.add_parser("validate", parents=[common], help="run the acceptance criteria")
    s.add_argument("--only", type=_int_range, default=None, help="criterion numbers, e.g. 4,8")

    s = sub.add_parser("encode", help="message JSON -> hex")
    s.add_argument("message", help="JSON text, a path to a JSON file, or - for stdin")

    s = sub.add_parser("decode", help="hex -> message JSON")
    s.add_argument("hex", help="hex string (spaces allowed) or - for stdin")
    return p


def resolve_catalog(path: Optional[Path]):
    if path is None and os.environ.get(CATALOG_ENV):
        path = Path(os.environ[CATALOG_ENV])
    return load_energy_catalog(path)


def _emit(out: Optional[Path], name: str, text: str):
    if out is None:
        sys.stdout.write(text)
        return
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)
    print(f"wrote {out / name}")


def _sweep_config(args, **kw) -> experiments.SweepConfig:
    return experiments.SweepConfig(n_devices=args.devices, n_requests=args.requests, n_trials=args.trials,
                                   sigma_factor=args.sigma, seed=args.seed, origins=args.origins, **kw)


def cmd_sweep_ratio(args) -> int:
    rows = experiments.sweep_ratio(_sweep_config(args, fc_ratios=args.ratios), parallel=args.parallel)
    _emit(args.out, "sweep_ratio.csv", experiments.rows_to_csv(rows, experiments.RATIO_COLUMNS))
    if args.out is not None:
        summary = {"gap_vs_exact_pct": experiments.gap_by_point(rows, "ratio"), "seed": args.seed,
                   "trials": args.trials, "origins": args.origins}
        _emit(args.out, "sweep_ratio.json", json.dumps(summary, indent=1))
    return EXIT_OK


def cmd_sweep_functions(args) -> int:
    cfg = _sweep_config(args, n_functions=args.functions)
    rows = experiments.sweep_functions(cfg, ratio=args.ratio, parallel=args.parallel)
    _emit(args.out, "sweep_functions.csv", experiments.rows_to_csv(rows, experiments.FUNCTION_COLUMNS))
    if args.out is not None:
        trend = {}
        for name in ("all", "manual"):
            pts = [r for r in rows if r["strategy"] == name]
            if len(pts) > 1:
                trend[name] = experiments.slope([r["n_functions"] for r in pts], [r["mean_abs_saving"] for r in pts])
        summary = {"gap_vs_exact_pct": experiments.gap_by_point(rows, "n_functions"),
                   "abs_saving_slope": trend, "ratio": args.ratio, "seed": args.seed, "trials": args.trials}
        _emit(args.out, "sweep_functions.json", json.dumps(summary, indent=1))
    return EXIT_OK


def cmd_uptime(args) -> int:
    catalog = resolve_catalog(args.catalog)
    scenario = load_scenario(args.scenario, catalog=catalog)
    baselines = [load_scenario(b, catalog=catalog) for b in args.baseline]
    if not baselines:
        baselines = [experiments.identity_baseline(scenario)]
    rows, summary = experiments.uptime_study(scenario, baselines)
    _emit(args.out, "uptime.csv", experiments.rows_to_csv(rows, experiments.UPTIME_COLUMNS))
    if args.soc_sweep is not None:
        sweep = experiments.soc_sweep(scenario, baselines, args.soc_sweep)
        _emit(args.out, "soc_sweep.csv", experiments.rows_to_csv(sweep, experiments.SOC_SWEEP_COLUMNS))
    if args.out is not None:
        _emit(args.out, "uptime.json", json.dumps(summary, indent=1, default=str))
        if args.trace:
            trace = run(scenario)
            trace.write_csv(args.out / "soc_series.csv")
            trace.write_json(args.out / "events.json")
            print(f"wrote {args.out / 'soc_series.csv'} and {args.out / 'events.json'}")
    return EXIT_OK


def cmd_validate(args) -> int:
    catalog = resolve_catalog(args.catalog)
    numbers = args.only or tuple(acceptance.CHECKS)
    unknown = [n for n in numbers if n not in acceptance.CHECKS]
    if unknown:
        print(f"unknown criteria: {unknown}", file=sys.stderr)
        return EXIT_CONFIG
    results = [acceptance.CHECKS[n](catalog) for n in numbers]
    print(acceptance.format_table(results))
    if args.out is not None:
        _emit(args.out, "validate.json", json.dumps([r.__dict__ for r in results], indent=1))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def _read_arg(text: str) -> str:
    if text == "-":
        return sys.stdin.read()
    path = Path(text)
    if len(text) < 4096 and path.is_file():
        return path.read_text()
    return text


def cmd_encode(args) -> int:
    data = json.loads(_read_arg(args.message))
    if "message" in data:  # a golden fixture file
        data = data["message"]
    print(protocol.encode(protocol.from_dict(data)).hex())
    return EXIT_OK


def cmd_decode(args) -> int:
    raw = bytes.fromhex("".join(_read_arg(args.hex).split()))
    print(json.dumps(protocol.to_dict(protocol.decode(raw)), indent=1))
    return EXIT_OK


COMMANDS = {
    "sweep-ratio": cmd_sweep_ratio,
    "sweep-functions": cmd_sweep_functions,
    "uptime": cmd_uptime,
    "validate": cmd_validate,
    "encode": cmd_encode,
    "decode": cmd_decode,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (PanError, OSError, ValueError, KeyError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
