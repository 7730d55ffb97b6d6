"""Command-line entry point: ``repeatersim {run,sweep,oracle}``.

Exit codes: 0 success, 1 configuration error, 2 runtime error, 3 oracle failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .engine import NoProgressError
from .experiment import (
    FORMATS,
    OUTPUT_DIR_ENV,
    ExperimentSpec,
    oracle_suite,
    run_experiment,
    spec_from_mapping,
    summary_rows,
)
from .model import ConfigError, Protocol

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ORACLE = 0, 1, 2, 3

# flag dest -> config key
FLAG_KEYS = {
    "protocol": "protocol",
    "nodes": "n_repeaters",
    "m": "m_per_node",
    "p": "p_success",
    "t0": "t0_seconds",
    "l0": "l0_meters",
    "slots": "max_slots",
    "target": "target_completions",
    "seed": "seed",
    "replications": "replications",
    "sweep": "sweep",
    "format": "formats",
    "sample_every": "sample_every",
    "burn_in": "burn_in_fraction",
}


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat JSON config file; flags override its values")
    p.add_argument("--protocol", action="append", choices=[x.value for x in Protocol],
                   help="protocol to run (repeatable; default both)")
    p.add_argument("--nodes", type=int, help="number of repeater nodes N")
    p.add_argument("--m", type=int, help="NV units per node M")
    p.add_argument("--p", type=float, help="per-attempt success probability P")
    p.add_argument("--t0", type=float, help="slot length in seconds (default 1.0)")
    p.add_argument("--l0", type=float, help="inter-node distance in metres (echoed only)")
    stop = p.add_mutually_exclusive_group()
    stop.add_argument("--slots", type=int, help="stop after this many slots")
    stop.add_argument("--target", type=int, help="stop after this many completed transfers")
    p.add_argument("--seed", type=int)
    p.add_argument("--replications", type=int)
    p.add_argument("--format", action="append", choices=FORMATS, help="output format (repeatable; default both)")
    p.add_argument("--sample-every", type=int, help="time-series sampling interval in slots")
    p.add_argument("--burn-in", type=float, help="burn-in fraction for throughput fits")
    p.add_argument("--out", help=f"output directory (overrides ${OUTPUT_DIR_ENV})")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for independent cells")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="repeatersim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="simulate one (N, M, P) cell per protocol")
    _add_sim_flags(run_p)
    sweep_p = sub.add_parser("sweep", help="simulate a list of M values per protocol")
    _add_sim_flags(sweep_p)
    sweep_p.add_argument("--sweep", type=_int_list, help="M values, e.g. 1,2,5,10")
    oracle_p = sub.add_parser("oracle", help="statevector check of link generation and teleportation")
    oracle_p.add_argument("--payloads", type=int, default=100)
    oracle_p.add_argument("--seed", type=int, default=0)
    oracle_p.add_argument("--out", help="also write oracle.json here")
    return parser


def parse(args: argparse.Namespace) -> ExperimentSpec:
    """Merge the config file with flags (flags win) and validate."""
    values: dict = {}
    if args.config is not None:
        try:
            loaded = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError([("config", f"cannot read {args.config}: {exc}")])
        if not isinstance(loaded, dict):
            raise ConfigError([("config", "expected a flat JSON object")])
        values.update(loaded)
    flags = {key: getattr(args, dest, None) for dest, key in FLAG_KEYS.items()}
    flags = {k: v for k, v in flags.items() if v is not None}
    # A stop condition on the command line replaces the file's.
    if "max_slots" in flags or "target_completions" in flags:
        values.pop("max_slots", None)
        values.pop("target_completions", None)
    values.update(flags)
    if args.command == "run" and values.get("sweep"):
        raise ConfigError([("sweep", "use the sweep subcommand for M sweeps")])
    if args.command == "sweep" and not values.get("sweep"):
        raise ConfigError([("sweep", "required for the sweep subcommand")])
    if args.jobs < 1:
        raise ConfigError([("jobs", "must be >= 1")])
    return spec_from_mapping(values, jobs=args.jobs, output_dir=args.out)


def _print_summary(rows) -> None:
    cols = ("protocol", "m_per_node", "replications", "latency_slots_mean",
            "throughput_per_slot", "mean_transfer_slots", "completed_count")
    print("\t".join(cols))
    for row in rows:
        print("\t".join("" if row[c] is None else (f"{row[c]:.6g}" if isinstance(row[c], float) else str(row[c]))
                        for c in cols))


def _oracle(args) -> int:
    report = oracle_suite(n_payloads=args.payloads, seed=args.seed)
    text = json.dumps(report, indent=1)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "oracle.json").write_text(text + "\n")
    return EXIT_OK if report["passed"] else EXIT_ORACLE


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "oracle":
        return _oracle(args)
    try:
        spec = parse(args)
    except ConfigError as exc:
        for key, msg in exc.errors:
            print(f"config error: {key}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run_experiment(spec)
    except (OSError, NoProgressError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    _print_summary(summary_rows(result))
    print(f"wrote {len(result.files)} files to {spec.output_dir}", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
