"""Experiment specs, cell orchestration and byte-stable output files."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

import numpy as np

from . import __version__
from . import oracle
from .engine import RunResult, run
from .metrics import MetricsSummary, merge_all, normalize_sweep, summarize
from .model import CONFIG_FIELDS, ConfigError, Protocol, SimConfig, validate_config

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "REPEATERSIM_OUTPUT_DIR"
FORMATS = ("csv", "json")
TIMESERIES_HEADER = ("slot", "time_seconds", "completed_cumulative")
QUBITS_HEADER = ("qubit_id", "injected_slot", "completed_slot", "transfer_slots")
SUMMARY_KEYS = (
    "protocol", "n_repeaters", "m_per_node", "p_success", "t0_seconds", "replications",
    "latency_slots_mean", "latency_slots_ci95", "throughput_per_slot", "throughput_se",
    "mean_transfer_slots", "transfer_se", "max_transfer_slots", "completed_count",
    "in_flight_count", "seed", "max_residence_slots",
)

_SPEC_KEYS = {"protocol", "sweep", "output_dir", "formats", "sample_every", "burn_in_fraction"}
KNOWN_KEYS = (CONFIG_FIELDS - {"protocol"}) | _SPEC_KEYS


@dataclass(frozen=True)
class ExperimentSpec:
    base: dict[str, Any]
    protocols: tuple[Protocol, ...] = (Protocol.PARALLELIZED, Protocol.MULTIPLEXED)
    sweep: Optional[tuple[int, ...]] = None
    output_dir: Path = Path("results")
    formats: tuple[str, ...] = FORMATS
    sample_every: int = 1000
    burn_in_fraction: float = 0.3
    jobs: int = 1

    @property
    def m_values(self) -> tuple[int, ...]:
        return self.sweep if self.sweep else (self.base["m_per_node"],)

    def config(self, protocol: Protocol, m: int) -> SimConfig:
        return validate_config({**self.base, "protocol": protocol.value, "m_per_node": m})

    def echo(self) -> dict[str, Any]:
        """Parameters that determine the outputs; the output location is excluded."""
        out = dict(sorted(self.base.items()))
        out["protocol"] = [p.value for p in self.protocols]
        out["sweep"] = list(self.sweep) if self.sweep else None
        out["formats"] = list(self.formats)
        out["sample_every"] = self.sample_every
        out["burn_in_fraction"] = self.burn_in_fraction
        return out


def spec_from_mapping(
    values: Mapping[str, Any], *, jobs: int = 1, output_dir: Optional[str] = None
) -> ExperimentSpec:
    """Validate a flat config mapping (file contents merged with flags)."""
    errors: list[tuple[str, str]] = []
    for key in sorted(set(values) - KNOWN_KEYS):
        errors.append((key, "unknown key"))

    raw_protocols = values.get("protocol", [p.value for p in Protocol])
    if isinstance(raw_protocols, str):
        raw_protocols = [raw_protocols]
    protocols = []
    if not isinstance(raw_protocols, list) or not raw_protocols:
        errors.append(("protocol", "expected a protocol name or a non-empty list of names"))
    else:
        for i, name in enumerate(raw_protocols):
            try:
                protocols.append(Protocol(name))
            except ValueError:
                errors.append((f"protocol[{i}]", f"unknown protocol {name!r}"))
        if len(set(protocols)) != len(protocols):
            errors.append(("protocol", "protocols must be distinct"))

    sweep = values.get("sweep")
    if sweep is not None:
        if not isinstance(sweep, list) or not sweep:
            errors.append(("sweep", "expected a non-empty list of integers"))
            sweep = None
        else:
            for i, m in enumerate(sweep):
                if not isinstance(m, int) or isinstance(m, bool) or m < 1:
                    errors.append((f"sweep[{i}]", f"expected positive integer, got {m!r}"))
            if len(set(map(repr, sweep))) != len(sweep):
                errors.append(("sweep", "values must be distinct"))
            sweep = tuple(sweep)

    formats = values.get("formats", list(FORMATS))
    if isinstance(formats, str):
        formats = [formats]
    if not isinstance(formats, list) or not formats or any(f not in FORMATS for f in formats):
        errors.append(("formats", f"expected a non-empty subset of {list(FORMATS)}"))
        formats = list(FORMATS)
    formats = tuple(f for f in FORMATS if f in formats)

    sample_every = values.get("sample_every", 1000)
    if not isinstance(sample_every, int) or isinstance(sample_every, bool) or sample_every < 1:
        errors.append(("sample_every", "expected positive integer"))
    burn_in = values.get("burn_in_fraction", 0.3)
    if not isinstance(burn_in, (int, float)) or isinstance(burn_in, bool) or not 0 <= burn_in < 1:
        errors.append(("burn_in_fraction", "expected a number in [0, 1)"))

    base = {k: v for k, v in values.items() if k in CONFIG_FIELDS and k != "protocol"}
    if sweep and "m_per_node" not in base:
        base["m_per_node"] = sweep[0]
    probe = {**base, "protocol": protocols[0].value if protocols else "multiplexed"}
    try:
        validated = validate_config(probe)
    except ConfigError as exc:
        errors.extend(exc.errors)
    else:
        base["t0_seconds"] = validated.t0_seconds
        base["seed"] = validated.seed
        base["replications"] = validated.replications
        base["p_success"] = validated.p_success

    if errors:
        raise ConfigError(errors)

    # explicit argument > environment > config value > default
    out_dir = output_dir or os.environ.get(OUTPUT_DIR_ENV) or values.get("output_dir") or "results"
    return ExperimentSpec(
        base=base,
        protocols=tuple(protocols),
        sweep=sweep,
        output_dir=Path(out_dir),
        formats=formats,
        sample_every=sample_every,
        burn_in_fraction=float(burn_in),
        jobs=jobs,
    )


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _json_value(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _csv_text(header: Iterable[str], rows: Iterable[Iterable], preamble: list[str]) -> str:
    buf = io.StringIO()
    for line in preamble:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _preamble(echo: dict, cell: Optional[dict] = None) -> list[str]:
    lines = [f"repeatersim {__version__}", "spec " + json.dumps(echo, sort_keys=True)]
    if cell is not None:
        lines.append("cell " + json.dumps(cell, sort_keys=True))
    return lines


def cell_name(protocol: Protocol, m: int, rep: int) -> str:
    return f"{protocol.value}_m{m:03d}_rep{rep:04d}"


def timeseries_rows(result: RunResult, sample_every: int) -> list[tuple]:
    slots, counts = result.series(sample_every)
    t0 = result.config.t0_seconds
    return [(int(s), float(s) * t0, int(c)) for s, c in zip(slots, counts)]


def qubit_rows(result: RunResult) -> list[tuple]:
    return [
        (r.qubit_id, r.injected_slot, r.completed_slot, r.transfer_slots)
        for r in result.records
        if r.completed_slot is not None
    ]


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


@dataclass(frozen=True)
class _CellTask:
    config: SimConfig
    replication_index: int
    output_dir: Path
    formats: tuple[str, ...]
    sample_every: int
    burn_in_fraction: float
    echo: dict


def _run_cell(task: _CellTask) -> tuple[MetricsSummary, list[str]]:
    cfg = task.config
    result = run(cfg, task.replication_index)
    name = cell_name(cfg.protocol, cfg.m_per_node, task.replication_index)
    cell = {"protocol": cfg.protocol.value, "m_per_node": cfg.m_per_node, "replication_index": task.replication_index}
    ts = timeseries_rows(result, task.sample_every)
    qs = qubit_rows(result)
    written = []
    if "csv" in task.formats:
        pre = _preamble(task.echo, cell)
        for suffix, header, rows in (("timeseries", TIMESERIES_HEADER, ts), ("qubits", QUBITS_HEADER, qs)):
            path = task.output_dir / f"{name}_{suffix}.csv"
            _write(path, _csv_text(header, rows, pre))
            written.append(path.name)
    if "json" in task.formats:
        payload = {
            "version": __version__,
            "spec": task.echo,
            "cell": cell,
            "total_slots": result.total_slots,
            "in_flight_count": result.in_flight_count,
            "timeseries": {k: [row[i] for row in ts] for i, k in enumerate(TIMESERIES_HEADER)},
            "qubits": {k: [row[i] for row in qs] for i, k in enumerate(QUBITS_HEADER)},
        }
        path = task.output_dir / f"{name}.json"
        _write(path, json.dumps(payload, indent=1) + "\n")
        written.append(path.name)
    logger.info("cell %s: %d completed, %d slots", name, len(result.completion_slots), result.total_slots)
    return summarize(result, task.burn_in_fraction), written


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    summaries: dict[tuple[str, int], MetricsSummary]
    files: list[str] = field(default_factory=list)

    def normalized(self, protocol: Protocol) -> list[tuple[int, float]]:
        points = [(m, s.mean_transfer_slots) for (p, m), s in self.summaries.items() if p == protocol.value]
        return normalize_sweep(points)


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Run every protocol x M x replication cell and write per-cell files plus the merged summary."""
    out = Path(spec.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")

    echo = spec.echo()
    tasks = []
    for protocol in spec.protocols:
        for m in spec.m_values:
            cfg = spec.config(protocol, m)
            for rep in range(cfg.replications):
                tasks.append(_CellTask(cfg, rep, out, spec.formats, spec.sample_every, spec.burn_in_fraction, echo))

    if spec.jobs > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            outcomes = list(pool.map(_run_cell, tasks))
    else:
        outcomes = [_run_cell(t) for t in tasks]

    grouped: dict[tuple[str, int], list[MetricsSummary]] = {}
    files: list[str] = []
    for task, (summary, written) in zip(tasks, outcomes):
        grouped.setdefault((task.config.protocol.value, task.config.m_per_node), []).append(summary)
        files.extend(written)
    summaries = {key: merge_all(group) for key, group in grouped.items()}
    result = ExperimentResult(spec, summaries, files)
    files.extend(write_summary(result, echo))
    return result


def summary_rows(result: ExperimentResult) -> list[dict]:
    return [{k: _json_value(v) for k, v in s.as_row().items()} for s in result.summaries.values()]


def write_summary(result: ExperimentResult, echo: dict) -> list[str]:
    spec = result.spec
    out = Path(spec.output_dir)
    rows = summary_rows(result)
    written = []
    normalized = []
    if spec.sweep:
        for protocol in spec.protocols:
            for m, v in result.normalized(protocol) if _has_transfers(result, protocol) else []:
                normalized.append({"protocol": protocol.value, "m_per_node": m, "normalized_mean_transfer": v})
    if "json" in spec.formats:
        payload = {"version": __version__, "spec": echo, "summaries": rows}
        if normalized:
            payload["normalized_transfer"] = normalized
        _write(out / "summary.json", json.dumps(payload, indent=1) + "\n")
        written.append("summary.json")
    if "csv" in spec.formats:
        text = _csv_text(SUMMARY_KEYS, ([row[k] for k in SUMMARY_KEYS] for row in rows), _preamble(echo))
        _write(out / "summary.csv", text)
        written.append("summary.csv")
    return written


def _has_transfers(result: ExperimentResult, protocol: Protocol) -> bool:
    return all(s.transfer_count > 0 for (p, _), s in result.summaries.items() if p == protocol.value)


def read_summary_csv(path: Path) -> list[dict]:
    """Parse ``summary.csv`` back into typed rows (empty cells become ``None``)."""
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    rows = []
    for raw in csv.DictReader(lines):
        row = {}
        for k, v in raw.items():
            if v == "":
                row[k] = None
            elif k == "protocol":
                row[k] = v
            else:
                try:
                    row[k] = int(v)
                except ValueError:
                    row[k] = float(v)
        rows.append(row)
    return rows


def oracle_suite(
    correction_table: Optional[dict] = None,
    n_payloads: int = 100,
    seed: int = 0,
) -> dict:
    """Link-generation branches, random-payload teleportation and the derived tables.

    ``correction_table`` replaces the derived link corrections (fault-injection hook).
    """
    checks = []
    try:
        derived = oracle.derive_correction_table()
        teleport_table = oracle.derive_teleport_table()
        checks.append({"name": "correction_table", "passed": len(set(derived.values())) == 4, "failures": []})
    except oracle.CorrectionSearchFailed as exc:
        return {"version": __version__, "passed": False,
                "checks": [{"name": "correction_table", "passed": False, "failures": [str(exc)]}]}

    link = oracle.link_generation_check(correction_table or derived)
    checks.append(link.as_dict())

    rng = np.random.default_rng(seed)
    worst = 1.0
    failures = []
    for i, (theta, phi) in enumerate(oracle.random_bloch_angles(rng, n_payloads)):
        for branch in oracle.teleport_branches(theta, phi, teleport_table):
            worst = min(worst, branch["fidelity"])
            if not branch["passed"]:
                failures.append(f"payload {i} branch {branch['branch']}")
    checks.append({"name": "teleport", "passed": not failures, "failures": failures,
                   "payloads": n_payloads, "min_fidelity": worst})

    table_view = lambda t: {f"{a}{b}": v for (a, b), v in sorted(t.items())}  # noqa: E731
    return {
        "version": __version__,
        "passed": all(c["passed"] for c in checks),
        "checks": checks,
        "link_correction_table": table_view(correction_table or derived),
        "teleport_correction_table": table_view(teleport_table),
    }

