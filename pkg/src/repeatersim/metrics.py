"""Latency, steady-state throughput and transfer-time statistics.

A :class:`MetricsSummary` keeps only mergeable sufficient statistics: integer
sums for transfer times and sorted per-replication tuples for everything
estimated once per run, so :func:`merge` is exactly commutative.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .engine import RunResult
from .model import SimConfig

Z95 = 1.959963984540054


class NoCompletionError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


class TransferStats(NamedTuple):
    mean: float
    se: float
    max: int
    count: int
    in_flight: int
    residence: dict[int, int]


def latency(run: RunResult) -> int:
    """Slot at which the first qubit reaches the receiver."""
    if len(run.completion_slots) == 0:
        raise NoCompletionError("run has no completed transfer")
    return int(run.completion_slots[0])


def ols_slope(x, y) -> tuple[float, float]:
    """Least-squares slope of ``y`` on ``x`` and its residual standard error."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    if n < 2:
        raise InsufficientDataError("need at least two points for a slope")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    slope = float(xc @ yc) / sxx
    if n == 2:
        return slope, 0.0
    resid = yc - slope * xc
    sigma2 = float(resid @ resid) / (n - 2)
    return slope, math.sqrt(sigma2 / sxx)


def steady_throughput(run: RunResult, burn_in_fraction: float = 0.3) -> tuple[float, float]:
    """Completions per slot after burn-in, from the cumulative completion curve."""
    if not 0.0 <= burn_in_fraction < 1.0:
        raise ValueError("burn_in_fraction must be in [0, 1)")
    total = run.total_slots
    start = int(burn_in_fraction * total)
    if total - start < 2:
        raise InsufficientDataError("run too short for the burn-in window")
    slots = np.arange(start, total + 1)
    counts = run.cumulative(slots)
    if counts[-1] - counts[0] < 10:
        raise InsufficientDataError(
            f"only {int(counts[-1] - counts[0])} completions after burn-in (need 10)"
        )
    return ols_slope(slots, counts)


def transfer_time_stats(run: RunResult) -> TransferStats:
    done = run.completed_records
    if not done:
        raise NoCompletionError("run has no completed transfer")
    times = np.array([r.transfer_slots for r in done], dtype=float)
    se = float(times.std(ddof=1) / math.sqrt(len(times))) if len(times) > 1 else 0.0
    residence = Counter()
    for r in run.records:
        residence.update(r.residences())
    return TransferStats(
        mean=float(times.mean()),
        se=se,
        max=int(times.max()),
        count=len(done),
        in_flight=run.in_flight_count,
        residence=dict(sorted(residence.items())),
    )


def _mean_se(values: Sequence[float]) -> tuple[Optional[float], Optional[float]]:
    n = len(values)
    if n == 0:
        return None, None
    mean = math.fsum(values) / n
    if n == 1:
        return mean, None
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var / n)


@dataclass(frozen=True)
class MetricsSummary:
    config: SimConfig
    replications: int = 0
    latencies: tuple[int, ...] = ()
    throughputs: tuple[float, ...] = ()
    throughput_regression_ses: tuple[float, ...] = ()
    transfer_means: tuple[float, ...] = ()
    transfer_count: int = 0
    transfer_sum: int = 0
    transfer_sumsq: int = 0
    transfer_max: int = 0
    in_flight_count: int = 0
    residence: dict[int, int] = field(default_factory=dict)

    @classmethod
    def empty(cls, config: SimConfig) -> "MetricsSummary":
        return cls(replace(config, replications=0))

    @property
    def latency_slots_mean(self) -> Optional[float]:
        return _mean_se(self.latencies)[0]

    @property
    def latency_slots_ci95(self) -> Optional[float]:
        """Half-width of the normal-approximation 95% interval over replications."""
        se = _mean_se(self.latencies)[1]
        return None if se is None else Z95 * se

    @property
    def throughput_per_slot(self) -> Optional[float]:
        return _mean_se(self.throughputs)[0]

    @property
    def throughput_se(self) -> Optional[float]:
        if len(self.throughputs) == 1:
            return self.throughput_regression_ses[0]
        return _mean_se(self.throughputs)[1]

    @property
    def mean_transfer_slots(self) -> Optional[float]:
        if self.transfer_count == 0:
            return None
        return self.transfer_sum / self.transfer_count

    @property
    def transfer_se(self) -> Optional[float]:
        """Across-replication SE of per-run means; per-qubit SE for a single run."""
        if len(self.transfer_means) > 1:
            return _mean_se(self.transfer_means)[1]
        n = self.transfer_count
        if n < 2:
            return None
        var = (self.transfer_sumsq - self.transfer_sum**2 / n) / (n - 1)
        return math.sqrt(max(var, 0.0) / n)

    @property
    def max_residence_slots(self) -> Optional[int]:
        return max(self.residence) if self.residence else None

    def transfer_ci95(self) -> Optional[tuple[float, float]]:
        mean, se = self.mean_transfer_slots, self.transfer_se
        if mean is None or se is None:
            return None
        return mean - Z95 * se, mean + Z95 * se

    def as_row(self) -> dict:
        cfg = self.config
        return {
            "protocol": str(cfg.protocol),
            "n_repeaters": cfg.n_repeaters,
            "m_per_node": cfg.m_per_node,
            "p_success": cfg.p_success,
            "t0_seconds": cfg.t0_seconds,
            "replications": self.replications,
            "latency_slots_mean": self.latency_slots_mean,
            "latency_slots_ci95": self.latency_slots_ci95,
            "throughput_per_slot": self.throughput_per_slot,
            "throughput_se": self.throughput_se,
            "mean_transfer_slots": self.mean_transfer_slots,
            "transfer_se": self.transfer_se,
            "max_transfer_slots": self.transfer_max if self.transfer_count else None,
            "completed_count": self.transfer_count,
            "in_flight_count": self.in_flight_count,
            "seed": cfg.seed,
            "max_residence_slots": self.max_residence_slots,
        }


def summarize(run: RunResult, burn_in_fraction: float = 0.3) -> MetricsSummary:
    """Single-replication summary; statistics that need missing data are left out."""
    latencies: tuple[int, ...] = ()
    throughputs: tuple[float, ...] = ()
    reg_ses: tuple[float, ...] = ()
    if len(run.completion_slots):
        latencies = (latency(run),)
    try:
        slope, se = steady_throughput(run, burn_in_fraction)
        throughputs, reg_ses = (slope,), (se,)
    except InsufficientDataError:
        pass
    times = [r.transfer_slots for r in run.completed_records]
    residence = Counter()
    for r in run.records:
        residence.update(r.residences())
    return MetricsSummary(
        config=replace(run.config, replications=1),
        replications=1,
        latencies=latencies,
        throughputs=throughputs,
        throughput_regression_ses=reg_ses,
        transfer_means=(sum(times) / len(times),) if times else (),
        transfer_count=len(times),
        transfer_sum=sum(times),
        transfer_sumsq=sum(t * t for t in times),
        transfer_max=max(times, default=0),
        in_flight_count=run.in_flight_count,
        residence=dict(sorted(residence.items())),
    )


def merge(a: MetricsSummary, b: MetricsSummary) -> MetricsSummary:
    if a.config.cell_key() != b.config.cell_key():
        raise ValueError("cannot merge summaries of different configurations")
    # Sorted pairs keep the per-replication slope and its regression SE together.
    pairs = sorted(zip(a.throughputs + b.throughputs,
                       a.throughput_regression_ses + b.throughput_regression_ses))
    residence = Counter(a.residence)
    residence.update(b.residence)
    reps = a.replications + b.replications
    return MetricsSummary(
        config=replace(a.config, replications=reps),
        replications=reps,
        latencies=tuple(sorted(a.latencies + b.latencies)),
        throughputs=tuple(p[0] for p in pairs),
        throughput_regression_ses=tuple(p[1] for p in pairs),
        transfer_means=tuple(sorted(a.transfer_means + b.transfer_means)),
        transfer_count=a.transfer_count + b.transfer_count,
        transfer_sum=a.transfer_sum + b.transfer_sum,
        transfer_sumsq=a.transfer_sumsq + b.transfer_sumsq,
        transfer_max=max(a.transfer_max, b.transfer_max),
        in_flight_count=a.in_flight_count + b.in_flight_count,
        residence=dict(sorted(residence.items())),
    )


def merge_all(summaries: Sequence[MetricsSummary]) -> MetricsSummary:
    if not summaries:
        raise ValueError("nothing to merge")
    out = MetricsSummary.empty(summaries[0].config)
    for s in summaries:
        out = merge(out, s)
    return out


def normalize_sweep(points: Sequence[tuple[int, float]], baseline_m: Optional[int] = None) -> list[tuple[int, float]]:
    """Divide each mean transfer time by the value at the baseline M.

    The baseline defaults to the smallest M present; an explicit
    ``baseline_m`` must appear in ``points``.
    """
    if not points:
        raise ValueError("empty sweep")
    values = dict(points)
    if baseline_m is None:
        baseline_m = min(values)
    base = values.get(baseline_m)
    if base is None or base <= 0:
        raise ValueError(f"missing or non-positive baseline at M={baseline_m}")
    out = []
    for m in sorted(values):
        if values[m] is None or values[m] <= 0:
            raise ValueError(f"non-positive mean transfer time at M={m}")
        out.append((m, values[m] / base))
    return out
