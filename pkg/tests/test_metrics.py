import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repeatersim.engine import RunResult, run
from repeatersim.metrics import (
    InsufficientDataError,
    MetricsSummary,
    NoCompletionError,
    latency,
    merge,
    merge_all,
    normalize_sweep,
    ols_slope,
    steady_throughput,
    summarize,
    transfer_time_stats,
)
from repeatersim.model import Protocol, QubitRecord, SimConfig

MUX, PAR = Protocol.MULTIPLEXED, Protocol.PARALLELIZED


def synthetic_run(transfers, injected=0, n=1):
    cfg = SimConfig(MUX, n, 1, 0.5, max_slots=1000)
    records = []
    for i, t in enumerate(transfers):
        start = injected + i
        hops = [(s, start + s) for s in range(n + 1)] + [(n + 1, start + t)]
        records.append(QubitRecord(i, start, hops, start + t))
    return RunResult(cfg, 0, records, 1000)


@pytest.mark.parametrize("protocol", list(Protocol))
def test_latency_p1_n10(protocol):
    res = run(SimConfig(protocol, 10, 3, 1.0, max_slots=40))
    assert latency(res) == 11
    assert all(latency(res) <= r.completed_slot for r in res.completed_records)


def test_latency_two_segments():
    assert latency(run(SimConfig(MUX, 1, 1, 1.0, max_slots=10))) == 2


def test_latency_requires_completion():
    with pytest.raises(NoCompletionError):
        latency(run(SimConfig(MUX, 3, 1, 0.0, max_slots=10)))


def test_ols_slope_recovers_exact_line():
    s = np.arange(0, 100_000)
    slope, se = ols_slope(s, 0.5 * s)
    assert abs(slope - 0.5) < 1e-12
    assert se < 1e-12


def test_ols_slope_against_numpy_polyfit():
    rng = np.random.default_rng(1)
    x = np.arange(500.0)
    y = 3.0 * x + rng.normal(0, 5, 500)
    slope, se = ols_slope(x, y)
    coef, cov = np.polyfit(x, y, 1, cov="unscaled")
    resid = y - np.polyval(coef, x)
    assert slope == pytest.approx(coef[0], rel=1e-10)
    assert se == pytest.approx(math.sqrt(cov[0, 0] * (resid @ resid) / (len(x) - 2)), rel=1e-8)


@pytest.mark.parametrize("m", [1, 3, 5])
def test_parallelized_p1_throughput_is_half_per_chain(m):
    res = run(SimConfig(PAR, 4, m, 1.0, max_slots=1000))
    slope, _ = steady_throughput(res)
    assert slope == pytest.approx(m / 2, abs=5e-3)


def test_steady_throughput_insufficient_data():
    with pytest.raises(InsufficientDataError):
        steady_throughput(run(SimConfig(MUX, 10, 1, 1e-4, max_slots=5000)))


def test_transfer_time_stats_synthetic():
    stats = transfer_time_stats(synthetic_run([10, 20]))
    assert stats.mean == 15 and stats.max == 20 and stats.count == 2
    assert stats.se == pytest.approx(np.std([10, 20], ddof=1) / math.sqrt(2))


def test_transfer_time_first_qubit_p1():
    res = run(SimConfig(MUX, 10, 2, 1.0, target_completions=1))
    stats = transfer_time_stats(res)
    assert stats.mean == 11 and stats.count == 1
    assert stats.in_flight == len(res.records) - 1
    assert res.records[0].residences() == [1] * 11
    assert stats.residence[1] >= 11


def test_transfer_time_at_least_hop_count():
    res = run(SimConfig(MUX, 6, 3, 0.2, max_slots=5000, seed=4))
    assert transfer_time_stats(res).mean >= 7
    assert min(r.transfer_slots for r in res.completed_records) >= 7


def _summaries(config, reps):
    return [summarize(run(config, i)) for i in range(reps)]


def test_merge_identity_and_counts():
    cfg = SimConfig(MUX, 3, 2, 0.2, max_slots=3000, seed=2)
    a, b = _summaries(cfg, 2)
    assert merge(a, MetricsSummary.empty(cfg)) == a
    assert merge(MetricsSummary.empty(cfg), a) == a
    assert merge(a, b).replications == 2
    assert merge(a, b) == merge(b, a)


def test_merge_rejects_different_cells():
    a = summarize(run(SimConfig(MUX, 3, 2, 0.2, max_slots=300)))
    b = summarize(run(SimConfig(MUX, 3, 3, 0.2, max_slots=300)))
    with pytest.raises(ValueError):
        merge(a, b)


def test_merge_matches_pooled_recomputation():
    cfg = SimConfig(PAR, 4, 2, 0.1, max_slots=4000, seed=6)
    runs = [run(cfg, i) for i in range(4)]
    merged = merge_all([summarize(r) for r in runs])
    pooled = [rec.transfer_slots for r in runs for rec in r.completed_records]
    assert merged.mean_transfer_slots == pytest.approx(np.mean(pooled), rel=1e-14)
    assert merged.transfer_max == max(pooled)
    assert merged.transfer_count == len(pooled)
    assert merged.latency_slots_mean == pytest.approx(np.mean([latency(r) for r in runs]))
    slopes = [steady_throughput(r)[0] for r in runs]
    assert merged.throughput_per_slot == pytest.approx(np.mean(slopes), rel=1e-12)
    assert merged.throughput_se == pytest.approx(np.std(slopes, ddof=1) / 2, rel=1e-9)
    per_rep = [np.mean([rec.transfer_slots for rec in r.completed_records]) for r in runs]
    assert merged.transfer_se == pytest.approx(np.std(per_rep, ddof=1) / 2, rel=1e-9)


@settings(max_examples=25, deadline=None)
@given(order=st.permutations(range(4)), split=st.integers(1, 3))
def test_merge_is_associative_and_commutative(order, split):
    cfg = SimConfig(MUX, 2, 2, 0.3, max_slots=500, seed=1)
    parts = [summarize(run(cfg, i)) for i in range(4)]
    reference = merge_all(parts)
    shuffled = [parts[i] for i in order]
    left, right = merge_all(shuffled[:split]), merge_all(shuffled[split:])
    assert merge(left, right) == reference
    assert merge(right, left) == reference


def test_summary_row_keys():
    row = summarize(run(SimConfig(MUX, 2, 2, 0.3, max_slots=2000))).as_row()
    assert list(row)[:16] == [
        "protocol", "n_repeaters", "m_per_node", "p_success", "t0_seconds", "replications",
        "latency_slots_mean", "latency_slots_ci95", "throughput_per_slot", "throughput_se",
        "mean_transfer_slots", "transfer_se", "max_transfer_slots", "completed_count",
        "in_flight_count", "seed",
    ]
    assert all(v is None or v >= 0 for k, v in row.items() if k != "protocol")


def test_normalize_sweep():
    assert normalize_sweep([(1, 100), (2, 52)]) == [(1, 1.0), (2, 0.52)]
    assert normalize_sweep([(1, 7.0), (3, 7.0), (5, 7.0)]) == [(1, 1.0), (3, 1.0), (5, 1.0)]
    with pytest.raises(ValueError):
        normalize_sweep([(2, 5.0), (3, 4.0)], baseline_m=1)
    with pytest.raises(ValueError):
        normalize_sweep([])
