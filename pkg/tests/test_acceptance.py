"""Acceptance gate. Every criterion prints one PASS/FAIL line (also repeated in the terminal summary)."""

import math

import numpy as np
import pytest
from scipy import stats

import conftest
from conftest import checked_step
from repeatersim import oracle
from repeatersim.engine import UniformStream, init_simulation, run
from repeatersim.experiment import OUTPUT_DIR_ENV, run_experiment, spec_from_mapping
from repeatersim.metrics import merge_all, summarize
from repeatersim.model import Protocol, SimConfig, attempt_cdf, emitter_index, success_probability

MUX, PAR = Protocol.MULTIPLEXED, Protocol.PARALLELIZED
TEN_NODE = dict(n_repeaters=10, m_per_node=10, p_success=1e-4)
LONG_SLOTS = 2_000_000


@pytest.fixture(autouse=True)
def _no_env_override(monkeypatch):
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)


def report(number, title, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}: {detail}"
    print(line)
    conftest.ACCEPTANCE_LINES.append(line)
    assert passed, line


def experiment(tmp_path, protocols, sweep, replications, slots, seed):
    values = dict(TEN_NODE, max_slots=slots, seed=seed, replications=replications, sample_every=10_000,
                  protocol=[p.value for p in protocols], sweep=list(sweep), output_dir=str(tmp_path))
    return run_experiment(spec_from_mapping(values))


def test_criterion_1_latency_ratio():
    reps = 200
    means = {}
    for protocol in (PAR, MUX):
        cfg = SimConfig(protocol, **TEN_NODE, target_completions=1, seed=101)
        means[protocol] = merge_all([summarize(run(cfg, r)) for r in range(reps)]).latency_slots_mean
    ratio = means[PAR] / means[MUX]
    report(1, "latency ratio parallelized/multiplexed", 6 <= ratio <= 14,
           f"{ratio:.3f}, required [6, 14] ({reps} reps, means {means[PAR]:.0f} / {means[MUX]:.0f} slots)")


def test_criterion_2_throughput_ratio(tmp_path):
    result = experiment(tmp_path, [MUX, PAR], [10], 10, LONG_SLOTS, seed=202)
    mux = result.summaries[("multiplexed", 10)].throughput_per_slot
    par = result.summaries[("parallelized", 10)].throughput_per_slot
    ratio = mux / par
    report(2, "throughput ratio multiplexed/parallelized", 1.5 <= ratio <= 2.6,
           f"{ratio:.3f}, required [1.5, 2.6] ({mux:.3e} vs {par:.3e} per slot)")


def test_criterion_3_transfer_time_scaling(tmp_path):
    ms = (1, 2, 5, 10)
    result = experiment(tmp_path, [MUX, PAR], ms, 30, LONG_SLOTS, seed=303)
    norm = dict(result.normalized(MUX))
    decreasing = all(norm[a] > norm[b] for a, b in zip(ms, ms[1:]))
    banded = {m: 1 / m <= norm[m] <= 2.5 / m for m in ms}
    lo1, hi1 = result.summaries[("parallelized", 1)].transfer_ci95()
    lo10, hi10 = result.summaries[("parallelized", 10)].transfer_ci95()
    overlap = lo1 <= hi10 and lo10 <= hi1
    passed = decreasing and all(banded.values()) and overlap
    shown = ", ".join(f"M={m}: {norm[m]:.3f} vs [{1 / m:.3f}, {2.5 / m:.3f}]" for m in ms)
    report(3, "transfer-time scaling", passed,
           f"multiplexed normalized {shown}; strictly decreasing={decreasing}; "
           f"parallelized CI M=1 [{lo1:.0f}, {hi1:.0f}] vs M=10 [{lo10:.0f}, {hi10:.0f}] overlap={overlap}")


def test_criterion_4_segment_math():
    slots = 1_000_000
    problems = []
    for p in (1e-2, 1e-4):
        cdf = attempt_cdf(10, p)
        for m in (1, 5, 10):
            stream = UniformStream(404, m)
            u = stream.take(slots)
            outcomes = [emitter_index(x, m, cdf) for x in u.tolist()]
            hits = [k for k in outcomes if k is not None]
            q = success_probability(m, p)
            sigma = math.sqrt(slots * q * (1 - q))
            if abs(len(hits) - slots * q) > 3 * sigma:
                problems.append(f"m={m} P={p}: {len(hits)} hits vs {slots * q:.1f}")
            if m > 1:
                observed = np.bincount(hits, minlength=m)
                weights = np.array([(1 - p) ** k * p for k in range(m)])
                expected = weights / weights.sum() * len(hits)
                pvalue = stats.chisquare(observed, expected).pvalue
                if pvalue <= 0.01:
                    problems.append(f"m={m} P={p}: chi-square p={pvalue:.4f}")
    report(4, "segment success frequency and emitter distribution", not problems,
           "; ".join(problems) or "6 cells within 3 sigma, chi-square p > 0.01")


def test_criterion_5_degenerate_cases():
    problems = []
    first = run(SimConfig(MUX, 10, 10, 1.0, target_completions=1)).total_slots
    if first != 11:
        problems.append(f"P=1 multiplexed first completion at {first}")
    par = run(SimConfig(PAR, 10, 1, 1.0, max_slots=2000))
    gaps = set(np.diff(par.completion_slots[10:]).tolist())
    if gaps != {2}:
        problems.append(f"P=1 single chain gaps {sorted(gaps)}")
    for protocol in Protocol:
        sim = init_simulation(SimConfig(protocol, 10, 4, 0.0, max_slots=10_000))
        while not sim.stopped:
            checked_step(sim)
        if sim.state.completed:
            problems.append(f"P=0 {protocol.value} completed {len(sim.state.completed)}")
    report(5, "degenerate exactness", not problems,
           "; ".join(problems) or "first completion at slot 11, steady gap 2, P=0 silent for 10^4 slots")


def test_criterion_6_invariant_suite():
    rng = np.random.default_rng(606)
    configs = 100
    for i in range(configs):
        protocol = Protocol.MULTIPLEXED if rng.random() < 0.5 else Protocol.PARALLELIZED
        cfg = SimConfig(protocol, int(rng.integers(1, 7)), int(rng.integers(1, 5)),
                        float(10 ** rng.uniform(-2, 0)), max_slots=10_000, seed=int(rng.integers(2**32)))
        sim = init_simulation(cfg)
        try:
            while not sim.stopped:
                checked_step(sim)
        except AssertionError as exc:
            report(6, "invariant suite", False, f"config {i} {cfg}: {exc}")
    report(6, "invariant suite", True, f"{configs} random configs x 10^4 slots, every slot checked")


def test_criterion_7_oracle_suite():
    link = oracle.link_generation_check()
    link_min = min(b["fidelity"] for b in link.branches)
    rng = np.random.default_rng(707)
    tele_min = min(oracle.teleport_check(t, f) for t, f in oracle.random_bloch_angles(rng, 100))
    psi = oracle.emission_state().tensor(oracle.node_prep_state())
    probs = oracle.bell_probabilities(psi, (oracle.ELECTRON_PREV, oracle.PHOTON))
    spread = max(abs(v - 0.25) for v in probs.values())
    tol = 1e-12
    passed = link.passed and link_min >= 1 - tol and tele_min >= 1 - tol and spread <= tol
    report(7, "oracle suite", passed,
           f"link min fidelity 1-{1 - link_min:.1e}, teleport min fidelity 1-{1 - tele_min:.1e}, "
           f"Bell outcome spread {spread:.1e}")


def test_criterion_8_determinism(tmp_path):
    outputs = []
    for run_dir in ("first", "second"):
        out = tmp_path / run_dir
        experiment(out, [MUX, PAR], [10], 3, LONG_SLOTS, seed=808)
        outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    same = outputs[0] == outputs[1]
    report(8, "determinism", same, f"{len(outputs[0])} files byte-identical={same}")
