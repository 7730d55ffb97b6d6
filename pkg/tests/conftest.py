from collections import Counter

from repeatersim.engine import Simulation, SlotReport
from repeatersim.model import Protocol


def holders(sim: Simulation) -> set[tuple[int, int]]:
    return {(s, u) for s, st in enumerate(sim.state.stations) for u, unit in enumerate(st) if unit is not None}


def checked_step(sim: Simulation) -> SlotReport:
    """Step once and assert every per-slot engine invariant."""
    cfg = sim.config
    bob = cfg.n_stations - 1
    before = holders(sim)
    location_before = {
        unit.qubit_id: s for s, st in enumerate(sim.state.stations) for unit in st if unit is not None
    }
    report = sim.step()
    st = sim.state
    # Snapshot = holders at slot start plus the freshly refilled sender.
    snapshot = before | {(0, u) for u in range(cfg.m_per_node)}

    # holder-cannot-emit and single service
    served = Counter()
    for attempt, _ in report.attempts:
        assert (attempt.segment, attempt.receiver_unit) in snapshot
        for e in attempt.emitters:
            if attempt.segment + 1 != bob:
                assert (attempt.segment + 1, e) not in snapshot
        key = attempt.segment if sim.protocol is Protocol.MULTIPLEXED else (attempt.segment, attempt.chain)
        served[key] += 1
    assert all(v == 1 for v in served.values())

    # exclusion: every live qubit sits in exactly one unit; receiver never stores
    held = [unit.qubit_id for s in st.stations for unit in s if unit is not None]
    assert len(held) == len(set(held))
    assert all(unit is None for unit in st.stations[bob])
    assert all(len(s) == cfg.m_per_node for s in st.stations)
    done = {r.qubit_id for r in st.completed}
    assert not done & set(held)

    # conservation
    assert len(st.records) == len(done) + len(held)

    # monotone progress, at most one hop per slot
    for s, station in enumerate(st.stations):
        for unit in station:
            if unit is None:
                continue
            rec = st.records[unit.qubit_id]
            assert rec.hops[-1] == (s, unit.arrival_slot)
            prev = location_before.get(unit.qubit_id, 0)
            assert s in (prev, prev + 1)
    for q in report.completions:
        assert location_before.get(q) == bob - 1
    return report


def check_record(rec, n_stations):
    stations = [h[0] for h in rec.hops]
    slots = [h[1] for h in rec.hops]
    assert stations == list(range(len(stations)))
    assert all(b > a for a, b in zip(slots, slots[1:]))
    if rec.completed_slot is not None:
        assert rec.hops[-1] == (n_stations - 1, rec.completed_slot)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
