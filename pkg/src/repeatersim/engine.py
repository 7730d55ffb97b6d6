"""Synchronous slotted simulation of a repeater chain.

Stations ``0 .. N+1`` run from the sender to the receiver; segment ``i``
links station ``i`` to ``i + 1``. Every slot:

1. free sender units are refilled with fresh qubits;
2. occupancy is snapshotted;
3. each segment attempts a link using only the snapshot;
4. successful moves commit at the slot boundary (arrival slot = slot + 1).

Randomness: one uniform variate per attempt that has a receiver and at least
one emitter, drawn in ascending (segment, chain) order from a PCG64 stream
seeded with ``SeedSequence(entropy=seed, spawn_key=(replication_index,))``.

Between successes nothing changes, so :meth:`Simulation.advance` draws the
variates of many identical slots as one block and jumps to the first slot
with a success. It consumes exactly the stream that :meth:`Simulation.step`
would, so both paths give identical results.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import (
    AttemptOutcome,
    Holding,
    Protocol,
    QubitRecord,
    SimConfig,
    attempt_cdf,
    emitter_index,
)

logger = logging.getLogger(__name__)

NO_PROGRESS_SLOT_CAP = 10**9

Station = list[Optional[Holding]]


class SimulationStopped(RuntimeError):
    pass


class NoProgressError(RuntimeError):
    pass


def replication_seed(seed: int, replication_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=(replication_index,))


class UniformStream:
    """Buffered view of a generator's ``random()`` stream.

    ``take(a)`` followed by ``take(b)`` returns the same variates as a single
    ``take(a + b)``; ``unread`` returns the tail of the last block.
    """

    def __init__(self, seed: int, replication_index: int, chunk: int = 1 << 16):
        self._rng = np.random.Generator(np.random.PCG64(replication_seed(seed, replication_index)))
        self._chunk = chunk
        self._buf = np.empty(0)
        self._pos = 0

    def take(self, n: int) -> np.ndarray:
        avail = len(self._buf) - self._pos
        if avail < n:
            fresh = self._rng.random(max(n - avail, self._chunk))
            self._buf = np.concatenate([self._buf[self._pos:], fresh])
            self._pos = 0
        out = self._buf[self._pos:self._pos + n]
        self._pos += n
        return out

    def next(self) -> float:
        return float(self.take(1)[0])

    def unread(self, n: int) -> None:
        if n < 0 or n > self._pos:
            raise ValueError("cannot unread more than was taken")
        self._pos -= n


@dataclass(frozen=True)
class Attempt:
    segment: int
    receiver_unit: int
    qubit_id: int
    emitters: tuple[int, ...]
    chain: Optional[int] = None


@dataclass
class SlotReport:
    slot: int
    attempts: list[tuple[Attempt, AttemptOutcome]]
    injections: list[int]
    completions: list[int]

    def successes(self) -> list[tuple[Attempt, int]]:
        return [(a, k) for a, k in self.attempts if k is not None]


@dataclass
class NetworkState:
    stations: list[Station]
    current_slot: int = 0
    records: list[QubitRecord] = field(default_factory=list)
    completed: list[QubitRecord] = field(default_factory=list)

    @property
    def next_qubit_id(self) -> int:
        return len(self.records)

    def held_count(self) -> int:
        return sum(unit is not None for st in self.stations for unit in st)


def select_receiver(station: Sequence[Optional[Holding]]) -> Optional[int]:
    """FIFO choice of the unit whose qubit is sent next: oldest arrival, then smallest qubit id."""
    best = None
    best_key = None
    for idx, unit in enumerate(station):
        if unit is None:
            continue
        key = (unit.arrival_slot, unit.qubit_id)
        if best_key is None or key < best_key:
            best, best_key = idx, key
    return best


def eligible_emitters(
    next_station: Sequence[Optional[Holding]],
    protocol: Protocol,
    chain: Optional[int] = None,
    is_receiver_node: bool = False,
) -> list[int]:
    """Units at the next station allowed to emit this slot; holders never emit."""
    if protocol is Protocol.MULTIPLEXED:
        if is_receiver_node:
            return list(range(len(next_station)))
        return [i for i, unit in enumerate(next_station) if unit is None]
    if chain is None:
        raise ValueError("parallelized emitters are per chain")
    if is_receiver_node or next_station[chain] is None:
        return [chain]
    return []


@dataclass
class RunResult:
    config: SimConfig
    replication_index: int
    records: list[QubitRecord]
    total_slots: int

    def __post_init__(self):
        done = [r.completed_slot for r in self.records if r.completed_slot is not None]
        self.completion_slots = np.sort(np.asarray(done, dtype=np.int64))

    @property
    def completed_records(self) -> list[QubitRecord]:
        return [r for r in self.records if r.completed_slot is not None]

    @property
    def in_flight_count(self) -> int:
        return len(self.records) - len(self.completion_slots)

    def cumulative(self, slots) -> np.ndarray:
        """Completed transfers with ``completed_slot <= t`` for each ``t``."""
        return np.searchsorted(self.completion_slots, np.asarray(slots), side="right")

    def series(self, sample_every: int = 1000) -> tuple[np.ndarray, np.ndarray]:
        slots = np.arange(0, self.total_slots + 1, sample_every, dtype=np.int64)
        if slots[-1] != self.total_slots:
            slots = np.append(slots, self.total_slots)
        return slots, self.cumulative(slots)

    def to_json(self) -> str:
        payload = {
            "config": self.config.to_dict(),
            "replication_index": self.replication_index,
            "total_slots": self.total_slots,
            "qubits": [
                [r.qubit_id, r.injected_slot, r.completed_slot, [list(h) for h in r.hops]]
                for r in self.records
            ],
        }
        return json.dumps(payload, separators=(",", ":"))


class Simulation:
    def __init__(self, config: SimConfig, replication_index: int = 0):
        if config.n_repeaters < 1 or config.m_per_node < 1:
            raise ValueError("n_repeaters and m_per_node must be >= 1")
        if not 0.0 <= config.p_success <= 1.0:
            raise ValueError("p_success must be in [0, 1]")
        if (config.max_slots is None) == (config.target_completions is None):
            raise ValueError("exactly one stop condition must be set")
        self.config = config
        self.protocol = Protocol(config.protocol)
        self.replication_index = replication_index
        m = config.m_per_node
        self.state = NetworkState(stations=[[None] * m for _ in range(config.n_stations)])
        self.stream = UniformStream(config.seed, replication_index)
        self._cdf = attempt_cdf(m, config.p_success)
        self._bob = config.n_stations - 1

    @property
    def stopped(self) -> bool:
        cfg = self.config
        if cfg.max_slots is not None:
            return self.state.current_slot >= cfg.max_slots
        return len(self.state.completed) >= cfg.target_completions

    def inject(self) -> list[int]:
        st = self.state
        sender = st.stations[0]
        injected = []
        for idx, unit in enumerate(sender):
            if unit is None:
                qid = st.next_qubit_id
                sender[idx] = Holding(qid, st.current_slot)
                st.records.append(QubitRecord(qid, st.current_slot, [(0, st.current_slot)]))
                injected.append(qid)
        return injected

    def plan(self) -> list[Attempt]:
        """Attempts of the current slot, read from the occupancy snapshot."""
        stations = self.state.stations
        attempts = []
        for seg in range(self.config.n_segments):
            here, there = stations[seg], stations[seg + 1]
            to_bob = seg + 1 == self._bob
            if self.protocol is Protocol.MULTIPLEXED:
                r = select_receiver(here)
                if r is None:
                    continue
                emitters = eligible_emitters(there, self.protocol, is_receiver_node=to_bob)
                if emitters:
                    attempts.append(Attempt(seg, r, here[r].qubit_id, tuple(emitters)))
            else:
                for chain, unit in enumerate(here):
                    if unit is None:
                        continue
                    emitters = eligible_emitters(there, self.protocol, chain, is_receiver_node=to_bob)
                    if emitters:
                        attempts.append(Attempt(seg, chain, unit.qubit_id, tuple(emitters), chain))
        return attempts

    def _threshold(self, attempt: Attempt) -> float:
        return self._cdf[len(attempt.emitters) - 1] if self.protocol is Protocol.MULTIPLEXED else self._cdf[0]

    def _outcome(self, attempt: Attempt, u: float) -> AttemptOutcome:
        cdf = self._cdf if self.protocol is Protocol.MULTIPLEXED else self._cdf[:1]
        return emitter_index(u, len(attempt.emitters), cdf)

    def commit(self, moves: Sequence[tuple[Attempt, int]]) -> list[int]:
        """Apply successful attempts at the end of the current slot.

        Every source unit was a holder and every target unit was free in the
        snapshot, so the order of application does not matter.
        """
        st = self.state
        arrive = st.current_slot + 1
        completions = []
        for attempt, k in moves:
            seg = attempt.segment
            unit = st.stations[seg][attempt.receiver_unit]
            record = st.records[unit.qubit_id]
            st.stations[seg][attempt.receiver_unit] = None
            record.hops.append((seg + 1, arrive))
            if seg + 1 == self._bob:
                record.completed_slot = arrive
                completions.append(unit.qubit_id)
            else:
                st.stations[seg + 1][attempt.emitters[k]] = Holding(unit.qubit_id, arrive)
        completions.sort()
        st.completed.extend(st.records[q] for q in completions)
        return completions

    def step(self) -> SlotReport:
        """Advance exactly one slot, returning its full report."""
        if self.stopped:
            raise SimulationStopped("simulation already reached its stop condition")
        slot = self.state.current_slot
        injected = self.inject()
        attempts = self.plan()
        results = [(a, self._outcome(a, self.stream.next())) for a in attempts]
        completions = self.commit([(a, k) for a, k in results if k is not None])
        self.state.current_slot += 1
        return SlotReport(slot, results, injected, completions)

    def _slot_limit(self) -> int:
        cfg = self.config
        return cfg.max_slots if cfg.max_slots is not None else NO_PROGRESS_SLOT_CAP

    def advance(self, max_block_variates: int = 1 << 20) -> None:
        """Jump to the end of the next slot that has a success (or to the slot limit)."""
        if self.stopped:
            raise SimulationStopped("simulation already reached its stop condition")
        st = self.state
        limit = self._slot_limit()
        if st.current_slot >= limit:
            raise NoProgressError(f"no completion within {limit} slots")
        self.inject()
        attempts = self.plan()
        thr = np.array([self._threshold(a) for a in attempts])
        if not attempts or not thr.any():
            # Frozen forever: nothing can succeed.
            st.current_slot = limit
            if self.config.max_slots is None:
                raise NoProgressError(f"no completion within {limit} slots")
            return
        n = len(attempts)
        q_fail = float(np.prod(1.0 - thr))
        expected = 1.0 / max(1.0 - q_fail, 1e-300)
        rows = int(min(limit - st.current_slot, max(1, 2 * expected + 1), max(1, max_block_variates // n)))
        u = self.stream.take(rows * n).reshape(rows, n)
        hit_rows = (u < thr).any(axis=1)
        if not hit_rows.any():
            st.current_slot += rows
            return
        r = int(np.argmax(hit_rows))
        self.stream.unread((rows - r - 1) * n)
        st.current_slot += r
        moves = []
        for a, x in zip(attempts, u[r]):
            k = self._outcome(a, float(x))
            if k is not None:
                moves.append((a, k))
        self.commit(moves)
        st.current_slot += 1

    def result(self) -> RunResult:
        return RunResult(self.config, self.replication_index, self.state.records, self.state.current_slot)


def init_simulation(config: SimConfig, replication_index: int = 0) -> Simulation:
    return Simulation(config, replication_index)


def run(config: SimConfig, replication_index: int = 0, *, fast: bool = True) -> RunResult:
    """Run one replication to its stop condition.

    ``fast=False`` steps slot by slot; the result is identical either way.
    """
    sim = Simulation(config, replication_index)
    limit = sim._slot_limit()
    while not sim.stopped:
        if fast:
            sim.advance()
        else:
            if sim.state.current_slot >= limit:
                raise NoProgressError(f"no completion within {limit} slots")
            sim.step()
    logger.debug(
        "run %s M=%d rep=%d: %d slots, %d completed",
        config.protocol, config.m_per_node, replication_index,
        sim.state.current_slot, len(sim.state.completed),
    )
    return sim.result()
