"""Statevector check of heralded emission/absorption link generation.

Basis conventions (all claims below are relative to these):

* index 0 of every two-level system is ``|+1>`` (spins and photon
  polarisation) or ``|up>`` (nuclear spin); index 1 is ``|-1>`` / ``|down>``;
* system 0 is the most significant bit of an amplitude index;
* a Bell measurement on ``(a, b)`` is CNOT(a -> b), H(a), then a
  computational readout of ``(a, b)``; the outcome bits select
  :data:`BELL_STATES`;
* the link target is the emitted-state form ``(|+1,-1> + |-1,+1>)/sqrt(2)``
  on ``(electron_next, nuclear_prev)``.

Pauli correction tables are found by exhaustive search, never hard-coded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

PHOTON = "photon"
ELECTRON_NEXT = "electron_next"
ELECTRON_PREV = "electron_prev"
NUCLEAR_PREV = "nuclear_prev"
PAYLOAD = "payload"
ROLES = (PHOTON, ELECTRON_NEXT, ELECTRON_PREV, NUCLEAR_PREV, PAYLOAD)

MAX_SYSTEMS = 5
TOL = 1e-12

_S = 1 / math.sqrt(2)
I2 = np.eye(2, dtype=complex)
X = np.array([[0, 1], [1, 0]], dtype=complex)
Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
Z = np.array([[1, 0], [0, -1]], dtype=complex)
H = np.array([[1, 1], [1, -1]], dtype=complex) * _S
CNOT = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=complex)
PAULIS = {"I": I2, "X": X, "Y": Y, "Z": Z}

BELL_STATES = {
    (0, 0): np.array([1, 0, 0, 1], dtype=complex) * _S,   # Phi+
    (0, 1): np.array([0, 1, 1, 0], dtype=complex) * _S,   # Psi+
    (1, 0): np.array([1, 0, 0, -1], dtype=complex) * _S,  # Phi-
    (1, 1): np.array([0, 1, -1, 0], dtype=complex) * _S,  # Psi-
}
LINK_TARGET = BELL_STATES[(0, 1)]
OUTCOMES = tuple(BELL_STATES)


class OracleError(RuntimeError):
    pass


class ImpossibleBranchError(OracleError):
    pass


class CorrectionSearchFailed(OracleError):
    pass


@dataclass(frozen=True, eq=False)
class StateVector:
    amplitudes: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex)
        n = len(self.labels)
        if not 1 <= n <= MAX_SYSTEMS:
            raise ValueError(f"need 1..{MAX_SYSTEMS} systems, got {n}")
        if len(set(self.labels)) != n:
            raise ValueError(f"duplicate system labels {self.labels}")
        if amps.shape != (2**n,):
            raise ValueError(f"expected {2**n} amplitudes, got shape {amps.shape}")
        if abs(np.vdot(amps, amps).real - 1.0) > TOL:
            raise ValueError("state is not normalised")
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def n(self) -> int:
        return len(self.labels)

    def axis(self, system: str | int) -> int:
        return system if isinstance(system, int) else self.labels.index(system)

    def amplitude(self, *bits: int) -> complex:
        idx = 0
        for b in bits:
            idx = 2 * idx + b
        return complex(self.amplitudes[idx])

    def tensor(self, other: "StateVector") -> "StateVector":
        return StateVector(np.kron(self.amplitudes, other.amplitudes), self.labels + other.labels)

    def reorder(self, labels: Sequence[str]) -> "StateVector":
        perm = [self.labels.index(lab) for lab in labels]
        psi = self.amplitudes.reshape([2] * self.n).transpose(perm)
        return StateVector(psi.reshape(-1), tuple(labels))

    def norm(self) -> float:
        return float(np.sqrt(np.vdot(self.amplitudes, self.amplitudes).real))


def fidelity(a: StateVector, b: StateVector) -> float:
    """``|<a|b>|^2`` after aligning ``b`` to ``a``'s system order; global phase drops out."""
    if set(a.labels) != set(b.labels):
        raise ValueError(f"systems differ: {a.labels} vs {b.labels}")
    b = b.reorder(a.labels)
    return float(abs(np.vdot(a.amplitudes, b.amplitudes)) ** 2)


def _check_unitary(u: np.ndarray) -> None:
    if u.shape not in ((2, 2), (4, 4)):
        raise ValueError(f"gate must be 2x2 or 4x4, got {u.shape}")
    if np.max(np.abs(u.conj().T @ u - np.eye(u.shape[0]))) > TOL:
        raise ValueError("gate is not unitary")


def apply_gate(state: StateVector, gate: np.ndarray, systems: Sequence[str | int]) -> StateVector:
    """Apply a one- or two-system unitary; the first listed system is most significant."""
    gate = np.asarray(gate, dtype=complex)
    _check_unitary(gate)
    axes = [state.axis(s) for s in systems]
    k = len(axes)
    if gate.shape[0] != 2**k or len(set(axes)) != k:
        raise ValueError("gate size does not match the designated systems")
    psi = np.moveaxis(state.amplitudes.reshape([2] * state.n), axes, range(k))
    shape = psi.shape
    psi = (gate @ psi.reshape(2**k, -1)).reshape(shape)
    psi = np.moveaxis(psi, range(k), axes)
    return StateVector(psi.reshape(-1), state.labels)


def _from_amplitudes(amps, labels) -> StateVector:
    return StateVector(np.asarray(amps, dtype=complex), tuple(labels))


def emission_state() -> StateVector:
    """Electron spin at the next node entangled with its emitted photon."""
    return _from_amplitudes([0, _S, _S, 0], (ELECTRON_NEXT, PHOTON))


def node_prep_state() -> StateVector:
    """Electron-nuclear entanglement prepared at the previous node before absorption."""
    return _from_amplitudes([_S, 0, 0, _S], (ELECTRON_PREV, NUCLEAR_PREV))


def payload_state(theta: float, phi: float, label: str = PAYLOAD) -> StateVector:
    return _from_amplitudes([math.cos(theta / 2), np.exp(1j * phi) * math.sin(theta / 2)], (label,))


@dataclass(frozen=True)
class MeasurementRecord:
    outcome: tuple[int, int]
    probability: float
    state: StateVector


def _to_bell_readout(state: StateVector, pair) -> StateVector:
    return apply_gate(apply_gate(state, CNOT, pair), H, [pair[0]])


def _from_bell_readout(state: StateVector, pair) -> StateVector:
    return apply_gate(apply_gate(state, H, [pair[0]]), CNOT, pair)


def bell_probabilities(state: StateVector, pair: Sequence[str]) -> dict[tuple[int, int], float]:
    rotated = _to_bell_readout(state, pair)
    a, b = rotated.axis(pair[0]), rotated.axis(pair[1])
    probs = np.abs(rotated.amplitudes.reshape([2] * state.n)) ** 2
    other = tuple(i for i in range(state.n) if i not in (a, b))
    marg = probs.sum(axis=other) if other else probs
    if a > b:
        marg = marg.T
    return {o: float(marg[o]) for o in OUTCOMES}


def bell_measure(
    state: StateVector,
    pair: Sequence[str],
    forced_outcome: Optional[tuple[int, int]] = None,
    rng=None,
) -> MeasurementRecord:
    """Projective Bell measurement; the measured pair is left in the observed Bell state."""
    if len(pair) != 2 or pair[0] == pair[1]:
        raise ValueError("bell_measure needs two distinct systems")
    probs = bell_probabilities(state, pair)
    if forced_outcome is None:
        if rng is None:
            raise ValueError("give either forced_outcome or rng")
        u, acc = rng.random(), 0.0
        outcome = OUTCOMES[-1]
        for o in OUTCOMES:
            acc += probs[o]
            if u < acc:
                outcome = o
                break
    else:
        outcome = tuple(forced_outcome)
        if outcome not in BELL_STATES:
            raise ValueError(f"unknown outcome {forced_outcome!r}")
    p = probs[outcome]
    if p <= TOL:
        raise ImpossibleBranchError(f"outcome {outcome} has probability {p:.3g}")

    rotated = _to_bell_readout(state, pair)
    a, b = rotated.axis(pair[0]), rotated.axis(pair[1])
    psi = rotated.amplitudes.reshape([2] * state.n).copy()
    mask = np.zeros_like(psi, dtype=bool)
    index = [slice(None)] * state.n
    index[a], index[b] = outcome
    mask[tuple(index)] = True
    psi[~mask] = 0
    psi = psi.reshape(-1) / math.sqrt(p)
    post = _from_bell_readout(StateVector(psi, state.labels), pair)
    return MeasurementRecord(outcome, p, post)


def split_off(state: StateVector, systems: Sequence[str]) -> tuple[StateVector, StateVector]:
    """Factor a product state into (``systems``, rest); raises if they are entangled."""
    rest = [lab for lab in state.labels if lab not in systems]
    ordered = state.reorder(list(systems) + rest)
    mat = ordered.amplitudes.reshape(2 ** len(systems), 2 ** len(rest))
    u, s, vh = np.linalg.svd(mat)
    if len(s) > 1 and s[1] > 1e-9:
        raise OracleError(f"{tuple(systems)} is entangled with {tuple(rest)}")
    return (
        StateVector(u[:, 0] / np.linalg.norm(u[:, 0]), tuple(systems)),
        StateVector(vh[0] / np.linalg.norm(vh[0]), tuple(rest)),
    )


def link_target() -> StateVector:
    return _from_amplitudes(LINK_TARGET, (ELECTRON_NEXT, NUCLEAR_PREV))


def _link_branch(outcome) -> tuple[float, StateVector]:
    composite = emission_state().tensor(node_prep_state())
    rec = bell_measure(composite, (ELECTRON_PREV, PHOTON), forced_outcome=outcome)
    _, remaining = split_off(rec.state, (ELECTRON_PREV, PHOTON))
    return rec.probability, remaining.reorder((ELECTRON_NEXT, NUCLEAR_PREV))


def _search_pauli(candidates_ok) -> str:
    for name in PAULIS:
        if candidates_ok(PAULIS[name]):
            return name
    raise CorrectionSearchFailed("no Pauli restores the target state")


def derive_correction_table() -> dict[tuple[int, int], str]:
    """Pauli on ``nuclear_prev`` that maps each absorption branch onto the link target."""
    target = link_target()
    table = {}
    for outcome in OUTCOMES:
        _, post = _link_branch(outcome)
        try:
            table[outcome] = _search_pauli(
                lambda g: fidelity(target, apply_gate(post, g, [NUCLEAR_PREV])) >= 1 - TOL
            )
        except CorrectionSearchFailed as exc:
            raise CorrectionSearchFailed(f"branch {_bits(outcome)}: {exc}") from None
    return table


def _bits(outcome) -> str:
    return f"{outcome[0]}{outcome[1]}"


@dataclass
class CheckReport:
    name: str
    branches: list[dict] = field(default_factory=list)

    @property
    def failures(self) -> list[str]:
        return [b["branch"] for b in self.branches if not b["passed"]]

    @property
    def passed(self) -> bool:
        return bool(self.branches) and not self.failures

    def as_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "failures": self.failures, "branches": self.branches}


def link_generation_check(table: Optional[dict] = None) -> CheckReport:
    """Run every absorption branch through its correction and compare with the link target.

    ``table`` overrides the derived corrections (used to inject faults).
    """
    table = derive_correction_table() if table is None else table
    target = link_target()
    report = CheckReport("link_generation")
    for outcome in OUTCOMES:
        p, post = _link_branch(outcome)
        corrected = apply_gate(post, PAULIS[table[outcome]], [NUCLEAR_PREV])
        f = fidelity(target, corrected)
        report.branches.append({
            "branch": _bits(outcome),
            "probability": p,
            "correction": table[outcome],
            "fidelity": f,
            "passed": f >= 1 - TOL,
        })
    return report


_PROBES = [(0.0, 0.0), (math.pi, 0.0), (math.pi / 2, 0.0), (math.pi / 2, math.pi / 2)]


def _teleport_branch(payload: StateVector, outcome) -> StateVector:
    resource = link_target()
    state = payload.tensor(resource)
    rec = bell_measure(state, (PAYLOAD, NUCLEAR_PREV), forced_outcome=outcome)
    _, remote = split_off(rec.state, (PAYLOAD, NUCLEAR_PREV))
    return remote


def derive_teleport_table() -> dict[tuple[int, int], str]:
    """Pauli on ``electron_next`` that recovers the payload after each Bell outcome."""
    table = {}
    for outcome in OUTCOMES:
        branches = []
        for theta, phi in _PROBES:
            payload = payload_state(theta, phi)
            branches.append((payload_state(theta, phi, ELECTRON_NEXT), _teleport_branch(payload, outcome)))

        def ok(g):
            return all(fidelity(want, apply_gate(got, g, [ELECTRON_NEXT])) >= 1 - TOL for want, got in branches)

        try:
            table[outcome] = _search_pauli(ok)
        except CorrectionSearchFailed as exc:
            raise CorrectionSearchFailed(f"branch {_bits(outcome)}: {exc}") from None
    return table


def teleport_branches(theta: float, phi: float, table: Optional[dict] = None) -> list[dict]:
    table = derive_teleport_table() if table is None else table
    payload = payload_state(theta, phi)
    want = payload_state(theta, phi, ELECTRON_NEXT)
    out = []
    for outcome in OUTCOMES:
        remote = _teleport_branch(payload, outcome)
        f = fidelity(want, apply_gate(remote, PAULIS[table[outcome]], [ELECTRON_NEXT]))
        out.append({"branch": _bits(outcome), "correction": table[outcome], "fidelity": f, "passed": f >= 1 - TOL})
    return out


def teleport_check(theta: float, phi: float, table: Optional[dict] = None) -> float:
    """Worst-branch fidelity of teleporting ``cos(t/2)|+1> + e^{i phi} sin(t/2)|-1>`` across the link."""
    return min(b["fidelity"] for b in teleport_branches(theta, phi, table))


def random_bloch_angles(rng, count: int) -> list[tuple[float, float]]:
    """Uniformly distributed points on the Bloch sphere."""
    cos_t = rng.uniform(-1.0, 1.0, count)
    phi = rng.uniform(0.0, 2 * math.pi, count)
    return [(float(math.acos(c)), float(f)) for c, f in zip(cos_t, phi)]
