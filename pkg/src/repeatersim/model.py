"""Shared domain types and single-segment attempt math.

A segment attempt is the time-multiplexed emission of one photon by each of
``m_free`` eligible units at the next station toward a single receiver at
the previous one. Photons are absorbed in emission order, so the first
success wins and the emitter index is a truncated geometric variable.
"""

from __future__ import annotations

import bisect
import enum
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any, Optional

__all__ = [
    "AttemptOutcome",
    "ConfigError",
    "Holding",
    "NeverSucceedsError",
    "Protocol",
    "QubitRecord",
    "SimConfig",
    "attempt_cdf",
    "emitter_index",
    "expected_slots_to_success",
    "sample_attempt",
    "success_probability",
    "validate_config",
]

# Failure is ``None``; success is the 0-based index into the ordered emitter list.
AttemptOutcome = Optional[int]


class Protocol(str, enum.Enum):
    PARALLELIZED = "parallelized"
    MULTIPLEXED = "multiplexed"

    def __str__(self) -> str:
        return self.value


class ConfigError(ValueError):
    """Raised with every violated config constraint, keyed by field name."""

    def __init__(self, errors: Sequence[tuple[str, str]]):
        self.errors = list(errors)
        super().__init__("; ".join(f"{key}: {msg}" for key, msg in self.errors))


class NeverSucceedsError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    protocol: Protocol
    n_repeaters: int
    m_per_node: int
    p_success: float
    t0_seconds: float = 1.0
    l0_meters: Optional[float] = None
    max_slots: Optional[int] = None
    target_completions: Optional[int] = None
    seed: int = 0
    replications: int = 1

    @property
    def n_stations(self) -> int:
        return self.n_repeaters + 2

    @property
    def n_segments(self) -> int:
        return self.n_repeaters + 1

    def cell_key(self) -> tuple:
        """Identity of a simulation cell, ignoring the replication count."""
        return (
            str(self.protocol),
            self.n_repeaters,
            self.m_per_node,
            self.p_success,
            self.t0_seconds,
            self.l0_meters,
            self.max_slots,
            self.target_completions,
            self.seed,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "protocol": str(self.protocol),
            "n_repeaters": self.n_repeaters,
            "m_per_node": self.m_per_node,
            "p_success": self.p_success,
            "t0_seconds": self.t0_seconds,
            "l0_meters": self.l0_meters,
            "max_slots": self.max_slots,
            "target_completions": self.target_completions,
            "seed": self.seed,
            "replications": self.replications,
        }


@dataclass(frozen=True)
class Holding:
    """Occupied NV unit: which qubit it stores and since which slot."""

    qubit_id: int
    arrival_slot: int


@dataclass
class QubitRecord:
    qubit_id: int
    injected_slot: int
    # (station_index, arrival_slot); starts with (0, injected_slot) and ends
    # with (n_stations - 1, completed_slot) once delivered.
    hops: list[tuple[int, int]] = field(default_factory=list)
    completed_slot: Optional[int] = None

    @property
    def transfer_slots(self) -> Optional[int]:
        if self.completed_slot is None:
            return None
        return self.completed_slot - self.injected_slot

    def residences(self) -> list[int]:
        """Slots spent at each station the qubit has already left."""
        return [b[1] - a[1] for a, b in zip(self.hops, self.hops[1:])]


def _check_probability(p: float) -> None:
    if not 0.0 <= p <= 1.0 or math.isnan(p):
        raise ValueError(f"probability must be in [0, 1], got {p!r}")


def success_probability(m_free: int, p: float) -> float:
    """Chance that at least one of ``m_free`` independent Bernoulli(p) photons is absorbed."""
    _check_probability(p)
    if m_free < 0:
        raise ValueError(f"m_free must be non-negative, got {m_free}")
    if m_free == 0 or p == 0.0:
        return 0.0
    if p == 1.0:
        return 1.0
    return -math.expm1(m_free * math.log1p(-p))


def expected_slots_to_success(m_free: int, p: float) -> float:
    if m_free <= 0 or p == 0.0:
        raise NeverSucceedsError(f"attempt with m_free={m_free}, p={p} never succeeds")
    return 1.0 / success_probability(m_free, p)


def attempt_cdf(m_max: int, p: float) -> list[float]:
    """``cdf[k]`` is the probability that some emitter with index <= k succeeds.

    The table does not depend on how many emitters are free: an attempt with
    ``m`` emitters fails exactly when the uniform variate is >= ``cdf[m - 1]``.
    """
    return [success_probability(k + 1, p) for k in range(m_max)]


def emitter_index(u: float, m_free: int, cdf: Sequence[float]) -> AttemptOutcome:
    """Inverse-CDF map from one uniform variate in [0, 1) to an outcome."""
    if m_free == 0 or u >= cdf[m_free - 1]:
        return None
    return bisect.bisect_right(cdf, u, 0, m_free)


def sample_attempt(m_free: int, p: float, rng) -> AttemptOutcome:
    """Draw one multiplexed attempt. Consumes exactly one ``rng.random()`` call."""
    _check_probability(p)
    u = rng.random()
    if m_free == 0:
        return None
    return emitter_index(u, m_free, attempt_cdf(m_free, p))


_INT_FIELDS = ("n_repeaters", "m_per_node", "max_slots", "target_completions", "replications", "seed")
_FLOAT_FIELDS = ("p_success", "t0_seconds", "l0_meters")
CONFIG_FIELDS = frozenset(SimConfig.__dataclass_fields__)


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_real(value: Any) -> bool:
    return (isinstance(value, (int, float)) and not isinstance(value, bool)) and math.isfinite(value)


def validate_config(raw: Mapping[str, Any], *, allow_zero_p: bool = False) -> SimConfig:
    """Build a :class:`SimConfig` from a plain mapping, collecting every violation.

    ``allow_zero_p`` admits ``p_success == 0`` for degenerate engine runs;
    user-facing configs always require ``p_success > 0``.
    """
    errors: list[tuple[str, str]] = []
    values = dict(raw)

    for key in sorted(set(values) - CONFIG_FIELDS):
        errors.append((key, "unknown key"))

    protocol = values.get("protocol", Protocol.MULTIPLEXED)
    try:
        protocol = Protocol(protocol)
    except ValueError:
        errors.append(("protocol", f"must be one of {[p.value for p in Protocol]}, got {protocol!r}"))

    for key in _INT_FIELDS:
        value = values.get(key)
        if value is not None and not _is_int(value):
            errors.append((key, f"expected integer, got {value!r}"))
            values[key] = None
    for key in _FLOAT_FIELDS:
        value = values.get(key)
        if value is not None and not _is_real(value):
            errors.append((key, f"expected real number, got {value!r}"))
            values[key] = None

    for key in ("n_repeaters", "m_per_node", "p_success"):
        if key not in raw:
            errors.append((key, "required"))

    n = values.get("n_repeaters")
    if n is not None and n < 1:
        errors.append(("n_repeaters", "must be >= 1"))
    m = values.get("m_per_node")
    if m is not None and m < 1:
        errors.append(("m_per_node", "must be >= 1"))
    p = values.get("p_success")
    if p is not None:
        low_ok = p >= 0 if allow_zero_p else p > 0
        if not (low_ok and p <= 1):
            errors.append(("p_success", "p_success must be in [0,1]" if allow_zero_p else "p_success must be in (0,1]"))

    t0 = values.get("t0_seconds")
    if t0 is None:
        values["t0_seconds"] = 1.0
    elif t0 <= 0:
        errors.append(("t0_seconds", "must be positive"))
    l0 = values.get("l0_meters")
    if l0 is not None and l0 <= 0:
        errors.append(("l0_meters", "must be positive"))

    max_slots = values.get("max_slots")
    target = values.get("target_completions")
    if (max_slots is None) == (target is None):
        errors.append(("stop", "exactly one stop condition (max_slots or target_completions) must be set"))
    if max_slots is not None and max_slots < 1:
        errors.append(("max_slots", "must be positive"))
    if target is not None and target < 1:
        errors.append(("target_completions", "must be positive"))

    seed = values.get("seed")
    if seed is None:
        values["seed"] = 0
    elif not 0 <= seed < 2**64:
        errors.append(("seed", "must be a 64-bit unsigned integer"))
    reps = values.get("replications")
    if reps is None:
        values["replications"] = 1
    elif reps < 1:
        errors.append(("replications", "must be positive"))

    if errors:
        raise ConfigError(errors)
    return SimConfig(
        protocol=protocol,
        n_repeaters=n,
        m_per_node=m,
        p_success=float(p),
        t0_seconds=float(values["t0_seconds"]),
        l0_meters=None if l0 is None else float(l0),
        max_slots=max_slots,
        target_completions=target,
        seed=values["seed"],
        replications=values["replications"],
    )
