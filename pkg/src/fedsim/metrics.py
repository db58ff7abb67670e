"""Cost accounting: per-round counters for communication trips and bytes,
live model replicas, and state-store disk footprint, plus closed-form
calculators for the same quantities under each simulation scheme (including
the all-clients-deployed RW_DIST layout, which is never executed because it
needs one live executor per client and exercises no code path SD_DIST does
not already cover).

Byte counters track uplink payload tensor data only (8 bytes per float64
element); message framing, names, and shapes are excluded at count time, so
observed bytes reconcile against the closed forms with zero allowance.
Downlink is counted in trips but not bytes.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace

from .core import SCHEMES

ANALYTIC_SCHEMES = SCHEMES + ("RW_DIST",)


@dataclass
class CostLedger:
    """Observed (or expected) costs for one round, or a sum over rounds."""

    round: int
    scheme: str
    trips_up: int = 0
    trips_down: int = 0
    bytes_avg_params: int = 0
    bytes_special_params: int = 0
    peak_live_model_replicas: int = 0
    state_bytes_disk: int = 0

    def add_uplink(self, avg_bytes: int, special_bytes: int) -> None:
        self.trips_up += 1
        self.bytes_avg_params += avg_bytes
        self.bytes_special_params += special_bytes

    def add_downlink(self) -> None:
        self.trips_down += 1

    @staticmethod
    def total(ledgers: list["CostLedger"]) -> "CostLedger":
        if not ledgers:
            raise ValueError("cannot total an empty ledger list")
        out = replace(ledgers[0])
        for led in ledgers[1:]:
            if led.scheme != out.scheme:
                raise ValueError("cannot total ledgers across schemes")
            out.trips_up += led.trips_up
            out.trips_down += led.trips_down
            out.bytes_avg_params += led.bytes_avg_params
            out.bytes_special_params += led.bytes_special_params
            out.peak_live_model_replicas = max(out.peak_live_model_replicas,
                                               led.peak_live_model_replicas)
            out.state_bytes_disk = max(out.state_bytes_disk, led.state_bytes_disk)
        out.round = -1
        return out


def scheme_formulas(scheme: str, m: int, m_p: int, k: int,
                    s_m: float, s_a: float, s_e: float, s_d: float) -> dict[str, float]:
    """Closed-form per-round costs for a scheme, as a named-row mapping.

    Rows: num_devices, memory, memory_with_state_manager,
    disk_with_state_manager, comm_size, comm_trips. All sizes are in the
    units of the s_* arguments; trips and device counts are plain counts.
    """
    if scheme not in ANALYTIC_SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    rows = {
        "SP": dict(num_devices=1,
                   memory=s_m * m + s_d * m,
                   memory_with_state_manager=s_m + s_d,
                   disk_with_state_manager=s_m * m_p + s_d * m,
                   comm_size=0.0,
                   comm_trips=0),
        "RW_DIST": dict(num_devices=m,
                        memory=s_m * m + s_d * m,
                        memory_with_state_manager=s_m * m + s_d * m_p,
                        disk_with_state_manager=s_d * m,
                        comm_size=s_a * m_p + s_e * m_p,
                        comm_trips=m_p),
        "SD_DIST": dict(num_devices=m_p,
                        memory=s_m * m_p + s_d * m,
                        memory_with_state_manager=s_m * m_p + s_d * m_p,
                        disk_with_state_manager=s_d * m,
                        comm_size=s_a * m_p + s_e * m_p,
                        comm_trips=m_p),
        "FA_DIST": dict(num_devices=k,
                        memory=s_m * k + s_d * m,
                        memory_with_state_manager=s_m * k + s_d * k,
                        disk_with_state_manager=s_d * m,
                        comm_size=s_a * m_p + s_e * m_p,
                        comm_trips=m_p),
        "PARROT": dict(num_devices=k,
                       memory=s_m * k + s_d * m,
                       memory_with_state_manager=s_m * k + s_d * k,
                       disk_with_state_manager=s_d * m,
                       comm_size=s_a * k + s_e * m_p,
                       comm_trips=k),
    }
    return rows[scheme]


def expected_costs(scheme: str, m: int, m_p: int, k: int,
                   s_m: float = 0.0, s_a: float = 0.0, s_e: float = 0.0,
                   s_d: float = 0.0) -> CostLedger:
    """Closed-form per-round cost ledger for a scheme.

    Byte fields carry the uplink decomposition of the comm_size row: avg
    params travel once per uplink trip, special params once per selected
    client regardless of scheme. Replica counts are with the state manager
    in place (the only mode this engine runs).
    """
    rows = scheme_formulas(scheme, m, m_p, k, s_m, s_a, s_e, s_d)
    trips = int(rows["comm_trips"])
    avg_bytes = int(round(s_a * trips))
    special_bytes = 0 if scheme == "SP" else int(round(s_e * m_p))
    replicas = {"SP": 1, "RW_DIST": m, "SD_DIST": m_p, "FA_DIST": k, "PARROT": k}[scheme]
    return CostLedger(round=-1, scheme=scheme,
                      trips_up=trips, trips_down=trips,
                      bytes_avg_params=avg_bytes,
                      bytes_special_params=special_bytes,
                      peak_live_model_replicas=replicas,
                      state_bytes_disk=int(round(s_d * m)))


@dataclass(frozen=True)
class ReconcileReport:
    ok: bool
    lines: tuple[str, ...]

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return "\n".join(self.lines)


def reconcile(observed: CostLedger, expected: CostLedger,
              byte_allowance: int = 0) -> ReconcileReport:
    """Compare an observed ledger against the closed form.

    Trip counts must match exactly. Byte counters must match within
    byte_allowance (0 by default: the counters already exclude framing).
    Replica and disk peaks are upper-bounded by the closed form.
    """
    lines: list[str] = []
    ok = True

    def check(label: str, passed: bool, got, want) -> None:
        nonlocal ok
        ok = ok and passed
        lines.append(f"{'ok  ' if passed else 'FAIL'} {label}: observed={got} expected={want}")

    check("trips_up", observed.trips_up == expected.trips_up,
          observed.trips_up, expected.trips_up)
    check("trips_down", observed.trips_down == expected.trips_down,
          observed.trips_down, expected.trips_down)
    check("bytes_avg_params",
          abs(observed.bytes_avg_params - expected.bytes_avg_params) <= byte_allowance,
          observed.bytes_avg_params, expected.bytes_avg_params)
    check("bytes_special_params",
          abs(observed.bytes_special_params - expected.bytes_special_params) <= byte_allowance,
          observed.bytes_special_params, expected.bytes_special_params)
    check("peak_live_model_replicas",
          observed.peak_live_model_replicas <= expected.peak_live_model_replicas,
          observed.peak_live_model_replicas, f"<= {expected.peak_live_model_replicas}")
    check("state_bytes_disk",
          observed.state_bytes_disk <= expected.state_bytes_disk,
          observed.state_bytes_disk, f"<= {expected.state_bytes_disk}")
    return ReconcileReport(ok=ok, lines=tuple(lines))


class ReplicaGauge:
    """Thread-safe high-water mark for concurrently live model replicas."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._live = 0
        self._peak = 0

    def acquire(self, n: int = 1) -> None:
        with self._lock:
            self._live += n
            self._peak = max(self._peak, self._live)

    def release(self, n: int = 1) -> None:
        with self._lock:
            if n > self._live:
                raise ValueError(f"releasing {n} replicas with only {self._live} live")
            self._live -= n

    @property
    def live(self) -> int:
        with self._lock:
            return self._live

    @property
    def peak(self) -> int:
        with self._lock:
            return self._peak
