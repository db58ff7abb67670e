"""Shared domain types: simulation config, client profiles, seeded RNG streams, selection.

Everything here is immutable after construction and safe to share across the
engine's executor threads.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping

import numpy as np

SCHEMES = ("SP", "SD_DIST", "FA_DIST", "PARROT")
SCHEDULING_MODES = ("none-uniform", "full-history", "time-window", "random-baseline")
CLOCK_MODES = ("virtual", "real")
ALL_HISTORY = "all-history"

# Labeled sub-stream ids. Every random draw in the simulator goes through
# stream_rng(seed, STREAM_X, *context) so subsystems cannot perturb each other
# and any (seed, round) pair can be replayed in isolation.
STREAM_SELECTION = 1
STREAM_DATA = 2
STREAM_PARTITION = 3
STREAM_NOISE = 4
STREAM_SCHEDULE = 5
STREAM_MINIBATCH = 6


def stream_rng(seed: int, stream: int, *context: int) -> np.random.Generator:
    """Deterministic generator for one labeled sub-stream of the root seed."""
    return np.random.default_rng([seed, stream, *context])


class ConfigError(ValueError):
    """Raised for invalid or inconsistent simulation configuration."""


@dataclass(frozen=True)
class SimConfig:
    """Top-level simulation parameters.

    total_clients
        Number of clients M in the population.
    concurrent_clients
        Number of clients M_p selected and trained per round.
    num_devices
        Number of executor devices K. Constrained by the scheme: K = 1 for
        SP, K = concurrent_clients for SD_DIST, K <= concurrent_clients for
        FA_DIST and PARROT.
    total_rounds
        Number of communication rounds R.
    local_epochs
        Local epochs E per client per round.
    warmup_rounds
        Rounds r <= warmup_rounds use uniform task division while timing
        history accumulates; must be < total_rounds.
    time_window
        Either a positive integer (only timing records from the last that
        many rounds feed the workload fit) or "all-history".
    seed
        Root seed; all randomness derives from it through labeled streams.
    scheme
        One of SP, SD_DIST, FA_DIST, PARROT.
    scheduling
        One of none-uniform, full-history, time-window, random-baseline.
    clock
        "virtual" (task durations come from ground-truth device models;
        fully reproducible) or "real" (wall-clock measurement, injected
        slowdowns are actually slept).
    trip_overhead_seconds
        Fixed simulated cost added per communication trip when converting
        trip counts into round time. Default 0.
    """

    total_clients: int
    concurrent_clients: int
    num_devices: int
    total_rounds: int
    local_epochs: int = 1
    warmup_rounds: int = 1
    time_window: int | str = 5
    seed: int = 0
    scheme: str = "PARROT"
    scheduling: str = "time-window"
    clock: str = "virtual"
    trip_overhead_seconds: float = 0.0

    def __post_init__(self) -> None:
        for name in ("total_clients", "concurrent_clients", "num_devices",
                     "total_rounds", "local_epochs"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not isinstance(self.warmup_rounds, int) or self.warmup_rounds < 0:
            raise ConfigError(f"warmup_rounds must be a non-negative integer, got {self.warmup_rounds!r}")
        if self.warmup_rounds >= self.total_rounds:
            raise ConfigError(
                f"warmup_rounds ({self.warmup_rounds}) must be < total_rounds ({self.total_rounds})")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) \
                or not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be an integer in [0, 2**64), got {self.seed!r}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.scheduling not in SCHEDULING_MODES:
            raise ConfigError(f"scheduling must be one of {SCHEDULING_MODES}, got {self.scheduling!r}")
        if self.clock not in CLOCK_MODES:
            raise ConfigError(f"clock must be one of {CLOCK_MODES}, got {self.clock!r}")
        if self.time_window != ALL_HISTORY:
            if not isinstance(self.time_window, int) or isinstance(self.time_window, bool) \
                    or self.time_window < 1:
                raise ConfigError(
                    f"time_window must be a positive integer or {ALL_HISTORY!r}, got {self.time_window!r}")
        if self.scheduling == "time-window" and self.time_window == ALL_HISTORY:
            raise ConfigError("scheduling=time-window requires an integer time_window >= 1")
        if self.concurrent_clients > self.total_clients:
            raise ConfigError(
                f"concurrent_clients ({self.concurrent_clients}) must be <= total_clients ({self.total_clients})")
        if self.scheme == "SP" and self.num_devices != 1:
            raise ConfigError("scheme=SP requires num_devices = 1")
        if self.scheme == "SD_DIST" and self.num_devices != self.concurrent_clients:
            raise ConfigError("scheme=SD_DIST requires num_devices = concurrent_clients")
        if self.scheme in ("FA_DIST", "PARROT") and self.num_devices > self.concurrent_clients:
            raise ConfigError(
                f"scheme={self.scheme} requires num_devices <= concurrent_clients")
        if not isinstance(self.trip_overhead_seconds, (int, float)) \
                or self.trip_overhead_seconds < 0:
            raise ConfigError(
                f"trip_overhead_seconds must be a non-negative number, got {self.trip_overhead_seconds!r}")

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, object]) -> "SimConfig":
        """Build from a parsed config section; unknown keys are a hard error."""
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise ConfigError(f"unknown simulation config key(s): {', '.join(unknown)}")
        return cls(**dict(mapping))


@dataclass(frozen=True)
class DataSlice:
    """One client's slice of the dataset: features, labels, and source row indices."""

    features: np.ndarray
    labels: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass(frozen=True)
class ClientProfile:
    client_id: int
    sample_count: int
    data_partition: DataSlice

    def __post_init__(self) -> None:
        if self.sample_count != len(self.data_partition):
            raise ValueError(
                f"client {self.client_id}: sample_count {self.sample_count} "
                f"!= partition length {len(self.data_partition)}")
        if self.sample_count < 1:
            raise ValueError(f"client {self.client_id}: sample_count must be >= 1")


@dataclass(frozen=True)
class ClientSelection:
    round: int
    selected: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(set(self.selected)) != len(self.selected):
            raise ValueError(f"round {self.round}: selected client ids must be distinct")


def select_clients(cfg: SimConfig, round_num: int) -> ClientSelection:
    """Select concurrent_clients distinct ids uniformly without replacement.

    Deterministic given (cfg.seed, round_num); the draw order is preserved.
    """
    if not 0 <= round_num < cfg.total_rounds:
        raise ValueError(f"round {round_num} outside [0, {cfg.total_rounds})")
    rng = stream_rng(cfg.seed, STREAM_SELECTION, round_num)
    ids = rng.choice(cfg.total_clients, size=cfg.concurrent_clients, replace=False)
    return ClientSelection(round=round_num, selected=tuple(int(i) for i in ids))
