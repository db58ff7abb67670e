"""Per-device workload model: record task timings, fit seconds ~ samples.

Each device gets an independent ordinary-least-squares fit of reported task
seconds against sample count (two parameters: seconds-per-sample and a fixed
per-task cost). The fit can use the full history or only a recent window of
rounds; the window variant tracks devices whose speed drifts over time.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .core import ALL_HISTORY


class InsufficientDataError(RuntimeError):
    """Fewer than two usable records in the requested window."""


@dataclass(frozen=True)
class TimingRecord:
    device_id: int
    client_id: int
    round: int
    sample_count: int
    reported_seconds: float

    def __post_init__(self) -> None:
        if not self.reported_seconds > 0:
            raise ValueError("reported_seconds must be > 0")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")


@dataclass
class WorkloadFit:
    device_id: int
    t_sample: float
    b: float
    records_used: int
    window_used: int | str
    degenerate: bool = False
    rounds_used: tuple[int, int] = (-1, -1)  # (min, max) round of records used
    clamp_events: int = 0


class TimingHistory:
    """Append-only store of timing records, queryable by device and round."""

    def __init__(self) -> None:
        self._by_device: dict[int, list[TimingRecord]] = {}
        self._by_round: dict[int, list[TimingRecord]] = {}
        self.size = 0

    def add(self, rec: TimingRecord) -> None:
        self._by_device.setdefault(rec.device_id, []).append(rec)
        self._by_round.setdefault(rec.round, []).append(rec)
        self.size += 1

    def device_records(self, device_id: int, lo: int, hi: int) -> list[TimingRecord]:
        """Records for one device with round in [lo, hi]."""
        return [r for r in self._by_device.get(device_id, []) if lo <= r.round <= hi]

    def round_records(self, round_num: int) -> list[TimingRecord]:
        return list(self._by_round.get(round_num, []))

    def export(self, path: str | Path) -> None:
        """Column-separated dump: round, device, client, samples, seconds."""
        recs = sorted((r for rs in self._by_round.values() for r in rs),
                      key=lambda r: (r.round, r.device_id, r.client_id))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("round\tdevice\tclient\tsamples\tseconds\n")
            for r in recs:
                fh.write(f"{r.round}\t{r.device_id}\t{r.client_id}\t"
                         f"{r.sample_count}\t{r.reported_seconds:.9g}\n")


def record(history: TimingHistory, rec: TimingRecord) -> None:
    history.add(rec)


def fit_device(history: TimingHistory, device_id: int, window: int | str,
               current_round: int) -> WorkloadFit:
    """Closed-form OLS of reported seconds on sample count for one device.

    window = "all-history" uses rounds [0, current_round - 1]; an integer
    window tau uses rounds [current_round - tau, current_round - 1]. With
    all sample counts equal the line is underdetermined; the fallback
    t = mean(T)/mean(N), b = 0 is returned flagged as degenerate.
    """
    if window == ALL_HISTORY:
        lo = 0
    elif isinstance(window, int) and window >= 1:
        lo = max(0, current_round - window)
    else:
        raise ValueError(f"window must be a positive integer or {ALL_HISTORY!r}")
    recs = history.device_records(device_id, lo, current_round - 1)
    if len(recs) < 2:
        raise InsufficientDataError(
            f"device {device_id}: {len(recs)} record(s) in rounds [{lo}, {current_round - 1}]")
    n = np.array([r.sample_count for r in recs], dtype=np.float64)
    t = np.array([r.reported_seconds for r in recs], dtype=np.float64)
    rounds = (min(r.round for r in recs), max(r.round for r in recs))
    n_c = n - n.mean()
    denom = float(n_c @ n_c)
    if denom == 0.0:
        return WorkloadFit(device_id=device_id, t_sample=float(t.mean() / n.mean()),
                           b=0.0, records_used=len(recs), window_used=window,
                           degenerate=True, rounds_used=rounds)
    slope = float(n_c @ (t - t.mean())) / denom
    return WorkloadFit(device_id=device_id, t_sample=slope,
                       b=float(t.mean() - slope * n.mean()),
                       records_used=len(recs), window_used=window,
                       rounds_used=rounds)


def predict(fit: WorkloadFit, sample_count: int) -> float:
    """Predicted task seconds, clamped at zero (negative extrapolations are
    counted on the fit so callers can see how often the clamp fired)."""
    value = sample_count * fit.t_sample + fit.b
    if value < 0.0:
        fit.clamp_events += 1
        return 0.0
    return value


def estimation_error(history: TimingHistory, fits: Mapping[int, WorkloadFit],
                     round_num: int) -> float:
    """Mean relative |predicted - reported| / reported over one round's tasks."""
    recs = history.round_records(round_num)
    if not recs:
        raise ValueError(f"no records for round {round_num}")
    missing = {r.device_id for r in recs} - set(fits)
    if missing:
        raise ValueError(f"no fit for device(s) {sorted(missing)} in round {round_num}")
    errs = [abs(predict(fits[r.device_id], r.sample_count) - r.reported_seconds)
            / r.reported_seconds
            for r in recs]
    return float(np.mean(errs))
