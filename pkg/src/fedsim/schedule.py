"""Round task scheduling: uniform warm-up division, then workload-aware greedy.

The greedy pass sorts the selected clients by sample count, largest first,
and assigns each to the device that minimizes the round makespan that would
result, using per-device fitted time models to predict task cost. Ties break
toward the smaller resulting device load, then the lowest device id, so the
plan is a total deterministic function of its inputs.

The inner loop is JIT-compiled (numba) when available; a pure-Python twin is
kept both as the fallback and as an instrumented reference that counts
operations, and the two are cross-checked in tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .core import STREAM_SCHEDULE, ClientSelection, SimConfig, stream_rng
from .estimate import WorkloadFit

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

MODE_WARMUP = "warmup-uniform"
MODE_GREEDY = "greedy"
MODE_RANDOM = "random-baseline"


@dataclass(frozen=True)
class RoundPlan:
    round: int
    assignments: dict[int, list[int]]     # device id -> ordered client ids
    predicted_loads: dict[int, float]     # device id -> predicted seconds
    mode: str

    def makespan_of(self, loads: Mapping[int, float]) -> float:
        return max(loads.values()) if loads else 0.0


def _greedy_core(sizes: np.ndarray, t: np.ndarray, b: np.ndarray):
    """Reference implementation; returns (assignment, loads, op_count).

    For each task (already sorted largest first) every device k is scored by
    the makespan the assignment would produce: max(max of other loads,
    w_k + max(0, N*t_k + b_k)). Lexicographic tie-break on (makespan,
    resulting load, device id).
    """
    n, k = len(sizes), len(t)
    w = np.zeros(k)
    assign = np.empty(n, dtype=np.int64)
    ops = 0
    for i in range(n):
        m1 = -np.inf
        m2 = -np.inf
        a1 = -1
        for j in range(k):
            ops += 1
            if w[j] > m1:
                m2, m1, a1 = m1, w[j], j
            elif w[j] > m2:
                m2 = w[j]
        best = -1
        best_mk = np.inf
        best_c = np.inf
        for j in range(k):
            ops += 1
            pred = sizes[i] * t[j] + b[j]
            if pred < 0.0:
                pred = 0.0
            cand = w[j] + pred
            other = m2 if j == a1 else m1
            mk = cand if cand > other else other
            if mk < best_mk or (mk == best_mk and cand < best_c):
                best, best_mk, best_c = j, mk, cand
        assign[i] = best
        w[best] = best_c
    return assign, w, ops


if HAVE_NUMBA:
    @njit(cache=True)
    def _greedy_jit(sizes, t, b):  # pragma: no cover - mirrored by _greedy_core
        n = sizes.shape[0]
        k = t.shape[0]
        w = np.zeros(k)
        assign = np.empty(n, dtype=np.int64)
        for i in range(n):
            m1 = -np.inf
            m2 = -np.inf
            a1 = -1
            for j in range(k):
                if w[j] > m1:
                    m2 = m1
                    m1 = w[j]
                    a1 = j
                elif w[j] > m2:
                    m2 = w[j]
            best = -1
            best_mk = np.inf
            best_c = np.inf
            for j in range(k):
                pred = sizes[i] * t[j] + b[j]
                if pred < 0.0:
                    pred = 0.0
                cand = w[j] + pred
                other = m1
                if j == a1:
                    other = m2
                mk = cand
                if other > cand:
                    mk = other
                if mk < best_mk or (mk == best_mk and cand < best_c):
                    best = j
                    best_mk = mk
                    best_c = cand
            assign[i] = best
            w[best] = best_c
        return assign, w


def warm_jit() -> None:
    """Compile (or load the cached) greedy kernel ahead of timed use."""
    if HAVE_NUMBA:
        _greedy_jit(np.array([2.0, 1.0]), np.ones(2), np.zeros(2))


def uniform_division(round_num: int, selected: ClientSelection,
                     num_devices: int, mode: str = MODE_WARMUP) -> RoundPlan:
    """Split the selected clients into contiguous chunks of near-equal count
    (sizes differ by at most one), in selection order."""
    chunks = np.array_split(np.asarray(selected.selected, dtype=np.int64), num_devices)
    assignments = {k: [int(c) for c in chunk] for k, chunk in enumerate(chunks)}
    return RoundPlan(round=round_num, assignments=assignments,
                     predicted_loads={}, mode=mode)


def greedy_assign(round_num: int, selected: ClientSelection,
                  fits: Mapping[int, WorkloadFit], sizes: Mapping[int, int],
                  num_devices: int, use_jit: bool = True) -> RoundPlan:
    order = sorted(selected.selected, key=lambda m: (-sizes[m], m))
    n_desc = np.array([sizes[m] for m in order], dtype=np.float64)
    t = np.array([fits[k].t_sample for k in range(num_devices)])
    b = np.array([fits[k].b for k in range(num_devices)])
    if use_jit and HAVE_NUMBA:
        assign, loads = _greedy_jit(n_desc, t, b)
    else:
        assign, loads, _ = _greedy_core(n_desc, t, b)
    assignments: dict[int, list[int]] = {k: [] for k in range(num_devices)}
    for client, dev in zip(order, assign):
        assignments[int(dev)].append(int(client))
    return RoundPlan(round=round_num, assignments=assignments,
                     predicted_loads={k: float(loads[k]) for k in range(num_devices)},
                     mode=MODE_GREEDY)


def random_assign(round_num: int, selected: ClientSelection,
                  num_devices: int, seed: int) -> RoundPlan:
    rng = stream_rng(seed, STREAM_SCHEDULE, round_num)
    devs = rng.integers(0, num_devices, size=len(selected.selected))
    assignments: dict[int, list[int]] = {k: [] for k in range(num_devices)}
    for client, dev in zip(selected.selected, devs):
        assignments[int(dev)].append(int(client))
    return RoundPlan(round=round_num, assignments=assignments,
                     predicted_loads={}, mode=MODE_RANDOM)


def schedule(round_num: int, selected: ClientSelection,
             fits: Mapping[int, WorkloadFit] | None,
             sizes: Mapping[int, int], cfg: SimConfig) -> RoundPlan:
    """Produce the round's device assignment under the configured policy.

    Warm-up rounds (round_num <= warmup_rounds), scheduling=none-uniform,
    and rounds where any device lacks a valid fit all fall back to uniform
    division; estimator failures never abort a round.
    """
    if cfg.scheduling == MODE_RANDOM:
        return random_assign(round_num, selected, cfg.num_devices, cfg.seed)
    fits_ok = fits is not None and all(
        fits.get(k) is not None for k in range(cfg.num_devices))
    if cfg.scheduling == "none-uniform" or round_num <= cfg.warmup_rounds or not fits_ok:
        return uniform_division(round_num, selected, cfg.num_devices)
    return greedy_assign(round_num, selected, fits, sizes, cfg.num_devices)


def makespan(plan: RoundPlan, truth: Mapping[int, tuple[float, float]],
             sizes: Mapping[int, int]) -> float:
    """Max over devices of summed true task times (idle devices contribute 0)."""
    worst = 0.0
    for dev, clients in plan.assignments.items():
        t, b = truth[dev]
        load = sum(sizes[m] * t + b for m in clients)
        worst = max(worst, load)
    return worst


def export_plan(plan: RoundPlan, path: str | Path) -> None:
    """Append plan rows: round, device, predicted load, ordered client list."""
    with open(path, "a", encoding="utf-8") as fh:
        for dev in sorted(plan.assignments):
            load = plan.predicted_loads.get(dev, float("nan"))
            ids = ",".join(str(m) for m in plan.assignments[dev])
            fh.write(f"{plan.round}\t{dev}\t{plan.mode}\t{load:.9g}\t{ids}\n")
