"""Two-level result aggregation: device-local folds, then a server fold.

Devices accumulate (weighted-sum, weight) pairs rather than locally finalized
averages, so the final division happens exactly once at the server and any
grouping of clients into devices differs from flat aggregation only by
floating-point reassociation (relative error <= 1e-12). Collect entries pass
through untouched, tagged with their originating client.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .trainer import AggOp, AlgorithmPlugin, BundleEntry, ParamBundle


class AggregationError(ValueError):
    pass


class ShapeMismatchError(AggregationError):
    pass


class OpMismatchError(AggregationError):
    pass


class SchemaMismatchError(AggregationError):
    pass


class EmptyAggregateError(AggregationError):
    pass


class MissingEntryError(AggregationError):
    pass


@dataclass
class PartialEntry:
    op: AggOp
    acc: np.ndarray | None = None     # sum (weighted for WeightedAverage)
    weight_sum: float = 0.0           # WeightedAverage only
    count: int = 0
    collected: list[tuple[int, np.ndarray]] = field(default_factory=list)


@dataclass
class DevicePartial:
    """One device's folded view of the client results it executed."""

    device_id: int
    entries: dict[str, PartialEntry] = field(default_factory=dict)
    clients_folded: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class AggregateResult:
    """Server-side fold output: finalized averages plus Collect pass-throughs.

    `weights` and `counts` expose the accumulated WeightedAverage mass and
    fold counts per entry so server rules (e.g. step rescaling) can use them.
    """

    bundle: ParamBundle
    collected: dict[str, list[tuple[int, np.ndarray]]]
    weights: dict[str, float]
    counts: dict[str, int]
    clients: tuple[int, ...]


def local_fold(partial: DevicePartial, result: ParamBundle,
               client_id: int) -> DevicePartial:
    """Fold one client's result bundle into the device partial, in call order."""
    for name, entry in result.entries.items():
        pe = partial.entries.get(name)
        if pe is None:
            pe = partial.entries[name] = PartialEntry(op=entry.op)
        if pe.op is not entry.op:
            raise OpMismatchError(
                f"entry {name!r}: {entry.op.value} folded into {pe.op.value}")
        if entry.op is AggOp.COLLECT:
            pe.collected.append((entry.client_id, entry.tensor))
            pe.count += 1
            continue
        if pe.acc is None:
            pe.acc = np.zeros_like(entry.tensor)
        if pe.acc.shape != entry.tensor.shape:
            raise ShapeMismatchError(
                f"entry {name!r}: shape {entry.tensor.shape} vs {pe.acc.shape}")
        if entry.op is AggOp.WEIGHTED_AVERAGE:
            pe.acc += entry.weight * entry.tensor
            pe.weight_sum += entry.weight
        else:
            pe.acc += entry.tensor
        pe.count += 1
    partial.clients_folded.append(client_id)
    return partial


def global_fold(partials: list[DevicePartial]) -> AggregateResult:
    """Combine device partials into final tensors; fold order is list order."""
    active = [p for p in partials if p.entries]
    if not active:
        raise EmptyAggregateError("no client results to aggregate")
    schema = {name: pe.op for name, pe in active[0].entries.items()}
    for p in active[1:]:
        if {n: e.op for n, e in p.entries.items()} != schema:
            raise SchemaMismatchError(
                f"device {p.device_id} disagrees on the entry schema")

    bundle = ParamBundle()
    collected: dict[str, list[tuple[int, np.ndarray]]] = {}
    weights: dict[str, float] = {}
    counts: dict[str, int] = {}
    for name, op in schema.items():
        parts = [p.entries[name] for p in active]
        count = sum(pe.count for pe in parts)
        counts[name] = count
        if op is AggOp.COLLECT:
            collected[name] = [item for pe in parts for item in pe.collected]
            continue
        shapes = {pe.acc.shape for pe in parts}
        if len(shapes) != 1:
            raise SchemaMismatchError(f"entry {name!r}: device shapes differ: {shapes}")
        total = np.zeros_like(parts[0].acc)
        for pe in parts:
            total += pe.acc
        if op is AggOp.WEIGHTED_AVERAGE:
            weight = sum(pe.weight_sum for pe in parts)
            if not weight > 0:
                raise AggregationError(f"entry {name!r}: non-positive total weight")
            weights[name] = weight
            bundle.entries[name] = BundleEntry(total / weight, op, weight)
        elif op is AggOp.SIMPLE_AVERAGE:
            bundle.entries[name] = BundleEntry(total / count, op)
        else:
            bundle.entries[name] = BundleEntry(total, op)

    clients = tuple(cid for p in active for cid in p.clients_folded)
    return AggregateResult(bundle=bundle, collected=collected, weights=weights,
                           counts=counts, clients=clients)


def server_update(plugin: AlgorithmPlugin, old_global: ParamBundle,
                  agg: AggregateResult) -> ParamBundle:
    """Apply the plugin's server rule after checking its required entries."""
    have = set(agg.bundle.entries) | set(agg.collected)
    missing = [n for n in plugin.required_result_entries if n not in have]
    if missing:
        raise MissingEntryError(
            f"{plugin.name}: aggregate is missing required entries {missing}")
    return plugin.server_update(old_global, agg)


def flat_aggregate(results: list[tuple[int, ParamBundle]]) -> AggregateResult:
    """Single-level reference aggregation (all results through one fold)."""
    partial = DevicePartial(device_id=0)
    for client_id, bundle in results:
        local_fold(partial, bundle, client_id)
    return global_fold([partial])
