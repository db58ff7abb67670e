"""Synthetic dataset generation and heterogeneous client partitioning.

The generator produces a Gaussian class-conditional mixture. The partitioner
splits it across M clients with optional Dirichlet label skew and Dirichlet
quantity skew; quantity skew is what makes per-client sample counts (and hence
per-task compute times) unequal.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ClientProfile, DataSlice, STREAM_DATA, STREAM_PARTITION, stream_rng

IID = "iid"
UNIFORM = "uniform"


class InfeasiblePartitionError(ValueError):
    """Dataset too small for the requested per-client minimum."""


@dataclass(frozen=True)
class SyntheticDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    n_features: int
    separation: float
    noise_scale: float

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        present = np.unique(self.labels)
        if len(present) != self.n_classes:
            raise ValueError("every class must have at least one sample")

    @property
    def n_samples(self) -> int:
        return int(self.labels.shape[0])


@dataclass(frozen=True)
class PartitionSpec:
    """How to split a dataset across clients.

    label_skew: Dirichlet concentration over class proportions per client,
    or "iid". quantity_skew: Dirichlet concentration over client mass, or
    "uniform". Lower concentrations mean heavier skew.
    """

    label_skew: float | str = IID
    quantity_skew: float | str = UNIFORM
    min_samples_per_client: int = 1

    def __post_init__(self) -> None:
        for name, allowed in (("label_skew", IID), ("quantity_skew", UNIFORM)):
            value = getattr(self, name)
            if isinstance(value, str):
                if value != allowed:
                    raise ValueError(f"{name} must be a positive number or {allowed!r}")
            elif not value > 0:
                raise ValueError(f"{name} concentration must be > 0, got {value!r}")
        if self.min_samples_per_client < 1:
            raise ValueError("min_samples_per_client must be >= 1")


def generate(n_samples: int, n_features: int, n_classes: int, seed: int,
             separation: float = 3.0, noise_scale: float = 1.0,
             sample_set: int = 0) -> SyntheticDataset:
    """Gaussian mixture with one unit-direction mean per class, scaled by `separation`.

    Datasets generated with the same seed share class means regardless of
    `sample_set`, so (sample_set=0, sample_set=1) form a train/held-out pair
    drawn from one distribution.
    """
    if min(n_samples, n_features, n_classes) < 1:
        raise ValueError("n_samples, n_features, n_classes must all be positive")
    if n_samples < n_classes:
        raise ValueError("need at least one sample per class")
    mean_rng = stream_rng(seed, STREAM_DATA, 0)
    means = mean_rng.standard_normal((n_classes, n_features))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    sample_rng = stream_rng(seed, STREAM_DATA, 1 + sample_set)
    labels = sample_rng.permutation(np.arange(n_samples) % n_classes).astype(np.int64)
    features = means[labels] + noise_scale * sample_rng.standard_normal((n_samples, n_features))
    return SyntheticDataset(features=features, labels=labels, n_classes=n_classes,
                            n_features=n_features, separation=separation,
                            noise_scale=noise_scale)


def _client_sizes(n: int, m: int, spec: PartitionSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.quantity_skew == UNIFORM:
        sizes = np.full(m, n // m, dtype=np.int64)
        sizes[: n % m] += 1
    else:
        mass = rng.dirichlet(np.full(m, float(spec.quantity_skew)))
        raw = mass * n
        sizes = np.floor(raw).astype(np.int64)
        # largest-remainder rounding so the sizes sum to n exactly
        shortfall = n - int(sizes.sum())
        order = np.argsort(-(raw - sizes), kind="stable")
        sizes[order[:shortfall]] += 1
    floor = spec.min_samples_per_client
    deficit = int(np.maximum(floor - sizes, 0).sum())
    sizes = np.maximum(sizes, floor)
    # pay for the floored clients by shaving the current largest one, a
    # sample at a time; feasibility (n >= m * floor) is checked by the caller
    while deficit > 0:
        k = int(np.argmax(sizes))
        assert sizes[k] > floor
        sizes[k] -= 1
        deficit -= 1
    assert int(sizes.sum()) == n
    return sizes


def partition(ds: SyntheticDataset, m: int, spec: PartitionSpec, seed: int) -> list[ClientProfile]:
    """Split `ds` into M disjoint covering client slices.

    Sizes follow the quantity-skew spec (floored at min_samples_per_client,
    deficit taken from the largest clients); class composition follows the
    label-skew spec, clipped to per-class availability.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    n = ds.n_samples
    if n < m * spec.min_samples_per_client:
        raise InfeasiblePartitionError(
            f"{n} samples cannot cover {m} clients at min {spec.min_samples_per_client}")
    rng = stream_rng(seed, STREAM_PARTITION)
    sizes = _client_sizes(n, m, spec, rng)

    if spec.label_skew == IID:
        perm = rng.permutation(n)
        bounds = np.cumsum(sizes)[:-1]
        chunks = np.split(perm, bounds)
    else:
        pools = [rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(ds.n_classes)]
        used = np.zeros(ds.n_classes, dtype=np.int64)
        chunks = []
        for size in sizes:
            props = rng.dirichlet(np.full(ds.n_classes, float(spec.label_skew)))
            want = rng.multinomial(int(size), props)
            avail = np.array([len(p) for p in pools]) - used
            take = np.minimum(want, avail)
            missing = int(size) - int(take.sum())
            while missing > 0:
                c = int(np.argmax(avail - take))
                grab = min(missing, int(avail[c] - take[c]))
                take[c] += grab
                missing -= grab
            idx = np.concatenate([pools[c][used[c]: used[c] + take[c]]
                                  for c in range(ds.n_classes)])
            used += take
            chunks.append(idx)

    profiles = []
    for cid, idx in enumerate(chunks):
        idx = np.sort(np.asarray(idx, dtype=np.int64))
        part = DataSlice(features=ds.features[idx], labels=ds.labels[idx], indices=idx)
        profiles.append(ClientProfile(client_id=cid, sample_count=len(idx),
                                      data_partition=part))
    return profiles


def export_partitions(profiles: list[ClientProfile], path: str | Path) -> None:
    """Write one `client_id<TAB>sample_index` line per assigned sample."""
    with open(path, "w", encoding="utf-8") as fh:
        for p in profiles:
            for i in p.data_partition.indices:
                fh.write(f"{p.client_id}\t{int(i)}\n")
