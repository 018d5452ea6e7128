"""Synthetic federations: i.i.d., label-skewed, and group-shifted partitions.

All partitioners are pure functions of their inputs and a seed; identical
calls return bitwise-identical shards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedfair.federation import FederationSpec
from fedfair.shards import DatasetShard


def synthetic_classification_pool(num_samples, num_classes, dim, rng_seed,
                                  class_separation=2.0) -> DatasetShard:
    """A labeled pool with Gaussian class clusters, for partitioner inputs."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(rng_seed)
    labels = rng.integers(0, num_classes, size=num_samples)
    centers = rng.standard_normal((num_classes, dim)) * class_separation
    features = centers[labels] + rng.standard_normal((num_samples, dim))
    return DatasetShard(features=features, labels=labels.astype(np.float64))


def partition_iid(global_pool: DatasetShard, num_clients: int, sizes,
                  rng_seed) -> list[DatasetShard]:
    """Disjoint uniform shards of the requested sizes."""
    sizes = np.asarray(sizes, dtype=np.int64)
    if sizes.shape != (num_clients,):
        raise ValueError("need one size per client")
    if np.any(sizes < 1):
        raise ValueError("shard sizes must be positive")
    total = int(sizes.sum())
    if total > global_pool.num_samples:
        raise ValueError(
            f"requested {total} samples but the pool holds {global_pool.num_samples}"
        )
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(global_pool.num_samples)
    shards = []
    start = 0
    for size in sizes:
        sel = order[start : start + size]
        shards.append(DatasetShard(global_pool.features[sel], global_pool.labels[sel]))
        start += size
    return shards


def partition_label_skew(global_pool: DatasetShard, num_clients: int,
                         classes_per_client: int, samples_per_client: int,
                         rng_seed) -> list[DatasetShard]:
    """Give each client samples from exactly classes_per_client classes.

    Class subsets are drawn uniformly without replacement per client,
    independently across clients; sample draws are without replacement
    within a client but may reuse pool rows across clients, so demand never
    exhausts the pool. The per-client sample budget is spread evenly over
    its classes (remainder to the first classes), which guarantees the label
    set has exactly the requested cardinality.
    """
    labels = global_pool.labels
    classes = np.unique(labels)
    if classes_per_client < 1 or classes_per_client > classes.shape[0]:
        raise ValueError(
            f"classes_per_client must lie in [1, {classes.shape[0]}], "
            f"got {classes_per_client}"
        )
    if samples_per_client < classes_per_client:
        raise ValueError("too few samples per client to cover every chosen class")
    rows_by_class = {c: np.flatnonzero(labels == c) for c in classes}
    base = samples_per_client // classes_per_client
    remainder = samples_per_client % classes_per_client
    for c, rows in rows_by_class.items():
        if rows.shape[0] < base + 1:
            raise ValueError(
                f"class {c} holds only {rows.shape[0]} samples; "
                f"cannot give a client {base + 1} of them without replacement"
            )
    rng = np.random.default_rng(rng_seed)
    shards = []
    for _ in range(num_clients):
        chosen = rng.choice(classes, size=classes_per_client, replace=False)
        rows = []
        for j, c in enumerate(chosen):
            take = base + (1 if j < remainder else 0)
            rows.append(rng.choice(rows_by_class[c], size=take, replace=False))
        sel = np.concatenate(rows)
        shards.append(DatasetShard(global_pool.features[sel], global_pool.labels[sel]))
    return shards


@dataclass(frozen=True)
class RegressionTask:
    """Data-generating parameters of one group: y = X w + noise."""

    coefficients: np.ndarray
    label_noise: float = 0.0
    feature_scale: float = 1.0


def partition_group_shifted(num_clients: int, group_sizes, per_group_tasks,
                            samples_per_client: int, rng_seed
                            ) -> tuple[FederationSpec, list[DatasetShard]]:
    """Clients of group i draw regression data from that group's generator.

    Groups are contiguous in client order; the returned federation carries
    the matching group labels and per-client sample counts.
    """
    sizes = np.asarray(group_sizes, dtype=np.int64)
    if int(sizes.sum()) != num_clients:
        raise ValueError("group sizes must sum to the client count")
    if sizes.shape[0] < 2:
        raise ValueError("need at least two groups")
    if np.any(sizes < 1):
        raise ValueError("every group needs at least one client")
    if len(per_group_tasks) != sizes.shape[0]:
        raise ValueError("need one generator per group")
    dims = {np.asarray(t.coefficients).shape[0] for t in per_group_tasks}
    if len(dims) != 1:
        raise ValueError("all group generators must share the feature dimension")
    dim = dims.pop()
    rng = np.random.default_rng(rng_seed)
    federation = FederationSpec.from_group_sizes(sizes, samples_per_client)
    shards = []
    for k in range(num_clients):
        task = per_group_tasks[federation.groups[k]]
        x = task.feature_scale * rng.standard_normal((samples_per_client, dim))
        y = x @ np.asarray(task.coefficients, dtype=np.float64)
        if task.label_noise > 0.0:
            y = y + task.label_noise * rng.standard_normal(samples_per_client)
        shards.append(DatasetShard(features=x, labels=y))
    return federation, shards
