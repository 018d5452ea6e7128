"""The client population: group structure, sample counts, sampling weights."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def compute_weights(sample_counts) -> np.ndarray:
    """Sampling weights proportional to per-client sample counts.

    p_k = N_k / sum_j N_j; every client must hold at least one sample.
    """
    counts = np.asarray(sample_counts, dtype=np.int64)
    if counts.ndim != 1 or counts.shape[0] == 0:
        raise ValueError("sample_counts must be a nonempty 1-D vector")
    if np.any(counts < 1):
        raise ValueError("every client needs at least one sample")
    return counts / float(counts.sum())


@dataclass(frozen=True)
class FederationSpec:
    """K clients partitioned into d >= 2 groups, with data-size weights.

    groups[k] is the 0-based group index of client k. Weights are always
    derived from sample_counts, never supplied, so p_k = N_k / sum N_j holds
    by construction.
    """

    groups: np.ndarray
    sample_counts: np.ndarray
    num_groups: int
    weights: np.ndarray = field(init=False)

    def __post_init__(self):
        groups = np.ascontiguousarray(self.groups, dtype=np.int64)
        counts = np.ascontiguousarray(self.sample_counts, dtype=np.int64)
        if groups.ndim != 1 or counts.shape != groups.shape:
            raise ValueError("groups and sample_counts must be aligned 1-D vectors")
        k = groups.shape[0]
        d = int(self.num_groups)
        if not 2 <= d <= k:
            raise ValueError(f"need 2 <= d <= K, got d={d}, K={k}")
        if groups.min() < 0 or groups.max() >= d:
            raise ValueError("group indices must lie in [0, d)")
        present = np.bincount(groups, minlength=d)
        if np.any(present == 0):
            missing = np.flatnonzero(present == 0).tolist()
            raise ValueError(f"groups {missing} have no clients")
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "sample_counts", counts)
        object.__setattr__(self, "num_groups", d)
        object.__setattr__(self, "weights", compute_weights(counts))

    @property
    def num_clients(self) -> int:
        return self.groups.shape[0]

    @property
    def group_sizes(self) -> np.ndarray:
        """|A_i| for each group i."""
        return np.bincount(self.groups, minlength=self.num_groups)

    def group_members(self, group: int) -> np.ndarray:
        """Client indices of one group, ascending."""
        return np.flatnonzero(self.groups == group)

    @property
    def weight_group_products(self) -> np.ndarray:
        """p_k * |A_{s_k}| per client; the denominators of the rank weights."""
        return self.weights * self.group_sizes[self.groups]

    @classmethod
    def from_group_sizes(cls, group_sizes, samples_per_client) -> "FederationSpec":
        """Contiguous group layout: the first group_sizes[0] clients are
        group 0, and so on. samples_per_client may be a scalar or a length-K
        vector."""
        sizes = np.asarray(group_sizes, dtype=np.int64)
        if np.any(sizes < 1):
            raise ValueError("every group needs at least one client")
        groups = np.repeat(np.arange(sizes.shape[0]), sizes)
        k = groups.shape[0]
        counts = np.broadcast_to(
            np.asarray(samples_per_client, dtype=np.int64), (k,)
        ).copy()
        return cls(groups=groups, sample_counts=counts, num_groups=sizes.shape[0])
