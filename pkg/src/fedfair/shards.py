"""Client-side datasets and their on-disk form.

A shard is the private data of one client: a dense feature matrix and an
aligned label vector. Shards serialize to a small self-describing binary
format (see save_shard) so partitions can be reused across runs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_MAGIC = b"FSHD"
_VERSION = 1


@dataclass(frozen=True)
class DatasetShard:
    """Features (N, m) and labels (N,) of a single client, float64."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labs = np.ascontiguousarray(self.labels, dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if labs.ndim != 1:
            raise ValueError("labels must be a 1-D vector")
        if feats.shape[0] != labs.shape[0]:
            raise ValueError(
                f"misaligned shard: {feats.shape[0]} feature rows, "
                f"{labs.shape[0]} labels"
            )
        if feats.shape[0] < 1:
            raise ValueError("a shard needs at least one sample")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labs)

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]


def save_shard(shard: DatasetShard, path) -> None:
    """Write a shard to disk.

    Layout (all little-endian): 4-byte magic "FSHD", uint32 format version,
    uint64 sample count N, uint64 feature count m, then N*m float64 features
    in row-major order, then N float64 labels.
    """
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<QQ", shard.num_samples, shard.num_features))
        fh.write(shard.features.astype("<f8").tobytes(order="C"))
        fh.write(shard.labels.astype("<f8").tobytes())


def load_shard(path) -> DatasetShard:
    """Read a shard written by save_shard."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path} is not a shard file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ValueError(f"unsupported shard format version {version}")
        n, m = struct.unpack("<QQ", fh.read(16))
        features = np.frombuffer(fh.read(8 * n * m), dtype="<f8").reshape(n, m)
        labels = np.frombuffer(fh.read(8 * n), dtype="<f8")
    return DatasetShard(features=features.copy(), labels=labels.copy())


def split_shard(shard: DatasetShard, fractions, rng) -> list[DatasetShard]:
    """Split one shard into disjoint parts by a seeded permutation.

    fractions must be positive and sum to 1; sizes are rounded so every part
    gets at least one sample. Used for the per-client train/val/test split.
    """
    fracs = np.asarray(fractions, dtype=float)
    if np.any(fracs <= 0) or abs(fracs.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must be positive and sum to 1")
    n = shard.num_samples
    if n < len(fracs):
        raise ValueError(f"cannot split {n} samples into {len(fracs)} parts")
    order = rng.permutation(n)
    bounds = np.floor(np.cumsum(fracs) * n).astype(int)
    bounds[-1] = n
    # guarantee non-empty parts
    for i in range(len(bounds)):
        lo = 0 if i == 0 else bounds[i - 1]
        if bounds[i] <= lo:
            bounds[i] = lo + 1
    parts = []
    lo = 0
    for hi in bounds:
        sel = order[lo:hi]
        parts.append(DatasetShard(shard.features[sel], shard.labels[sel]))
        lo = hi
    return parts
