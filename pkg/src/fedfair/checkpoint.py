"""Binary checkpoints of the server round state.

Layout (little-endian): magic "FCKP", uint32 version, then uint64 round
index, uint64 global step, uint64 dim, uint64 K, uint64 d, uint8 personal
flag, followed by theta (dim float64), ranks (K int64), cached client losses
(K float64), cached group losses (d float64), and, when the flag is 1, the
K*dim float64 personal parameter block in client order.

A loaded state can be handed straight back to run_training(start_state=...)
to resume: RNG streams are keyed by round index, so the resumed trajectory
is bitwise the one an uninterrupted run would have produced.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from fedfair.engine import RoundState
from fedfair.personalization import PersonalStates

_MAGIC = b"FCKP"
_VERSION = 1


def save_checkpoint(path, state: RoundState,
                    personal: PersonalStates | None = None) -> None:
    path = Path(path)
    dim = state.theta.shape[0]
    k = state.client_losses.shape[0]
    d = state.group_loss_cache.shape[0]
    if personal is not None and personal.v.shape != (k, dim):
        raise ValueError("personal states must be (K, dim)")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<QQQQQB", state.round_index, state.global_step,
                             dim, k, d, 0 if personal is None else 1))
        fh.write(state.theta.astype("<f8").tobytes())
        fh.write(state.ranks.astype("<i8").tobytes())
        fh.write(state.client_losses.astype("<f8").tobytes())
        fh.write(state.group_loss_cache.astype("<f8").tobytes())
        if personal is not None:
            fh.write(personal.v.astype("<f8").tobytes(order="C"))


def load_checkpoint(path) -> tuple[RoundState, PersonalStates | None]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        round_index, step, dim, k, d, flag = struct.unpack("<QQQQQB", fh.read(41))
        theta = np.frombuffer(fh.read(8 * dim), dtype="<f8").copy()
        ranks = np.frombuffer(fh.read(8 * k), dtype="<i8").copy()
        client_losses = np.frombuffer(fh.read(8 * k), dtype="<f8").copy()
        group_losses = np.frombuffer(fh.read(8 * d), dtype="<f8").copy()
        personal = None
        if flag == 1:
            block = np.frombuffer(fh.read(8 * k * dim), dtype="<f8").copy()
            personal = PersonalStates(v=block.reshape(k, dim))
    state = RoundState(
        theta=theta,
        ranks=ranks,
        client_losses=client_losses,
        group_loss_cache=group_losses,
        round_index=int(round_index),
        global_step=int(step),
    )
    return state, personal
