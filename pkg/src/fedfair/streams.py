"""Deterministic RNG stream derivation.

Every source of randomness in a run is a PCG64 generator keyed by the master
seed plus a role tag, so reruns, resumed runs, and concurrent workers all see
identical streams regardless of execution order:

    sampling_rng(seed, c)      - client selection in round c
    client_rng(seed, c, k)     - batch draws of client k in round c
    personal_rng(seed, c, k)   - personalization batch draws of client k

The tags live in the SeedSequence spawn key, so streams for different roles,
rounds, and clients are independent by construction.
"""

import numpy as np

_SAMPLING_TAG = 0xA1
_CLIENT_TAG = 0xA2
_PERSONAL_TAG = 0xA3


def sampling_rng(master_seed: int, round_index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(master_seed, spawn_key=(_SAMPLING_TAG, round_index))
    )


def client_rng(master_seed: int, round_index: int, client: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(master_seed, spawn_key=(_CLIENT_TAG, round_index, client))
    )


def personal_rng(master_seed: int, round_index: int, client: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(master_seed, spawn_key=(_PERSONAL_TAG, round_index, client))
    )
