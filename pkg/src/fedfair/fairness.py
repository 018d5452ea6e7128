"""Group losses, rank coefficients, and the fairness-regularized objective.

The global objective adds a pairwise group-loss spread penalty to the usual
weighted empirical risk:

    H(theta) = sum_k p_k F_k(theta) + lam * sum_{i<j} |L_i(theta) - L_j(theta)|

and is identically equal to a rank-weighted sum of client losses

    H(theta) = sum_k p_k (1 + lam * r_k(theta) / (p_k |A_{s_k}|)) F_k(theta)

where r_k counts, with sign, how many other groups the client's group
currently outranks in loss. Both forms are implemented and fuzz-checked
against each other; the weighted form is what the training engine uses.

Tie convention: sign(0) = 0, so exactly tied group losses contribute rank 0.
This is the only convention under which the identity above stays exact,
because tied pairs contribute |L_i - L_j| = 0 to the direct form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedfair.federation import FederationSpec


def group_losses(client_losses, federation: FederationSpec) -> np.ndarray:
    """Per-group mean of client losses, L_i = mean_{k in A_i} F_k."""
    losses = np.asarray(client_losses, dtype=np.float64)
    if losses.shape != (federation.num_clients,):
        raise ValueError(
            f"expected {federation.num_clients} client losses, got {losses.shape}"
        )
    if not np.all(np.isfinite(losses)):
        raise ValueError("client losses must be finite")
    if np.any(losses < 0.0):
        raise ValueError("client losses must be nonnegative")
    return np.array(
        [losses[federation.group_members(i)].mean() for i in range(federation.num_groups)]
    )


def rank_coefficients(group_loss_values, federation: FederationSpec) -> np.ndarray:
    """Signed loss-rank coefficient per client.

    r_k = sum over other groups j of sign(L_{s_k} - L_j); ties contribute 0.
    Clients in one group share the same value, and with all group losses
    distinct the values sweep {-d+1, -d+3, ..., d-1}.
    """
    gl = np.asarray(group_loss_values, dtype=np.float64)
    if gl.shape != (federation.num_groups,):
        raise ValueError("group loss vector has the wrong length")
    per_group = np.sign(gl[:, None] - gl[None, :]).sum(axis=1).astype(np.int64)
    return per_group[federation.groups]


def lambda_max(federation: FederationSpec) -> float:
    """Largest admissible fairness multiplier, min_k p_k |A_{s_k}| / (d-1).

    Any lam strictly below this keeps every client weight positive.
    """
    return float(np.min(federation.weight_group_products) / (federation.num_groups - 1))


@dataclass(frozen=True)
class FairnessConfig:
    """A validated fairness multiplier for a given federation."""

    lam: float
    federation: FederationSpec

    def __post_init__(self):
        bound = lambda_max(self.federation)
        if not 0.0 <= self.lam < bound:
            raise ValueError(
                f"lam must lie in [0, {bound}) for this federation, got {self.lam}"
            )


def local_weight(k: int, ranks, config: FairnessConfig) -> float:
    """Multiplier applied to client k's loss: 1 + lam * r_k / (p_k |A_{s_k}|).

    Strictly positive whenever lam < lambda_max; equals 1 when lam = 0 or the
    client's group loss is exactly median-tied (r_k = 0).
    """
    ranks = np.asarray(ranks)
    return 1.0 + config.lam * ranks[k] / config.federation.weight_group_products[k]


def pairwise_penalty(group_loss_values) -> float:
    """Spread penalty sum_{i<j} |L_i - L_j|; zero iff all groups tie."""
    gl = np.asarray(group_loss_values, dtype=np.float64)
    total = 0.0
    for i in range(gl.shape[0]):
        for j in range(i + 1, gl.shape[0]):
            total += abs(gl[i] - gl[j])
    return total


def global_objective_direct(theta, objectives, config: FairnessConfig) -> float:
    """H(theta) in its penalty form: weighted risk plus lam * spread."""
    fed = config.federation
    losses = np.array([obj.value(theta) for obj in objectives])
    gl = group_losses(losses, fed)
    return float(fed.weights @ losses) + config.lam * pairwise_penalty(gl)


def global_objective_weighted(theta, objectives, config: FairnessConfig) -> float:
    """H(theta) in its rank-weighted form, sum_k p_k w_k(theta) F_k(theta)."""
    fed = config.federation
    losses = np.array([obj.value(theta) for obj in objectives])
    gl = group_losses(losses, fed)
    ranks = rank_coefficients(gl, fed)
    coeffs = fed.weights * (
        1.0 + config.lam * ranks / fed.weight_group_products
    )
    return float(coeffs @ losses)
