"""Bi-level personalization on top of the fair training loop.

Each round first runs the usual rank-weighted global update (E1 steps per
selected client), then lets each selected client take E2 proximal SGD steps
on its personal model v_k:

    v <- v - eta2(t) * (grad F_k(v) + lam_prox * (v - theta))

anchored at the round-start broadcast theta. Ranks never enter the personal
update; they only shape the global level. Personal states persist across
rounds and only the round's selected clients move theirs.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from fedfair import streams
from fedfair.engine import (
    BroadcastPacket,
    DivergenceError,
    EngineConfig,
    EngineError,
    RunResult,
    _check_finite,
    aggregate,
    initial_state,
    local_update,
    refresh_ranks,
    sample_clients,
)
from fedfair.fairness import FairnessConfig
from fedfair.federation import FederationSpec
from fedfair.metrics import compute_metrics
from fedfair.schedules import LrSchedule


@dataclass(frozen=True)
class DittoConfig:
    """Personalization knobs: proximal strength and the second-level loop.

    personal_steps = 0 disables personalization entirely (the global
    trajectory is then identical to the plain training loop).
    """

    lam_prox: float
    personal_steps: int
    schedule: LrSchedule

    def __post_init__(self):
        if self.lam_prox <= 0.0:
            raise ValueError("lam_prox must be positive")
        if self.personal_steps < 0:
            raise ValueError("personal_steps must be >= 0")


@dataclass
class PersonalStates:
    """Per-client personal parameter vectors, shape (K, dim)."""

    v: np.ndarray

    @classmethod
    def initial(cls, num_clients: int, theta0) -> "PersonalStates":
        theta0 = np.asarray(theta0, dtype=np.float64)
        return cls(v=np.tile(theta0, (num_clients, 1)))


@dataclass
class DittoResult(RunResult):
    personal: PersonalStates | None = None
    last_anchor: np.ndarray | None = None


def personal_update(v_start, obj, theta_anchor, lam_prox, personal_steps,
                    schedule: LrSchedule, t0: int, batch_size, rng_stream) -> np.ndarray:
    """E2 proximal SGD steps toward the anchor-regularized personal optimum."""
    if lam_prox <= 0.0:
        raise ValueError("lam_prox must be positive")
    v = np.ascontiguousarray(v_start, dtype=np.float64)
    anchor = np.ascontiguousarray(theta_anchor, dtype=np.float64)
    if batch_size is not None:
        batches = rng_stream.integers(
            0, obj.num_samples, size=(personal_steps, batch_size), dtype=np.int64
        )
    else:
        batches = None
    for i in range(personal_steps):
        if batches is not None:
            g = obj.stochastic_gradient(v, batches[i])
        else:
            g = obj.gradient(v)
        g = g + lam_prox * (v - anchor)
        v = v - schedule.eta(t0 + i) * g
        _check_finite(v, step=t0 + i)
    return v


def run_ditto_training(engine_config: EngineConfig, ditto_config: DittoConfig,
                       federation: FederationSpec, objectives, theta0,
                       v0: PersonalStates, initial_losses, *,
                       metric_objectives=None) -> DittoResult:
    """Fair global training interleaved with per-client personalization.

    Mirrors the plain loop round for round (same streams, same aggregation,
    same rank refresh from the E1-step local losses); between the local
    updates and the aggregation, each selected client advances its personal
    model with E2 proximal steps against the round-start broadcast.
    """
    if len(objectives) != federation.num_clients:
        raise ValueError("need exactly one objective per client")
    if v0.v.shape != (federation.num_clients, np.asarray(theta0).shape[0]):
        raise ValueError("personal states must be (K, dim) and match theta0")
    fconfig = FairnessConfig(engine_config.lam, federation)
    state = initial_state(theta0, initial_losses, federation)
    _check_finite(state.theta, round_index=0)

    denom = federation.weight_group_products
    result = DittoResult(theta=state.theta, records=[])
    result.personal = PersonalStates(v=v0.v.copy())
    result.last_anchor = state.theta
    wmin, wmax = math.inf, -math.inf
    e1 = engine_config.local_steps
    e2 = ditto_config.personal_steps

    for c in range(engine_config.rounds):
        srng = streams.sampling_rng(engine_config.master_seed, c)
        selected = sample_clients(
            federation, engine_config.participation, engine_config.sampling, srng
        )
        distinct = sorted(set(int(k) for k in selected))
        packet = BroadcastPacket(
            theta=state.theta,
            weight_products={
                k: engine_config.lam * state.ranks[k] / denom[k] for k in distinct
            },
        )

        updates_by_client = {}
        try:
            for k in distinct:
                weight = 1.0 + packet.weight_products[k]
                if not 0.0 < weight < 2.0:
                    raise EngineError(
                        f"client {k} weight {weight} left (0, 2) in round {c}"
                    )
                wmin = min(wmin, weight)
                wmax = max(wmax, weight)
                crng = streams.client_rng(engine_config.master_seed, c, k)
                updates_by_client[k] = local_update(
                    packet.theta, objectives[k], weight, e1,
                    engine_config.schedule, c * e1, engine_config.batch_size,
                    crng,
                )
            if e2 > 0:
                for k in distinct:
                    prng = streams.personal_rng(engine_config.master_seed, c, k)
                    result.personal.v[k] = personal_update(
                        result.personal.v[k], objectives[k], packet.theta,
                        ditto_config.lam_prox, e2, ditto_config.schedule,
                        c * e2, engine_config.batch_size, prng,
                    )
            slot_updates = [updates_by_client[int(k)] for k in selected]
            theta_bar = aggregate(
                slot_updates, federation, engine_config.sampling,
                client_indices=selected,
            )
            _check_finite(theta_bar, round_index=c)
        except DivergenceError as err:
            err.round_index = c
            raise

        if engine_config.refresh_loss_at == "local":
            end_losses = {k: objectives[k].value(th)
                          for k, th in updates_by_client.items()}
        else:
            end_losses = {k: objectives[k].value(theta_bar)
                          for k in updates_by_client}
        result.last_anchor = packet.theta
        state = dataclasses.replace(state, theta=theta_bar)
        state = refresh_ranks(state, end_losses, federation)
        state = dataclasses.replace(state, global_step=(c + 1) * e1)

        result.round_thetas.append(theta_bar)
        if (c + 1) % engine_config.metric_every == 0 or c == engine_config.rounds - 1:
            result.records.append(
                compute_metrics(c, state.global_step, theta_bar, objectives,
                                fconfig, loss_objectives=metric_objectives)
            )

    result.theta = state.theta
    result.state = state
    result.weight_range = (wmin, wmax)
    return result
