"""Federated training loop with rank-frozen fair client re-weighting.

One communication round:

1. the server samples ceil(alpha K) clients (by data-size probability with
   replacement, or uniformly without replacement),
2. broadcasts the model plus, per selected client, the single scalar
   lam * r_k / (p_k |A_{s_k}|) - never the factors separately, so a client
   learns nothing about p_k, its group size, or its rank,
3. each selected client runs E weighted SGD steps with that scalar frozen,
4. the server averages the returned parameters (mode-matched to how it
   sampled), recomputes group losses from the clients' end-of-round local
   losses (unsampled clients keep their cached loss), and refreshes ranks.

With lam = 0 every weight is exactly 1.0 and the loop is plain FedAvg; the
test suite checks that equality bitwise against an independent reference
implementation. Client update order never affects results: every client owns
an RNG stream keyed by (seed, round, client) and aggregation reduces in
ascending client-index order.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from fedfair import streams
from fedfair.fairness import (
    FairnessConfig,
    group_losses,
    rank_coefficients,
)
from fedfair.federation import FederationSpec
from fedfair.metrics import MetricsRecord, compute_metrics
from fedfair.objectives import LogisticObjective, QuadraticObjective
from fedfair.schedules import LrSchedule
from fedfair import kernels

SAMPLING_MODES = ("by-probability", "uniform")

#: iterates beyond this norm abort the run as divergent
THETA_NORM_LIMIT = 1e12


class DivergenceError(RuntimeError):
    """An iterate became non-finite or left the trust region."""

    def __init__(self, message, round_index=None, step=None):
        super().__init__(message)
        self.round_index = round_index
        self.step = step


class EngineError(RuntimeError):
    """Internal protocol violation (e.g. a client weight left (0, 2))."""


@dataclass(frozen=True)
class EngineConfig:
    """Knobs of one training run; validated eagerly."""

    rounds: int
    local_steps: int
    schedule: LrSchedule
    lam: float = 0.0
    participation: float = 1.0
    batch_size: int | None = None
    sampling: str = "by-probability"
    master_seed: int = 0
    metric_every: int = 1
    refresh_loss_at: str = "local"  # "local": F_k(theta_k^(E)); "aggregate": F_k(theta_bar)

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.local_steps < 1:
            raise ValueError("local_steps must be >= 1")
        if not 0.0 < self.participation <= 1.0:
            raise ValueError("participation must lie in (0, 1]")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be a positive integer (or None for full batch)")
        if self.sampling not in SAMPLING_MODES:
            raise ValueError(f"sampling must be one of {SAMPLING_MODES}")
        if self.lam < 0.0:
            raise ValueError("lam must be nonnegative")
        if self.metric_every < 1:
            raise ValueError("metric_every must be >= 1")
        if self.refresh_loss_at not in ("local", "aggregate"):
            raise ValueError("refresh_loss_at must be 'local' or 'aggregate'")
        if not self.schedule.halving_ok(self.local_steps):
            raise ValueError(
                "schedule decays too fast for E local steps: need "
                "eta(t) <= 2*eta(t+E); raise gamma"
            )


@dataclass(frozen=True)
class RoundState:
    """Server-side state between rounds.

    client_losses caches each client's most recent end-of-round local loss
    (seeded from the initial group losses); group_loss_cache and ranks are
    always derived from it.
    """

    theta: np.ndarray
    ranks: np.ndarray
    client_losses: np.ndarray
    group_loss_cache: np.ndarray
    round_index: int
    global_step: int


@dataclass(frozen=True)
class BroadcastPacket:
    """What the server sends: the model and one opaque scalar per client.

    weight_products[k] is lam * r_k / (p_k |A_{s_k}|); the factors are never
    serialized separately (privacy of p_k, group sizes, and ranks).
    """

    theta: np.ndarray
    weight_products: dict[int, float]


@dataclass
class RunResult:
    theta: np.ndarray
    records: list[MetricsRecord]
    round_thetas: list[np.ndarray] = field(default_factory=list)
    weight_range: tuple[float, float] = (math.inf, -math.inf)
    state: RoundState | None = None


def initial_state(theta0, initial_group_losses, federation: FederationSpec) -> RoundState:
    """Round-0 state: every client starts at its group's initial loss."""
    theta0 = np.ascontiguousarray(theta0, dtype=np.float64)
    gl = np.asarray(initial_group_losses, dtype=np.float64)
    if gl.shape != (federation.num_groups,):
        raise ValueError(
            f"need one initial loss per group ({federation.num_groups}), got {gl.shape}"
        )
    if not np.all(np.isfinite(gl)) or np.any(gl < 0.0):
        raise ValueError("initial group losses must be finite and nonnegative")
    client_losses = gl[federation.groups]
    return RoundState(
        theta=theta0,
        ranks=rank_coefficients(gl, federation),
        client_losses=client_losses,
        group_loss_cache=gl,
        round_index=0,
        global_step=0,
    )


def sample_clients(federation: FederationSpec, alpha: float, mode: str,
                   rng_stream: np.random.Generator) -> np.ndarray:
    """Select ceil(alpha K) client indices for one round.

    by-probability draws i.i.d. proportional to p_k with replacement (a
    client may fill several update slots); uniform draws without replacement.
    """
    if mode not in SAMPLING_MODES:
        raise ValueError(f"sampling must be one of {SAMPLING_MODES}")
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    m = math.ceil(alpha * federation.num_clients)
    if mode == "by-probability":
        return rng_stream.choice(
            federation.num_clients, size=m, replace=True, p=federation.weights
        )
    return rng_stream.choice(federation.num_clients, size=m, replace=False)


def _check_finite(theta, round_index=None, step=None):
    if not np.all(np.isfinite(theta)):
        raise DivergenceError(
            f"non-finite iterate (round={round_index}, step={step})",
            round_index=round_index, step=step,
        )
    norm = float(np.linalg.norm(theta))
    if norm > THETA_NORM_LIMIT:
        raise DivergenceError(
            f"iterate norm {norm:.3e} exceeds {THETA_NORM_LIMIT:.0e} "
            f"(round={round_index}, step={step})",
            round_index=round_index, step=step,
        )


def local_update(theta_start, obj, weight, local_steps, schedule: LrSchedule,
                 t0: int, batch_size, rng_stream) -> np.ndarray:
    """E steps of SGD on the weighted client loss, weight frozen throughout.

    theta^(t+1) = theta^(t) - eta(t) * weight * grad F_k(theta^(t)), with the
    minibatch drawn from rng_stream (one (E, B) draw up front) or the full
    shard when batch_size is None. Quadratic and logistic objectives run in
    the fused backend kernel; anything else takes the generic step loop.
    """
    if weight <= 0.0:
        raise ValueError("client weight must be positive")
    if local_steps < 1:
        raise ValueError("local_steps must be >= 1")
    theta_start = np.ascontiguousarray(theta_start, dtype=np.float64)
    etas = schedule.etas(t0, local_steps)
    if batch_size is not None:
        batches = rng_stream.integers(
            0, obj.num_samples, size=(local_steps, batch_size), dtype=np.int64
        )
    else:
        batches = None

    if isinstance(obj, QuadraticObjective):
        noise_rows = obj.step_noise(batches, local_steps)
        theta = kernels.quad_local_sgd(
            obj.hessian_matrix, obj.optimum, theta_start, etas, weight, noise_rows
        )
    elif isinstance(obj, LogisticObjective):
        if batches is None:
            rows = np.tile(np.arange(obj.num_samples, dtype=np.int64), (local_steps, 1))
        else:
            rows = batches
        theta = kernels.logistic_local_sgd(
            obj.shard.features, obj.shard.labels, theta_start, etas, weight,
            obj.ridge, np.ascontiguousarray(rows),
        )
    else:
        theta = theta_start.copy()
        for i in range(local_steps):
            if batches is not None:
                g = obj.stochastic_gradient(theta, batches[i])
            else:
                g = obj.gradient(theta)
            theta = theta - (etas[i] * weight) * g
            _check_finite(theta, step=t0 + i)
    _check_finite(theta, step=t0 + local_steps - 1)
    return theta


def aggregate(updates, federation: FederationSpec, mode: str,
              client_indices=None) -> np.ndarray:
    """Combine client updates, reducing in ascending client-index order.

    by-probability: plain mean over the update slots. uniform: the reweighted
    form (K / m) * sum p_k theta_k, which requires knowing which client
    produced each slot; passing no indices in uniform mode is a mode
    mismatch.
    """
    if len(updates) == 0:
        raise ValueError("cannot aggregate an empty update list")
    if mode not in SAMPLING_MODES:
        raise ValueError(f"sampling must be one of {SAMPLING_MODES}")
    m = len(updates)
    if client_indices is not None:
        client_indices = np.asarray(client_indices, dtype=np.int64)
        if client_indices.shape != (m,):
            raise ValueError("client_indices must align with updates")
        order = np.argsort(client_indices, kind="stable")
    else:
        if mode == "uniform":
            raise ValueError(
                "uniform aggregation needs the client index of every update"
            )
        order = np.arange(m)
    acc = np.zeros_like(updates[0])
    if mode == "by-probability":
        for slot in order:
            acc = acc + updates[slot]
        return acc / m
    for slot in order:
        acc = acc + federation.weights[client_indices[slot]] * updates[slot]
    return (federation.num_clients / m) * acc


def refresh_ranks(state: RoundState, end_of_round_losses: dict,
                  federation: FederationSpec) -> RoundState:
    """Fold fresh per-client losses into the cache and recompute ranks.

    Clients absent from end_of_round_losses keep their cached loss (the
    partial-participation case); the round counter advances.
    """
    client_losses = state.client_losses.copy()
    for k, loss in end_of_round_losses.items():
        loss = float(loss)
        if not math.isfinite(loss) or loss < 0.0:
            raise ValueError(f"client {k} reported an invalid loss {loss}")
        client_losses[k] = loss
    gl = group_losses(client_losses, federation)
    return RoundState(
        theta=state.theta,
        ranks=rank_coefficients(gl, federation),
        client_losses=client_losses,
        group_loss_cache=gl,
        round_index=state.round_index + 1,
        global_step=state.global_step,
    )


def run_training(config: EngineConfig, federation: FederationSpec, objectives,
                 theta0=None, initial_losses=None, *,
                 start_state: RoundState | None = None,
                 metric_objectives=None) -> RunResult:
    """Run the full communication loop and return the final model plus
    per-round metrics.

    Fully deterministic given (config, federation, objectives): all
    randomness flows through streams keyed on config.master_seed. Passing
    start_state (e.g. a loaded checkpoint) resumes an earlier run: the round
    counter continues from the stored value, so a resumed run retraces the
    exact streams of an uninterrupted one. metric_objectives, when given,
    supplies the loss columns of the metric records (e.g. held-out splits)
    while the objective/gradient columns keep tracking the trained loss.
    """
    if len(objectives) != federation.num_clients:
        raise ValueError("need exactly one objective per client")
    fconfig = FairnessConfig(config.lam, federation)
    if math.ceil(config.participation * federation.num_clients) < 1:
        raise ValueError("participation selects no clients")
    if start_state is None:
        state = initial_state(theta0, initial_losses, federation)
    else:
        state = start_state
    _check_finite(state.theta, round_index=state.round_index)

    products_denominator = federation.weight_group_products
    result = RunResult(theta=state.theta, records=[])
    wmin, wmax = math.inf, -math.inf
    first_round = state.round_index

    for c in range(first_round, first_round + config.rounds):
        srng = streams.sampling_rng(config.master_seed, c)
        selected = sample_clients(federation, config.participation, config.sampling, srng)
        distinct = sorted(set(int(k) for k in selected))
        packet = BroadcastPacket(
            theta=state.theta,
            weight_products={
                k: config.lam * state.ranks[k] / products_denominator[k]
                for k in distinct
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
                crng = streams.client_rng(config.master_seed, c, k)
                updates_by_client[k] = local_update(
                    packet.theta, objectives[k], weight, config.local_steps,
                    config.schedule, c * config.local_steps, config.batch_size,
                    crng,
                )
            slot_updates = [updates_by_client[int(k)] for k in selected]
            theta_bar = aggregate(slot_updates, federation, config.sampling,
                                  client_indices=selected)
            _check_finite(theta_bar, round_index=c)
        except DivergenceError as err:
            err.round_index = c
            raise

        if config.refresh_loss_at == "local":
            end_losses = {k: objectives[k].value(th)
                          for k, th in updates_by_client.items()}
        else:
            end_losses = {k: objectives[k].value(theta_bar)
                          for k in updates_by_client}
        state = dataclasses.replace(state, theta=theta_bar)
        state = refresh_ranks(state, end_losses, federation)
        state = dataclasses.replace(state, global_step=(c + 1) * config.local_steps)

        result.round_thetas.append(theta_bar)
        if (c + 1) % config.metric_every == 0 or c == first_round + config.rounds - 1:
            result.records.append(
                compute_metrics(c, state.global_step, theta_bar, objectives,
                                fconfig, loss_objectives=metric_objectives)
            )

    result.theta = state.theta
    result.state = state
    result.weight_range = (wmin, wmax)
    return result
