import dataclasses

import numpy as np
import pytest

from fedfair import streams
from fedfair.checkpoint import load_checkpoint, save_checkpoint
from fedfair.engine import (
    BroadcastPacket,
    DivergenceError,
    EngineConfig,
    aggregate,
    initial_state,
    local_update,
    refresh_ranks,
    run_training,
    sample_clients,
)
from fedfair.fairness import group_losses, lambda_max, rank_coefficients
from fedfair.federation import FederationSpec
from fedfair.objectives import make_least_squares, make_quadratic
from fedfair.schedules import LrSchedule
from fedfair.shards import DatasetShard

from fedavg_reference import run_fedavg


def _federation(groups, counts=None):
    groups = np.asarray(groups)
    if counts is None:
        counts = np.ones_like(groups) * 10
    return FederationSpec(groups=groups, sample_counts=np.asarray(counts),
                          num_groups=int(groups.max()) + 1)


def _noisy_quadratics(fed, rng, dim=5, sigma=0.05):
    return [
        make_quadratic(dim, float(rng.uniform(2, 12)), rng.standard_normal(dim),
                       rng_seed=int(rng.integers(2**63)),
                       offset=float(rng.uniform(0, 0.3)),
                       noise_samples=32, noise_sigma=sigma)
        for _ in range(fed.num_clients)
    ]


def _initial_losses(objectives, fed, theta0):
    losses = np.array([o.value(theta0) for o in objectives])
    return group_losses(losses, fed)


class TestSampleClients:
    def test_by_probability_frequencies(self):
        fed = _federation(np.repeat([0, 1], 5), counts=np.arange(1, 11) * 10)
        draws = np.concatenate([
            sample_clients(fed, 1.0, "by-probability", streams.sampling_rng(0, r))
            for r in range(10_000)
        ])
        freq = np.bincount(draws, minlength=10) / draws.shape[0]
        sigma = np.sqrt(fed.weights * (1 - fed.weights) / draws.shape[0])
        assert np.all(np.abs(freq - fed.weights) <= 3.0 * sigma)

    def test_minimal_cohort(self):
        fed = _federation(np.repeat([0, 1], 5))
        sel = sample_clients(fed, 0.05, "by-probability", streams.sampling_rng(1, 0))
        assert sel.shape == (1,)

    def test_stream_determinism(self):
        fed = _federation(np.repeat([0, 1], 5))
        a = sample_clients(fed, 0.5, "uniform", streams.sampling_rng(2, 3))
        b = sample_clients(fed, 0.5, "uniform", streams.sampling_rng(2, 3))
        np.testing.assert_array_equal(a, b)

    def test_uniform_no_duplicates(self):
        fed = _federation(np.repeat([0, 1], 10), counts=np.arange(1, 21))
        sel = sample_clients(fed, 0.5, "uniform", streams.sampling_rng(3, 0))
        assert len(set(sel.tolist())) == sel.shape[0]


class TestLocalUpdate:
    def test_weight_one_is_plain_sgd(self):
        rng = np.random.default_rng(0)
        obj = make_quadratic(4, 6.0, rng.standard_normal(4), rng_seed=1)
        schedule = LrSchedule("constant", 0.05)
        theta0 = rng.standard_normal(4)
        out = local_update(theta0, obj, 1.0, 5, schedule, 0, None,
                           streams.client_rng(0, 0, 0))
        th = theta0.copy()
        for _ in range(5):
            th = th - (0.05 * 1.0) * obj.gradient(th)
        np.testing.assert_array_equal(out, th)

    def test_contraction_on_quadratic(self):
        rng = np.random.default_rng(1)
        obj = make_quadratic(4, 8.0, rng.standard_normal(4), rng_seed=2, mu=1.0)
        weight = 1.3
        eta = 1.0 / (weight * obj.constants.smoothness)  # < 2/(wL)
        schedule = LrSchedule("constant", eta)
        theta = rng.standard_normal(4) + obj.optimum
        dists = [np.linalg.norm(theta - obj.optimum)]
        for _ in range(6):
            theta = local_update(theta, obj, weight, 1, schedule, 0, None,
                                 streams.client_rng(0, 0, 0))
            dists.append(np.linalg.norm(theta - obj.optimum))
        assert all(b < a for a, b in zip(dists, dists[1:]))

    def test_weight_and_step_scale_cancellation(self):
        rng = np.random.default_rng(2)
        obj = make_quadratic(3, 4.0, rng.standard_normal(3), rng_seed=3)
        theta0 = rng.standard_normal(3)
        a = local_update(theta0, obj, 0.8, 4, LrSchedule("constant", 0.05), 0,
                         None, streams.client_rng(0, 0, 0))
        b = local_update(theta0, obj, 1.6, 4, LrSchedule("constant", 0.025), 0,
                         None, streams.client_rng(0, 0, 0))
        np.testing.assert_allclose(a, b, rtol=1e-15)

    def test_divergence_aborts(self):
        obj = make_quadratic(2, 2.0, np.zeros(2), rng_seed=4)
        schedule = LrSchedule("constant", 100.0)  # way past 2/L
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(DivergenceError):
                local_update(np.ones(2), obj, 1.0, 2000, schedule, 0, None,
                             streams.client_rng(0, 0, 0))

    def test_rejects_nonpositive_weight(self):
        obj = make_quadratic(2, 2.0, np.zeros(2), rng_seed=5)
        with pytest.raises(ValueError):
            local_update(np.ones(2), obj, 0.0, 1, LrSchedule("constant", 0.1),
                         0, None, streams.client_rng(0, 0, 0))

    def test_generic_loop_matches_fused_kernel_bitwise(self):
        # the generic stepwise path and the fused kernel must agree exactly
        rng = np.random.default_rng(3)
        obj = make_quadratic(5, 7.0, rng.standard_normal(5), rng_seed=6,
                             noise_samples=16, noise_sigma=0.2)
        theta0 = rng.standard_normal(5)
        schedule = LrSchedule("inverse-t", 1.0, 8.0)
        fused = local_update(theta0, obj, 1.2, 6, schedule, 10, 4,
                             streams.client_rng(7, 0, 0))
        batches = streams.client_rng(7, 0, 0).integers(0, 16, size=(6, 4),
                                                       dtype=np.int64)
        th = theta0.copy()
        for i in range(6):
            g = obj.stochastic_gradient(th, batches[i])
            th = th - (schedule.eta(10 + i) * 1.2) * g
        np.testing.assert_array_equal(fused, th)


class TestAggregate:
    def test_single_update_unchanged(self):
        fed = _federation([0, 1])
        update = np.array([1.0, 2.0])
        np.testing.assert_array_equal(
            aggregate([update], fed, "by-probability"), update
        )

    def test_equal_updates_fixed_point(self):
        fed = _federation([0, 0, 1, 1])
        v = np.array([0.5, -1.5, 2.0])
        out = aggregate([v, v, v], fed, "by-probability", client_indices=[2, 0, 1])
        np.testing.assert_allclose(out, v, rtol=1e-15)

    def test_mode_duality_under_equal_weights(self):
        fed = _federation(np.repeat([0, 1], 3))  # equal p_k = 1/6
        rng = np.random.default_rng(4)
        updates = [rng.standard_normal(4) for _ in range(6)]
        idx = np.arange(6)
        a = aggregate(updates, fed, "by-probability", client_indices=idx)
        b = aggregate(updates, fed, "uniform", client_indices=idx)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_uniform_needs_indices(self):
        fed = _federation([0, 1])
        with pytest.raises(ValueError):
            aggregate([np.zeros(2)], fed, "uniform")

    def test_empty_rejected(self):
        fed = _federation([0, 1])
        with pytest.raises(ValueError):
            aggregate([], fed, "by-probability")


class TestRefreshRanks:
    def _state(self, fed, theta=None, losses=None):
        theta = np.zeros(3) if theta is None else theta
        losses = np.ones(fed.num_groups) if losses is None else losses
        return initial_state(theta, losses, fed)

    def test_all_equal_gives_zero_ranks(self):
        fed = _federation([0, 0, 1, 2])
        state = self._state(fed)
        new = refresh_ranks(state, {k: 2.0 for k in range(4)}, fed)
        np.testing.assert_array_equal(new.ranks, 0)

    def test_full_participation_matches_direct_computation(self):
        fed = _federation([0, 0, 1, 2])
        state = self._state(fed)
        losses = {0: 1.0, 1: 3.0, 2: 5.0, 3: 0.5}
        new = refresh_ranks(state, losses, fed)
        direct = rank_coefficients(
            group_losses(np.array([1.0, 3.0, 5.0, 0.5]), fed), fed
        )
        np.testing.assert_array_equal(new.ranks, direct)

    def test_unsampled_clients_keep_cached_losses(self):
        fed = _federation([0, 0, 1, 2])
        state = self._state(fed, losses=np.array([1.0, 2.0, 3.0]))
        new = refresh_ranks(state, {1: 9.0}, fed)
        np.testing.assert_array_equal(new.client_losses, [1.0, 9.0, 2.0, 3.0])

    def test_static_losses_fixed_point(self):
        fed = _federation([0, 1, 1, 2])
        state = self._state(fed, losses=np.array([3.0, 1.0, 2.0]))
        once = refresh_ranks(state, {}, fed)
        twice = refresh_ranks(once, {}, fed)
        np.testing.assert_array_equal(once.ranks, twice.ranks)
        np.testing.assert_array_equal(once.client_losses, twice.client_losses)
        assert twice.round_index == once.round_index + 1


class TestRunTraining:
    def _setup(self, seed=0, k=10, sigma=0.05):
        rng = np.random.default_rng(seed)
        fed = _federation(np.repeat([0, 1], k // 2),
                          counts=rng.integers(5, 30, size=k))
        objectives = _noisy_quadratics(fed, rng, sigma=sigma)
        theta0 = np.zeros(5)
        return fed, objectives, theta0, _initial_losses(objectives, fed, theta0)

    def test_zero_rounds_is_noop(self):
        fed, objectives, theta0, il = self._setup()
        config = EngineConfig(rounds=0, local_steps=3,
                              schedule=LrSchedule("constant", 0.01))
        result = run_training(config, fed, objectives, theta0, il)
        np.testing.assert_array_equal(result.theta, theta0)
        assert result.records == []

    @pytest.mark.parametrize("sampling", ["by-probability", "uniform"])
    def test_lambda_zero_equals_fedavg_reference_bitwise(self, sampling):
        fed, objectives, theta0, il = self._setup(seed=3)
        config = EngineConfig(
            rounds=12, local_steps=3, schedule=LrSchedule("inverse-t", 0.5, 6.0),
            lam=0.0, participation=0.6, batch_size=4, sampling=sampling,
            master_seed=17,
        )
        result = run_training(config, fed, objectives, theta0, il)
        ref_theta, ref_history = run_fedavg(
            fed, objectives, theta0, rounds=12, local_steps=3,
            schedule_kind="inverse-t", schedule_beta=0.5, schedule_gamma=6.0,
            participation=0.6, batch_size=4, sampling=sampling, master_seed=17,
        )
        assert len(result.round_thetas) == len(ref_history)
        for ours, theirs in zip(result.round_thetas, ref_history):
            np.testing.assert_array_equal(ours, theirs)
        np.testing.assert_array_equal(result.theta, ref_theta)

    def test_rerun_bitwise_determinism(self):
        fed, objectives, theta0, il = self._setup(seed=5)
        config = EngineConfig(
            rounds=8, local_steps=2, schedule=LrSchedule("inverse-sqrt", 0.3, 2.0),
            lam=0.4 * lambda_max(fed), participation=0.5, batch_size=2,
            master_seed=23,
        )
        a = run_training(config, fed, objectives, theta0, il)
        b = run_training(config, fed, objectives, theta0, il)
        np.testing.assert_array_equal(a.theta, b.theta)
        for ra, rb in zip(a.records, b.records):
            assert ra == rb

    def test_weights_stay_in_unit_band(self):
        fed, objectives, theta0, il = self._setup(seed=7)
        config = EngineConfig(
            rounds=15, local_steps=2, schedule=LrSchedule("inverse-t", 0.5, 4.0),
            lam=0.9 * lambda_max(fed), master_seed=3,
        )
        result = run_training(config, fed, objectives, theta0, il)
        wmin, wmax = result.weight_range
        assert 0.0 < wmin <= wmax < 2.0

    def test_frozen_ranks_within_round(self):
        # weights broadcast at round start must derive from the cached ranks,
        # not from anything recomputed mid-round: with metric cadence 1 the
        # recorded states let us recompute the expected product exactly
        fed, objectives, theta0, il = self._setup(seed=9)
        lam = 0.5 * lambda_max(fed)
        config = EngineConfig(
            rounds=5, local_steps=4, schedule=LrSchedule("inverse-t", 0.4, 8.0),
            lam=lam, master_seed=11,
        )
        result = run_training(config, fed, objectives, theta0, il)
        # replay round 0 by hand: ranks come from the initial losses
        state = initial_state(theta0, il, fed)
        sel = sample_clients(fed, 1.0, "by-probability",
                             streams.sampling_rng(11, 0))
        updates = {}
        for k in sorted(set(int(i) for i in sel)):
            w = 1.0 + lam * state.ranks[k] / fed.weight_group_products[k]
            updates[k] = local_update(theta0, objectives[k], w, 4,
                                      config.schedule, 0, None,
                                      streams.client_rng(11, 0, k))
        expected = aggregate([updates[int(i)] for i in sel], fed,
                             "by-probability", client_indices=sel)
        np.testing.assert_array_equal(result.round_thetas[0], expected)

    def test_divergence_reports_round(self):
        fed, objectives, theta0, il = self._setup(seed=11)
        config = EngineConfig(rounds=50, local_steps=50,
                              schedule=LrSchedule("constant", 50.0))
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(DivergenceError) as err:
                run_training(config, fed, objectives, theta0, il)
        assert err.value.round_index is not None

    def test_checkpoint_resume_matches_straight_run(self, tmp_path):
        fed, objectives, theta0, il = self._setup(seed=13)
        schedule = LrSchedule("inverse-t", 0.5, 6.0)
        full = run_training(
            EngineConfig(rounds=10, local_steps=3, schedule=schedule,
                         lam=0.3 * lambda_max(fed), batch_size=4, master_seed=29),
            fed, objectives, theta0, il,
        )
        first = run_training(
            EngineConfig(rounds=6, local_steps=3, schedule=schedule,
                         lam=0.3 * lambda_max(fed), batch_size=4, master_seed=29),
            fed, objectives, theta0, il,
        )
        path = tmp_path / "mid.ckpt"
        save_checkpoint(path, first.state)
        state, personal = load_checkpoint(path)
        assert personal is None
        rest = run_training(
            EngineConfig(rounds=4, local_steps=3, schedule=schedule,
                         lam=0.3 * lambda_max(fed), batch_size=4, master_seed=29),
            fed, objectives, start_state=state,
        )
        np.testing.assert_array_equal(rest.theta, full.theta)

    def test_broadcast_packet_contains_only_products(self):
        field_names = {f.name for f in dataclasses.fields(BroadcastPacket)}
        assert field_names == {"theta", "weight_products"}

    def test_schedule_too_steep_rejected(self):
        with pytest.raises(ValueError):
            EngineConfig(rounds=1, local_steps=10,
                         schedule=LrSchedule("inverse-t", 1.0, 5.0))


class TestLeastSquaresPath:
    def test_generic_loop_handles_data_quadratics(self):
        rng = np.random.default_rng(21)
        fed = _federation([0, 0, 1, 1])
        objectives = []
        for k in range(4):
            x = rng.standard_normal((40, 3))
            y = x @ rng.standard_normal(3)
            objectives.append(make_least_squares(DatasetShard(x, y)))
        theta0 = np.zeros(3)
        il = _initial_losses(objectives, fed, theta0)
        config = EngineConfig(rounds=30, local_steps=3,
                              schedule=LrSchedule("constant", 0.05),
                              lam=0.3 * lambda_max(fed), master_seed=1)
        result = run_training(config, fed, objectives, theta0, il)
        assert result.records[-1].objective_value < result.records[0].objective_value
