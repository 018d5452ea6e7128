import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedfair.fairness import (
    FairnessConfig,
    global_objective_direct,
    global_objective_weighted,
    group_losses,
    lambda_max,
    local_weight,
    pairwise_penalty,
    rank_coefficients,
)
from fedfair.federation import FederationSpec
from fedfair.objectives import make_quadratic


def _federation(groups, counts=None):
    groups = np.asarray(groups)
    if counts is None:
        counts = np.ones_like(groups)
    return FederationSpec(groups=groups, sample_counts=np.asarray(counts),
                          num_groups=int(groups.max()) + 1)


def _random_case(rng, max_clients=60, max_groups=6):
    d = int(rng.integers(2, max_groups + 1))
    k = int(rng.integers(d, max_clients + 1))
    groups = np.concatenate([np.arange(d), rng.integers(0, d, size=k - d)])
    rng.shuffle(groups)
    counts = rng.integers(1, 40, size=k)
    return FederationSpec(groups=groups, sample_counts=counts, num_groups=d)


class TestGroupLosses:
    def test_constant_field(self):
        fed = _federation([0, 0, 1, 2])
        np.testing.assert_array_equal(
            group_losses(np.full(4, 3.5), fed), [3.5, 3.5, 3.5]
        )

    def test_hand_means(self):
        fed = _federation([0, 0, 1])
        np.testing.assert_array_equal(
            group_losses(np.array([1.0, 3.0, 5.0]), fed), [2.0, 5.0]
        )

    def test_within_group_permutation_invariance(self):
        fed = _federation([0, 0, 0, 1, 1])
        base = np.array([1.0, 2.0, 6.0, 4.0, 5.0])
        swapped = np.array([6.0, 1.0, 2.0, 5.0, 4.0])
        np.testing.assert_array_equal(group_losses(base, fed),
                                      group_losses(swapped, fed))

    def test_nan_rejected(self):
        fed = _federation([0, 1])
        with pytest.raises(ValueError):
            group_losses(np.array([1.0, np.nan]), fed)


class TestRankCoefficients:
    def test_four_groups_strict_ordering(self):
        fed = _federation([0, 1, 2, 3])
        ranks = rank_coefficients(np.array([4.0, 3.0, 2.0, 1.0]), fed)
        np.testing.assert_array_equal(ranks, [3, 1, -1, -3])

    def test_all_tied_gives_zero(self):
        fed = _federation([0, 1, 2])
        ranks = rank_coefficients(np.array([2.0, 2.0, 2.0]), fed)
        np.testing.assert_array_equal(ranks, [0, 0, 0])

    def test_two_groups(self):
        fed = _federation([0, 0, 1])
        ranks = rank_coefficients(np.array([1.0, 2.0]), fed)
        np.testing.assert_array_equal(ranks, [-1, -1, 1])

    def test_same_group_shares_rank(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            fed = _random_case(rng)
            gl = rng.random(fed.num_groups)
            ranks = rank_coefficients(gl, fed)
            for i in range(fed.num_groups):
                members = fed.group_members(i)
                assert len(set(ranks[members].tolist())) == 1

    @given(st.integers(min_value=2, max_value=6), st.integers(min_value=0, max_value=2**31))
    @settings(max_examples=50, deadline=None)
    def test_rank_parity_and_zero_sum(self, d, seed):
        rng = np.random.default_rng(seed)
        gl = rng.random(d)
        if len(np.unique(gl)) < d:
            return  # distinct-losses property only
        fed = _federation(np.arange(d))
        ranks = rank_coefficients(gl, fed)
        assert np.all((ranks + d - 1) % 2 == 0)
        assert ranks.sum() == 0
        assert set(ranks) <= set(range(-d + 1, d, 2))


class TestLambdaMax:
    def test_four_equal_groups_of_ten(self):
        fed = _federation(np.repeat(np.arange(4), 10))
        assert lambda_max(fed) == pytest.approx((1 / 40) * 10 / 3)

    def test_two_equal_groups(self):
        fed = _federation(np.repeat(np.arange(2), 5))
        assert lambda_max(fed) == pytest.approx(0.5)

    def test_scale_invariance_in_counts(self):
        groups = np.repeat(np.arange(3), [2, 3, 5])
        counts = np.array([3, 1, 4, 1, 5, 9, 2, 6, 5, 3])
        a = lambda_max(_federation(groups, counts))
        b = lambda_max(_federation(groups, counts * 7))
        assert a == pytest.approx(b, rel=1e-15)


class TestLocalWeight:
    def test_lambda_zero_reduces_to_one(self):
        fed = _federation(np.repeat(np.arange(3), 4))
        config = FairnessConfig(0.0, fed)
        ranks = rank_coefficients(np.array([3.0, 2.0, 1.0]), fed)
        for k in range(fed.num_clients):
            assert local_weight(k, ranks, config) == 1.0

    def test_example_four_groups_of_ten(self):
        # 4 groups x 10 clients, equal data, lam = 0.05, top-loss group
        fed = _federation(np.repeat(np.arange(4), 10))
        config = FairnessConfig(0.05, fed)
        ranks = rank_coefficients(np.array([4.0, 3.0, 2.0, 1.0]), fed)
        w = local_weight(0, ranks, config)
        assert w == pytest.approx(1.0 + 0.05 * 3 / ((1 / 40) * 10))
        assert w == pytest.approx(1.6)
        assert fed.weights[0] * w == pytest.approx(0.04)

    def test_positive_across_admissible_lambdas(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            fed = _random_case(rng)
            bound = lambda_max(fed)
            gl = rng.random(fed.num_groups)
            ranks = rank_coefficients(gl, fed)
            for frac in np.arange(0.0, 1.0, 0.1):
                config = FairnessConfig(frac * bound, fed)
                weights = [local_weight(k, ranks, config)
                           for k in range(fed.num_clients)]
                assert min(weights) > 0.0

    def test_lambda_at_bound_rejected(self):
        fed = _federation(np.repeat(np.arange(2), 5))
        with pytest.raises(ValueError):
            FairnessConfig(lambda_max(fed), fed)


class TestPairwisePenalty:
    def test_equal_groups(self):
        assert pairwise_penalty(np.array([2.0, 2.0, 2.0])) == 0.0

    def test_two_groups(self):
        assert pairwise_penalty(np.array([1.0, 4.0])) == 3.0

    def test_hand_sum(self):
        assert pairwise_penalty(np.array([1.0, 2.0, 4.0])) == 6.0

    def test_zero_iff_zero_variance(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            gl = np.round(rng.random(rng.integers(2, 6)), 2)
            penalty = pairwise_penalty(gl)
            assert (penalty == 0.0) == (np.var(gl) == 0.0)


def _quadratic_ensemble(fed, rng, dim=4):
    return [
        make_quadratic(dim, float(rng.uniform(1, 15)), rng.standard_normal(dim),
                       rng_seed=int(rng.integers(2**63)),
                       offset=float(rng.uniform(0, 0.5)))
        for _ in range(fed.num_clients)
    ]


class TestObjectiveIdentity:
    def test_lambda_zero_is_plain_weighted_risk(self):
        rng = np.random.default_rng(3)
        fed = _random_case(rng, max_clients=12)
        objectives = _quadratic_ensemble(fed, rng)
        config = FairnessConfig(0.0, fed)
        theta = rng.standard_normal(4)
        losses = np.array([o.value(theta) for o in objectives])
        expected = float(fed.weights @ losses)
        assert global_objective_direct(theta, objectives, config) == pytest.approx(expected, rel=1e-14)
        assert global_objective_weighted(theta, objectives, config) == pytest.approx(expected, rel=1e-14)

    def test_equal_group_losses_drop_the_penalty(self):
        # two clients with the same objective in different groups
        fed = _federation([0, 1])
        rng = np.random.default_rng(4)
        obj = make_quadratic(3, 4.0, rng.standard_normal(3), rng_seed=5)
        objectives = [obj, obj]
        theta = rng.standard_normal(3)
        for frac in (0.0, 0.4, 0.9):
            config = FairnessConfig(frac * lambda_max(fed), fed)
            assert global_objective_direct(theta, objectives, config) == pytest.approx(
                obj.value(theta), rel=1e-12
            )

    def test_identity_fuzz_small(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            fed = _random_case(rng, max_clients=20)
            objectives = _quadratic_ensemble(fed, rng)
            lam = float(rng.uniform(0.0, 0.999)) * lambda_max(fed)
            config = FairnessConfig(lam, fed)
            theta = rng.standard_normal(4)
            direct = global_objective_direct(theta, objectives, config)
            weighted = global_objective_weighted(theta, objectives, config)
            assert abs(direct - weighted) <= 1e-10 * (1.0 + abs(direct))

    def test_individual_fairness_weight_form(self):
        # every client its own group: weights p_k (1 + lam r_k / p_k)
        rng = np.random.default_rng(7)
        k = 6
        fed = FederationSpec(groups=np.arange(k), sample_counts=rng.integers(1, 9, k),
                             num_groups=k)
        objectives = _quadratic_ensemble(fed, rng)
        lam = 0.5 * lambda_max(fed)
        config = FairnessConfig(lam, fed)
        theta = rng.standard_normal(4)
        losses = np.array([o.value(theta) for o in objectives])
        ranks = rank_coefficients(group_losses(losses, fed), fed)
        manual = float(np.sum((fed.weights + lam * ranks) * losses))
        assert global_objective_weighted(theta, objectives, config) == pytest.approx(manual, rel=1e-12)

    def test_example_coefficient_layout(self):
        # strict ordering across 4 equal groups: weights 1 +- {3,1}*lam/(10 p)
        fed = _federation(np.repeat(np.arange(4), 10))
        lam = 0.05
        config = FairnessConfig(lam, fed)
        gl = np.array([4.0, 3.0, 2.0, 1.0])
        ranks = rank_coefficients(gl, fed)
        p = 1.0 / 40.0
        expected = [1 + 3 * lam / (10 * p), 1 + lam / (10 * p),
                    1 - lam / (10 * p), 1 - 3 * lam / (10 * p)]
        for group, want in enumerate(expected):
            member = fed.group_members(group)[0]
            assert local_weight(member, ranks, config) == pytest.approx(want, rel=1e-14)

    def test_monotone_weighting(self):
        # higher group loss => no smaller weight factor, all else equal
        rng = np.random.default_rng(8)
        fed = _federation(np.repeat(np.arange(4), 3))
        config = FairnessConfig(0.5 * lambda_max(fed), fed)
        gl = np.array([0.9, 0.1, 0.5, 0.3])
        ranks = rank_coefficients(gl, fed)
        order = np.argsort(gl)  # ascending loss
        weights = [local_weight(fed.group_members(g)[0], ranks, config)
                   for g in order]
        assert all(a <= b + 1e-15 for a, b in zip(weights, weights[1:]))
