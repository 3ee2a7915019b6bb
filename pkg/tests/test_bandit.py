"""Thompson-Sampling learner tests against enumeration and lstsq oracles."""
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridcharge.bandit import (BanditState, PvLearnerState, SuperArm,
                               pseudo_regret, sample_parameter,
                               select_super_arm, update_day, update_pv)


def brute_force_top_k(theta, candidates, k):
    """Best size-k subset by exhaustive enumeration (ties: lowest indices)."""
    best = None
    for combo in itertools.combinations(sorted(candidates), k):
        val = sum(theta[i] for i in combo)
        if best is None or val > best[0] + 1e-15:
            best = (val, combo)
    return set(best[1]) if best else set()


def lstsq_ridge(masks, reward_vectors, m):
    """Independent oracle for the posterior mean: solve (I + sum M M^T) x = b."""
    gram = np.eye(m)
    b = np.zeros(m)
    for mask, rew in zip(masks, reward_vectors):
        gram += np.outer(mask, mask)
        b += rew
    return np.linalg.lstsq(gram, b, rcond=None)[0]


class TestSampleParameter:
    def test_zero_scale_returns_mean(self):
        st_ = BanditState.initial(4, 0.0)
        st_.response[:] = [1.0, 2.0, 3.0, 4.0]
        st_.estimate[:] = st_.response
        rng = np.random.default_rng(0)
        assert np.array_equal(sample_parameter(st_, rng), st_.estimate)

    def test_standard_normal_mean(self):
        st_ = BanditState.initial(3, 1.0)
        rng = np.random.default_rng(1)
        draws = np.array([sample_parameter(st_, rng) for _ in range(100_000)])
        # Per-coordinate mean within 3 sigma / sqrt(n) of zero.
        assert np.all(np.abs(draws.mean(axis=0)) < 3.0 / np.sqrt(100_000))

    def test_covariance_scales_with_gram(self):
        st_ = BanditState.initial(3, 1.0)
        st_.gram *= 4.0
        rng = np.random.default_rng(2)
        draws = np.array([sample_parameter(st_, rng) for _ in range(50_000)])
        assert np.allclose(draws.var(axis=0), 0.25, atol=0.01)


class TestSelectSuperArm:
    def test_spec_example(self):
        arm = select_super_arm(np.array([0.9, 0.1, 0.5, 0.7]), {0, 1, 2, 3}, 2)
        assert set(arm.instants) == {0, 3}

    def test_k_zero(self):
        arm = select_super_arm(np.array([1.0, 2.0]), {0, 1}, 0)
        assert len(arm) == 0

    def test_all_candidates_forced(self):
        arm = select_super_arm(np.array([0.0, 0.0, -1.0, -2.0]), {2, 3}, 2)
        assert set(arm.instants) == {2, 3}

    def test_k_too_large_rejected(self):
        with pytest.raises(ValueError):
            select_super_arm(np.zeros(4), {0, 1}, 3)

    def test_tie_breaks_to_lowest_index(self):
        arm = select_super_arm(np.array([0.5, 0.5, 0.5, 0.5]), range(4), 2)
        assert arm.instants == (0, 1)

    def test_matches_enumeration_randomized(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            m = int(rng.integers(2, 13))
            theta = rng.normal(size=m)
            n_cand = int(rng.integers(1, m + 1))
            candidates = set(rng.choice(m, size=n_cand, replace=False).tolist())
            k = int(rng.integers(0, min(4, n_cand) + 1))
            arm = select_super_arm(theta, candidates, k)
            assert arm.value(theta) == pytest.approx(
                sum(theta[i] for i in brute_force_top_k(theta, candidates, k)),
                abs=1e-12)

    @given(perm_seed=st.integers(0, 2**31), data_seed=st.integers(0, 2**31))
    @settings(max_examples=30, deadline=None)
    def test_permutation_equivariance(self, perm_seed, data_seed):
        m, k = 8, 3
        rng = np.random.default_rng(data_seed)
        theta = rng.normal(size=m)
        # Strictly distinct values so the top-k set is unique.
        theta = np.sort(theta) + np.arange(m) * 1e-6
        perm = np.random.default_rng(perm_seed).permutation(m)
        base = select_super_arm(theta, range(m), k)
        permuted = select_super_arm(theta[perm], range(m), k)
        inv = np.argsort(perm)
        assert {int(inv[i]) for i in base.instants} == \
            {int(p) for p in permuted.instants}


class TestSuperArm:
    def test_mask_and_membership(self):
        arm = SuperArm((3, 1, 1))
        assert arm.instants == (1, 3)
        assert 1 in arm and 2 not in arm
        assert np.array_equal(arm.mask(5), [0, 1, 0, 1, 0])

    def test_mask_out_of_range(self):
        with pytest.raises(ValueError):
            SuperArm((7,)).mask(5)


class TestUpdates:
    def test_no_play_is_identity(self):
        st_ = BanditState.initial(4, 0.5)
        out = update_day(st_, np.zeros(4), np.zeros(4))
        assert np.array_equal(out.gram, np.eye(4))
        assert np.array_equal(out.estimate, np.zeros(4))

    def test_single_arm_ridge_algebra(self):
        st_ = BanditState.initial(3, 0.5)
        mask = np.array([0.0, 1.0, 0.0])
        rew = np.array([0.0, 0.8, 0.0])
        out = update_day(st_, mask, rew)
        # A = I + e1 e1^T  =>  theta_hat_1 = r / 2.
        assert out.estimate[1] == pytest.approx(0.4)
        assert out.estimate[0] == 0.0 and out.estimate[2] == 0.0

    def test_two_identical_plays(self):
        st_ = BanditState.initial(2, 0.5)
        mask = np.array([1.0, 0.0])
        rew = np.array([1.0, 0.0])
        out = update_day(update_day(st_, mask, rew), mask, rew)
        assert out.gram[0, 0] == 3.0
        assert out.estimate[0] == pytest.approx(2.0 / 3.0)

    def test_matches_lstsq_oracle(self):
        rng = np.random.default_rng(5)
        m = 10
        st_ = BanditState.initial(m, 0.5)
        masks, rews = [], []
        for _ in range(40):
            mask = (rng.random(m) < 0.4).astype(float)
            rew = mask * rng.normal(size=m)
            st_ = update_day(st_, mask, rew)
            masks.append(mask)
            rews.append(rew)
            assert np.allclose(st_.estimate, lstsq_ridge(masks, rews, m),
                               atol=1e-9)

    def test_rewards_off_mask_rejected(self):
        st_ = BanditState.initial(2, 0.5)
        with pytest.raises(ValueError):
            update_day(st_, np.array([1.0, 0.0]), np.array([0.5, 0.5]))

    def test_dimension_mismatch_rejected(self):
        st_ = BanditState.initial(3, 0.5)
        with pytest.raises(ValueError):
            update_day(st_, np.zeros(4), np.zeros(4))

    def test_unknown_rule_rejected(self):
        st_ = BanditState.initial(2, 0.5)
        with pytest.raises(ValueError):
            update_day(st_, np.zeros(2), np.zeros(2), rule="bogus")

    def test_per_arm_rule_diagonal(self):
        st_ = BanditState.initial(3, 0.5)
        mask = np.array([1.0, 1.0, 0.0])
        out = update_day(st_, mask, mask * 0.5, rule="per_arm")
        assert np.array_equal(out.gram, np.diag([2.0, 2.0, 1.0]))
        assert out.estimate[0] == pytest.approx(0.25)

    @given(seed=st.integers(0, 2**31))
    @settings(max_examples=20, deadline=None)
    def test_spd_preserved(self, seed):
        rng = np.random.default_rng(seed)
        m = 6
        st_ = BanditState.initial(m, 0.5)
        for _ in range(500):
            mask = (rng.random(m) < 0.5).astype(float)
            st_ = update_day(st_, mask, mask * rng.normal(size=m))
        eig = np.linalg.eigvalsh(st_.gram)
        assert eig.min() >= 1.0 - 1e-9
        assert np.allclose(st_.gram, st_.gram.T)

    def test_estimator_consistency_alpha_zero(self):
        # Stationary semi-bandit rewards theta_i + noise, per-arm updates:
        # the posterior mean converges to theta on the played coordinates.
        rng = np.random.default_rng(11)
        m = 6
        theta = rng.uniform(-0.5, 0.5, m)
        st_ = BanditState.initial(m, 0.0)
        for _ in range(1000):
            mask = (rng.random(m) < 0.5).astype(float)
            rew = mask * (theta + 0.1 * rng.normal(size=m))
            st_ = update_day(st_, mask, rew, rule="per_arm")
        assert np.max(np.abs(st_.estimate - theta)) < 0.05


class TestPvUpdates:
    def test_no_observation_is_identity(self):
        st_ = PvLearnerState.initial(3, 100.0)
        out = update_pv(st_, np.zeros(3), np.zeros(3))
        assert np.array_equal(out.gram, np.eye(3))

    def test_single_instant_convergence(self):
        st_ = PvLearnerState.initial(4, 100.0)
        mask = np.array([0.0, 0.0, 1.0, 0.0])
        p = 1500.0
        for d in range(1, 21):
            st_ = update_pv(st_, mask, mask * p)
            assert st_.estimate[2] == pytest.approx(p * d / (d + 1))

    def test_joint_observation_matches_direct_solve(self):
        st_ = PvLearnerState.initial(3, 100.0)
        mask = np.array([1.0, 1.0, 0.0])
        obs = np.array([800.0, 500.0, 0.0])
        gram, z = np.eye(3), np.zeros(3)
        for _ in range(15):
            st_ = update_pv(st_, mask, obs)
            gram += np.outer(mask, mask)
            z += obs
            assert np.allclose(st_.estimate, np.linalg.solve(gram, z))

    def test_per_arm_rule_tracks_running_mean(self):
        # With the diagonal rule each observed coordinate shrinks toward its
        # running mean even when the whole window is observed daily.
        st_ = PvLearnerState.initial(5, 100.0)
        mask = np.ones(5)
        obs = np.array([0.0, 100.0, 900.0, 100.0, 0.0])
        for _ in range(200):
            st_ = update_pv(st_, mask, obs, rule="per_arm")
        assert np.allclose(st_.estimate, obs * 200 / 201)


class TestPseudoRegret:
    def test_perfect_play_zero_regret(self):
        theta = np.array([1.0, 0.2, 0.5])
        best = SuperArm((0, 2))
        sel = [(best, theta.copy()) for _ in range(5)]
        out = pseudo_regret(theta, sel, 2)
        assert np.allclose(out["estimated"], 0.0)
        assert np.allclose(out["true"], 0.0)

    def test_single_day_example(self):
        theta = np.array([1.0, 0.0])
        sel = [(SuperArm((1,)), np.array([0.0, 0.0]))]
        out = pseudo_regret(theta, sel, 1)
        assert out["estimated"][0] == pytest.approx(1.0)
        assert out["true"][0] == pytest.approx(1.0)

    def test_true_trace_non_decreasing(self):
        rng = np.random.default_rng(9)
        theta = rng.normal(size=6)
        sel = []
        for _ in range(50):
            arm = SuperArm(tuple(rng.choice(6, size=2, replace=False).tolist()))
            sel.append((arm, rng.normal(size=6)))
        tru = pseudo_regret(theta, sel, 2)["true"]
        assert np.all(np.diff(tru) >= -1e-12)

    def test_per_day_k(self):
        theta = np.array([1.0, 0.5])
        sel = [(SuperArm((0,)), theta), (SuperArm((0, 1)), theta)]
        out = pseudo_regret(theta, sel, [1, 2])
        assert np.allclose(out["true"], 0.0)
        with pytest.raises(ValueError):
            pseudo_regret(theta, sel, [1])
