"""
测试核心模型：子集编码、r↔γ 互换、先验质量与数据集读写
"""

import itertools
import math
import os
import sys
import warnings

import numpy as np
import pandas as pd
import pytest
from scipy.optimize import fsolve

# 添加 src 目录到路径
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from errors import DataError, ModelSpaceError, PriorError, PriorOrderingWarning
from model import (GammaIndicator, MultiTaskDataset, RIndicator, SubsetIndex, all_subsets,
                   derive_pi_from_omegas, gamma_to_r, load_dataset, log_prior_gamma, membership_matrix,
                   omegas_from_prior_masses, r_to_gamma, save_dataset, subset_sizes)


class TestSubsets:

    def test_all_subsets_in_mask_order(self):
        subsets = all_subsets(3)
        assert [s.mask for s in subsets] == list(range(1, 8))
        assert subsets[6].members == (0, 1, 2)

    def test_membership_matrix(self):
        np.testing.assert_array_equal(membership_matrix(2), [[1, 0], [0, 1], [1, 1]])
        np.testing.assert_array_equal(subset_sizes(2), [1, 1, 2])

    def test_empty_subset_rejected(self):
        with pytest.raises(ModelSpaceError):
            SubsetIndex(0, 2)
        with pytest.raises(ModelSpaceError):
            SubsetIndex(4, 2)

    def test_from_members(self):
        subset = SubsetIndex.from_members([0, 2], 3)
        assert subset.mask == 5
        assert 2 in subset and 1 not in subset
        assert len(subset) == 2


class TestIndicators:

    def test_r_to_gamma(self):
        """共享的列落到 {0,1}，私有的列落到单元素子集"""
        r = RIndicator(np.array([[1, 0, 0], [1, 1, 0]]))
        gamma = r_to_gamma(r)
        assert gamma.pairs == ((2, 1), (3, 0))
        assert gamma_to_r(gamma) == r

    def test_unactivated_column_has_no_bits(self):
        gamma = r_to_gamma(RIndicator(np.zeros((2, 4))))
        assert gamma.size == 0
        assert not gamma.to_dense().any()

    def test_gamma_exclusivity(self):
        gamma = GammaIndicator(2, 3, ((1, 0), (3, 0)))
        assert not gamma.is_exclusive()
        with pytest.raises(ModelSpaceError):
            gamma_to_r(gamma)

    def test_model_space_size(self):
        r = RIndicator(np.array([[1, 1, 0], [0, 1, 1]]))
        assert r.n_active_columns() == 3
        assert r.in_model_space(3)
        assert not r.in_model_space(2)

    def test_gamma_json(self):
        gamma = GammaIndicator(3, 5, ((7, 4), (1, 2)))
        assert GammaIndicator.from_json(gamma.to_json()) == gamma

    def test_every_r_maps_back(self):
        """K = p = 3 时全部 512 个 r 经 γ 还原为自身"""
        shifts = np.arange(9)
        for code in range(1 << 9):
            r = RIndicator(((code >> shifts) & 1).reshape(3, 3))
            assert gamma_to_r(r_to_gamma(r)) == r

    def test_every_exclusive_gamma_maps_back(self):
        """K = 2、p = 3 时每列取 无 / {0} / {1} / {0,1}，共 64 个 γ"""
        seen = set()
        for choice in itertools.product(range(4), repeat=3):
            gamma = GammaIndicator(2, 3, tuple((mask, j) for j, mask in enumerate(choice) if mask))
            assert r_to_gamma(gamma_to_r(gamma)) == gamma
            seen.add(gamma.pairs)
        assert len(seen) == 64


class TestPriorWeights:

    def test_full_pi_vector_sums_to_one(self):
        for K, omegas in [(2, [1.1, 1.25]), (5, [1.4, 1.55, 1.7, 1.85, 2.0])]:
            pw = derive_pi_from_omegas(omegas, 600, K)
            assert abs(pw.full_pi_sum() - 1.0) <= 1e-12

    def test_prior_odds_identity(self):
        """π_φ π_k / (1 - π_φ) = p^(-ω_k)"""
        p = 600
        pw = derive_pi_from_omegas([1.1, 1.25], p, 2)
        for k, omega in enumerate(pw.omegas):
            odds = pw.pi_phi * pw.pis[k] / (1 - pw.pi_phi)
            assert odds == pytest.approx(p ** -omega, rel=1e-12)
        np.testing.assert_allclose(pw.log_prior_odds, -np.array([1.1, 1.25]) * math.log(p))

    def test_odds_do_not_depend_on_candidate_count(self):
        full = derive_pi_from_omegas([1.5, 2.0], 50, 2)
        small = derive_pi_from_omegas([1.5, 2.0], 50, 2, n_candidates=7)
        np.testing.assert_allclose(small.log_prior_odds, full.log_prior_odds)
        for pw in (small, full.for_candidates(7)):
            odds = pw.pi_phi * np.array(pw.pis) / (1 - pw.pi_phi)
            np.testing.assert_allclose(odds, 50.0 ** -np.array([1.5, 2.0]), rtol=1e-12)
            assert abs(pw.full_pi_sum() - 1.0) <= 1e-12

    def test_matches_numerical_solve(self):
        """π_φ、π_1、π_2 与直接求解几率约束和归一化约束的结果一致"""
        p, omegas = 10, np.array([1.0, 1.5])

        def equations(x):
            pi_phi, pi1, pi2 = x
            return [pi_phi * pi1 / (1 - pi_phi) - p ** -omegas[0],
                    pi_phi * pi2 / (1 - pi_phi) - p ** -omegas[1],
                    2 * p * pi1 + p * pi2 - 1.0]

        solved = fsolve(equations, [0.5, 0.04, 0.02], xtol=1e-14)
        pw = derive_pi_from_omegas(omegas, p, 2)
        np.testing.assert_allclose([pw.pi_phi, *pw.pis], solved, rtol=1e-10)

    def test_increasing_pi_rejected(self):
        with pytest.raises(PriorError):
            derive_pi_from_omegas([2.0, 1.0], 100, 2)

    def test_wrong_length_rejected(self):
        with pytest.raises(PriorError):
            derive_pi_from_omegas([1.1, 1.2, 1.3], 100, 2)

    def test_nonpositive_omega_rejected(self):
        with pytest.raises(PriorError):
            derive_pi_from_omegas([0.0, 1.0], 100, 2)

    def test_ordering_violation_warns(self):
        with pytest.warns(PriorOrderingWarning):
            derive_pi_from_omegas([1.0, 2.5], 100, 2)

    def test_ordering_respected_is_silent(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error", PriorOrderingWarning)
            derive_pi_from_omegas([1.1, 1.25], 600, 2)

    def test_single_dataset_pi_phi(self):
        p, omega = 200, 1.3
        pw = derive_pi_from_omegas([omega], p, 1)
        mass = p ** (1 - omega)
        assert pw.pi_phi == pytest.approx(mass / (1 + mass), rel=1e-12)
        assert pw.pis[0] == pytest.approx(1 / p, rel=1e-12)

    def test_omegas_from_prior_masses(self):
        p = 600
        omegas = omegas_from_prior_masses([0.5, 1.0], [1.1, 1.25], p)
        assert p ** -omegas[0] == pytest.approx(0.5 * p ** -1.1, rel=1e-12)
        assert omegas[1] == pytest.approx(1.25)


class TestLogPriorGamma:

    def test_single_effect_prior_normalizes(self):
        """L = 1 时所有模型的先验概率之和为 1"""
        K, p = 2, 4
        pw = derive_pi_from_omegas([1.1, 1.25], p, K, L=1)
        total = math.exp(log_prior_gamma(GammaIndicator(K, p), pw))
        for subset in all_subsets(K):
            for j in range(p):
                total += math.exp(log_prior_gamma(GammaIndicator(K, p, ((subset.mask, j),)), pw))
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_falling_factorial_term(self):
        K, p, L = 2, 5, 3
        pw = derive_pi_from_omegas([1.1, 1.25], p, K, L=L)
        gamma = GammaIndicator(K, p, ((1, 0), (3, 2)))
        expected = (math.log(3 * 2) + (L - 2) * math.log1p(-pw.pi_phi)
                    + 2 * math.log(pw.pi_phi) + math.log(pw.pis[0]) + math.log(pw.pis[1]))
        assert log_prior_gamma(gamma, pw) == pytest.approx(expected, rel=1e-12)

    def test_merging_duplicated_columns(self):
        """
        两个完全相同的协变量分别在数据集 0、1 中激活，与合并为 {0,1} 上的一次激活相比，
        先验比为 p^(2ω_1 - ω_2) / (L - 1)
        """
        p, L = 600, 3
        omegas = [1.1, 1.25]
        pw = derive_pi_from_omegas(omegas, p, 2, L=L)
        split = GammaIndicator(2, p, ((1, 4), (2, 5)))
        merged = GammaIndicator(2, p, ((3, 4),))
        log_ratio = log_prior_gamma(merged, pw) - log_prior_gamma(split, pw)
        expected = (2 * omegas[0] - omegas[1]) * math.log(p) - math.log(L - 1)
        assert log_ratio == pytest.approx(expected, rel=1e-10)
        assert log_ratio > 0

    def test_too_many_effects_rejected(self):
        pw = derive_pi_from_omegas([1.1, 1.25], 5, 2, L=1)
        with pytest.raises(ModelSpaceError):
            log_prior_gamma(GammaIndicator(2, 5, ((1, 0), (2, 1))), pw)


class TestDataset:

    def test_mismatched_columns(self):
        with pytest.raises(DataError):
            MultiTaskDataset((np.zeros((3, 2)), np.zeros((3, 3))))

    def test_non_finite_rejected(self):
        X = np.ones((3, 2))
        X[1, 1] = np.nan
        with pytest.raises(DataError):
            MultiTaskDataset((X,))

    def test_response_length_mismatch(self):
        with pytest.raises(DataError):
            MultiTaskDataset((np.ones((3, 2)),), (np.ones(4),))

    def test_counts(self):
        data = MultiTaskDataset((np.ones((3, 2)), np.ones((5, 2))), (np.ones(3), np.ones(5)))
        assert data.K == 2 and data.p == 2
        assert data.ns == (3, 5) and data.n_total == 8

    def test_centered(self):
        rng = np.random.default_rng(0)
        data = MultiTaskDataset((rng.normal(size=(6, 3)) + 5,), (rng.normal(size=6) + 2,)).centered()
        np.testing.assert_allclose(data.Xs[0].mean(axis=0), 0, atol=1e-12)
        assert abs(data.ys[0].mean()) < 1e-12

    def test_node_regression(self):
        X = np.arange(12.0).reshape(4, 3)
        data = MultiTaskDataset((X, X + 1))
        regression = data.node_regression(2, [0, 1])
        np.testing.assert_array_equal(regression.ys[1], X[:, 2] + 1)
        assert regression.p == 2

    def test_save_and_load(self, tmp_path):
        rng = np.random.default_rng(1)
        data = MultiTaskDataset((rng.normal(size=(5, 3)), rng.normal(size=(4, 3))),
                                (rng.normal(size=5), rng.normal(size=4)))
        save_dataset(data, tmp_path / "ds", column_names=["a", "b", "c"])
        loaded = load_dataset(tmp_path / "ds")
        for X, Y in zip(data.Xs, loaded.Xs):
            np.testing.assert_array_equal(X, Y)
        np.testing.assert_array_equal(data.ys[1], loaded.ys[1])
        assert loaded.column_names == ("a", "b", "c")

    def test_load_without_manifest(self, tmp_path):
        for k in (1, 2):
            pd.DataFrame(np.ones((3, 2)) * k).to_csv(tmp_path / f"X_{k}.csv", header=False, index=False)
        data = load_dataset(tmp_path)
        assert data.K == 2
        assert not data.has_responses

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "nope")

    def test_multi_column_response_rejected(self, tmp_path):
        pd.DataFrame(np.ones((3, 2))).to_csv(tmp_path / "X_1.csv", header=False, index=False)
        pd.DataFrame(np.ones((3, 2))).to_csv(tmp_path / "y_1.csv", header=False, index=False)
        with pytest.raises(DataError):
            load_dataset(tmp_path)
