"""
测试 IBSS 拟合：ELBO、方差更新、PIP 组合与阈值选择
"""

import itertools
import math
import os
import sys

import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import multivariate_normal, norm

# 添加 src 目录到路径
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from errors import ConfigError, ShapeError
from ibss import (IbssOptions, MuSusieFit, compute_elbo, estimate_sigma_sq, fit_ibss, fit_single_task,
                  pip_per_dataset, select_at_threshold)
from model import MultiTaskDataset, all_subsets, derive_pi_from_omegas
from muser import muser_posterior


def shared_signal_data(seed=0, K=2, n=200, p=50, support=(3, 17, 40), effect=1.0):
    rng = np.random.default_rng(seed)
    Xs = tuple(rng.normal(size=(n, p)) for _ in range(K))
    ys = []
    for X in Xs:
        beta = np.zeros(p)
        beta[list(support)] = effect
        ys.append(X @ beta + rng.normal(size=n))
    return MultiTaskDataset(Xs, tuple(ys))


def fixed_options(sigma_sq=1.0, sigma0_sq=0.5, **kwargs):
    return IbssOptions(estimate_sigma_sq=False, estimate_sigma0_sq=False, sigma_sq=sigma_sq,
                       sigma0_sq=sigma0_sq, **kwargs)


def exact_log_evidence(data, pw, L, sigma_sq, sigma0_sq):
    """
    枚举每个效应的取值（零效应或某个 (I, j)）得到的精确对数证据

    效应 l 为零的概率为 1 - π_φ，取 (I, j) 的概率为 π_φ π_|I|；
    给定取值后 y^(k) ~ N(0, σ²I + σ0² Σ_{l: k ∈ I_l} x_{j_l} x_{j_l}ᵀ)
    """
    choices = [(None, math.log1p(-pw.pi_phi))]
    for subset in all_subsets(data.K):
        for j in range(data.p):
            choices.append(((subset, j), math.log(pw.pi_phi) + math.log(pw.pis[subset.size - 1])))
    terms = []
    for combo in itertools.product(choices, repeat=L):
        value = sum(log_prior for _, log_prior in combo)
        for k, (X, y) in enumerate(zip(data.Xs, data.ys)):
            cov = sigma_sq * np.eye(len(y))
            for effect, _ in combo:
                if effect is not None and k in effect[0]:
                    x = X[:, effect[1]]
                    cov += sigma0_sq * np.outer(x, x)
            value += multivariate_normal.logpdf(y, mean=np.zeros(len(y)), cov=cov)
        terms.append(value)
    return float(logsumexp(terms))


class TestFitIbss:

    def test_recovers_shared_support(self):
        data = shared_signal_data()
        pw = derive_pi_from_omegas([1.1, 1.25], data.p, data.K, L=5)
        fit = fit_ibss(data, 5, pw)
        assert fit.converged
        assert fit.pip.shape == (2, 50)
        assert np.all(fit.pip[:, [3, 17, 40]] > 0.9)
        others = np.delete(fit.pip, [3, 17, 40], axis=1)
        assert np.median(others) < 0.1
        np.testing.assert_allclose(fit.beta_hat[:, [3, 17, 40]], 1.0, atol=0.3)

    def test_elbo_monotone_with_fixed_variances(self):
        data = shared_signal_data(seed=1)
        pw = derive_pi_from_omegas([1.1, 1.25], data.p, data.K, L=6)
        fit = fit_ibss(data, 6, pw, fixed_options(tol=1e-8))
        assert len(fit.elbo_trace) >= 2
        assert np.all(np.diff(fit.elbo_trace) >= -1e-8)

    def test_elbo_monotone_on_random_instances(self):
        """σ0² 固定、σ² 按闭式更新时，20 个随机小实例上每轮 ELBO 都不下降"""
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            K, n, p = 1 + seed % 3, 40, 12
            Xs = tuple(rng.normal(size=(n, p)) for _ in range(K))
            beta = np.zeros(p)
            beta[rng.choice(p, size=2, replace=False)] = rng.normal(size=2)
            data = MultiTaskDataset(Xs, tuple(X @ beta + rng.normal(size=n) for X in Xs))
            pw = derive_pi_from_omegas([1.1, 1.25, 1.4][:K], p, K, L=3)
            fit = fit_ibss(data, 3, pw, IbssOptions(tol=1e-8, estimate_sigma0_sq=False, sigma0_sq=0.5))
            assert np.all(np.diff(fit.elbo_trace) >= -1e-6), seed

    def test_elbo_below_exact_evidence(self):
        """L = 2、p = 3、K = 2 时 ELBO 不超过枚举得到的对数证据"""
        for seed in range(5):
            rng = np.random.default_rng(30 + seed)
            Xs = tuple(rng.normal(size=(8, 3)) for _ in range(2))
            data = MultiTaskDataset(Xs, tuple(X[:, 0] + rng.normal(size=8) for X in Xs))
            pw = derive_pi_from_omegas([1.1, 1.25], 3, 2, L=2)
            fit = fit_ibss(data, 2, pw, fixed_options(sigma_sq=1.0, sigma0_sq=0.8, tol=1e-10))
            evidence = exact_log_evidence(data, pw, 2, 1.0, 0.8)
            assert fit.elbo_trace[-1] <= evidence + 1e-8

    def test_converged_state_is_stable(self):
        """收敛后再多做一轮，β̂ 的变化小于 1e-6"""
        data = shared_signal_data(seed=20, p=20, support=(2, 11))
        pw = derive_pi_from_omegas([1.1, 1.25], 20, 2, L=4)
        opts = dict(estimate_sigma0_sq=False, sigma0_sq=0.5)
        fit = fit_ibss(data, 4, pw, IbssOptions(tol=1e-10, **opts))
        assert fit.converged
        again = fit_ibss(data, 4, pw, IbssOptions(tol=1e-300, max_sweeps=fit.n_sweeps + 1, **opts))
        assert again.n_sweeps <= fit.n_sweeps + 1
        np.testing.assert_allclose(again.beta_hat, fit.beta_hat, atol=1e-6)

    def test_zero_responses(self):
        """y 全为 0：至多两轮收敛，β̂ = 0，PIP 停在先验水平"""
        rng = np.random.default_rng(21)
        n, p, K, L = 30, 10, 2, 3
        data = MultiTaskDataset(tuple(rng.normal(size=(n, p)) for _ in range(K)),
                                tuple(np.zeros(n) for _ in range(K)))
        pw = derive_pi_from_omegas([1.1, 1.25], p, K, L=L)
        fit = fit_ibss(data, L, pw)
        assert fit.converged
        assert fit.n_sweeps <= 2
        assert np.all(fit.beta_hat == 0)
        odds = np.exp(pw.log_prior_odds)
        per_effect = (odds[0] + odds[1]) / (1 + p * (2 * odds[0] + odds[1]))
        np.testing.assert_allclose(fit.pip, 1 - (1 - per_effect) ** L, rtol=1e-4)

    def test_compute_elbo_matches_trace(self):
        data = shared_signal_data(seed=2)
        pw = derive_pi_from_omegas([1.1, 1.25], data.p, data.K, L=4)
        fit = fit_ibss(data, 4, pw)
        assert compute_elbo(data, fit) == pytest.approx(fit.elbo_trace[-1], rel=1e-10)

    def test_single_effect_matches_muser(self):
        """L = 1 且方差固定时 IBSS 就是一次 muSER，ELBO 等于精确对数证据"""
        rng = np.random.default_rng(3)
        Xs = tuple(rng.normal(size=(15, 6)) for _ in range(3))
        ys = tuple(X[:, 2] + rng.normal(size=15) for X in Xs)
        data = MultiTaskDataset(Xs, ys)
        pw = derive_pi_from_omegas([1.2, 1.3, 1.4], 6, 3, L=1)
        fit = fit_ibss(data, 1, pw, fixed_options(sigma_sq=0.8, sigma0_sq=1.5))
        posterior = muser_posterior(data, 0.8, 1.5, pw)
        np.testing.assert_allclose(fit.alpha[0], posterior.alpha, atol=1e-10)
        assert fit.alpha0[0] == pytest.approx(posterior.alpha0, abs=1e-10)
        assert fit.elbo_trace[-1] == pytest.approx(posterior.loglik, rel=1e-9)

    def test_null_data_selects_nothing(self):
        rng = np.random.default_rng(4)
        Xs = tuple(rng.normal(size=(100, 50)) for _ in range(2))
        data = MultiTaskDataset(Xs, tuple(rng.normal(size=100) for _ in range(2)))
        pw = derive_pi_from_omegas([1.1, 1.25], 50, 2, L=5)
        fit = fit_ibss(data, 5, pw)
        assert all(sel.size == 0 for sel in select_at_threshold(fit.pip, 0.5))
        assert fit.sigma_sq_hat == pytest.approx(1.0, rel=0.3)

    def test_column_permutation_equivariance(self):
        data = shared_signal_data(seed=5, p=20, support=(1, 12))
        perm = np.random.default_rng(6).permutation(20)
        permuted = MultiTaskDataset(tuple(X[:, perm] for X in data.Xs), data.ys)
        pw = derive_pi_from_omegas([1.1, 1.25], 20, 2, L=3)
        base = fit_ibss(data, 3, pw, fixed_options())
        other = fit_ibss(permuted, 3, pw, fixed_options())
        np.testing.assert_allclose(other.pip, base.pip[:, perm], atol=1e-8)

    def test_non_convergence_is_reported(self, caplog):
        data = shared_signal_data(seed=7)
        pw = derive_pi_from_omegas([1.1, 1.25], data.p, data.K, L=5)
        with caplog.at_level('WARNING', logger='musel.ibss'):
            fit = fit_ibss(data, 5, pw, IbssOptions(max_sweeps=1))
        assert not fit.converged
        assert fit.n_sweeps == 1
        assert any('未收敛' in record.message for record in caplog.records)

    def test_centering(self):
        data = shared_signal_data(seed=8)
        shifted = MultiTaskDataset(tuple(X + 3.0 for X in data.Xs), tuple(y + 10.0 for y in data.ys))
        pw = derive_pi_from_omegas([1.1, 1.25], data.p, data.K, L=5)
        fit = fit_ibss(shifted, 5, pw, IbssOptions(center=True))
        assert fit.centered
        assert np.all(fit.pip[:, [3, 17, 40]] > 0.9)
        assert compute_elbo(shifted, fit) == pytest.approx(fit.elbo_trace[-1], rel=1e-10)

    def test_invalid_arguments(self):
        data = shared_signal_data(seed=9, p=5, support=(0,))
        pw = derive_pi_from_omegas([1.1, 1.25], 5, 2)
        with pytest.raises(ConfigError):
            fit_ibss(data, 0, pw)
        with pytest.raises(ConfigError):
            fit_ibss(data, 2, pw, IbssOptions(tol=0.0))
        with pytest.raises(ShapeError):
            fit_ibss(data, 2, derive_pi_from_omegas([1.1], 5, 1))

    def test_options_from_config(self):
        opts = IbssOptions.from_config({"tol": 1e-3, "max_sweeps": 7, "L": 10, "threshold": 0.5})
        assert opts.tol == 1e-3 and opts.max_sweeps == 7
        assert not opts.progress


class TestVarianceAndPip:

    def test_sigma_sq_maximizes_elbo(self):
        data = shared_signal_data(seed=10, p=20, support=(2,))
        pw = derive_pi_from_omegas([1.1, 1.25], 20, 2, L=3)
        fit = fit_ibss(data, 3, pw, fixed_options(sigma_sq=2.0))
        best = estimate_sigma_sq(data, fit)
        value = compute_elbo(data, fit, best)
        assert value > compute_elbo(data, fit, best * 1.01)
        assert value > compute_elbo(data, fit, best * 0.99)

    @staticmethod
    def _null_fit(K, p, L=2, sigma_sq=1.0):
        return MuSusieFit(L=L, alpha=np.zeros((L, (1 << K) - 1, p)), alpha0=np.ones(L),
                          mu1=np.zeros((L, K, p)), sigma1_sq=np.zeros((L, K, p)), sigma0l_sq=np.ones(L),
                          kl=np.zeros(L), sigma_sq_hat=sigma_sq, beta_hat=np.zeros((K, p)),
                          pip=np.zeros((K, p)))

    def test_null_state(self):
        """零效应状态下 ELBO 即 N(0, σ²I) 下的对数似然，σ̂² = Σ‖y‖² / N"""
        data = shared_signal_data(seed=13, n=30, p=6, support=(1,))
        fit = self._null_fit(2, 6, sigma_sq=1.7)
        expected = sum(float(norm.logpdf(y, scale=math.sqrt(1.7)).sum()) for y in data.ys)
        assert compute_elbo(data, fit) == pytest.approx(expected, rel=1e-12)
        total = sum(float(y @ y) for y in data.ys)
        assert estimate_sigma_sq(data, fit) == pytest.approx(total / data.n_total, rel=1e-12)

    def test_exact_fit_state(self):
        rng = np.random.default_rng(14)
        X = rng.normal(size=(10, 3))
        data = MultiTaskDataset((X,), (X[:, 1] * 2.0,))
        fit = self._null_fit(1, 3, L=1)
        fit.alpha[0, 0, 1] = 1.0
        fit.alpha0[0] = 0.0
        fit.mu1[0, 0, 1] = 2.0
        assert estimate_sigma_sq(data, fit) == pytest.approx(0.0, abs=1e-12)

    def test_pip_matches_sampling(self):
        """PIP 等于各效应独立抽样时 (j, k) 至少被激活一次的频率"""
        rng = np.random.default_rng(15)
        L, K, p = 3, 2, 4
        raw = rng.random((L, (1 << K), p))
        raw /= raw.sum(axis=(1, 2), keepdims=True)
        fit = self._null_fit(K, p, L=L)
        fit.alpha[:] = raw[:, 1:, :]
        fit.alpha0[:] = raw[:, 0, :].sum(axis=1)
        r_hat = fit.effect_r_hat()
        draws = rng.random((200000, L, K, p)) < r_hat
        np.testing.assert_allclose(pip_per_dataset(fit), draws.any(axis=1).mean(axis=0), atol=1e-2)

    def test_pip_combination(self):
        alpha = np.full((2, 1, 1), 0.5)
        fit = MuSusieFit(L=2, alpha=alpha, alpha0=np.full(2, 0.5), mu1=np.ones((2, 1, 1)),
                         sigma1_sq=np.ones((2, 1, 1)), sigma0l_sq=np.ones(2), kl=np.zeros(2),
                         sigma_sq_hat=1.0, beta_hat=np.ones((1, 1)), pip=np.zeros((1, 1)))
        assert pip_per_dataset(fit)[0, 0] == pytest.approx(0.75)

    def test_pip_sums_subset_weights(self):
        """K = 2 时数据集 1 的激活概率 = α({1}) + α({1,2})"""
        alpha = np.array([[[0.1], [0.2], [0.3]]])
        fit = MuSusieFit(L=1, alpha=alpha, alpha0=np.array([0.4]), mu1=np.ones((1, 2, 1)),
                         sigma1_sq=np.ones((1, 2, 1)), sigma0l_sq=np.ones(1), kl=np.zeros(1),
                         sigma_sq_hat=1.0, beta_hat=np.ones((2, 1)), pip=np.zeros((2, 1)))
        np.testing.assert_allclose(pip_per_dataset(fit)[:, 0], [0.4, 0.5])

    def test_select_at_threshold(self):
        selected = select_at_threshold(np.array([[0.5, 0.49, 1.0], [0.0, 0.7, 0.2]]), 0.5)
        assert selected[0].tolist() == [0, 2]
        assert selected[1].tolist() == [1]

    @pytest.mark.parametrize('threshold', [0.0, -0.1, 1.5])
    def test_invalid_threshold(self, threshold):
        with pytest.raises(ConfigError):
            select_at_threshold(np.zeros((1, 2)), threshold)

    def test_single_task_shape(self):
        data = shared_signal_data(seed=11, p=15, support=(4,))
        pips = fit_single_task(data, 3, 1.1)
        assert pips.shape == (2, 15)
        assert np.all(pips[:, 4] > 0.9)

    def test_to_dict(self):
        data = shared_signal_data(seed=12, p=10, support=(0,))
        pw = derive_pi_from_omegas([1.1, 1.25], 10, 2, L=2)
        out = fit_ibss(data, 2, pw).to_dict(0.5)
        assert out["selected"][0] == [0]
        assert set(out) >= {"pip", "beta_hat", "sigma_sq_hat", "elbo_trace", "converged"}
