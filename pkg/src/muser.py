"""
多任务单效应回归（muSER）
逐协变量的 Bayes 因子、闭式后验以及 σ0² 的经验 Bayes 估计
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple
import logging

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp
from scipy.stats import norm

from errors import ConfigError, DegenerateColumnError, PriorError, ShapeError
from model import MultiTaskDataset, PriorWeights, SubsetIndex, membership_matrix, subset_sizes

logger = logging.getLogger('musel.muser')

GRID_POINTS = 32
LOG_XATOL = 1e-6
ALPHA_SPARSE_CUTOFF = 1e-12


@dataclass(frozen=True)
class UnivariateStats:
    """K × p 的单变量回归统计量"""

    beta_hat: np.ndarray
    s_sq: np.ndarray
    z: np.ndarray
    sigma_sq: float

    @property
    def K(self) -> int:
        return self.beta_hat.shape[0]

    @property
    def p(self) -> int:
        return self.beta_hat.shape[1]


@dataclass(frozen=True)
class MuSerPosterior:
    """
    单效应后验

    alpha 的第 s 行对应掩码为 s + 1 的子集；loglik 为包含零模型高斯似然在内的边际对数似然，
    log_bf_model 为其相对零模型（β = 0）的对数比值
    """

    alpha: np.ndarray
    alpha0: float
    mu1: np.ndarray
    sigma1_sq: np.ndarray
    sigma0_sq: float
    log_bf_model: float
    loglik: float

    def r_hat(self) -> np.ndarray:
        """K × p 的激活概率 Σ_{I∋k} α^I"""
        K = self.mu1.shape[0]
        return membership_matrix(K).T @ self.alpha

    def to_dict(self) -> dict:
        K = self.mu1.shape[0]
        rows, cols = np.nonzero(self.alpha > ALPHA_SPARSE_CUTOFF)
        return {
            "alpha": [{"subset": SubsetIndex(int(s) + 1, K).members, "j": int(j), "prob": float(self.alpha[s, j])}
                      for s, j in zip(rows, cols)],
            "alpha0": self.alpha0,
            "mu1": self.mu1,
            "sigma1_sq": self.sigma1_sq,
            "sigma0_sq": self.sigma0_sq,
            "loglik": self.loglik,
        }


def column_norms(Xs: Sequence[np.ndarray]) -> np.ndarray:
    """
    K × p 的 x_jᵀx_j

    异常:
        DegenerateColumnError: 存在零范数列
    """
    xtx = np.vstack([np.einsum('ij,ij->j', X, X) for X in Xs])
    zero = np.argwhere(xtx == 0)
    if zero.size:
        k, j = zero[0]
        raise DegenerateColumnError(int(k), int(j))
    return xtx


def stats_from_residuals(Xs: Sequence[np.ndarray], residuals: Sequence[np.ndarray], xtx: np.ndarray,
                         sigma_sq: float) -> UnivariateStats:
    """
    由残差直接计算单变量统计量（IBSS 内部使用，xtx 预先算好）

    参数:
        Xs: 设计矩阵
        residuals: 每个数据集的响应（或残差）
        xtx: column_norms(Xs)
        sigma_sq: 误差方差 σ²

    返回:
        UnivariateStats
    """
    if sigma_sq <= 0:
        raise ConfigError(f"σ² 必须为正，实际为 {sigma_sq}")
    xty = np.vstack([X.T @ r for X, r in zip(Xs, residuals)])
    beta_hat = xty / xtx
    s_sq = sigma_sq / xtx
    z = beta_hat / np.sqrt(s_sq)
    return UnivariateStats(beta_hat=beta_hat, s_sq=s_sq, z=z, sigma_sq=float(sigma_sq))


def univariate_stats(data: MultiTaskDataset, sigma_sq: float) -> UnivariateStats:
    """
    单变量最小二乘斜率、标准误平方和 z 值

    参数:
        data: 含响应的数据集
        sigma_sq: 误差方差 σ²

    返回:
        UnivariateStats
    """
    data.require_responses()
    return stats_from_residuals(data.Xs, data.ys, column_norms(data.Xs), sigma_sq)


def _log_bf_entries(stats: UnivariateStats, sigma0_sq: float) -> np.ndarray:
    """K × p 的单数据集对数 Bayes 因子"""
    if sigma0_sq <= 0:
        return np.zeros_like(stats.s_sq)
    ratio = sigma0_sq / stats.s_sq
    return -0.5 * np.log1p(ratio) + 0.5 * stats.z ** 2 * ratio / (1.0 + ratio)


def log_bf_table(stats: UnivariateStats, sigma0_sq: float) -> np.ndarray:
    """
    (2^K - 1) × p 的对数 Bayes 因子表，log BF(j, I) = Σ_{k∈I} log BF_k(j)

    参数:
        stats: 单变量统计量
        sigma0_sq: 效应先验方差

    返回:
        ndarray: 第 s 行对应掩码 s + 1
    """
    return membership_matrix(stats.K) @ _log_bf_entries(stats, sigma0_sq)


def log_bf(stats: UnivariateStats, j: int, subset: SubsetIndex, sigma0_sq: float) -> float:
    """单个 (j, I) 的对数 Bayes 因子"""
    entries = _log_bf_entries(stats, sigma0_sq)
    return float(sum(entries[k, j] for k in subset.members))


def _check_prior(stats: UnivariateStats, pw: PriorWeights):
    if pw.K != stats.K:
        raise ShapeError(f"先验的 K={pw.K} 与数据的 K={stats.K} 不一致")
    if pw.n_candidates != stats.p:
        raise PriorError(f"先验铺开在 {pw.n_candidates} 个协变量上，数据有 {stats.p} 个")


def sigma0_objective(stats: UnivariateStats, pw: PriorWeights, sigma0_sq: float) -> float:
    """经验 Bayes 目标函数 log Σ_{I,j} π_|I| BF(j, I)"""
    log_pis = pw.log_pis[subset_sizes(stats.K) - 1]
    table = log_bf_table(stats, sigma0_sq)
    return float(logsumexp(table + log_pis[:, None]))


def default_sigma0_bounds(residuals: Sequence[np.ndarray], fallback: float = 1.0) -> Tuple[float, float]:
    """
    σ0² 搜索区间 [1e-8·v, 100·v]，v 为残差的合并样本方差

    残差全为零时 v 取 fallback（IBSS 传入当前的 σ²）
    """
    pooled = np.concatenate([np.ravel(r) for r in residuals])
    v = float(np.var(pooled)) if pooled.size > 1 else 0.0
    if not v > 0:
        v = fallback if fallback > 0 else 1.0
    return 1e-8 * v, 100.0 * v


def estimate_sigma0_sq(stats: UnivariateStats, pw: PriorWeights, sigma_sq: Optional[float] = None,
                       bounds: Optional[Tuple[float, float]] = None) -> float:
    """
    σ0² 的经验 Bayes 估计

    先在 log σ0² 上做 32 点网格扫描，再在最优网格点的相邻区间内做有界 Brent 搜索；
    只有严格更优时才采用细化结果，平局取较小的 σ0²

    参数:
        stats: 单变量统计量
        pw: 先验参数
        sigma_sq: 没有给出 bounds 时用它确定区间
        bounds: [lo, hi]，0 ≤ lo < hi

    返回:
        float: σ0² 的估计
    """
    _check_prior(stats, pw)
    if bounds is None:
        v = sigma_sq if sigma_sq and sigma_sq > 0 else 1.0
        bounds = (1e-8 * v, 100.0 * v)
    lo, hi = float(bounds[0]), float(bounds[1])
    if not 0 <= lo < hi:
        raise PriorError(f"σ0² 搜索区间无效: [{lo}, {hi}]")

    log_pis = pw.log_pis[subset_sizes(stats.K) - 1][:, None]
    M = membership_matrix(stats.K)

    def objective(v):
        return float(logsumexp(M @ _log_bf_entries(stats, v) + log_pis))

    log_lo = math.log(lo) if lo > 0 else math.log(hi) - 30.0
    grid = np.linspace(log_lo, math.log(hi), GRID_POINTS)
    points = np.exp(grid)
    points[0] = lo if lo > 0 else points[0]
    points[-1] = hi
    values = np.array([objective(v) for v in points])
    best = int(np.argmax(values))
    best_x, best_f = float(points[best]), float(values[best])

    left = grid[max(best - 1, 0)]
    right = grid[min(best + 1, GRID_POINTS - 1)]
    if right > left:
        result = minimize_scalar(lambda g: -objective(math.exp(g)), bounds=(left, right),
                                 method='bounded', options={'xatol': LOG_XATOL})
        if result.success and -result.fun > best_f:
            best_x, best_f = math.exp(result.x), float(-result.fun)

    if lo == 0 and objective(0.0) >= best_f:
        best_x = 0.0
    return float(min(max(best_x, lo), hi))


def posterior_from_stats(stats: UnivariateStats, sigma0_sq: float, pw: PriorWeights) -> MuSerPosterior:
    """
    由统计量计算单效应后验（不含零模型高斯似然，loglik 仅为相对零模型的部分）

    参数:
        stats: 单变量统计量
        sigma0_sq: 效应先验方差
        pw: 先验参数

    返回:
        MuSerPosterior
    """
    _check_prior(stats, pw)
    sizes = subset_sizes(stats.K)
    log_odds = pw.log_prior_odds[sizes - 1][:, None]
    weights = log_bf_table(stats, sigma0_sq) + log_odds
    # 零模型权重为 log 1 = 0
    log_norm = float(np.logaddexp(logsumexp(weights), 0.0))
    alpha = np.exp(weights - log_norm)
    alpha0 = float(math.exp(-log_norm))

    if sigma0_sq > 0:
        shrink = sigma0_sq / (sigma0_sq + stats.s_sq)
        mu1 = shrink * stats.beta_hat
        sigma1_sq = shrink * stats.s_sq
    else:
        mu1 = np.zeros_like(stats.beta_hat)
        sigma1_sq = np.zeros_like(stats.s_sq)

    log_bf_model = math.log1p(-pw.pi_phi) + log_norm
    return MuSerPosterior(alpha=alpha, alpha0=alpha0, mu1=mu1, sigma1_sq=sigma1_sq,
                          sigma0_sq=float(sigma0_sq), log_bf_model=float(log_bf_model),
                          loglik=float(log_bf_model))


def null_loglik(residuals: Sequence[np.ndarray], sigma_sq: float) -> float:
    """β = 0 时的高斯对数似然 Σ_k log N(r_k; 0, σ²I)"""
    scale = math.sqrt(sigma_sq)
    return float(sum(norm.logpdf(r, scale=scale).sum() for r in residuals))


def muser_posterior(data: MultiTaskDataset, sigma_sq: float, sigma0_sq: float, pw: PriorWeights) -> MuSerPosterior:
    """
    muSER 闭式后验

    α[I, j] ∝ π_φ π_|I| BF(j, I)，α0 ∝ 1 - π_φ，μ1 = σ0²/(σ0² + s²)·β̂，σ1² = 1/(1/s² + 1/σ0²)

    参数:
        data: 含响应的数据集
        sigma_sq: 误差方差 σ²
        sigma0_sq: 效应先验方差 σ0²
        pw: 先验参数

    返回:
        MuSerPosterior
    """
    stats = univariate_stats(data, sigma_sq)
    posterior = posterior_from_stats(stats, sigma0_sq, pw)
    loglik = posterior.log_bf_model + null_loglik(data.ys, sigma_sq)
    return MuSerPosterior(alpha=posterior.alpha, alpha0=posterior.alpha0, mu1=posterior.mu1,
                          sigma1_sq=posterior.sigma1_sq, sigma0_sq=posterior.sigma0_sq,
                          log_bf_model=posterior.log_bf_model, loglik=loglik)
