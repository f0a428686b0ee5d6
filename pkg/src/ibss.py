"""
迭代 Bayes 逐步选择（IBSS）
在残差上轮流拟合 L 个 muSER 单效应，更新方差分量并跟踪 ELBO
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple
import logging

import numpy as np
from tqdm import tqdm

from errors import ConfigError, ShapeError
from model import MultiTaskDataset, PriorWeights, derive_pi_from_omegas, membership_matrix
from muser import (MuSerPosterior, column_norms, default_sigma0_bounds, estimate_sigma0_sq,
                   null_loglik, posterior_from_stats, stats_from_residuals)

logger = logging.getLogger('musel.ibss')


@dataclass
class IbssOptions:
    """IBSS 选项；sigma_sq / sigma0_sq 在对应估计关闭时为固定值，否则只作初值"""

    tol: float = 1e-4
    max_sweeps: int = 200
    estimate_sigma_sq: bool = True
    estimate_sigma0_sq: bool = True
    sigma_sq: Optional[float] = None
    sigma0_sq: Optional[float] = None
    scaled_prior_variance: float = 0.2
    min_sigma_sq: float = 1e-10
    sigma0_bounds: Optional[Tuple[float, float]] = None
    center: bool = False
    progress: bool = False

    @classmethod
    def from_config(cls, section: dict, progress: bool = False) -> "IbssOptions":
        """从配置节（如 fit）构造选项，忽略无关的键"""
        names = {f for f in cls.__dataclass_fields__}
        kwargs = {key: value for key, value in section.items() if key in names}
        kwargs['progress'] = progress
        return cls(**kwargs)

    def validate(self):
        if self.tol <= 0:
            raise ConfigError(f"tol 必须为正，实际为 {self.tol}")
        if self.max_sweeps < 1:
            raise ConfigError(f"max_sweeps 必须 ≥ 1，实际为 {self.max_sweeps}")
        if self.sigma_sq is not None and self.sigma_sq <= 0:
            raise ConfigError(f"σ² 必须为正，实际为 {self.sigma_sq}")
        if self.sigma0_sq is not None and self.sigma0_sq < 0:
            raise ConfigError(f"σ0² 不能为负，实际为 {self.sigma0_sq}")


@dataclass
class MuSusieFit:
    """
    muSuSiE 拟合结果

    alpha: L × (2^K - 1) × p；mu1、sigma1_sq: L × K × p；beta_hat、pip: K × p
    """

    L: int
    alpha: np.ndarray
    alpha0: np.ndarray
    mu1: np.ndarray
    sigma1_sq: np.ndarray
    sigma0l_sq: np.ndarray
    kl: np.ndarray
    sigma_sq_hat: float
    beta_hat: np.ndarray
    pip: np.ndarray
    elbo_trace: List[float] = field(default_factory=list)
    converged: bool = False
    n_sweeps: int = 0
    centered: bool = False

    @property
    def K(self) -> int:
        return self.mu1.shape[1]

    @property
    def p(self) -> int:
        return self.mu1.shape[2]

    def effect_r_hat(self) -> np.ndarray:
        """L × K × p 的每个效应的激活概率"""
        return np.einsum('sk,lsj->lkj', membership_matrix(self.K), self.alpha)

    def to_dict(self, threshold: float = 0.5) -> dict:
        return {
            "L": self.L,
            "K": self.K,
            "p": self.p,
            "pip": self.pip,
            "selected": [sel.tolist() for sel in select_at_threshold(self.pip, threshold)],
            "threshold": threshold,
            "beta_hat": self.beta_hat,
            "sigma_sq_hat": self.sigma_sq_hat,
            "sigma0l_sq": self.sigma0l_sq,
            "alpha0": self.alpha0,
            "elbo_trace": self.elbo_trace,
            "converged": self.converged,
            "n_sweeps": self.n_sweeps,
        }


def _posterior_moments(r_hat: np.ndarray, mu1: np.ndarray, sigma1_sq: np.ndarray):
    """单效应一阶矩与二阶矩 E[b]、E[b²]"""
    return r_hat * mu1, r_hat * (mu1 ** 2 + sigma1_sq)


def _expected_rss(Xs, ys, xtx, r_hat, mu1, sigma1_sq) -> float:
    """
    E_q Σ_k ‖y_k - X_k Σ_l b_l‖²

    = ‖y - Xβ̄‖² - Σ_l ‖X E b_l‖² + Σ_l xtxᵀ E b_l²（各效应在变分族下独立）
    """
    Eb, Eb2 = _posterior_moments(r_hat, mu1, sigma1_sq)
    total = 0.0
    for k, (X, y) in enumerate(zip(Xs, ys)):
        fitted_l = X @ Eb[:, k, :].T
        resid = y - fitted_l.sum(axis=1)
        total += resid @ resid - np.einsum('il,il->', fitted_l, fitted_l) + np.sum(xtx[k] * Eb2[:, k, :])
    return float(total)


def effect_kl(Xs: Sequence[np.ndarray], residuals: Sequence[np.ndarray], xtx: np.ndarray,
              posterior: MuSerPosterior, sigma_sq: float) -> float:
    """
    KL(q_l ‖ g_l) = -log 单效应证据 + E_q 对数似然

    参数:
        Xs: 设计矩阵
        residuals: 拟合该效应时使用的残差 r̄_l
        xtx: 列范数平方
        posterior: 该效应的后验（loglik 已包含零模型似然）
        sigma_sq: 拟合时使用的 σ²

    返回:
        float: KL 散度
    """
    K = xtx.shape[0]
    r_hat = membership_matrix(K).T @ posterior.alpha
    Eb, Eb2 = _posterior_moments(r_hat, posterior.mu1, posterior.sigma1_sq)
    n_total = sum(len(r) for r in residuals)
    e_loglik = -0.5 * n_total * math.log(2 * math.pi * sigma_sq)
    for k, (X, r) in enumerate(zip(Xs, residuals)):
        e_loglik -= 0.5 / sigma_sq * (r @ r - 2 * r @ (X @ Eb[k]) + xtx[k] @ Eb2[k])
    return float(-posterior.loglik + e_loglik)


def _prepare(data: MultiTaskDataset, center: bool):
    data.require_responses()
    if center:
        data = data.centered()
    return data.Xs, data.ys, column_norms(data.Xs)


def compute_elbo(data: MultiTaskDataset, fit: MuSusieFit, sigma_sq: Optional[float] = None) -> float:
    """
    ELBO = -(N/2) log(2πσ²) - E_q‖y - Σ_l b_l‖² / (2σ²) - Σ_l KL_l

    参数:
        data: 拟合时使用的数据集
        fit: 拟合状态
        sigma_sq: σ²，默认使用 fit.sigma_sq_hat

    返回:
        float: ELBO
    """
    Xs, ys, xtx = _prepare(data, fit.centered)
    sigma_sq = fit.sigma_sq_hat if sigma_sq is None else sigma_sq
    rss = _expected_rss(Xs, ys, xtx, fit.effect_r_hat(), fit.mu1, fit.sigma1_sq)
    return _elbo(data.n_total, rss, sigma_sq, fit.kl)


def _elbo(n_total: int, rss: float, sigma_sq: float, kl: np.ndarray) -> float:
    return float(-0.5 * n_total * math.log(2 * math.pi * sigma_sq) - 0.5 * rss / sigma_sq - np.sum(kl))


def estimate_sigma_sq(data: MultiTaskDataset, fit: MuSusieFit) -> float:
    """
    使 ELBO 最大的 σ̂² = E_q[Σ_k ‖y_k - X_k Σ_l b_l‖²] / Σ_k n_k

    参数:
        data: 拟合时使用的数据集
        fit: 拟合状态

    返回:
        float: σ̂²（未加下限）
    """
    Xs, ys, xtx = _prepare(data, fit.centered)
    rss = _expected_rss(Xs, ys, xtx, fit.effect_r_hat(), fit.mu1, fit.sigma1_sq)
    return max(rss, 0.0) / data.n_total


def pip_per_dataset(fit: MuSusieFit) -> np.ndarray:
    """r̂_j^(k) = 1 - Π_l (1 - r̂_lj^(k))"""
    return 1.0 - np.prod(1.0 - fit.effect_r_hat(), axis=0)


def select_at_threshold(pips: np.ndarray, threshold: float = 0.5) -> List[np.ndarray]:
    """
    按阈值选出每个数据集的协变量 {j : r̂_j^(k) ≥ threshold}

    参数:
        pips: K × p 的 PIP 矩阵
        threshold: 阈值，(0, 1]

    返回:
        list: 每个数据集一个下标数组
    """
    if not 0 < threshold <= 1:
        raise ConfigError(f"阈值必须在 (0, 1] 内，实际为 {threshold}")
    return [np.flatnonzero(row >= threshold) for row in np.atleast_2d(pips)]


def fit_ibss(data: MultiTaskDataset, L: int, pw: PriorWeights, opts: Optional[IbssOptions] = None) -> MuSusieFit:
    """
    用 IBSS 拟合 muSuSiE

    每轮依次对 l = 1..L：构造去掉其余效应后的残差，估计 σ0l²，计算 muSER 后验并更新 β̂_l；
    一轮结束后重估 σ²，再计算 ELBO，|ΔELBO| < tol 时停止

    参数:
        data: 含响应的数据集
        L: 单效应个数
        pw: 先验参数
        opts: IBSS 选项

    返回:
        MuSusieFit: 达到 max_sweeps 仍未收敛时 converged 为 False
    """
    opts = opts or IbssOptions()
    opts.validate()
    if L < 1:
        raise ConfigError(f"L 必须 ≥ 1，实际为 {L}")
    if pw.K != data.K:
        raise ShapeError(f"先验的 K={pw.K} 与数据的 K={data.K} 不一致")
    Xs, ys, xtx = _prepare(data, opts.center)
    K, p, S = data.K, data.p, (1 << data.K) - 1
    M = membership_matrix(K)
    n_total = data.n_total

    pooled = np.concatenate(ys)
    var_y = float(np.var(pooled)) if pooled.size > 1 else 0.0
    if not var_y > 0:
        var_y = 1.0
    if opts.sigma_sq is not None:
        sigma_sq = opts.sigma_sq
    elif opts.estimate_sigma_sq and not np.any(pooled):
        # 响应全为 0 时 σ² 的估计就是下限
        sigma_sq = opts.min_sigma_sq
    else:
        sigma_sq = var_y
    sigma0_init = opts.sigma0_sq if opts.sigma0_sq is not None else opts.scaled_prior_variance * var_y

    alpha = np.zeros((L, S, p))
    alpha0 = np.ones(L)
    mu1 = np.zeros((L, K, p))
    sigma1_sq = np.zeros((L, K, p))
    sigma0l_sq = np.full(L, sigma0_init)
    kl = np.zeros(L)
    # 每个效应在每个数据集上的拟合值 X_k E b_l
    fitted = [np.zeros((len(y), L)) for y in ys]

    elbo_trace: List[float] = []
    converged = False
    sweeps = tqdm(range(opts.max_sweeps), disable=not opts.progress, desc="IBSS", leave=False)
    n_sweeps = 0
    for sweep in sweeps:
        n_sweeps = sweep + 1
        for l in range(L):
            residuals = [y - F.sum(axis=1) + F[:, l] for y, F in zip(ys, fitted)]
            stats = stats_from_residuals(Xs, residuals, xtx, sigma_sq)
            if opts.estimate_sigma0_sq:
                bounds = opts.sigma0_bounds or default_sigma0_bounds(residuals, fallback=sigma_sq)
                sigma0l_sq[l] = estimate_sigma0_sq(stats, pw, sigma_sq, bounds)
            posterior = posterior_from_stats(stats, sigma0l_sq[l], pw)
            posterior = MuSerPosterior(alpha=posterior.alpha, alpha0=posterior.alpha0, mu1=posterior.mu1,
                                       sigma1_sq=posterior.sigma1_sq, sigma0_sq=posterior.sigma0_sq,
                                       log_bf_model=posterior.log_bf_model,
                                       loglik=posterior.log_bf_model + null_loglik(residuals, sigma_sq))
            alpha[l], alpha0[l] = posterior.alpha, posterior.alpha0
            mu1[l], sigma1_sq[l] = posterior.mu1, posterior.sigma1_sq
            kl[l] = effect_kl(Xs, residuals, xtx, posterior, sigma_sq)
            Eb_l = (M.T @ posterior.alpha) * posterior.mu1
            for k, X in enumerate(Xs):
                fitted[k][:, l] = X @ Eb_l[k]

        r_hat = np.einsum('sk,lsj->lkj', M, alpha)
        rss = _expected_rss(Xs, ys, xtx, r_hat, mu1, sigma1_sq)
        if opts.estimate_sigma_sq:
            sigma_sq = max(max(rss, 0.0) / n_total, opts.min_sigma_sq)
        elbo = _elbo(n_total, rss, sigma_sq, kl)
        elbo_trace.append(elbo)
        logger.debug(f"第 {n_sweeps} 轮: ELBO = {elbo:.6f}, σ² = {sigma_sq:.6g}")
        if len(elbo_trace) >= 2 and abs(elbo_trace[-1] - elbo_trace[-2]) < opts.tol:
            converged = True
            break

    if not converged:
        logger.warning(f"IBSS 在 {opts.max_sweeps} 轮内未收敛 (|ΔELBO| ≥ {opts.tol})")

    r_hat = np.einsum('sk,lsj->lkj', M, alpha)
    beta_hat = np.sum(r_hat * mu1, axis=0)
    pip = 1.0 - np.prod(1.0 - r_hat, axis=0)
    return MuSusieFit(L=L, alpha=alpha, alpha0=alpha0, mu1=mu1, sigma1_sq=sigma1_sq,
                      sigma0l_sq=sigma0l_sq, kl=kl, sigma_sq_hat=float(sigma_sq), beta_hat=beta_hat,
                      pip=pip, elbo_trace=elbo_trace, converged=converged, n_sweeps=n_sweeps,
                      centered=opts.center)


def fit_single_task(data: MultiTaskDataset, L: int, omega: float,
                    opts: Optional[IbssOptions] = None) -> np.ndarray:
    """
    单独分析基线：每个数据集分别做 K = 1 的 IBSS

    K = 1 时先验的非零质量为 π_φ = p^(1-ω) / (1 + p^(1-ω))，与多任务先验的 π_φ 不同

    参数:
        data: 含响应的数据集
        L: 每个数据集的单效应个数
        omega: K = 1 时的 ω_1
        opts: IBSS 选项

    返回:
        ndarray: K × p 的 PIP 矩阵
    """
    data.require_responses()
    pw = derive_pi_from_omegas([omega], data.p, K=1, L=L)
    pips = []
    for X, y in zip(data.Xs, data.ys):
        fit = fit_ibss(MultiTaskDataset((X,), (y,)), L, pw, opts)
        pips.append(fit.pip[0])
    return np.vstack(pips)
