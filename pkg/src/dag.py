"""
共享节点顺序的多 DAG 联合估计
给定顺序时对每个节点做多任务变量选择，顺序空间上做相邻交换 Metropolis-Hastings
"""

import itertools
import math
import threading
from collections import Counter, OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm
from tqdm import tqdm

from errors import ConfigError, DataError, ModelSpaceError
from ibss import IbssOptions, fit_ibss
from model import MultiTaskDataset, PriorWeights, subset_sizes
from muser import column_norms

logger = logging.getLogger('musel.dag')

MAX_EXACT_NODES = 8


@dataclass(frozen=True)
class Order:
    """节点顺序，perm[位置] = 节点"""

    perm: Tuple[int, ...]

    def __post_init__(self):
        perm = tuple(int(v) for v in self.perm)
        if sorted(perm) != list(range(len(perm))):
            raise ModelSpaceError(f"顺序必须是 0..{len(perm) - 1} 的排列: {perm}")
        object.__setattr__(self, 'perm', perm)

    @classmethod
    def identity(cls, p: int) -> "Order":
        return cls(tuple(range(p)))

    @classmethod
    def random(cls, p: int, rng: np.random.Generator) -> "Order":
        return cls(tuple(rng.permutation(p)))

    @property
    def p(self) -> int:
        return len(self.perm)

    def predecessors(self, node: int) -> Tuple[int, ...]:
        """排在 node 之前的节点（升序）"""
        return tuple(sorted(self.perm[:self.perm.index(node)]))

    def swap(self, position: int) -> "Order":
        """交换第 position 与 position + 1 个位置"""
        if not 0 <= position < self.p - 1:
            raise ModelSpaceError(f"交换位置 {position} 超出范围 0..{self.p - 2}")
        perm = list(self.perm)
        perm[position], perm[position + 1] = perm[position + 1], perm[position]
        return Order(tuple(perm))


@dataclass(frozen=True)
class NodeFit:
    """单个节点在给定前驱集合下的回归摘要"""

    node: int
    parents: Tuple[int, ...]
    log_likelihood: float
    log_penalty: float
    edge_probs: np.ndarray
    beta_hat: np.ndarray
    sigma_sq_hat: float


@dataclass(frozen=True)
class OrderScore:
    """某个顺序下全部节点回归的汇总，node_fits 按节点编号排列"""

    order: Order
    node_fits: Tuple[NodeFit, ...]
    log_likelihood: float
    log_penalty: float

    @classmethod
    def from_fits(cls, order: Order, node_fits: Sequence[NodeFit]) -> "OrderScore":
        # 按节点编号顺序求和，保证增量与全量评分逐位一致
        log_likelihood = 0.0
        log_penalty = 0.0
        for fit in node_fits:
            log_likelihood += fit.log_likelihood
            log_penalty += fit.log_penalty
        return cls(order, tuple(node_fits), log_likelihood, log_penalty)

    @property
    def K(self) -> int:
        return self.node_fits[-1].edge_probs.shape[0]

    @property
    def R(self) -> np.ndarray:
        """K × p × p 的边概率，R[k, i, j] 为 i → j 的概率"""
        p = self.order.p
        R = np.zeros((self.K, p, p))
        for fit in self.node_fits:
            if fit.parents:
                R[:, list(fit.parents), fit.node] = fit.edge_probs
        return R


@dataclass
class DagPosterior:
    """MH 链的汇总"""

    R_hat: np.ndarray
    samples: List[Tuple[Tuple[int, ...], float]]
    acceptance_rate: float
    iters: int
    burn_in: int
    thin: int
    log_post_trace: List[float] = field(default_factory=list)
    visit_counts: Dict[Tuple[int, ...], int] = field(default_factory=dict)
    best_order: Optional[Tuple[int, ...]] = None
    best_log_posterior: float = -math.inf

    def to_dict(self) -> dict:
        return {
            "acceptance_rate": self.acceptance_rate,
            "iters": self.iters,
            "burn_in": self.burn_in,
            "thin": self.thin,
            "n_samples": len(self.samples),
            "best_order": self.best_order,
            "best_log_posterior": self.best_log_posterior,
            "log_post_trace": self.log_post_trace,
        }


class OrderScorer:
    """
    顺序评分器

    持有数据、先验、节点回归的 IBSS 选项以及按 (节点, 前驱集合) 缓存的节点拟合结果；
    节点回归之间相互独立，可放到线程池中并行
    """

    def __init__(self, data: MultiTaskDataset, pw: PriorWeights, L_per_node: Optional[int] = None,
                 opts: Optional[IbssOptions] = None, cache_size: int = 100000, threads: int = 1):
        """
        初始化顺序评分器

        参数:
            data: K 个 n_k × p 的数据矩阵（不需要响应）
            pw: 以节点数 p 为底数的先验
            L_per_node: 每个节点回归的单效应个数，默认 min(10, p - 1)
            opts: 节点回归的 IBSS 选项
            cache_size: 缓存的节点拟合个数上限
            threads: 线程数
        """
        if data.p < 2:
            raise DataError(f"DAG 至少需要 2 个节点，实际为 {data.p}")
        if pw.K != data.K:
            raise ConfigError(f"需要 {data.K} 个 ω，实际给出 {pw.K} 个")
        column_norms(data.Xs)
        self.data = data
        self.pw = pw
        self.L_per_node = L_per_node if L_per_node else min(10, data.p - 1)
        self.opts = opts or IbssOptions()
        self._node_data = data.centered() if self.opts.center else data
        self.cache_size = cache_size
        self.threads = max(1, int(threads))
        self._log_odds = pw.log_prior_odds[subset_sizes(data.K) - 1]
        self._node_priors = {}
        self._cache: "OrderedDict[tuple, NodeFit]" = OrderedDict()
        self._lock = threading.Lock()
        self._executor = ThreadPoolExecutor(max_workers=self.threads) if self.threads > 1 else None
        self.hits = 0
        self.misses = 0
        logger.debug(f"顺序评分器初始化完成: p={data.p}, K={data.K}, L={self.L_per_node}, 线程数={self.threads}")

    @property
    def p(self) -> int:
        return self.data.p

    def close(self):
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()

    def _prior_for(self, n_parents: int) -> PriorWeights:
        with self._lock:
            prior = self._node_priors.get(n_parents)
            if prior is None:
                L = min(self.L_per_node, n_parents)
                prior = self.pw.for_candidates(n_parents).with_L(L)
                self._node_priors[n_parents] = prior
            return prior

    def _fit_node(self, node: int, parents: Tuple[int, ...]) -> NodeFit:
        """
        拟合单个节点对其父节点集合的回归

        无父节点时 σ̂² = Σ_k‖x^(k)‖² / N，与节点回归一样不含截距；
        opts.center 为真时各数据集先中心化，σ̂² 即合并的样本方差

        参数:
            node: 节点
            parents: 父节点（可为空）

        返回:
            NodeFit
        """
        K = self.data.K
        if not parents:
            columns = [X[:, node] for X in self._node_data.Xs]
            sigma_sq = max(sum(float(x @ x) for x in columns) / self.data.n_total, self.opts.min_sigma_sq)
            scale = math.sqrt(sigma_sq)
            log_likelihood = float(sum(norm.logpdf(x, scale=scale).sum() for x in columns))
            return NodeFit(node, parents, log_likelihood, 0.0, np.zeros((K, 0)), np.zeros((K, 0)), sigma_sq)

        prior = self._prior_for(len(parents))
        regression = self._node_data.node_regression(node, parents)
        fit = fit_ibss(regression, prior.L, prior, self.opts)
        scale = math.sqrt(fit.sigma_sq_hat)
        log_likelihood = 0.0
        for k, (X, y) in enumerate(zip(regression.Xs, regression.ys)):
            resid = y - X @ fit.beta_hat[k]
            log_likelihood += float(norm.logpdf(resid, scale=scale).sum())
        # 罚项: 各子集的期望激活数乘以对应的先验对数几率
        expected_counts = fit.alpha.sum(axis=(0, 2))
        log_penalty = float(self._log_odds @ expected_counts)
        return NodeFit(node, parents, log_likelihood, log_penalty, fit.pip, fit.beta_hat, fit.sigma_sq_hat)

    def node_fit(self, node: int, parents: Sequence[int]) -> NodeFit:
        """
        获取节点拟合（带 LRU 缓存）

        参数:
            node: 节点
            parents: 候选父节点集合

        返回:
            NodeFit
        """
        parents = tuple(sorted(parents))
        key = (node, frozenset(parents))
        with self._lock:
            cached = self._cache.get(key)
            if cached is not None:
                self._cache.move_to_end(key)
                self.hits += 1
                return cached
            self.misses += 1
        result = self._fit_node(node, parents)
        with self._lock:
            self._cache[key] = result
            while len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
        return result

    def score(self, order: Order) -> OrderScore:
        """对一个顺序做全量评分"""
        if order.p != self.p:
            raise ModelSpaceError(f"顺序长度 {order.p} 与节点数 {self.p} 不一致")
        jobs = [(node, order.predecessors(node)) for node in range(self.p)]
        if self._executor is not None:
            fits = list(self._executor.map(lambda job: self.node_fit(*job), jobs))
        else:
            fits = [self.node_fit(node, parents) for node, parents in jobs]
        return OrderScore.from_fits(order, fits)

    def rescore_swap(self, score: OrderScore, position: int) -> OrderScore:
        """
        相邻交换后的增量评分：只有被交换的两个节点的前驱集合改变

        参数:
            score: 当前顺序的评分
            position: 交换位置

        返回:
            OrderScore: 新顺序的评分
        """
        order = score.order.swap(position)
        fits = list(score.node_fits)
        for node in order.perm[position:position + 2]:
            fits[node] = self.node_fit(node, order.predecessors(node))
        return OrderScore.from_fits(order, fits)


def fit_order(data: MultiTaskDataset, order: Order, pw: PriorWeights, L_per_node: Optional[int] = None,
              opts: Optional[IbssOptions] = None) -> OrderScore:
    """
    在给定顺序下拟合全部 p 个节点回归

    参数:
        data: K 个数据矩阵
        order: 节点顺序
        pw: 先验
        L_per_node: 节点回归的单效应个数
        opts: IBSS 选项

    返回:
        OrderScore
    """
    with OrderScorer(data, pw, L_per_node, opts) as scorer:
        return scorer.score(order)


def log_gibbs_posterior(score: OrderScore) -> float:
    """未归一化的顺序对数后验：对数罚项 + 对数似然"""
    return score.log_penalty + score.log_likelihood


def _propose_position(p: int, rng: np.random.Generator) -> int:
    if p < 2:
        raise ModelSpaceError("相邻交换至少需要 2 个节点")
    return int(rng.integers(p - 1))


def propose_adjacent_transposition(order: Order, rng: np.random.Generator) -> Order:
    """均匀选取位置 j ∈ {0..p-2}，交换 j 与 j + 1"""
    return order.swap(_propose_position(order.p, rng))


def mh_step(current: OrderScore, scorer: OrderScorer, rng: np.random.Generator) -> Tuple[OrderScore, bool]:
    """
    一步相邻交换 Metropolis-Hastings

    提议对称，接受概率为 min{1, exp(Δ 对数后验)}

    参数:
        current: 当前顺序的评分
        scorer: 顺序评分器
        rng: 随机数生成器

    返回:
        tuple: (新的评分, 是否接受)
    """
    position = _propose_position(current.order.p, rng)
    proposal = scorer.rescore_swap(current, position)
    delta = log_gibbs_posterior(proposal) - log_gibbs_posterior(current)
    if delta >= 0 or math.log(rng.random()) < delta:
        return proposal, True
    return current, False


def run_chain(scorer: OrderScorer, iters: int = 5000, burn_in: int = 1000, thin: int = 1,
              init: Optional[Order] = None, rng: Optional[np.random.Generator] = None,
              progress: bool = False) -> DagPosterior:
    """
    运行顺序空间 MH 链并对保留样本的边概率取时间平均

    第 t 次迭代（t = 1..iters）满足 t > burn_in 且 (t - burn_in - 1) % thin == 0 时保留样本

    参数:
        scorer: 顺序评分器
        iters: 迭代次数
        burn_in: 预烧期
        thin: 稀疏间隔
        init: 初始顺序，默认随机
        rng: 随机数生成器
        progress: 是否显示进度条

    返回:
        DagPosterior
    """
    if not 0 <= burn_in < iters:
        raise ConfigError(f"需要 iters > burn_in ≥ 0，实际为 iters={iters}, burn_in={burn_in}")
    if thin < 1:
        raise ConfigError(f"thin 必须 ≥ 1，实际为 {thin}")
    rng = rng if rng is not None else np.random.default_rng()
    order = init if init is not None else Order.random(scorer.p, rng)
    logger.info(f"开始 MH 链: p={scorer.p}, iters={iters}, burn_in={burn_in}, thin={thin}")

    current = scorer.score(order)
    current_lp = log_gibbs_posterior(current)
    best_order, best_lp = current.order.perm, current_lp
    R_sum = np.zeros((current.K, scorer.p, scorer.p))
    samples: List[Tuple[Tuple[int, ...], float]] = []
    visits: Counter = Counter()
    trace: List[float] = []
    accepted = 0

    for t in tqdm(range(1, iters + 1), disable=not progress, desc="MCMC", leave=False):
        current, ok = mh_step(current, scorer, rng)
        if ok:
            accepted += 1
            current_lp = log_gibbs_posterior(current)
            if current_lp > best_lp:
                best_order, best_lp = current.order.perm, current_lp
        trace.append(current_lp)
        if t > burn_in and (t - burn_in - 1) % thin == 0:
            R_sum += current.R
            samples.append((current.order.perm, current_lp))
            visits[current.order.perm] += 1

    R_hat = R_sum / len(samples)
    rate = accepted / iters
    logger.info(f"MH 链结束: 接受率 {rate:.3f}, 保留样本 {len(samples)}, "
                f"缓存命中 {scorer.hits}/{scorer.hits + scorer.misses}")
    return DagPosterior(R_hat=R_hat, samples=samples, acceptance_rate=rate, iters=iters, burn_in=burn_in,
                        thin=thin, log_post_trace=trace, visit_counts=dict(visits),
                        best_order=best_order, best_log_posterior=best_lp)


def exact_order_posterior(scorer: OrderScorer) -> Dict[Tuple[int, ...], float]:
    """
    穷举全部 p! 个顺序的归一化 Gibbs 后验（p ≤ 8）

    返回:
        dict: 顺序 → 后验概率
    """
    if scorer.p > MAX_EXACT_NODES:
        raise ConfigError(f"穷举只支持 p ≤ {MAX_EXACT_NODES}，实际为 {scorer.p}")
    perms = list(itertools.permutations(range(scorer.p)))
    log_posts = np.array([log_gibbs_posterior(scorer.score(Order(perm))) for perm in perms])
    probs = np.exp(log_posts - logsumexp(log_posts))
    return {perm: float(prob) for perm, prob in zip(perms, probs)}


def edges_at_threshold(R_hat: np.ndarray, tau: float = 0.5) -> List[List[Tuple[int, int, float]]]:
    """
    每个数据集中概率不低于 tau 的边

    参数:
        R_hat: K × p × p 的边概率
        tau: 阈值，(0, 1]

    返回:
        list: 每个数据集一个 (i, j, prob) 列表
    """
    if not 0 < tau <= 1:
        raise ConfigError(f"边阈值必须在 (0, 1] 内，实际为 {tau}")
    edges = []
    for R in np.asarray(R_hat):
        rows, cols = np.nonzero(R >= tau)
        edges.append([(int(i), int(j), float(R[i, j])) for i, j in zip(rows, cols)])
    return edges
