"""
模拟数据生成
多任务变量选择实例与多 DAG 线性结构方程实例，所有随机数都来自实例自己的 numpy Generator
"""

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Tuple
import logging

import networkx as nx
import numpy as np

from errors import ConfigError
from model import MultiTaskDataset, save_dataset
from utils import write_json

logger = logging.getLogger('musel.simgen')


@dataclass
class VsSimConfig:
    """变量选择模拟设置：共享支撑 s1_star 个，每个数据集另有 s2_star 个私有协变量"""

    p: int = 600
    n: int = 100
    K: int = 2
    s1_star: int = 10
    s2_star: int = 2
    sigma: float = 1.0
    effect_sd: float = 0.6
    seed: Optional[int] = None

    def validate(self):
        if self.p < 1 or self.n < 1 or self.K < 1:
            raise ConfigError(f"p、n、K 必须为正: p={self.p}, n={self.n}, K={self.K}")
        if self.s1_star < 0 or self.s2_star < 0:
            raise ConfigError("支撑大小不能为负")
        if self.s1_star + self.K * self.s2_star > self.p:
            raise ConfigError(f"s1* + K·s2* = {self.s1_star + self.K * self.s2_star} 超过 p = {self.p}")
        if self.sigma < 0 or self.effect_sd < 0:
            raise ConfigError("sigma 与 effect_sd 不能为负")

    @property
    def s_star(self) -> int:
        return self.s1_star + self.K * self.s2_star


@dataclass
class DagSimConfig:
    """多 DAG 模拟设置：N_com 条共享边，每个数据集另有 N_pri 条私有边，真实顺序为恒等排列"""

    p: int = 100
    K: int = 2
    n_per_dataset: int = 300
    N_com: int = 100
    N_pri: int = 20
    weight_range: Tuple[float, float] = (0.1, 1.0)
    var_range: Tuple[float, float] = (1.0, 2.25)
    seed: Optional[int] = None

    def validate(self):
        if self.p < 2 or self.K < 1 or self.n_per_dataset < 1:
            raise ConfigError(f"需要 p ≥ 2、K ≥ 1、n ≥ 1: p={self.p}, K={self.K}, n={self.n_per_dataset}")
        if self.N_com < 0 or self.N_pri < 0:
            raise ConfigError("边数不能为负")
        max_edges = self.p * (self.p - 1) // 2
        if self.N_com + self.K * self.N_pri > max_edges:
            raise ConfigError(f"N_com + K·N_pri = {self.N_com + self.K * self.N_pri} 超过 p(p-1)/2 = {max_edges}")
        lo, hi = self.weight_range
        if not 0 <= lo <= hi:
            raise ConfigError(f"权重区间无效: {self.weight_range}")
        lo, hi = self.var_range
        if not 0 < lo <= hi:
            raise ConfigError(f"方差区间无效: {self.var_range}")


@dataclass
class VsInstance:
    data: MultiTaskDataset
    shared_support: np.ndarray
    private_supports: List[np.ndarray]
    betas: np.ndarray
    config: VsSimConfig

    @property
    def supports(self) -> List[np.ndarray]:
        """每个数据集的真实支撑 S_c* ∪ S_s(k)*"""
        return [np.union1d(self.shared_support, private) for private in self.private_supports]

    def truth(self) -> dict:
        return {
            "kind": "vs",
            "config": asdict(self.config),
            "shared_support": self.shared_support,
            "private_supports": self.private_supports,
            "supports": self.supports,
            "betas": self.betas,
        }


@dataclass
class DagInstance:
    data: MultiTaskDataset
    shared_edges: List[Tuple[int, int]]
    private_edges: List[List[Tuple[int, int]]]
    weights: np.ndarray
    variances: np.ndarray
    config: DagSimConfig

    @property
    def adjacency(self) -> np.ndarray:
        """K × p × p 的 0/1 邻接矩阵"""
        return (self.weights != 0).astype(float)

    def graphs(self) -> List[nx.DiGraph]:
        graphs = []
        for W in self.weights:
            graph = nx.DiGraph()
            graph.add_nodes_from(range(W.shape[0]))
            rows, cols = np.nonzero(W)
            graph.add_weighted_edges_from((int(i), int(j), float(W[i, j])) for i, j in zip(rows, cols))
            graphs.append(graph)
        return graphs

    def truth(self) -> dict:
        return {
            "kind": "dag",
            "config": asdict(self.config),
            "order": list(range(self.config.p)),
            "shared_edges": self.shared_edges,
            "private_edges": self.private_edges,
            "edges": [[[i, j, w] for i, j, w in graph.edges(data='weight')] for graph in self.graphs()],
            "variances": self.variances,
        }


def replicate_seeds(seed: Optional[int], R: int) -> List[int]:
    """
    由一个主种子派生 R 个互相独立的种子（SeedSequence.spawn）

    参数:
        seed: 主种子
        R: 重复次数

    返回:
        list: R 个整数种子
    """
    children = np.random.SeedSequence(seed).spawn(R)
    return [int(child.generate_state(1, dtype=np.uint64)[0]) for child in children]


def stream_rng(seed: Optional[int], stream: int) -> np.random.Generator:
    """
    同一种子下的第 stream 条子随机流，与 default_rng(seed) 相互独立

    参数:
        seed: 重复的种子
        stream: 子流编号

    返回:
        numpy Generator
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))


def gen_vs_instance(cfg: VsSimConfig) -> VsInstance:
    """
    生成多任务变量选择实例

    X 元素独立标准正态；随机排列的前 s1* 个协变量为共享支撑，之后依次划出 K 段互不相交的私有支撑；
    每个 (激活协变量, 数据集) 的系数独立取自 N(0, effect_sd²)；y = Xβ + σε

    参数:
        cfg: 模拟设置

    返回:
        VsInstance
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    Xs = [rng.standard_normal((cfg.n, cfg.p)) for _ in range(cfg.K)]
    perm = rng.permutation(cfg.p)
    shared = np.sort(perm[:cfg.s1_star])
    private = []
    for k in range(cfg.K):
        start = cfg.s1_star + k * cfg.s2_star
        private.append(np.sort(perm[start:start + cfg.s2_star]))

    betas = np.zeros((cfg.K, cfg.p))
    for k in range(cfg.K):
        support = np.union1d(shared, private[k])
        betas[k, support] = rng.normal(0.0, cfg.effect_sd, size=support.size)
    ys = [X @ beta + cfg.sigma * rng.standard_normal(cfg.n) for X, beta in zip(Xs, betas)]
    logger.debug(f"已生成变量选择实例: p={cfg.p}, n={cfg.n}, K={cfg.K}, s*={cfg.s_star}, seed={cfg.seed}")
    return VsInstance(MultiTaskDataset(tuple(Xs), tuple(ys)), shared, private, betas, cfg)


def _edge_weights(rng: np.random.Generator, size: int, weight_range: Tuple[float, float]) -> np.ndarray:
    """±U(lo, hi) 的边权"""
    lo, hi = weight_range
    signs = rng.choice([-1.0, 1.0], size=size)
    return signs * rng.uniform(lo, hi, size=size)


def gen_dag_instance(cfg: DagSimConfig) -> DagInstance:
    """
    生成共享节点顺序的 K 个线性高斯 SEM

    边只在上三角 (i < j) 中选取；共享边与各数据集的私有边互不相交，边权在每个数据集中独立抽取，
    节点误差方差独立取自 U(var_range)，数据按节点顺序祖先采样

    参数:
        cfg: 模拟设置

    返回:
        DagInstance
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    p, K, n = cfg.p, cfg.K, cfg.n_per_dataset
    rows, cols = np.triu_indices(p, k=1)
    chosen = rng.choice(rows.size, size=cfg.N_com + K * cfg.N_pri, replace=False)
    shared_idx = chosen[:cfg.N_com]
    private_idx = [chosen[cfg.N_com + k * cfg.N_pri:cfg.N_com + (k + 1) * cfg.N_pri] for k in range(K)]

    def as_edges(idx):
        return sorted((int(rows[i]), int(cols[i])) for i in idx)

    weights = np.zeros((K, p, p))
    variances = rng.uniform(cfg.var_range[0], cfg.var_range[1], size=(K, p))
    Xs = []
    for k in range(K):
        idx = np.concatenate([shared_idx, private_idx[k]])
        weights[k, rows[idx], cols[idx]] = _edge_weights(rng, idx.size, cfg.weight_range)
        X = np.zeros((n, p))
        noise = rng.standard_normal((n, p)) * np.sqrt(variances[k])
        for j in range(p):
            X[:, j] = X[:, :j] @ weights[k, :j, j] + noise[:, j]
        Xs.append(X)

    logger.debug(f"已生成 DAG 实例: p={p}, K={K}, n={n}, N_com={cfg.N_com}, N_pri={cfg.N_pri}, seed={cfg.seed}")
    return DagInstance(MultiTaskDataset(tuple(Xs)), as_edges(shared_idx), [as_edges(idx) for idx in private_idx],
                       weights, variances, cfg)


def write_instance(instance, directory) -> Path:
    """
    写出实例：数据集目录格式加 truth.json

    参数:
        instance: VsInstance 或 DagInstance
        directory: 输出目录

    返回:
        Path: 输出目录
    """
    directory = save_dataset(instance.data, directory)
    write_json(Path(directory) / "truth.json", instance.truth())
    logger.info(f"模拟实例已写入 {directory}")
    return Path(directory)
