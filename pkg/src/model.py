"""
核心模型
多任务数据集、r↔γ 指示变量互换以及先验质量计算

下标约定: 数据集 k 与协变量 j 在代码中均从 0 开始；子集 I 编码为 K 位整数，
第 k 位为 1 表示数据集 k 属于 I。形如 (S, p) 的数组中第 s 行对应掩码 s + 1。
"""

import json
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd
from scipy.special import comb, gammaln

from errors import DataError, ModelSpaceError, PriorError, PriorOrderingWarning
from utils import write_json

logger = logging.getLogger('musel.model')

MAX_DATASETS = 16
PI_SUM_TOL = 1e-12


# ---------------------------------------------------------------------------
# 子集编码
# ---------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class SubsetIndex:
    """非空子集 I ⊆ {0..K-1}，以位掩码表示"""

    mask: int
    K: int

    def __post_init__(self):
        if not 1 <= self.K <= MAX_DATASETS:
            raise ModelSpaceError(f"K 必须在 1..{MAX_DATASETS} 之间，实际为 {self.K}")
        if not 0 < self.mask < (1 << self.K):
            raise ModelSpaceError(f"子集掩码 {self.mask} 为空或超出 K={self.K} 的范围")

    @classmethod
    def from_members(cls, members: Iterable[int], K: int) -> "SubsetIndex":
        mask = 0
        for k in set(members):
            if not 0 <= k < K:
                raise ModelSpaceError(f"数据集下标 {k} 超出范围 0..{K - 1}")
            mask |= 1 << k
        return cls(mask, K)

    @property
    def members(self) -> Tuple[int, ...]:
        return tuple(k for k in range(self.K) if self.mask >> k & 1)

    @property
    def size(self) -> int:
        return bin(self.mask).count('1')

    def __contains__(self, k: int) -> bool:
        return bool(self.mask >> k & 1)

    def __len__(self) -> int:
        return self.size


def all_subsets(K: int) -> List[SubsetIndex]:
    """
    枚举 P_K 中的全部 2^K - 1 个非空子集（按掩码升序）

    参数:
        K: 数据集个数

    返回:
        list: SubsetIndex 列表，第 s 个元素的掩码为 s + 1
    """
    if not 1 <= K <= MAX_DATASETS:
        raise ModelSpaceError(f"K 必须在 1..{MAX_DATASETS} 之间，实际为 {K}")
    return [SubsetIndex(mask, K) for mask in range(1, 1 << K)]


def membership_matrix(K: int) -> np.ndarray:
    """(2^K - 1) × K 的 0/1 矩阵，M[s, k] = 1 当且仅当数据集 k 属于第 s 个子集"""
    masks = np.arange(1, 1 << K)
    return ((masks[:, None] >> np.arange(K)[None, :]) & 1).astype(float)


def subset_sizes(K: int) -> np.ndarray:
    """每个子集的大小 |I|，与 membership_matrix 的行对应"""
    return membership_matrix(K).sum(axis=1).astype(int)


# ---------------------------------------------------------------------------
# 指示变量
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RIndicator:
    """K × p 的二值激活矩阵 r"""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise ModelSpaceError(f"r 必须是 K × p 矩阵，实际维度为 {bits.ndim}")
        bits.setflags(write=False)
        object.__setattr__(self, 'bits', bits)

    @property
    def K(self) -> int:
        return self.bits.shape[0]

    @property
    def p(self) -> int:
        return self.bits.shape[1]

    def n_active_columns(self) -> int:
        """至少在一个数据集中被激活的协变量个数"""
        return int(np.any(self.bits, axis=0).sum())

    def in_model_space(self, L: int) -> bool:
        return self.n_active_columns() <= L

    def __eq__(self, other) -> bool:
        return isinstance(other, RIndicator) and np.array_equal(self.bits, other.bits)


@dataclass(frozen=True)
class GammaIndicator:
    """稀疏存储的 γ：激活的 (子集掩码, 协变量) 对"""

    K: int
    p: int
    pairs: Tuple[Tuple[int, int], ...] = ()

    def __post_init__(self):
        pairs = tuple(sorted((int(mask), int(j)) for mask, j in self.pairs))
        for mask, j in pairs:
            SubsetIndex(mask, self.K)
            if not 0 <= j < self.p:
                raise ModelSpaceError(f"协变量下标 {j} 超出范围 0..{self.p - 1}")
        if len(set(pairs)) != len(pairs):
            raise ModelSpaceError("γ 中存在重复的 (I, j) 对")
        object.__setattr__(self, 'pairs', pairs)

    @property
    def size(self) -> int:
        """|γ|，即被激活的 (I, j) 个数"""
        return len(self.pairs)

    def is_exclusive(self) -> bool:
        """每个协变量至多属于一个子集"""
        columns = [j for _, j in self.pairs]
        return len(set(columns)) == len(columns)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(((1 << self.K) - 1, self.p), dtype=bool)
        for mask, j in self.pairs:
            dense[mask - 1, j] = True
        return dense

    def to_json(self) -> dict:
        return {"K": self.K, "p": self.p, "pairs": [list(pair) for pair in self.pairs]}

    @classmethod
    def from_json(cls, data: dict) -> "GammaIndicator":
        return cls(int(data["K"]), int(data["p"]), tuple(tuple(pair) for pair in data["pairs"]))


def r_to_gamma(r: RIndicator) -> GammaIndicator:
    """
    r → γ：协变量 j 的激活集合 {k : r_j^(k) = 1} 即为它所属的子集

    参数:
        r: K × p 指示矩阵

    返回:
        GammaIndicator: 完全未激活的列不产生任何位
    """
    weights = 1 << np.arange(r.K)
    masks = weights @ r.bits.astype(np.int64)
    pairs = tuple((int(mask), int(j)) for j, mask in enumerate(masks) if mask)
    return GammaIndicator(r.K, r.p, pairs)


def gamma_to_r(gamma: GammaIndicator) -> RIndicator:
    """
    γ → r：r^(k) = Σ_{I ∋ k} γ^I

    参数:
        gamma: 满足互斥性的 γ

    返回:
        RIndicator

    异常:
        ModelSpaceError: 同一协变量被多个子集激活
    """
    if not gamma.is_exclusive():
        raise ModelSpaceError("γ 违反互斥性：同一协变量在多个子集中被激活")
    bits = np.zeros((gamma.K, gamma.p), dtype=bool)
    for mask, j in gamma.pairs:
        for k in SubsetIndex(mask, gamma.K).members:
            bits[k, j] = True
    return RIndicator(bits)


# ---------------------------------------------------------------------------
# 先验
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PriorWeights:
    """
    先验参数 ω、π_φ、π_1..π_K 与 L

    p 是先验对数几率 -ω_k log p 的底数；n_candidates 是 π 向量实际铺开的协变量个数，
    普通变量选择中二者相同，DAG 的节点回归中后者是前驱节点个数。
    """

    omegas: Tuple[float, ...]
    pi_phi: float
    pis: Tuple[float, ...]
    L: int
    p: int
    n_candidates: int

    def __post_init__(self):
        if len(self.omegas) != len(self.pis):
            raise PriorError("omegas 与 pis 长度不一致")
        if not 0.0 < self.pi_phi < 1.0:
            raise PriorError(f"π_φ 必须在 (0, 1) 内，实际为 {self.pi_phi}")
        if self.L < 1:
            raise PriorError(f"L 必须 ≥ 1，实际为 {self.L}")
        pis = np.asarray(self.pis)
        if np.any(pis <= 0) or np.any(np.diff(pis) >= 0):
            raise PriorError(f"π_k 必须为正且严格递减，实际为 {list(self.pis)}")
        if abs(self.full_pi_sum() - 1.0) > PI_SUM_TOL:
            raise PriorError(f"完整 π 向量之和为 {self.full_pi_sum()!r}，不等于 1")

    @property
    def K(self) -> int:
        return len(self.omegas)

    @property
    def log_prior_odds(self) -> np.ndarray:
        """log(π_φ π_k / (1 - π_φ)) = -ω_k log p，长度 K"""
        return -np.asarray(self.omegas) * math.log(self.p)

    @property
    def log_pis(self) -> np.ndarray:
        return np.log(np.asarray(self.pis))

    def full_pi_sum(self) -> float:
        """Σ_k C(K, k) · n_candidates · π_k"""
        K = self.K
        counts = np.array([comb(K, k, exact=True) for k in range(1, K + 1)], dtype=float)
        return float(np.sum(counts * self.n_candidates * np.asarray(self.pis)))

    def with_L(self, L: int) -> "PriorWeights":
        return replace(self, L=int(L))

    def for_candidates(self, n_candidates: int) -> "PriorWeights":
        """同一组 ω 铺开到 n_candidates 个协变量上，罚项底数 p 不变"""
        pi_phi, pis = _spread_masses(self.omegas, self.p, n_candidates)
        return replace(self, pi_phi=pi_phi, pis=pis, n_candidates=int(n_candidates))


def _spread_masses(omegas: Sequence[float], p: int, m: int) -> Tuple[float, Tuple[float, ...]]:
    """π_k = p^(-ω_k) / S，π_φ = S / (S + 1)"""
    K = len(omegas)
    masses = np.exp(-np.asarray(omegas, dtype=float) * math.log(p))
    counts = np.array([comb(K, k, exact=True) for k in range(1, K + 1)], dtype=float)
    S = float(np.sum(counts * m * masses))
    return S / (S + 1.0), tuple(float(x) for x in masses / S)


def omegas_from_prior_masses(scales: Sequence[float], exponents: Sequence[float], p: int) -> List[float]:
    """
    把 p^(-ω_k) = scale_k · p^(-exponent_k) 形式的设置换算为 ω

    参数:
        scales: 每个 k 的系数（正数）
        exponents: 每个 k 的指数
        p: 协变量个数

    返回:
        list: ω_1..ω_K
    """
    if p < 2:
        raise PriorError(f"p 必须 ≥ 2，实际为 {p}")
    if len(scales) != len(exponents):
        raise PriorError("scales 与 exponents 长度不一致")
    if any(s <= 0 for s in scales):
        raise PriorError("scales 必须为正")
    log_p = math.log(p)
    return [float(e) - math.log(s) / log_p for s, e in zip(scales, exponents)]


def check_omega_ordering(omegas: Sequence[float]) -> bool:
    """
    检查 ω_K/K < … < ω_2/2 < ω_1

    违反时只发出警告：ω 的选择本身就是先验信念的表达

    返回:
        bool: 是否满足该顺序
    """
    ratios = np.asarray(omegas, dtype=float) / np.arange(1, len(omegas) + 1)
    ordered = bool(np.all(np.diff(ratios) < 0))
    if not ordered:
        message = f"ω = {list(omegas)} 不满足 ω_K/K < … < ω_1，先验不再偏好共享的协变量"
        logger.warning(message)
        warnings.warn(message, PriorOrderingWarning, stacklevel=3)
    return ordered


def derive_pi_from_omegas(omegas: Sequence[float], p: int, K: Optional[int] = None, L: int = 1,
                          n_candidates: Optional[int] = None) -> PriorWeights:
    """
    由 ω 求 π_φ 与 π_1..π_K

    同时满足 π_φ π_k / (1 - π_φ) = p^(-ω_k) 与完整 π 向量和为 1：
    π_k = p^(-ω_k) / S，π_φ = S / (S + 1)，S = Σ_k C(K, k) · m · p^(-ω_k)，m 为候选协变量个数

    参数:
        omegas: ω_1..ω_K（正数）
        p: 罚项底数（协变量个数）
        K: 数据集个数，默认 len(omegas)
        L: 单效应个数上限
        n_candidates: π 向量铺开的协变量个数，默认 p

    返回:
        PriorWeights

    异常:
        PriorError: ω 非正、p < 2 或 π_k 不严格递减
    """
    omegas = tuple(float(w) for w in omegas)
    if K is None:
        K = len(omegas)
    if len(omegas) != K:
        raise PriorError(f"需要 {K} 个 ω，实际给出 {len(omegas)} 个")
    if K < 1 or K > MAX_DATASETS:
        raise PriorError(f"K 必须在 1..{MAX_DATASETS} 之间，实际为 {K}")
    if p < 2:
        raise PriorError(f"p 必须 ≥ 2，实际为 {p}")
    if any(w <= 0 for w in omegas):
        raise PriorError(f"ω 必须全部为正，实际为 {list(omegas)}")
    m = p if n_candidates is None else int(n_candidates)
    if m < 1:
        raise PriorError(f"候选协变量个数必须 ≥ 1，实际为 {m}")

    pi_phi, pis = _spread_masses(omegas, p, m)
    if np.any(np.diff(pis) >= 0):
        raise PriorError(f"由 ω = {list(omegas)} 得到的 π_k 不严格递减")
    check_omega_ordering(omegas)
    return PriorWeights(omegas=omegas, pi_phi=pi_phi, pis=pis,
                        L=int(L), p=int(p), n_candidates=m)


def log_falling_factorial(L: int, size: int) -> float:
    """log f(|γ|, L) = log[L (L-1) … (L - |γ| + 1)]"""
    return float(gammaln(L + 1) - gammaln(L - size + 1))


def log_prior_gamma(gamma: GammaIndicator, pw: PriorWeights) -> float:
    """
    muSuSiE 下 γ 的对数先验概率

    log Π(γ) = log f(|γ|, L) + (L - |γ|) log(1 - π_φ) + Σ_{(I, j) ∈ γ} [log π_φ + log π_|I|]

    参数:
        gamma: 模型空间中的 γ
        pw: 先验参数

    返回:
        float: 对数先验概率

    异常:
        ModelSpaceError: |γ| > L、违反互斥性或 K 不一致
    """
    if gamma.K != pw.K:
        raise ModelSpaceError(f"γ 的 K={gamma.K} 与先验的 K={pw.K} 不一致")
    if gamma.size > pw.L:
        raise ModelSpaceError(f"|γ| = {gamma.size} 超过 L = {pw.L}")
    if not gamma.is_exclusive():
        raise ModelSpaceError("γ 违反互斥性，不在模型空间内")
    log_pis = pw.log_pis
    value = log_falling_factorial(pw.L, gamma.size)
    value += (pw.L - gamma.size) * math.log1p(-pw.pi_phi)
    for mask, _ in gamma.pairs:
        value += math.log(pw.pi_phi) + log_pis[SubsetIndex(mask, pw.K).size - 1]
    return float(value)


# ---------------------------------------------------------------------------
# 数据集
# ---------------------------------------------------------------------------

def _frozen_array(values, ndim: int, what: str) -> np.ndarray:
    array = np.array(values, dtype=float)
    if array.ndim != ndim:
        raise DataError(f"{what} 必须是 {ndim} 维数组，实际为 {array.ndim} 维")
    if not np.all(np.isfinite(array)):
        raise DataError(f"{what} 含有非有限值")
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class MultiTaskDataset:
    """K 个共享 p 个协变量的数据集；ys 为 None 时只有设计矩阵（DAG 数据）"""

    Xs: Tuple[np.ndarray, ...]
    ys: Optional[Tuple[np.ndarray, ...]] = None
    column_names: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        if len(self.Xs) == 0:
            raise DataError("至少需要一个数据集")
        if len(self.Xs) > MAX_DATASETS:
            raise DataError(f"最多支持 {MAX_DATASETS} 个数据集，实际为 {len(self.Xs)}")
        Xs = tuple(_frozen_array(X, 2, f"X_{k + 1}") for k, X in enumerate(self.Xs))
        p = Xs[0].shape[1]
        for k, X in enumerate(Xs):
            if X.shape[1] != p:
                raise DataError(f"X_{k + 1} 有 {X.shape[1]} 列，与 X_1 的 {p} 列不一致")
            if X.shape[0] < 1:
                raise DataError(f"X_{k + 1} 没有观测")
        object.__setattr__(self, 'Xs', Xs)
        if self.ys is not None:
            if len(self.ys) != len(Xs):
                raise DataError(f"响应个数 {len(self.ys)} 与设计矩阵个数 {len(Xs)} 不一致")
            ys = tuple(_frozen_array(np.ravel(y), 1, f"y_{k + 1}") for k, y in enumerate(self.ys))
            for k, (X, y) in enumerate(zip(Xs, ys)):
                if y.shape[0] != X.shape[0]:
                    raise DataError(f"y_{k + 1} 长度 {y.shape[0]} 与 X_{k + 1} 行数 {X.shape[0]} 不一致")
            object.__setattr__(self, 'ys', ys)
        if self.column_names is not None:
            names = tuple(str(name) for name in self.column_names)
            if len(names) != p:
                raise DataError(f"列名个数 {len(names)} 与协变量个数 {p} 不一致")
            object.__setattr__(self, 'column_names', names)

    @property
    def K(self) -> int:
        return len(self.Xs)

    @property
    def p(self) -> int:
        return self.Xs[0].shape[1]

    @property
    def ns(self) -> Tuple[int, ...]:
        return tuple(X.shape[0] for X in self.Xs)

    @property
    def n_total(self) -> int:
        return int(sum(self.ns))

    @property
    def has_responses(self) -> bool:
        return self.ys is not None

    def require_responses(self):
        if self.ys is None:
            raise DataError("该数据集没有响应变量 y")

    def centered(self) -> "MultiTaskDataset":
        """每个数据集分别中心化 X 的列与 y"""
        Xs = tuple(X - X.mean(axis=0) for X in self.Xs)
        ys = None if self.ys is None else tuple(y - y.mean() for y in self.ys)
        return MultiTaskDataset(Xs, ys, self.column_names)

    def node_regression(self, node: int, parents: Sequence[int]) -> "MultiTaskDataset":
        """
        以第 node 列为响应、parents 列为协变量构造回归数据集

        参数:
            node: 响应列
            parents: 候选父节点列（非空）

        返回:
            MultiTaskDataset
        """
        parents = list(parents)
        Xs = tuple(X[:, parents] for X in self.Xs)
        ys = tuple(X[:, node] for X in self.Xs)
        names = None if self.column_names is None else tuple(self.column_names[i] for i in parents)
        return MultiTaskDataset(Xs, ys, names)


def _read_matrix(path: Path) -> np.ndarray:
    if not path.exists():
        raise DataError(f"文件不存在: {path}")
    try:
        return pd.read_csv(path, header=None, dtype=float).to_numpy()
    except (ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"无法解析 {path}: {e}") from e


def load_dataset(directory) -> MultiTaskDataset:
    """
    读取数据集目录

    目录中有 manifest.json 时按其列出的文件读取；否则依次读取 X_1.csv, X_2.csv, …
    以及（全部存在时）对应的 y_k.csv

    参数:
        directory: 数据集目录

    返回:
        MultiTaskDataset
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"数据集目录不存在: {directory}")

    manifest_file = directory / "manifest.json"
    column_names = None
    if manifest_file.exists():
        try:
            with open(manifest_file, 'r', encoding='utf-8') as f:
                manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"manifest.json 不是合法的 JSON: {e}") from e
        x_files = [directory / name for name in manifest.get("X", [])]
        y_names = manifest.get("y")
        y_files = None if not y_names else [directory / name for name in y_names]
        column_names = manifest.get("column_names")
    else:
        x_files = []
        k = 1
        while (directory / f"X_{k}.csv").exists():
            x_files.append(directory / f"X_{k}.csv")
            k += 1
        y_files = [directory / f"y_{k}.csv" for k in range(1, len(x_files) + 1)]
        if not all(path.exists() for path in y_files):
            y_files = None
    if not x_files:
        raise DataError(f"目录 {directory} 中没有找到 X_k.csv")

    Xs = tuple(_read_matrix(path) for path in x_files)
    ys = None
    if y_files is not None:
        ys = []
        for path in y_files:
            y = _read_matrix(path)
            if y.shape[1] != 1:
                raise DataError(f"{path} 应只有一列，实际有 {y.shape[1]} 列")
            ys.append(y[:, 0])
        ys = tuple(ys)
    data = MultiTaskDataset(Xs, ys, column_names)
    logger.info(f"已读取数据集 {directory}: K={data.K}, p={data.p}, n={list(data.ns)}")
    return data


def save_dataset(data: MultiTaskDataset, directory, column_names: Optional[Sequence[str]] = None) -> Path:
    """
    把数据集写成目录格式（X_k.csv, y_k.csv, manifest.json）

    参数:
        data: 数据集
        directory: 输出目录
        column_names: 可选列名，默认使用数据集自带的列名

    返回:
        Path: 输出目录
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    x_names, y_names = [], []
    for k, X in enumerate(data.Xs, start=1):
        name = f"X_{k}.csv"
        pd.DataFrame(X).to_csv(directory / name, header=False, index=False, float_format='%.17g')
        x_names.append(name)
    if data.ys is not None:
        for k, y in enumerate(data.ys, start=1):
            name = f"y_{k}.csv"
            pd.DataFrame(y).to_csv(directory / name, header=False, index=False, float_format='%.17g')
            y_names.append(name)
    names = column_names if column_names is not None else data.column_names
    manifest = {"K": data.K, "p": data.p, "X": x_names, "y": y_names or None,
                "column_names": list(names) if names is not None else None}
    write_json(directory / "manifest.json", manifest)
    logger.info(f"数据集已写入 {directory}")
    return directory
