"""
评估指标
变量选择的 sens/prec，DAG 骨架恢复的 N_wrong、TP、FP 与 F-norm
"""

import warnings
from dataclasses import dataclass
from typing import Dict, List, Sequence
import logging

import numpy as np
import pandas as pd

from errors import ShapeError

logger = logging.getLogger('musel.metrics')


def _nanmean(values) -> float:
    values = np.asarray(values, dtype=float)
    if np.all(np.isnan(values)):
        return float('nan')
    return float(np.nanmean(values))


@dataclass(frozen=True)
class VsMetrics:
    """逐数据集的灵敏度与精确度；S 为空时 prec 记为 1.0 并在 vacuous 中标记"""

    sens: tuple
    prec: tuple
    vacuous: tuple

    @property
    def sens_mean(self) -> float:
        return _nanmean(self.sens)

    @property
    def prec_mean(self) -> float:
        return _nanmean(self.prec)


@dataclass(frozen=True)
class DagMetrics:
    """逐数据集的 DAG 恢复指标"""

    n_wrong: tuple
    tp_rate: tuple
    fp_rate: tuple
    f_norm: tuple

    def means(self) -> Dict[str, float]:
        return {
            "N_wrong": _nanmean(self.n_wrong),
            "TP": _nanmean(self.tp_rate),
            "FP": _nanmean(self.fp_rate),
            "F-norm": _nanmean(self.f_norm),
        }


def vs_metrics(selected: Sequence[Sequence[int]], truth: Sequence[Sequence[int]]) -> VsMetrics:
    """
    sens = |S ∩ S*| / |S*|，prec = |S ∩ S*| / |S|

    参数:
        selected: 每个数据集选出的协变量
        truth: 每个数据集的真实支撑

    返回:
        VsMetrics: S* 为空时 sens 为 NaN
    """
    if len(selected) != len(truth):
        raise ShapeError(f"选择结果有 {len(selected)} 个数据集，真实支撑有 {len(truth)} 个")
    sens, prec, vacuous = [], [], []
    for chosen, true in zip(selected, truth):
        chosen = np.unique(np.asarray(chosen, dtype=int))
        true = np.unique(np.asarray(true, dtype=int))
        hits = np.intersect1d(chosen, true, assume_unique=True).size
        sens.append(hits / true.size if true.size else float('nan'))
        prec.append(hits / chosen.size if chosen.size else 1.0)
        vacuous.append(chosen.size == 0)
    return VsMetrics(tuple(sens), tuple(prec), tuple(vacuous))


def _as_stack(matrices, what: str) -> np.ndarray:
    stack = np.asarray(matrices, dtype=float)
    if stack.ndim == 2:
        stack = stack[None]
    if stack.ndim != 3 or stack.shape[1] != stack.shape[2]:
        raise ShapeError(f"{what} 必须是 K 个 p × p 方阵，实际形状为 {stack.shape}")
    return stack


def skeleton(adjacency: np.ndarray) -> np.ndarray:
    """无向骨架的上三角 0/1 矩阵（i < j）"""
    B = np.asarray(adjacency) != 0
    return np.triu(B | B.T, k=1)


def adjacency_from_edges(edges, p: int) -> np.ndarray:
    """由 (i, j[, w]) 边列表构造 p × p 的 0/1 邻接矩阵"""
    A = np.zeros((p, p))
    for edge in edges:
        A[int(edge[0]), int(edge[1])] = 1.0
    return A


def dag_metrics(estimated, truth, threshold: float = 0.5) -> DagMetrics:
    """
    忽略方向的 DAG 恢复指标

    估计值先按 threshold 逐元素二值化再骨架化；F-norm 使用原始（可能是概率）值

    参数:
        estimated: K × p × p 的边概率或 0/1 邻接矩阵
        truth: K × p × p 的真实邻接矩阵
        threshold: 二值化阈值

    返回:
        DagMetrics
    """
    est = _as_stack(estimated, "估计")
    true = _as_stack(truth, "真实图")
    if est.shape != true.shape:
        raise ShapeError(f"估计形状 {est.shape} 与真实图形状 {true.shape} 不一致")
    p = est.shape[1]
    n_pairs = p * (p - 1) // 2
    upper = np.triu(np.ones((p, p), dtype=bool), k=1)

    n_wrong, tp, fp, f_norm = [], [], [], []
    for R_hat, R in zip(est, true):
        est_skel = skeleton(R_hat >= threshold)
        true_skel = skeleton(R)
        n_true = int(true_skel.sum())
        n_wrong.append(int(np.sum(est_skel != true_skel)))
        tp.append(np.sum(est_skel & true_skel) / n_true if n_true else float('nan'))
        negatives = n_pairs - n_true
        fp.append(np.sum(est_skel & ~true_skel) / negatives if negatives else float('nan'))
        diff = (R_hat + R_hat.T) - (R + R.T)
        f_norm.append(float(np.sum(diff[upper] ** 2)))
    return DagMetrics(tuple(n_wrong), tuple(float(v) for v in tp), tuple(float(v) for v in fp), tuple(f_norm))


def summarize(rows: List[dict], label_column: str = "replicate", label: str = "mean") -> pd.DataFrame:
    """
    把逐次结果汇成表格并追加均值行

    参数:
        rows: 每个重复一行的字典
        label_column: 标记列名
        label: 均值行的标记

    返回:
        DataFrame: 最后一行为各数值列的均值（忽略 NaN）
    """
    frame = pd.DataFrame(rows)
    numeric = frame.drop(columns=[label_column, "seed"], errors="ignore").select_dtypes("number")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        mean_row = numeric.mean(skipna=True).to_dict()
    mean_row[label_column] = label
    if "seed" in frame.columns:
        mean_row["seed"] = ""
    return pd.concat([frame, pd.DataFrame([mean_row])], ignore_index=True)
