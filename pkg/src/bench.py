"""
模拟研究批量运行
每个重复：由派生种子生成实例 → 拟合 → 计算指标，重复之间并行
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence
import logging

import pandas as pd
from tqdm import tqdm

from dag import OrderScorer, run_chain
from ibss import IbssOptions, fit_ibss, fit_single_task, select_at_threshold
from metrics import dag_metrics, summarize, vs_metrics
from model import derive_pi_from_omegas
from simgen import DagSimConfig, VsSimConfig, gen_dag_instance, gen_vs_instance, replicate_seeds, stream_rng

logger = logging.getLogger('musel.bench')

CSV_FLOAT_FORMAT = '%.10g'
VS_COLUMNS = ["replicate", "seed", "sens_mu", "prec_mu", "sens_si", "prec_si"]
DAG_COLUMNS = ["replicate", "seed", "N_wrong", "TP", "FP", "F-norm"]


def vs_replicate(index: int, seed: int, cfg: VsSimConfig, omegas: Sequence[float],
                 opts: IbssOptions, threshold: float = 0.5, single_task: bool = True) -> dict:
    """
    单次变量选择重复：muSuSiE 用 L = s* + K，单独分析基线用 L = s1* + s2* + 1

    返回:
        dict: 一行结果
    """
    instance = gen_vs_instance(replace(cfg, seed=seed))
    data = instance.data
    L_mu = cfg.s_star + cfg.K
    pw = derive_pi_from_omegas(omegas, data.p, data.K, L=L_mu)
    fit = fit_ibss(data, L_mu, pw, opts)
    mu = vs_metrics(select_at_threshold(fit.pip, threshold), instance.supports)
    row = {"replicate": index, "seed": seed, "sens_mu": mu.sens_mean, "prec_mu": mu.prec_mean}
    if single_task:
        pips = fit_single_task(data, cfg.s1_star + cfg.s2_star + 1, omegas[0], opts)
        si = vs_metrics(select_at_threshold(pips, threshold), instance.supports)
        row.update(sens_si=si.sens_mean, prec_si=si.prec_mean)
    else:
        row.update(sens_si=float('nan'), prec_si=float('nan'))
    logger.debug(f"重复 {index}: sens_mu={row['sens_mu']:.4f}, prec_mu={row['prec_mu']:.4f}")
    return row


def dag_replicate(index: int, seed: int, cfg: DagSimConfig, omegas: Sequence[float], opts: IbssOptions,
                  iters: int, burn_in: int, thin: int = 1, L_per_node: Optional[int] = None,
                  edge_threshold: float = 0.5, cache_size: int = 100000, threads: int = 1) -> dict:
    """
    单次 DAG 重复：模拟 → MH 链 → 骨架指标

    实例由 seed 生成，链使用同一种子下的独立子流

    返回:
        dict: 一行结果（指标为 K 个数据集的均值）
    """
    instance = gen_dag_instance(replace(cfg, seed=seed))
    pw = derive_pi_from_omegas(omegas, cfg.p, cfg.K)
    rng = stream_rng(seed, 1)
    with OrderScorer(instance.data, pw, L_per_node, opts, cache_size, threads) as scorer:
        posterior = run_chain(scorer, iters, burn_in, thin, rng=rng)
    scores = dag_metrics(posterior.R_hat, instance.adjacency, edge_threshold).means()
    row = {"replicate": index, "seed": seed, **scores}
    logger.debug(f"重复 {index}: N_wrong={scores['N_wrong']:.2f}, TP={scores['TP']:.4f}")
    return row


def _run_replicates(job: Callable[[int, int], dict], seed: Optional[int], replicates: int,
                    threads: int, progress: bool) -> List[dict]:
    seeds = replicate_seeds(seed, replicates)
    workers = max(1, min(threads, replicates))
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = executor.map(lambda item: job(*item), enumerate(seeds))
        rows = list(tqdm(futures, total=replicates, disable=not progress, desc="bench"))
    return rows


def run_vs_bench(cfg: VsSimConfig, omegas: Sequence[float], replicates: int, seed: Optional[int],
                 opts: Optional[IbssOptions] = None, threshold: float = 0.5, threads: int = 1,
                 progress: bool = False, single_task: bool = True) -> pd.DataFrame:
    """
    变量选择模拟研究

    参数:
        cfg: 模拟设置（其中的 seed 被派生种子覆盖）
        omegas: ω_1..ω_K
        replicates: 重复次数
        seed: 主种子
        opts: IBSS 选项
        threshold: PIP 阈值
        threads: 并行的重复数
        progress: 是否显示进度条
        single_task: 是否同时运行单独分析基线

    返回:
        DataFrame: 每个重复一行，最后一行为均值
    """
    opts = opts or IbssOptions()
    logger.info(f"开始变量选择模拟: R={replicates}, p={cfg.p}, n={cfg.n}, K={cfg.K}, 线程数={threads}")
    rows = _run_replicates(
        lambda index, rep_seed: vs_replicate(index, rep_seed, cfg, omegas, opts, threshold, single_task),
        seed, replicates, threads, progress)
    return summarize(rows)[VS_COLUMNS]


def run_dag_bench(cfg: DagSimConfig, omegas: Sequence[float], replicates: int, seed: Optional[int],
                  iters: int, burn_in: int, thin: int = 1, L_per_node: Optional[int] = None,
                  opts: Optional[IbssOptions] = None, edge_threshold: float = 0.5, cache_size: int = 100000,
                  threads: int = 1, progress: bool = False) -> pd.DataFrame:
    """
    DAG 模拟研究；线程先分给重复，剩余的分给每条链内的节点回归

    返回:
        DataFrame: 每个重复一行，最后一行为均值
    """
    opts = opts or IbssOptions()
    outer = max(1, min(threads, replicates))
    inner = max(1, threads // outer)
    logger.info(f"开始 DAG 模拟: R={replicates}, p={cfg.p}, K={cfg.K}, iters={iters}, 线程数={threads}")
    rows = _run_replicates(
        lambda index, rep_seed: dag_replicate(index, rep_seed, cfg, omegas, opts, iters, burn_in, thin,
                                              L_per_node, edge_threshold, cache_size, inner),
        seed, replicates, outer, progress)
    return summarize(rows)[DAG_COLUMNS]


def write_results(frame: pd.DataFrame, path) -> Path:
    """以固定浮点格式写出 CSV，相同输入得到逐字节相同的文件"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator='\n')
    logger.info(f"结果已写入 {path}")
    return path
