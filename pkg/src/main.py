"""
musel 主程序入口
子命令: fit / dag / simulate vs|dag / bench vs|dag
"""

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from __init__ import __version__
from bench import run_dag_bench, run_vs_bench, write_results
from config_manager import ConfigManager
from dag import Order, OrderScorer, edges_at_threshold, run_chain
from errors import MuselError, UsageError
from ibss import IbssOptions, fit_ibss
from model import derive_pi_from_omegas, load_dataset
from preset_manager import PresetManager
from simgen import DagSimConfig, VsSimConfig, gen_dag_instance, gen_vs_instance, write_instance
from utils import parse_float_list, resolve_thread_count, setup_logging, to_jsonable, write_json

import logging

logger = logging.getLogger('musel.main')


def build_parser() -> argparse.ArgumentParser:
    """构造命令行解析器"""
    parser = argparse.ArgumentParser(prog="musel", description="多任务贝叶斯变量选择与多 DAG 联合估计")
    parser.add_argument("--version", action="version", version=f"musel {__version__}")
    parser.add_argument("--config", help="JSON 配置文件")
    parser.add_argument("--threads", type=int, help="线程数（默认: MUSEL_THREADS 或 CPU 核数）")
    parser.add_argument("--log-level", help="控制台日志级别，如 INFO、DEBUG")
    parser.add_argument("--log-dir", help="日志目录")
    parser.add_argument("--no-progress", action="store_true", help="不显示进度条")
    commands = parser.add_subparsers(dest="command", required=True)

    def add_prior(sub):
        group = sub.add_mutually_exclusive_group(required=True)
        group.add_argument("--omega", help="逗号分隔的 ω_1..ω_K，如 1.2,1.25")
        group.add_argument("--prior", help="config/presets.json 中的先验预设名")

    fit = commands.add_parser("fit", help="用 IBSS 拟合 muSuSiE")
    fit.add_argument("--data", required=True, help="数据集目录")
    fit.add_argument("--L", type=int, help="单效应个数")
    add_prior(fit)
    fit.add_argument("--tol", type=float)
    fit.add_argument("--max-sweeps", type=int)
    fit.add_argument("--threshold", type=float)
    fit.add_argument("--center", action="store_const", const=True, default=None, help="拟合前中心化")
    fit.add_argument("--seed", type=int, help="仅记录在输出中，拟合本身是确定性的")
    fit.add_argument("--out", required=True, help="输出 fit.json")

    dag = commands.add_parser("dag", help="顺序空间 MCMC 联合估计 K 个 DAG")
    dag.add_argument("--data", required=True, help="数据集目录（只需要 X_k.csv）")
    add_prior(dag)
    dag.add_argument("--iters", type=int)
    dag.add_argument("--burnin", dest="burn_in", type=int)
    dag.add_argument("--thin", type=int)
    dag.add_argument("--L-per-node", dest="L_per_node", type=int)
    dag.add_argument("--edge-threshold", dest="edge_threshold", type=float)
    dag.add_argument("--init-order", help="逗号分隔的初始顺序（节点从 0 开始）")
    dag.add_argument("--seed", type=int)
    dag.add_argument("--out", required=True, help="输出 dag.json，R_hat 写在同一目录")

    simulate = commands.add_parser("simulate", help="生成模拟数据")
    sim_kinds = simulate.add_subparsers(dest="kind", required=True)
    sim_vs = sim_kinds.add_parser("vs", help="多任务变量选择实例")
    _add_vs_sim_args(sim_vs)
    sim_vs.add_argument("--seed", type=int)
    sim_vs.add_argument("--out", required=True, help="输出目录")
    sim_dag = sim_kinds.add_parser("dag", help="多 DAG 实例")
    _add_dag_sim_args(sim_dag)
    sim_dag.add_argument("--seed", type=int)
    sim_dag.add_argument("--out", required=True, help="输出目录")

    bench = commands.add_parser("bench", help="重复模拟研究")
    bench_kinds = bench.add_subparsers(dest="kind", required=True)
    bench_vs = bench_kinds.add_parser("vs", help="变量选择模拟研究")
    _add_vs_sim_args(bench_vs)
    add_prior(bench_vs)
    bench_vs.add_argument("--replicates", type=int)
    bench_vs.add_argument("--threshold", type=float)
    bench_vs.add_argument("--no-single", action="store_true", help="不运行单独分析基线")
    bench_vs.add_argument("--seed", type=int)
    bench_vs.add_argument("--out", required=True, help="输出 results.csv")
    bench_dag = bench_kinds.add_parser("dag", help="DAG 模拟研究")
    _add_dag_sim_args(bench_dag)
    add_prior(bench_dag)
    bench_dag.add_argument("--replicates", type=int)
    bench_dag.add_argument("--iters", type=int)
    bench_dag.add_argument("--burnin", dest="burn_in", type=int)
    bench_dag.add_argument("--thin", type=int)
    bench_dag.add_argument("--L-per-node", dest="L_per_node", type=int)
    bench_dag.add_argument("--edge-threshold", dest="edge_threshold", type=float)
    bench_dag.add_argument("--seed", type=int)
    bench_dag.add_argument("--out", required=True, help="输出 results.csv")
    return parser


def _add_vs_sim_args(sub):
    sub.add_argument("--p", type=int)
    sub.add_argument("--n", type=int)
    sub.add_argument("--K", type=int)
    sub.add_argument("--s1", dest="s1_star", type=int, help="共享支撑大小 s1*")
    sub.add_argument("--s2", dest="s2_star", type=int, help="每个数据集的私有支撑大小 s2*")
    sub.add_argument("--sigma", type=float)
    sub.add_argument("--effect-sd", dest="effect_sd", type=float)


def _add_dag_sim_args(sub):
    sub.add_argument("--p", type=int)
    sub.add_argument("--K", type=int)
    sub.add_argument("--n", dest="n_per_dataset", type=int)
    sub.add_argument("--N-com", dest="N_com", type=int)
    sub.add_argument("--N-pri", dest="N_pri", type=int)


def _pick(args: argparse.Namespace, names: Sequence[str]) -> dict:
    return {name: getattr(args, name, None) for name in names}


class MuselApp:
    """命令行应用"""

    def __init__(self):
        self.parser = build_parser()
        self.config_manager: Optional[ConfigManager] = None
        self.threads = 1
        self.progress = True

    def run(self, argv: Optional[List[str]] = None) -> int:
        """
        解析参数并执行子命令

        返回:
            int: 退出码（0 成功，1 运行错误，2 用法错误）
        """
        try:
            args = self.parser.parse_args(argv)
        except SystemExit as e:
            return int(e.code) if e.code is not None else 0

        try:
            self.config_manager = ConfigManager(args.config)
            self._setup(args)
            handler = {
                "fit": self.cmd_fit,
                "dag": self.cmd_dag,
                "simulate": self.cmd_simulate,
                "bench": self.cmd_bench,
            }[args.command]
            handler(args)
            return 0
        except UsageError as e:
            self._report_error(e)
            return 2
        except (MuselError, OSError) as e:
            self._report_error(e)
            return 1

    def _setup(self, args: argparse.Namespace):
        cm = self.config_manager
        level_name = (args.log_level or cm.get('logging.level', 'INFO')).upper()
        level = getattr(logging, level_name, None)
        if not isinstance(level, int):
            raise UsageError(f"未知的日志级别: {args.log_level}")
        setup_logging(args.log_dir or cm.get('logging.log_dir'), level, cm.get('logging.to_file', True))
        self.threads = resolve_thread_count(args.threads, cm.get('runtime.threads'))
        self.progress = bool(cm.get('runtime.progress', True)) and not args.no_progress
        logger.info(f"musel {__version__}: {args.command} (线程数 {self.threads})")

    def _report_error(self, error: Exception):
        logger.error(f"{type(error).__name__}: {error}")
        payload = {"error": type(error).__name__, "message": str(error)}
        sys.stderr.write(json.dumps(payload, ensure_ascii=False) + "\n")

    def _omegas(self, args: argparse.Namespace, p: int, K: int) -> List[float]:
        if args.omega is not None:
            try:
                omegas = parse_float_list(args.omega)
            except ValueError as e:
                raise UsageError(f"--omega 无法解析: {args.omega}") from e
        else:
            omegas = PresetManager().get_omegas(args.prior, p)
        if len(omegas) != K:
            raise UsageError(f"需要 {K} 个 ω（每个数据集个数一个），实际给出 {len(omegas)} 个")
        return omegas

    @staticmethod
    def _seed(args: argparse.Namespace) -> int:
        if args.seed is not None:
            return args.seed
        return int(np.random.SeedSequence().entropy % (2 ** 63))

    def _meta(self, command: str, seed, config: dict, started: float) -> dict:
        return {
            "command": command,
            "version": __version__,
            "seed": seed,
            "config": config,
            "threads": self.threads,
            "wall_time_s": round(time.perf_counter() - started, 3),
        }

    def _ibss_options(self) -> IbssOptions:
        return IbssOptions.from_config(self.config_manager.get('fit', {}))

    def cmd_fit(self, args: argparse.Namespace):
        """muSuSiE 拟合，写出 fit.json"""
        started = time.perf_counter()
        data = load_dataset(args.data)
        data.require_responses()
        params = self.config_manager.resolve('fit', _pick(args, ["L", "tol", "max_sweeps", "threshold", "center"]))
        if params['L'] < 1:
            raise UsageError(f"L 必须 ≥ 1，实际为 {params['L']}")
        omegas = self._omegas(args, data.p, data.K)
        opts = IbssOptions.from_config(params, progress=self.progress)
        pw = derive_pi_from_omegas(omegas, data.p, data.K, L=params['L'])
        fit = fit_ibss(data, params['L'], pw, opts)
        logger.info(f"拟合完成: {fit.n_sweeps} 轮, 收敛={fit.converged}, σ̂²={fit.sigma_sq_hat:.6g}")

        output = self._meta("fit", args.seed, {**params, "omegas": omegas, "data": args.data}, started)
        output.update(fit.to_dict(params['threshold']))
        output["prior"] = {"omegas": pw.omegas, "pi_phi": pw.pi_phi, "pis": pw.pis}
        write_json(args.out, output)
        logger.info(f"拟合结果已写入 {args.out}")

    def cmd_dag(self, args: argparse.Namespace):
        """顺序空间 MCMC，写出 dag.json 与每个数据集的 R_hat CSV"""
        started = time.perf_counter()
        data = load_dataset(args.data)
        params = self.config_manager.resolve(
            'dag', _pick(args, ["iters", "burn_in", "thin", "L_per_node", "edge_threshold"]))
        omegas = self._omegas(args, data.p, data.K)
        seed = self._seed(args)
        rng = np.random.default_rng(seed)
        init = None
        if args.init_order:
            try:
                init = Order(tuple(int(v) for v in args.init_order.split(',')))
            except ValueError as e:
                raise UsageError(f"--init-order 无法解析: {args.init_order}") from e
        pw = derive_pi_from_omegas(omegas, data.p, data.K)
        with OrderScorer(data, pw, params['L_per_node'], self._ibss_options(), params['cache_size'],
                         self.threads) as scorer:
            posterior = run_chain(scorer, params['iters'], params['burn_in'], params['thin'], init, rng,
                                  progress=self.progress)

        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        r_files = []
        for k, R in enumerate(posterior.R_hat, start=1):
            path = out.parent / f"{out.stem}_R_hat_{k}.csv"
            pd.DataFrame(R).to_csv(path, header=False, index=False, float_format='%.17g')
            r_files.append(path.name)
        output = self._meta("dag", seed, {**params, "omegas": omegas, "data": args.data}, started)
        output.update(posterior.to_dict())
        output["R_hat_files"] = r_files
        output["edges"] = edges_at_threshold(posterior.R_hat, params['edge_threshold'])
        write_json(out, output)
        logger.info(f"DAG 结果已写入 {out}")

    def _vs_config(self, args, section: str, seed) -> VsSimConfig:
        params = self.config_manager.resolve(
            section, _pick(args, ["p", "n", "K", "s1_star", "s2_star", "sigma", "effect_sd"]))
        return VsSimConfig(p=params['p'], n=params['n'], K=params['K'], s1_star=params['s1_star'],
                           s2_star=params['s2_star'], sigma=params['sigma'], effect_sd=params['effect_sd'],
                           seed=seed)

    def _dag_config(self, args, section: str, seed) -> DagSimConfig:
        params = self.config_manager.resolve(section, _pick(args, ["p", "K", "n_per_dataset", "N_com", "N_pri"]))
        return DagSimConfig(p=params['p'], K=params['K'], n_per_dataset=params['n_per_dataset'],
                            N_com=params['N_com'], N_pri=params['N_pri'],
                            weight_range=tuple(params['weight_range']), var_range=tuple(params['var_range']),
                            seed=seed)

    def cmd_simulate(self, args: argparse.Namespace):
        """生成模拟实例并写成数据集目录"""
        started = time.perf_counter()
        seed = self._seed(args)
        if args.kind == "vs":
            cfg = self._vs_config(args, 'simulate.vs', seed)
            instance = gen_vs_instance(cfg)
        else:
            cfg = self._dag_config(args, 'simulate.dag', seed)
            instance = gen_dag_instance(cfg)
        directory = write_instance(instance, args.out)
        write_json(directory / "run.json", self._meta(f"simulate {args.kind}", seed, asdict(cfg), started))

    def cmd_bench(self, args: argparse.Namespace):
        """重复模拟研究，写出 results.csv 与同名 JSON 摘要"""
        started = time.perf_counter()
        seed = self._seed(args)
        params = self.config_manager.resolve('bench', _pick(args, ["replicates", "threshold"]))
        if args.kind == "vs":
            cfg = self._vs_config(args, 'simulate.vs', None)
            omegas = self._omegas(args, cfg.p, cfg.K)
            frame = run_vs_bench(cfg, omegas, params['replicates'], seed, self._ibss_options(),
                                 params['threshold'], self.threads, self.progress, not args.no_single)
        else:
            cfg = self._dag_config(args, 'simulate.dag', None)
            omegas = self._omegas(args, cfg.p, cfg.K)
            dag_params = self.config_manager.resolve(
                'dag', _pick(args, ["iters", "burn_in", "thin", "L_per_node", "edge_threshold"]))
            params.update(dag_params)
            frame = run_dag_bench(cfg, omegas, params['replicates'], seed, dag_params['iters'],
                                  dag_params['burn_in'], dag_params['thin'], dag_params['L_per_node'],
                                  self._ibss_options(), dag_params['edge_threshold'], dag_params['cache_size'],
                                  self.threads, self.progress)
        path = write_results(frame, args.out)
        summary = self._meta(f"bench {args.kind}", seed, {**params, **asdict(cfg), "omegas": omegas}, started)
        summary["mean"] = {key: value for key, value in frame.iloc[-1].to_dict().items()
                           if key not in ("replicate", "seed")}
        write_json(path.with_suffix(".json"), to_jsonable(summary))


def main(argv: Optional[List[str]] = None) -> int:
    """主函数"""
    return MuselApp().run(argv)


if __name__ == '__main__':
    sys.exit(main())
