"""
工具函数模块
提供日志、线程数、JSON 输出等通用工具函数
"""

import json
import os
from pathlib import Path
import logging
from logging.handlers import RotatingFileHandler
from typing import Any, Optional

import numpy as np

THREADS_ENV = "MUSEL_THREADS"


def get_resource_path(relative_path):
    """
    获取仓库内资源文件路径

    参数:
        relative_path: 相对于仓库根目录的路径

    返回:
        str: 资源文件的绝对路径
    """
    # 使用脚本所在目录的上一级目录作为基础路径
    base_path = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    return os.path.join(base_path, relative_path)


def setup_logging(log_dir: Path = None, log_level=logging.INFO, to_file: bool = True):
    """
    设置日志系统

    参数:
        log_dir: 日志目录，如果为 None 则使用 ~/.musel/logs
        log_level: 控制台日志级别
        to_file: 是否写入轮转日志文件

    返回:
        Logger: 日志记录器
    """
    logger = logging.getLogger('musel')
    logger.setLevel(logging.DEBUG)

    # 清除现有的处理器
    logger.handlers.clear()

    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    log_file = None
    if to_file:
        if log_dir is None:
            log_dir = Path.home() / ".musel" / "logs"
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        log_file = log_dir / "musel.log"

        # 文件处理器（轮转日志）
        file_handler = RotatingFileHandler(
            log_file,
            maxBytes=1024*1024,  # 1MB
            backupCount=3,
            encoding='utf-8'
        )
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    # 控制台处理器，写标准错误，数据只走标准输出或文件
    console_handler = logging.StreamHandler()
    console_handler.setLevel(log_level)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    logger.debug("=" * 50)
    logger.debug("musel 日志系统已初始化")
    if log_file is not None:
        logger.debug(f"日志文件: {log_file}")
    logger.debug("=" * 50)

    return logger


def resolve_thread_count(cli_value: Optional[int] = None, config_value: Optional[int] = None) -> int:
    """
    确定线程数

    优先级: 命令行 > 环境变量 MUSEL_THREADS > 配置文件 > CPU 核数

    参数:
        cli_value: 命令行给出的线程数
        config_value: 配置文件中的线程数

    返回:
        int: 线程数（至少为 1）
    """
    if cli_value is not None:
        return max(1, int(cli_value))
    env_value = os.getenv(THREADS_ENV)
    if env_value:
        try:
            return max(1, int(env_value))
        except ValueError:
            logging.getLogger('musel.utils').warning(
                f"环境变量 {THREADS_ENV}={env_value!r} 不是整数，已忽略")
    if config_value:
        return max(1, int(config_value))
    return os.cpu_count() or 1


def to_jsonable(value: Any) -> Any:
    """把 numpy 标量/数组以及嵌套容器转换为可 JSON 序列化的对象"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, Path):
        return str(value)
    return value


def write_json(path, data: dict) -> Path:
    """
    写出 JSON 文件（自动创建父目录）

    参数:
        path: 输出路径
        data: 要写出的字典

    返回:
        Path: 实际写出的路径
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(to_jsonable(data), f, indent=2, ensure_ascii=False)
    return path


def parse_float_list(text: str):
    """解析逗号分隔的浮点数列表，如 '1.2,1.25'"""
    parts = [part.strip() for part in text.split(',') if part.strip()]
    return [float(part) for part in parts]
