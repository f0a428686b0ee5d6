"""
pytest 公共设置
长时间运行的复现检查标记为 slow，只有加 --runslow 时才执行
"""

import os
import sys

import pytest

# 添加 src 目录到路径
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="运行耗时较长的复现检查")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 耗时较长的复现检查")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
