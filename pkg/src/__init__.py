"""
musel - 多任务贝叶斯变量选择（muSuSiE）与共享顺序的多 DAG 联合估计
"""

__version__ = "1.0.0"
