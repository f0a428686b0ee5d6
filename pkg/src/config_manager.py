"""
配置管理器
负责默认配置与用户配置文件的合并，以及命令行参数的优先级处理
"""

import copy
import json
from pathlib import Path
from typing import Dict, Any, Optional
import logging

from errors import ConfigError
from utils import get_resource_path

logger = logging.getLogger('musel.config')


class ConfigManager:
    """配置管理器"""

    def __init__(self, config_file: Optional[str] = None, defaults_file: Optional[str] = None):
        """
        初始化配置管理器

        参数:
            config_file: 用户配置文件（JSON），为 None 时只使用默认配置
            defaults_file: 默认配置文件，为 None 时使用仓库内 config/default_config.json
        """
        if defaults_file is None:
            defaults_file = get_resource_path("config/default_config.json")
        self.defaults_file = Path(defaults_file)
        self.config_file = Path(config_file) if config_file else None
        self.config: Dict[str, Any] = {}
        self.load_config()
        logger.debug(f"配置管理器初始化完成，配置文件: {self.config_file}")

    def load_config(self):
        """加载配置"""
        self.config = self._get_default_config()
        if self.config_file is None:
            return
        if not self.config_file.exists():
            raise ConfigError(f"配置文件不存在: {self.config_file}")
        try:
            with open(self.config_file, 'r', encoding='utf-8') as f:
                user_config = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"配置文件不是合法的 JSON: {self.config_file}: {e}") from e
        if not isinstance(user_config, dict):
            raise ConfigError(f"配置文件顶层必须是对象: {self.config_file}")
        self.config = user_config
        self._validate_config()
        logger.info(f"配置文件加载成功: {self.config_file}")

    def _get_default_config(self) -> Dict[str, Any]:
        """
        读取默认配置

        返回:
            dict: 默认配置
        """
        try:
            with open(self.defaults_file, 'r', encoding='utf-8') as f:
                return json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"无法读取默认配置 {self.defaults_file}: {e}") from e

    def _validate_config(self):
        """验证配置，确保所有必需的键都存在"""
        default = self._get_default_config()

        def merge_dict(target, source):
            """递归合并字典"""
            for key, value in source.items():
                if key not in target:
                    target[key] = copy.deepcopy(value)
                elif isinstance(value, dict) and isinstance(target[key], dict):
                    merge_dict(target[key], value)

        merge_dict(self.config, default)

    def get(self, key: str, default=None):
        """
        获取配置值

        参数:
            key: 配置键，支持点号分隔的嵌套键，如 'fit.tol'
            default: 默认值

        返回:
            配置值
        """
        keys = key.split('.')
        value = self.config
        for k in keys:
            if isinstance(value, dict) and k in value:
                value = value[k]
            else:
                return default
        return value

    def resolve(self, section: str, overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """
        按优先级合并某一节的参数：命令行 > 配置文件 > 默认值

        参数:
            section: 配置节，如 'fit' 或 'simulate.vs'
            overrides: 命令行给出的参数，值为 None 的键视为未给出

        返回:
            dict: 合并后的参数
        """
        base = self.get(section, {})
        if not isinstance(base, dict):
            raise ConfigError(f"配置节 {section} 不是对象")
        resolved = copy.deepcopy(base)
        for key, value in (overrides or {}).items():
            if value is not None:
                resolved[key] = value
        return resolved
