"""
先验预设管理器
管理模拟研究中使用的多组 ω 设置
"""

import json
from pathlib import Path
from typing import Dict, List, Optional
import logging

from errors import ConfigError
from model import omegas_from_prior_masses

logger = logging.getLogger('musel.presets')


class PresetManager:
    """先验预设管理器"""

    def __init__(self, presets_file: str = None):
        """
        初始化预设管理器

        参数:
            presets_file: 预设文件路径，如果为 None 则使用仓库内 config/presets.json
        """
        if presets_file is None:
            base_path = Path(__file__).parent.parent
            presets_file = base_path / "config" / "presets.json"
        self.presets_file = Path(presets_file)
        self.presets: Dict[str, Dict] = {}
        self._load_presets()
        logger.debug(f"先验预设管理器初始化完成，共 {len(self.presets)} 个预设")

    def _load_presets(self):
        """从文件加载预设"""
        try:
            with open(self.presets_file, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"加载预设失败 [{self.presets_file}]: {e}") from e
        self.presets = data.get('presets', {})
        for name, preset in self.presets.items():
            scales = preset.get('scales', [])
            exponents = preset.get('exponents', [])
            if not exponents or len(scales) != len(exponents):
                raise ConfigError(f"预设 '{name}' 的 scales 与 exponents 长度不一致")

    def get_preset_names(self) -> List[str]:
        """
        获取所有预设名称

        返回:
            list: 预设名称列表
        """
        return list(self.presets.keys())

    def get_preset(self, name: str) -> Optional[Dict]:
        """
        获取预设

        参数:
            name: 预设名称

        返回:
            dict: 预设内容，如果不存在返回 None
        """
        if name in self.presets:
            return dict(self.presets[name])
        logger.warning(f"预设不存在: {name}")
        return None

    def get_omegas(self, name: str, p: int) -> List[float]:
        """
        把预设换算为 ω 向量

        预设以 p^(-ω_k) = scale_k · p^(-exponent_k) 的形式记录，换算依赖 p

        参数:
            name: 预设名称
            p: 协变量个数（DAG 中为节点数）

        返回:
            list: ω_1..ω_K
        """
        preset = self.get_preset(name)
        if preset is None:
            raise ConfigError(f"未知的先验预设: {name}，可选: {', '.join(self.get_preset_names())}")
        omegas = omegas_from_prior_masses(preset['scales'], preset['exponents'], p)
        logger.info(f"使用先验预设 '{name}' (p={p}): ω = {[round(w, 4) for w in omegas]}")
        return omegas
