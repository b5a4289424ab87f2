"""
配置管理模块
工具集运行参数的默认值、JSON 配置文件读写以及版本号读取
"""
import json
import logging
from pathlib import Path
from typing import Dict, Optional, Union

from errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_FILE = "cvqkd_config.json"
# 源码树中 VERSION 在项目根目录，打包后与模块在同一目录
VERSION_FILES = (Path(__file__).resolve().parent.parent / "VERSION",
                 Path(__file__).resolve().parent / "VERSION")


class ToolkitConfig:
    """工具集配置"""

    DEFAULTS = {
        'n0': 1.0,
        'workers': 1,
        'z_gate': 5.0,
        'margin_bits': 64,
        'slices': 4,
        'rounds': 4,
        'sacrificed_fraction': 0.1,
        'bootstrap_resamples': 200,
        'log_dir': 'logs',
        'enable_color': True,
        'v_infinity': 1e6,
    }

    def __init__(self, **overrides):
        unknown = set(overrides) - set(self.DEFAULTS)
        if unknown:
            raise ConfigError(f"未知的配置项: {', '.join(sorted(unknown))}")
        values = dict(self.DEFAULTS)
        values.update(overrides)
        self.n0 = float(values['n0'])
        self.workers = int(values['workers'])
        self.z_gate = float(values['z_gate'])
        self.margin_bits = int(values['margin_bits'])
        self.slices = int(values['slices'])
        self.rounds = int(values['rounds'])
        self.sacrificed_fraction = float(values['sacrificed_fraction'])
        self.bootstrap_resamples = int(values['bootstrap_resamples'])
        self.log_dir = values['log_dir']
        self.enable_color = bool(values['enable_color'])
        self.v_infinity = float(values['v_infinity'])
        self.validate()

    def validate(self):
        """检查取值范围"""
        if self.n0 <= 0:
            raise ConfigError(f"n0 必须为正数: {self.n0}")
        if self.workers < 1:
            raise ConfigError(f"workers 至少为 1: {self.workers}")
        if self.z_gate <= 0:
            raise ConfigError(f"z_gate 必须为正数: {self.z_gate}")
        if self.margin_bits < 0:
            raise ConfigError(f"margin_bits 不能为负: {self.margin_bits}")
        if not 1 <= self.slices <= 8:
            raise ConfigError(f"slices 必须在 [1, 8] 内: {self.slices}")
        if self.rounds < 1:
            raise ConfigError(f"rounds 至少为 1: {self.rounds}")
        if not 0 < self.sacrificed_fraction <= 0.5:
            raise ConfigError(f"sacrificed_fraction 必须在 (0, 0.5] 内: {self.sacrificed_fraction}")
        if self.bootstrap_resamples < 2:
            raise ConfigError(f"bootstrap_resamples 至少为 2: {self.bootstrap_resamples}")
        if self.v_infinity < 1:
            raise ConfigError(f"v_infinity 不能小于 1: {self.v_infinity}")

    def to_dict(self) -> Dict:
        """转换为字典"""
        return {key: getattr(self, key) for key in self.DEFAULTS}

    @staticmethod
    def from_dict(data: Dict) -> 'ToolkitConfig':
        """从字典创建"""
        return ToolkitConfig(**data)

    def merged(self, **overrides) -> 'ToolkitConfig':
        """返回用非 None 的参数覆盖后的新配置（命令行参数优先于配置文件）"""
        data = self.to_dict()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return ToolkitConfig.from_dict(data)


def load_config(path: Optional[Union[str, Path]] = None) -> ToolkitConfig:
    """加载配置文件，文件不存在时返回默认配置"""
    config_path = Path(path or DEFAULT_CONFIG_FILE)
    if not config_path.exists():
        if path is not None:
            logger.warning(f"配置文件不存在，使用默认配置: {config_path}")
        return ToolkitConfig()
    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"配置文件格式错误 {config_path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"配置文件顶层必须是对象: {config_path}")
    logger.debug(f"已加载配置: {config_path}")
    return ToolkitConfig.from_dict(data)


def save_config(config: ToolkitConfig, path: Optional[Union[str, Path]] = None) -> Path:
    """保存配置到文件"""
    config_path = Path(path or DEFAULT_CONFIG_FILE)
    with open(config_path, 'w', encoding='utf-8') as f:
        json.dump(config.to_dict(), f, ensure_ascii=False, indent=2)
    return config_path


def get_version() -> str:
    """从VERSION文件读取当前版本号"""
    for version_file in VERSION_FILES:
        try:
            if version_file.exists():
                content = version_file.read_text(encoding='utf-8').strip()
                return content.split('\n')[0].strip() or "0.0.0"
        except OSError as e:
            logger.warning(f"读取当前版本失败: {e}")
    return "0.0.0"
