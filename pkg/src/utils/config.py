"""
配置管理模块
管理运行配置（损失权重、优化器、编码器微调）和进程级动态配置
"""

import json
import hashlib
from dataclasses import dataclass, field, asdict, fields
from pathlib import Path

from common.constants import *
from common.error_handler import logger, ConfigError, BatchTooSmall


def canonical_digest(payload) -> str:
    """对可 JSON 序列化的对象计算 sha256 摘要（键排序、紧凑分隔符）"""
    text = json.dumps(payload, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


@dataclass(frozen=True)
class LossWeights:
    """目标函数各项权重；lambda_similarity 固定为 1，仅消融实验置 0"""
    lambda_consistency: float = DEFAULT_LAMBDA_CONSISTENCY
    lambda_l2: float = DEFAULT_LAMBDA_L2
    lambda_similarity: float = 1.0

    def __post_init__(self):
        if min(self.lambda_consistency, self.lambda_l2, self.lambda_similarity) < 0:
            raise ConfigError(f"损失权重必须非负: {self}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class OptimizerConfig:
    """本质优化配置"""
    iterations: int = DEFAULT_OPT_ITERATIONS
    learning_rate: float = DEFAULT_OPT_LEARNING_RATE
    batch_size: int = DEFAULT_OPT_BATCH_SIZE
    weights: LossWeights = field(default_factory=LossWeights)
    init_mode: str = INIT_NOISE
    seed: int = DEFAULT_SEED
    adam_beta1: float = DEFAULT_ADAM_BETA1
    adam_beta2: float = DEFAULT_ADAM_BETA2
    adam_eps: float = DEFAULT_ADAM_EPS
    noise_sigma: float = DEFAULT_NOISE_SIGMA
    # 非默认：best-so-far 总损失在 patience 步内未改善时提前停止，0 表示关闭
    early_stop_patience: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"迭代次数至少为 1: {self.iterations}")
        if self.learning_rate <= 0:
            raise ConfigError(f"学习率必须为正: {self.learning_rate}")
        if self.batch_size < 2:
            raise BatchTooSmall(f"一致性损失需要 N >= 2，当前 N = {self.batch_size}")
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"未知的初始化方式: {self.init_mode}")
        if self.early_stop_patience < 0:
            raise ConfigError("early_stop_patience 必须非负")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        weights = data.pop('weights', None)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            logger.warning(f"忽略未知的优化器配置项: {sorted(unknown)}")
        kwargs = {k: v for k, v in data.items() if k in known}
        if weights is not None:
            kwargs['weights'] = weights if isinstance(weights, LossWeights) else LossWeights(**weights)
        return cls(**kwargs)

    def digest(self):
        return canonical_digest(self.to_dict())


@dataclass(frozen=True)
class EncoderTrainConfig:
    """本质编码器微调配置"""
    learning_rate: float = DEFAULT_ENC_LEARNING_RATE
    iterations: int = DEFAULT_ENC_ITERATIONS
    targets_per_step: int = DEFAULT_ENC_TARGETS_PER_STEP
    batch_size: int = DEFAULT_ENC_BATCH_SIZE
    weights: LossWeights = field(default_factory=LossWeights)
    train_set_size: int = DEFAULT_ENC_TRAIN_SET_SIZE
    eval_set_size: int = DEFAULT_ENC_EVAL_SET_SIZE
    eval_every: int = DEFAULT_ENC_EVAL_EVERY
    seed: int = DEFAULT_SEED
    adam_beta1: float = DEFAULT_ADAM_BETA1
    adam_beta2: float = DEFAULT_ADAM_BETA2
    adam_eps: float = DEFAULT_ADAM_EPS

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError(f"迭代次数必须非负: {self.iterations}")
        if self.learning_rate <= 0:
            raise ConfigError(f"学习率必须为正: {self.learning_rate}")
        if self.targets_per_step < 1:
            raise ConfigError("每步目标数至少为 1")
        if self.batch_size < 2:
            raise BatchTooSmall(f"一致性损失需要 N >= 2，当前 N = {self.batch_size}")
        if self.train_set_size < 1 or self.eval_set_size < 0:
            raise ConfigError("训练集/评估集大小非法")
        if self.eval_every < 1:
            raise ConfigError("eval_every 至少为 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        weights = data.pop('weights', None)
        known = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in data.items() if k in known}
        if weights is not None:
            kwargs['weights'] = weights if isinstance(weights, LossWeights) else LossWeights(**weights)
        return cls(**kwargs)

    def digest(self):
        return canonical_digest(self.to_dict())


def load_config_file(path):
    """
    读取配置文件（JSON 或 TOML）
    运行清单（run_manifest.json）也可作为配置文件，取其中的 config 字段
    返回: dict
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"配置文件不存在: {path}")

    try:
        if path.suffix.lower() == '.toml':
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            with open(path, 'rb') as f:
                data = tomllib.load(f)
        else:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
    except (ValueError, OSError) as e:
        raise ConfigError(f"无法解析配置文件 {path}: {e}") from e

    if isinstance(data, dict) and 'command' in data and 'config' in data:
        logger.info(f"从运行清单读取配置: {path.name}")
        data = data['config']
    if not isinstance(data, dict):
        raise ConfigError(f"配置文件顶层必须是对象: {path}")
    return data


def merge_config(defaults: dict, file_values: dict, cli_values: dict) -> dict:
    """按优先级合并配置：命令行 > 配置文件 > 内置默认值（None 表示未指定）"""
    merged = dict(defaults)
    for source in (file_values or {}, cli_values or {}):
        for key, value in source.items():
            if value is None:
                continue
            if isinstance(value, dict) and isinstance(merged.get(key), dict):
                merged[key] = {**merged[key], **{k: v for k, v in value.items() if v is not None}}
            else:
                merged[key] = value
    return merged


class AppConfig:
    """应用程序进程级配置管理"""

    _DTYPES = ('float64', 'float32')

    def __init__(self):
        self._dtype = 'float64'
        self._device = 'cpu'
        self._jobs = 1
        self._show_progress = False

    @property
    def dtype(self):
        """计算精度（'float64' 或 'float32'）"""
        return self._dtype

    @dtype.setter
    def dtype(self, value):
        if value not in self._DTYPES:
            raise ConfigError(f"不支持的精度: {value}")
        self._dtype = value

    @property
    def torch_dtype(self):
        import torch
        return torch.float64 if self._dtype == 'float64' else torch.float32

    @property
    def device(self):
        """计算设备"""
        return self._device

    @device.setter
    def device(self, value):
        self._device = str(value)

    @property
    def jobs(self):
        """评估并发数"""
        return self._jobs

    @jobs.setter
    def jobs(self, value):
        self._jobs = max(1, int(value))

    @property
    def show_progress(self):
        """是否显示进度条"""
        return self._show_progress

    @show_progress.setter
    def show_progress(self, value):
        self._show_progress = bool(value)


# 全局配置实例
app_config = AppConfig()
