"""
领域类型模块
隐编码、本质向量、语义嵌入、图像张量等不可变值类型及其形状约定
"""

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import torch

from common.constants import METHOD_OPTIMIZER, METHOD_ENCODER
from common.error_handler import ShapeMismatch, SpaceMismatch, DimMismatch, EmptyBatch, NumericError, ConfigError


def as_tensor(value, dtype=None) -> torch.Tensor:
    """将序列/ndarray/张量统一转换为 torch 张量（默认 float64）"""
    if isinstance(value, torch.Tensor):
        return value if dtype is None else value.to(dtype)
    return torch.as_tensor(np.asarray(value), dtype=dtype or torch.float64)


def tensor_digest(tensor: torch.Tensor) -> str:
    """张量内容的 sha256 摘要（按 float64 小端字节计算）"""
    array = tensor.detach().cpu().to(torch.float64).contiguous().numpy().astype('<f8')
    digest = hashlib.sha256()
    digest.update(str(tuple(array.shape)).encode('ascii'))
    digest.update(array.tobytes())
    return digest.hexdigest()


def _check_finite(tensor: torch.Tensor, what: str):
    if not bool(torch.isfinite(tensor.detach()).all()):
        raise NumericError(f"{what} 含有非有限值")


@dataclass(frozen=True)
class LatentCode:
    """生成器扩展隐空间中的一个点，形状 (L, D)"""
    data: torch.Tensor
    space_id: str

    def __post_init__(self):
        if not self.space_id:
            raise ConfigError("LatentCode 必须带有 space_id")
        if self.data.dim() != 2 or min(self.data.shape) < 1:
            raise ShapeMismatch(f"隐编码形状必须为 (L, D)，实际为 {tuple(self.data.shape)}")
        _check_finite(self.data, "隐编码")

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.data.shape)

    def __add__(self, other):
        if not isinstance(other, EssenceVector):
            return NotImplemented
        if other.space_id != self.space_id:
            raise SpaceMismatch(f"隐空间不匹配: {self.space_id} != {other.space_id}")
        if other.shape != self.shape:
            raise ShapeMismatch(f"本质向量形状 {other.shape} 与隐编码形状 {self.shape} 不一致")
        return LatentCode(self.data + other.data, self.space_id)


@dataclass(frozen=True)
class Provenance:
    """本质向量来源信息"""
    method: str
    target_digest: str
    config_digest: str
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in (METHOD_OPTIMIZER, METHOD_ENCODER):
            raise ConfigError(f"未知的来源方法: {self.method}")
        if not self.target_digest or not self.config_digest:
            raise ConfigError("来源摘要不能为空")

    def to_dict(self):
        return {
            'method': self.method,
            'target_digest': self.target_digest,
            'config_digest': self.config_digest,
            **({'extra': self.extra} if self.extra else {}),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(data['method'], data['target_digest'], data['config_digest'], data.get('extra', {}))


@dataclass(frozen=True)
class EssenceVector:
    """隐空间中的加性偏移 b，形状与同一空间的隐编码相同"""
    data: torch.Tensor
    space_id: str
    provenance: Provenance

    def __post_init__(self):
        if self.data.dim() != 2 or min(self.data.shape) < 1:
            raise ShapeMismatch(f"本质向量形状必须为 (L, D)，实际为 {tuple(self.data.shape)}")
        if not self.space_id:
            raise ConfigError("EssenceVector 必须带有 space_id")
        _check_finite(self.data, "本质向量")

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.data.shape)

    def __neg__(self):
        return EssenceVector(-self.data, self.space_id, self.provenance)

    def norm(self) -> float:
        """展平后的欧氏范数"""
        return float(torch.linalg.vector_norm(self.data.detach().to(torch.float64)))

    def digest(self) -> str:
        return tensor_digest(self.data)


@dataclass(frozen=True)
class SemanticEmbedding:
    """语义编码器空间中的向量（维度 E），以余弦比较"""
    data: torch.Tensor
    encoder_id: str

    def __post_init__(self):
        if self.data.dim() != 1:
            raise ShapeMismatch(f"语义嵌入必须是一维向量，实际为 {tuple(self.data.shape)}")
        _check_finite(self.data, "语义嵌入")

    @property
    def dim(self) -> int:
        return int(self.data.shape[0])

    def __sub__(self, other):
        if not isinstance(other, SemanticEmbedding):
            return NotImplemented
        if other.encoder_id != self.encoder_id:
            raise SpaceMismatch(f"编码器不匹配: {self.encoder_id} != {other.encoder_id}")
        if other.dim != self.dim:
            raise DimMismatch(f"嵌入维度不一致: {self.dim} != {other.dim}")
        return SemanticDelta(self.data - other.data, self.encoder_id)


@dataclass(frozen=True)
class SemanticDelta:
    """两个语义嵌入之差 d = C(I_st) - C(I_s)"""
    data: torch.Tensor
    encoder_id: str

    def __post_init__(self):
        if self.data.dim() != 1:
            raise ShapeMismatch(f"语义差必须是一维向量，实际为 {tuple(self.data.shape)}")
        _check_finite(self.data, "语义差")

    @property
    def dim(self) -> int:
        return int(self.data.shape[0])


@dataclass(frozen=True)
class ImageTensor:
    """
    H×W×C 浮点图像
    value_range: 声明的取值区间 (lo, hi)，可为无穷（玩具线性后端的输出无界）
    color_order: 通道约定，'L' 或 'RGB'
    """
    data: torch.Tensor
    value_range: Tuple[float, float] = (0.0, 1.0)
    color_order: Optional[str] = None

    def __post_init__(self):
        if self.data.dim() != 3:
            raise ShapeMismatch(f"图像必须为 (H, W, C)，实际为 {tuple(self.data.shape)}")
        channels = int(self.data.shape[2])
        if channels not in (1, 3):
            raise ShapeMismatch(f"图像通道数必须为 1 或 3，实际为 {channels}")
        if self.color_order is None:
            object.__setattr__(self, 'color_order', 'L' if channels == 1 else 'RGB')
        allowed = ('L',) if channels == 1 else ('RGB', 'BGR')
        if self.color_order not in allowed:
            raise ShapeMismatch(f"通道约定 {self.color_order} 与通道数 {channels} 不符")
        _check_finite(self.data, "图像")
        lo, hi = self.value_range
        if lo >= hi:
            raise ConfigError(f"非法的取值区间: {self.value_range}")
        values = self.data.detach()
        if (math.isfinite(lo) and bool((values < lo).any())) or (math.isfinite(hi) and bool((values > hi).any())):
            raise ShapeMismatch(f"图像取值超出声明区间 {self.value_range}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    def digest(self) -> str:
        return tensor_digest(self.data)


@dataclass(frozen=True)
class SourceBatch:
    """有序的 N 个源隐编码（同一 space_id）"""
    latents: Tuple[LatentCode, ...]
    batch_id: str = "batch"

    def __post_init__(self):
        object.__setattr__(self, 'latents', tuple(self.latents))
        if len(self.latents) < 1:
            raise EmptyBatch("源批次不能为空")
        space_ids = {z.space_id for z in self.latents}
        if len(space_ids) != 1:
            raise SpaceMismatch(f"源批次混合了多个隐空间: {sorted(space_ids)}")
        shapes = {z.shape for z in self.latents}
        if len(shapes) != 1:
            raise ShapeMismatch(f"源批次形状不一致: {sorted(shapes)}")

    @property
    def size(self) -> int:
        return len(self.latents)

    @property
    def space_id(self) -> str:
        return self.latents[0].space_id

    @property
    def latent_shape(self) -> Tuple[int, int]:
        return self.latents[0].shape

    def stacked(self) -> torch.Tensor:
        """堆叠为 (N, L, D) 张量"""
        return torch.stack([z.data for z in self.latents])

    def permuted(self, order: Sequence[int]):
        """按给定顺序重排批次"""
        return SourceBatch(tuple(self.latents[i] for i in order), self.batch_id)

    @classmethod
    def from_tensor(cls, stacked: torch.Tensor, space_id: str, batch_id: str = "batch"):
        return cls(tuple(LatentCode(row, space_id) for row in stacked), batch_id)


def stack_embeddings(embeddings: Sequence[SemanticEmbedding], encoder_id: Optional[str] = None) -> torch.Tensor:
    """将嵌入列表堆叠为 (N, E)，并检查编码器与维度一致"""
    if not embeddings:
        raise EmptyBatch("嵌入列表不能为空")
    ids = {e.encoder_id for e in embeddings}
    if encoder_id is not None:
        ids.add(encoder_id)
    if len(ids) != 1:
        raise SpaceMismatch(f"嵌入来自不同的编码器: {sorted(ids)}")
    dims = {e.dim for e in embeddings}
    if len(dims) != 1:
        raise DimMismatch(f"嵌入维度不一致: {sorted(dims)}")
    return torch.stack([e.data for e in embeddings])
