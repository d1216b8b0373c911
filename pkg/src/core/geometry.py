"""
余弦几何模块
所有模块共用的余弦相似度/距离，范数低于 COSINE_EPS 时抛出 ZeroVector
"""

import torch

from common.constants import COSINE_EPS
from common.error_handler import ZeroVector, DimMismatch
from core.types import as_tensor


def _as_vector(value) -> torch.Tensor:
    if not isinstance(value, torch.Tensor) and isinstance(getattr(value, 'data', None), torch.Tensor):
        value = value.data
    tensor = as_tensor(value)
    if tensor.dim() != 1:
        tensor = tensor.reshape(-1)
    return tensor


def cosine_similarity_rows(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """
    逐行余弦相似度
    参数:
        a, b: 形状 (..., E) 的张量
    返回: 形状 (...) 的张量
    """
    if a.shape[-1] != b.shape[-1]:
        raise DimMismatch(f"维度不一致: {a.shape[-1]} != {b.shape[-1]}")
    norm_a = torch.linalg.vector_norm(a, dim=-1)
    norm_b = torch.linalg.vector_norm(b, dim=-1)
    if bool((norm_a.detach() <= COSINE_EPS).any()) or bool((norm_b.detach() <= COSINE_EPS).any()):
        raise ZeroVector(f"余弦运算遇到零向量（范数 <= {COSINE_EPS}）")
    # 舍入误差可能使结果略超出 [-1, 1]
    return torch.clamp((a * b).sum(dim=-1) / (norm_a * norm_b), -1.0, 1.0)


def cosine_similarity(a, b) -> torch.Tensor:
    """
    余弦相似度 a·b / (‖a‖‖b‖)
    返回: 0 维张量，取值 [-1, 1]，保留梯度
    """
    vec_a = _as_vector(a)
    vec_b = _as_vector(b)
    if vec_a.dtype != vec_b.dtype:
        vec_b = vec_b.to(vec_a.dtype)
    if vec_a.shape[0] != vec_b.shape[0]:
        raise DimMismatch(f"维度不一致: {vec_a.shape[0]} != {vec_b.shape[0]}")
    return cosine_similarity_rows(vec_a, vec_b)


def cosine_distance(a, b) -> torch.Tensor:
    """余弦距离 1 - cos(a, b)，取值 [0, 2]"""
    return 1.0 - cosine_similarity(a, b)
