"""
损失函数模块
相似度损失、一致性损失、L2 惩罚以及组合目标

嵌入在损失计算前不做归一化，归一化只发生在每次余弦运算内部
"""

import math
from dataclasses import dataclass, asdict
from typing import Sequence, Union

import torch

from common.error_handler import (
    logger, BatchTooSmall, EmptyBatch, ZeroVector, ShapeMismatch, SpaceMismatch,
)
from common.constants import COSINE_EPS
from core.geometry import cosine_similarity_rows
from core.types import EssenceVector, ImageTensor, SemanticEmbedding, SourceBatch, stack_embeddings
from core.backends import GeneratorInterface, SemanticEncoderInterface, embed, module_dtype
from utils.config import LossWeights

Scalar = Union[float, torch.Tensor]


@dataclass(frozen=True)
class LossBreakdown:
    """目标函数各项取值，total = λ_s·similarity + λ_c·consistency + λ_L2·l2（λ_s 默认为 1）"""
    similarity: Scalar
    consistency: Scalar
    l2: Scalar
    total: Scalar

    @classmethod
    def compose(cls, similarity, consistency, l2, weights: LossWeights):
        total = weights.lambda_similarity * similarity + weights.lambda_consistency * consistency + weights.lambda_l2 * l2
        return cls(similarity, consistency, l2, total)

    def detached(self):
        """转换为纯浮点版本（用于轨迹记录）"""
        return LossBreakdown(*(float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
                               for v in (self.similarity, self.consistency, self.l2, self.total)))

    def to_dict(self):
        return asdict(self.detached())

    def is_finite(self):
        return all(math.isfinite(v) for v in asdict(self.detached()).values())


def similarity_from_tensors(target: torch.Tensor, manipulated: torch.Tensor) -> torch.Tensor:
    """(1/N) Σ (1 - cos(target, manipulated_i))，target: (E,)，manipulated: (N, E)"""
    if manipulated.dim() != 2 or manipulated.shape[0] < 1:
        raise EmptyBatch("相似度损失需要至少一个操作后的嵌入")
    cos = cosine_similarity_rows(target.unsqueeze(0).expand_as(manipulated), manipulated)
    return (1.0 - cos).mean()


def semantic_deltas(source: torch.Tensor, manipulated: torch.Tensor) -> torch.Tensor:
    """Δ_i = C(G(z_i + b)) - C(G(z_i))，零差值直接报错而不是按 0/0 约定处理"""
    if source.shape != manipulated.shape:
        raise ShapeMismatch(f"源嵌入 {tuple(source.shape)} 与操作后嵌入 {tuple(manipulated.shape)} 形状不一致")
    deltas = manipulated - source
    norms = torch.linalg.vector_norm(deltas.detach(), dim=-1)
    zero = torch.nonzero(norms <= COSINE_EPS).flatten().tolist()
    if zero:
        raise ZeroVector(f"源 {zero} 的语义差为零（编辑对该源没有效果）")
    return deltas


def consistency_from_tensors(source: torch.Tensor, manipulated: torch.Tensor) -> torch.Tensor:
    """(1/C(N,2)) Σ_{i<j} (1 - cos(Δ_i, Δ_j))，按固定的 (i, j) 顺序求和"""
    n = source.shape[0]
    if n < 2:
        raise BatchTooSmall(f"一致性损失需要 N >= 2，当前 N = {n}")
    deltas = semantic_deltas(source, manipulated)
    rows, cols = torch.triu_indices(n, n, offset=1)
    cos = cosine_similarity_rows(deltas[rows], deltas[cols])
    return (1.0 - cos).sum() / math.comb(n, 2)


def similarity_loss(target_emb: SemanticEmbedding, manipulated_embs: Sequence[SemanticEmbedding]) -> torch.Tensor:
    """相似度损失：目标嵌入与每个操作后嵌入的平均余弦距离"""
    if not manipulated_embs:
        raise EmptyBatch("相似度损失需要至少一个操作后的嵌入")
    manipulated = stack_embeddings(manipulated_embs, target_emb.encoder_id)
    return similarity_from_tensors(target_emb.data.to(manipulated.dtype), manipulated)


def consistency_loss(source_embs: Sequence[SemanticEmbedding],
                     manipulated_embs: Sequence[SemanticEmbedding]) -> torch.Tensor:
    """一致性损失：按索引配对的语义差之间的平均两两余弦距离"""
    if len(source_embs) != len(manipulated_embs):
        raise ShapeMismatch(f"源嵌入 {len(source_embs)} 个，操作后嵌入 {len(manipulated_embs)} 个")
    if len(source_embs) < 2:
        raise BatchTooSmall(f"一致性损失需要 N >= 2，当前 N = {len(source_embs)}")
    source = stack_embeddings(source_embs)
    manipulated = stack_embeddings(manipulated_embs, source_embs[0].encoder_id)
    return consistency_from_tensors(source, manipulated)


def l2_penalty(b: Union[EssenceVector, torch.Tensor]) -> torch.Tensor:
    """展平后 (L·D) 本质向量的欧氏范数"""
    data = b.data if isinstance(b, EssenceVector) else b
    return torch.linalg.vector_norm(data.reshape(-1))


class EssenceObjective:
    """
    组合目标 L_similarity + λ_c·L_consistency + λ_L2·‖b‖₂
    目标嵌入和源嵌入 C(G(z_i)) 与 b 无关，构造时计算一次，在整个优化过程中复用
    """

    def __init__(self, target: ImageTensor, sources: SourceBatch, g: GeneratorInterface,
                 c: SemanticEncoderInterface, weights: LossWeights = LossWeights()):
        if sources.space_id != g.space_id:
            raise SpaceMismatch(f"源隐编码属于 {sources.space_id}，生成器为 {g.space_id}")
        if sources.latent_shape != tuple(g.latent_shape):
            raise ShapeMismatch(f"源隐编码形状 {sources.latent_shape} 与生成器 {tuple(g.latent_shape)} 不一致")
        self.use_consistency = weights.lambda_consistency > 0 or sources.size >= 2
        if weights.lambda_consistency > 0 and sources.size < 2:
            raise BatchTooSmall(f"一致性损失需要 N >= 2，当前 N = {sources.size}")

        self.generator = g
        self.encoder = c
        self.weights = weights
        self.dtype = module_dtype(g)
        with torch.no_grad():
            self.target_embedding = embed(c, target).data.detach().to(self.dtype)
            self.source_latents = sources.stacked().detach().to(self.dtype)
            self.source_embeddings = c(g(self.source_latents)).detach()

    @property
    def batch_size(self):
        return self.source_latents.shape[0]

    def manipulated_embeddings(self, b: torch.Tensor) -> torch.Tensor:
        """C(G(z_i + b))，形状 (N, E)"""
        return self.encoder(self.generator(self.source_latents + b))

    def __call__(self, b: torch.Tensor) -> LossBreakdown:
        if tuple(b.shape) != tuple(self.source_latents.shape[1:]):
            raise ShapeMismatch(f"本质向量形状 {tuple(b.shape)} 与隐编码 {tuple(self.source_latents.shape[1:])} 不一致")
        manipulated = self.manipulated_embeddings(b)
        similarity = similarity_from_tensors(self.target_embedding, manipulated)
        if self.use_consistency:
            consistency = consistency_from_tensors(self.source_embeddings, manipulated)
        else:
            # N = 1 且 λ_c = 0：退化为单源语义损失
            consistency = torch.zeros((), dtype=similarity.dtype)
        return LossBreakdown.compose(similarity, consistency, l2_penalty(b), self.weights)


def objective(b: EssenceVector, target: ImageTensor, sources: SourceBatch, g: GeneratorInterface,
              c: SemanticEncoderInterface, w: LossWeights = LossWeights()) -> LossBreakdown:
    """计算本质向量 b 的组合目标"""
    if b.space_id != g.space_id:
        raise SpaceMismatch(f"本质向量属于 {b.space_id}，生成器为 {g.space_id}")
    breakdown = EssenceObjective(target, sources, g, c, w)(b.data)
    logger.debug(f"目标函数: {breakdown.to_dict()}")
    return breakdown
