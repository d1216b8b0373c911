"""
本质优化模块
针对单个目标图像用 Adam 优化本质向量 b*，以及按 I_st = G(z_s + b*) 对源隐编码施加本质
"""

import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from common.constants import INIT_TARGET_INVERSION, METHOD_OPTIMIZER
from common.error_handler import logger, MissingInverter, NonFiniteLoss, ConfigError, SpaceMismatch, ShapeMismatch, EmptyBatch
from core.types import EssenceVector, ImageTensor, LatentCode, Provenance, SourceBatch, tensor_digest
from core.backends import GeneratorInterface, SemanticEncoderInterface, InverterInterface, decode, invert, module_dtype
from core.losses import EssenceObjective, LossBreakdown
from utils.config import OptimizerConfig, app_config, canonical_digest


@dataclass
class OptimizationTrace:
    """优化轨迹：每次迭代（更新前）的损失分解"""
    steps: List[LossBreakdown] = field(default_factory=list)
    final: Optional[LossBreakdown] = None
    wall_time: float = 0.0
    final_digest: str = ""
    stopped_early: bool = False

    def __len__(self):
        return len(self.steps)

    def best_so_far(self) -> List[float]:
        """逐步的历史最小总损失"""
        return np.minimum.accumulate([s.total for s in self.steps]).tolist() if self.steps else []

    def to_dict(self):
        return {
            'iterations': len(self.steps),
            'wall_time': self.wall_time,
            'final_digest': self.final_digest,
            'stopped_early': self.stopped_early,
            'final': self.final.to_dict() if self.final else None,
            'steps': [s.to_dict() for s in self.steps],
        }


def sample_source_batch(pool: Sequence[LatentCode], n: int, seed: int, batch_id: str = "train") -> SourceBatch:
    """从源隐编码池中按种子无放回抽取 N 个，整个优化过程保持固定"""
    if not pool:
        raise EmptyBatch("源隐编码池为空")
    if n > len(pool):
        raise ConfigError(f"需要 {n} 个源，但源池只有 {len(pool)} 个")
    rng = np.random.default_rng(seed)
    indices = sorted(rng.choice(len(pool), size=n, replace=False).tolist())
    return SourceBatch(tuple(pool[i] for i in indices), batch_id)


def _inverted_target(target: ImageTensor, g: GeneratorInterface, inv: Optional[InverterInterface]) -> torch.Tensor:
    if inv is None:
        raise MissingInverter("目标反演需要提供反演器")
    with torch.no_grad():
        code = invert(inv, target)
    if code.space_id != g.space_id:
        raise SpaceMismatch(f"反演器属于 {code.space_id}，生成器为 {g.space_id}")
    return code.data.detach().to(module_dtype(g)).clone()


def initial_essence(target: ImageTensor, g: GeneratorInterface, inv: Optional[InverterInterface],
                    cfg: OptimizerConfig) -> torch.Tensor:
    """
    初始本质向量
    noise: 种子化的 σ·N(0, 1)，从不精确为零
    target_inversion: b⁰ = invert(target)
    """
    dtype = module_dtype(g)
    if cfg.init_mode == INIT_TARGET_INVERSION:
        return _inverted_target(target, g, inv)
    generator = torch.Generator().manual_seed(int(cfg.seed))
    noise = torch.randn(*g.latent_shape, generator=generator, dtype=torch.float64)
    return (cfg.noise_sigma * noise).to(dtype)


def optimize_essence(target: ImageTensor, sources: SourceBatch, g: GeneratorInterface, c: SemanticEncoderInterface,
                     inv: Optional[InverterInterface] = None, cfg: OptimizerConfig = OptimizerConfig(),
                     show_progress: Optional[bool] = None) -> Tuple[EssenceVector, OptimizationTrace]:
    """
    最小化 L_similarity + λ_c·L_consistency + λ_L2·‖b‖₂ 求 b*
    源批次在整个运行中固定；相同种子、配置和后端下结果逐位可复现
    """
    if sources.size != cfg.batch_size:
        raise ConfigError(f"源批次大小 {sources.size} 与配置 N = {cfg.batch_size} 不一致")

    started = time.perf_counter()
    objective = EssenceObjective(target, sources, g, c, cfg.weights)
    b = initial_essence(target, g, inv, cfg).requires_grad_(True)
    optimizer = torch.optim.Adam([b], lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)
    trace = OptimizationTrace()

    progress = app_config.show_progress if show_progress is None else show_progress
    best_total, best_step = float('inf'), 0
    logger.info(f"开始本质优化: {cfg.iterations} 次迭代, lr={cfg.learning_rate}, N={cfg.batch_size}, init={cfg.init_mode}")

    for step in tqdm(range(cfg.iterations), desc="essence", disable=not progress, leave=False):
        optimizer.zero_grad()
        breakdown = objective(b)
        record = breakdown.detached()
        if not record.is_finite():
            raise NonFiniteLoss(f"第 {step} 次迭代损失非有限: {record.to_dict()}")
        trace.steps.append(record)
        breakdown.total.backward()
        optimizer.step()

        if step % 100 == 0:
            logger.debug(f"step {step}: {record.to_dict()}")
        if record.total < best_total:
            best_total, best_step = record.total, step
        elif cfg.early_stop_patience and step - best_step >= cfg.early_stop_patience:
            trace.stopped_early = True
            logger.info(f"第 {step} 次迭代触发提前停止")
            break

    b_star = b.detach().clone()
    with torch.no_grad():
        trace.final = objective(b_star).detached()
    trace.wall_time = time.perf_counter() - started
    trace.final_digest = tensor_digest(b_star)

    provenance = Provenance(
        method=METHOD_OPTIMIZER,
        target_digest=target.digest(),
        config_digest=canonical_digest({
            'config': cfg.to_dict(),
            'sources': tensor_digest(sources.stacked()),
            'space_id': g.space_id,
        }),
    )
    logger.info(f"本质优化完成: final={trace.final.to_dict()}, 用时 {trace.wall_time:.2f}s")
    return EssenceVector(b_star, g.space_id, provenance), trace


def inversion_essence(target: ImageTensor, g: GeneratorInterface, inv: Optional[InverterInterface],
                      config: dict) -> EssenceVector:
    """
    零次迭代：直接以目标反演作为本质向量 b* = invert(target)，不做优化
    config: 记录在来源信息中的配置快照（iterations = 0）
    """
    b = _inverted_target(target, g, inv)
    provenance = Provenance(
        method=METHOD_OPTIMIZER,
        target_digest=target.digest(),
        config_digest=canonical_digest({'config': config, 'space_id': g.space_id}),
        extra={'iterations': 0},
    )
    logger.info("零次迭代：直接输出目标反演作为本质向量")
    return EssenceVector(b, g.space_id, provenance)


def apply_essence(z_s: LatentCode, b: EssenceVector, g: GeneratorInterface) -> ImageTensor:
    """I_st = G(z_s + b)：隐空间逐元素相加后解码，不做其他变换"""
    if z_s.space_id != g.space_id:
        raise SpaceMismatch(f"源隐编码属于 {z_s.space_id}，生成器为 {g.space_id}")
    if b.shape != z_s.shape:
        raise ShapeMismatch(f"本质向量形状 {b.shape} 与源隐编码 {z_s.shape} 不一致")
    with torch.no_grad():
        return decode(g, z_s + b)
