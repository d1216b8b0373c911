"""
本质编码器模块
将预训练的反演编码器微调为本质编码器：一次前向即可输出任意目标的 b*
"""

import copy
import io
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
from tqdm import tqdm

from common.constants import METHOD_ENCODER
from common.error_handler import (
    logger, NonTrainableInverter, NonFiniteLoss, EmptyBatch, ConfigError, CheckpointMismatch, FormatError,
)
from core.types import EssenceVector, ImageTensor, LatentCode, Provenance, SourceBatch
from core.backends import (
    BackendBundle, GeneratorInterface, SemanticEncoderInterface, InverterInterface, invert, module_dtype,
)
from core.losses import EssenceObjective
from utils.config import EncoderTrainConfig, LossWeights, app_config, canonical_digest
from utils.file_handler import atomic_write_json, atomic_write_bytes, read_json
from common.path_utils import sidecar_path


@dataclass
class EssenceEncoder:
    """微调后的本质编码器：可训练反演器参数 + 冻结的生成器/语义编码器引用"""
    inverter: InverterInterface
    generator: GeneratorInterface
    encoder: SemanticEncoderInterface
    config: EncoderTrainConfig
    history: List[dict] = field(default_factory=list)
    steps_run: int = 0
    wall_time: float = 0.0

    @property
    def config_digest(self):
        return canonical_digest({'config': self.config.to_dict(), 'space_id': self.generator.space_id,
                                 'steps_run': self.steps_run})

    def provenance(self) -> dict:
        return {
            'config': self.config.to_dict(),
            'config_digest': self.config_digest,
            'space_id': self.generator.space_id,
            'encoder_id': self.encoder.encoder_id,
            'steps_run': self.steps_run,
            'wall_time': self.wall_time,
            'history': self.history,
        }

    def extract(self, target: ImageTensor) -> EssenceVector:
        return extract(self, target)


def extract(enc: EssenceEncoder, target: ImageTensor) -> EssenceVector:
    """单次前向输出目标的本质向量，不做任何优化"""
    enc.inverter.eval()
    with torch.no_grad():
        code = invert(enc.inverter, target)
    provenance = Provenance(METHOD_ENCODER, target.digest(), enc.config_digest)
    return EssenceVector(code.data.detach().clone(), code.space_id, provenance)


def encoder_objective(inverter: InverterInterface, targets: Sequence[ImageTensor], sources: SourceBatch,
                      g: GeneratorInterface, c: SemanticEncoderInterface, weights: LossWeights) -> float:
    """给定源批次下，反演器输出作为 b 时各目标的平均目标函数值"""
    if not targets:
        raise EmptyBatch("评估目标集为空")
    totals = []
    with torch.no_grad():
        for target in targets:
            b = inverter(target.data.to(module_dtype(inverter)))
            totals.append(float(EssenceObjective(target, sources, g, c, weights)(b).total))
    return float(np.mean(totals))


def finetune_essence_encoder(inv: InverterInterface, train_targets: Sequence[ImageTensor],
                             source_pool: Sequence[LatentCode], g: GeneratorInterface, c: SemanticEncoderInterface,
                             cfg: EncoderTrainConfig = EncoderTrainConfig(),
                             eval_targets: Optional[Sequence[ImageTensor]] = None,
                             show_progress: Optional[bool] = None) -> EssenceEncoder:
    """
    微调反演器使其输出本质向量
    每步按种子均匀抽取目标和 N 个源，令 b = inv(target)，对组合目标求梯度更新反演器参数；
    生成器与语义编码器保持冻结。传入的反演器不会被修改（在副本上训练）
    """
    if not inv.trainable:
        raise NonTrainableInverter(f"反演器 {type(inv).__name__} 没有可训练参数")
    if not train_targets:
        raise EmptyBatch("训练目标集为空")
    if len(source_pool) < cfg.batch_size:
        raise ConfigError(f"需要 {cfg.batch_size} 个源，但源池只有 {len(source_pool)} 个")

    inverter = copy.deepcopy(inv)
    inverter.train()
    for module in (g, c):
        module.requires_grad_(False)

    rng = np.random.default_rng(cfg.seed)
    eval_sources = SourceBatch(
        tuple(source_pool[i] for i in sorted(rng.choice(len(source_pool), cfg.batch_size, replace=False).tolist())),
        "encoder-eval",
    )
    optimizer = torch.optim.Adam(inverter.parameters(), lr=cfg.learning_rate,
                                 betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)
    enc = EssenceEncoder(inverter, g, c, cfg)
    progress = app_config.show_progress if show_progress is None else show_progress
    started = time.perf_counter()
    dtype = module_dtype(inverter)
    logger.info(f"开始微调本质编码器: {cfg.iterations} 步, lr={cfg.learning_rate}, N={cfg.batch_size}, "
                f"训练目标 {len(train_targets)} 个")

    for step in tqdm(range(cfg.iterations), desc="encoder", disable=not progress, leave=False):
        optimizer.zero_grad()
        target_ids = rng.integers(0, len(train_targets), size=cfg.targets_per_step)
        losses = []
        for target_index in target_ids.tolist():
            source_ids = sorted(rng.choice(len(source_pool), cfg.batch_size, replace=False).tolist())
            sources = SourceBatch(tuple(source_pool[i] for i in source_ids), f"step-{step}")
            target = train_targets[target_index]
            b = inverter(target.data.to(dtype))
            losses.append(EssenceObjective(target, sources, g, c, cfg.weights)(b).total)
        loss = torch.stack(losses).mean()
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"第 {step} 步损失非有限")
        loss.backward()
        optimizer.step()
        enc.steps_run = step + 1

        if eval_targets and (step + 1) % cfg.eval_every == 0:
            inverter.eval()
            value = encoder_objective(inverter, eval_targets, eval_sources, g, c, cfg.weights)
            inverter.train()
            enc.history.append({'step': step + 1, 'eval_objective': value})
            logger.info(f"step {step + 1}: 留出集平均目标 {value:.6f}")

    inverter.eval()
    enc.wall_time = time.perf_counter() - started
    logger.info(f"本质编码器微调完成，用时 {enc.wall_time:.2f}s")
    return enc


def save_encoder(enc: EssenceEncoder, path, profile_digest: str, profile_name: str):
    """保存检查点（torch 状态字典）及必需的 JSON 来源信息文件"""
    path = Path(path)
    buffer = io.BytesIO()
    torch.save({'state_dict': enc.inverter.state_dict(), 'config': enc.config.to_dict()}, buffer)
    atomic_write_bytes(path, buffer.getvalue())
    atomic_write_json(sidecar_path(path), {
        'kind': 'essence_encoder',
        'profile': profile_name,
        'profile_digest': profile_digest,
        **enc.provenance(),
    })
    logger.info(f"本质编码器已保存: {path}")


def load_encoder(path, bundle: BackendBundle) -> EssenceEncoder:
    """加载检查点；与当前后端配置不匹配时抛出 CheckpointMismatch"""
    path = Path(path)
    meta_path = sidecar_path(path)
    if not path.exists() or not meta_path.exists():
        raise FormatError(f"检查点或其来源信息文件不存在: {path}")
    meta = read_json(meta_path)
    if meta.get('kind') != 'essence_encoder':
        raise FormatError(f"不是本质编码器检查点: {path}")
    if meta.get('profile_digest') != bundle.digest:
        raise CheckpointMismatch(f"检查点基于配置 {meta.get('profile')} 训练，当前配置为 {bundle.profile.name}")
    payload = torch.load(path, map_location=app_config.device, weights_only=True)
    inverter = bundle.trainable_inverter()
    inverter.load_state_dict(payload['state_dict'])
    inverter.eval()
    enc = EssenceEncoder(inverter, bundle.generator, bundle.encoder, EncoderTrainConfig.from_dict(meta['config']),
                         history=meta.get('history', []), steps_run=meta.get('steps_run', 0),
                         wall_time=meta.get('wall_time', 0.0))
    return enc
