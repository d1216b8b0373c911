"""
实验模块
隐藏目标夹具、迁移 + 评估流水线，以及消融和敏感性实验
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from common.constants import *
from common.error_handler import logger, ConfigError, BatchTooSmall, EmptyBatch
from core.types import EssenceVector, ImageTensor, LatentCode, SourceBatch
from core.backends import BackendBundle, build_backend, load_profile, decode, invert, feature_embed, module_dtype
from core.losses import EssenceObjective
from core.essence_optimizer import optimize_essence, apply_essence, sample_source_batch
from core.encoder_trainer import EssenceEncoder, finetune_essence_encoder
from core.evaluation import EvaluationPair, EvaluationReport, aggregate, evaluate_pairs, fid_from_images
from utils.config import OptimizerConfig, EncoderTrainConfig, LossWeights, canonical_digest
from utils import file_handler


@dataclass
class Fixture:
    """
    一次实验的全部输入
    targets: 目标图像；pool: 优化时抽取 N 个源的训练源池；held_out: 评估用的留出源
    """
    bundle: BackendBundle
    targets: Dict[str, ImageTensor]
    pool: Dict[str, LatentCode]
    held_out: Dict[str, LatentCode] = field(default_factory=dict)
    face: Dict[str, bool] = field(default_factory=dict)
    reference_features: Optional[torch.Tensor] = None
    encoder_targets: List[ImageTensor] = field(default_factory=list)
    name: str = "custom"

    def __post_init__(self):
        if not self.targets:
            raise EmptyBatch("夹具没有目标图像")
        if not self.pool:
            raise EmptyBatch("夹具没有源隐编码")

    @property
    def evaluation_sources(self) -> Dict[str, LatentCode]:
        """评估所用的源：有留出源时只用留出源"""
        return self.held_out or self.pool

    def pool_list(self) -> List[LatentCode]:
        return [self.pool[k] for k in sorted(self.pool)]

    def digest(self) -> str:
        return canonical_digest({
            'profile': self.bundle.digest,
            'targets': {k: v.digest() for k, v in sorted(self.targets.items())},
            'pool': sorted(self.pool),
            'held_out': sorted(self.held_out),
        })


def _seeded_latents(seed: int, count: int, shape, dtype, space_id: str, prefix: str) -> Dict[str, LatentCode]:
    generator = torch.Generator().manual_seed(int(seed))
    data = torch.randn(count, *shape, generator=generator, dtype=torch.float64).to(dtype)
    return {f"{prefix}{i:03d}": LatentCode(data[i], space_id) for i in range(count)}


def default_reference_size(bundle: BackendBundle) -> int:
    """FID 参考集默认大小：玩具配置 1000，预训练适配器 7000"""
    return TOY_REFERENCE_SIZE if bundle.profile.kind == "toy" else FID_REFERENCE_SIZE


def reference_features_from_generator(bundle: BackendBundle, size: Optional[int] = None,
                                      seed: int = DEFAULT_SEED) -> torch.Tensor:
    """由生成器解码种子化的标准正态隐编码，作为自然图像参考集的特征；按批解码"""
    g = bundle.generator
    size = default_reference_size(bundle) if size is None else int(size)
    generator = torch.Generator().manual_seed(int(seed) + 10_000)
    latents = torch.randn(size, *g.latent_shape, generator=generator, dtype=torch.float64).to(module_dtype(g))
    features = []
    with torch.no_grad():
        for chunk in torch.split(latents, FID_REFERENCE_BATCH):
            features.append(feature_embed(bundle.features, g(chunk)))
    logger.debug(f"参考集特征: {size} 张，来自 {bundle.profile.name}")
    return torch.cat(features)


def make_toy_fixture(profile: str = "toy", n_targets: int = TOY_FIXTURE_TARGETS, n_pool: int = TOY_FIXTURE_POOL,
                     n_held_out: int = TOY_FIXTURE_HELD_OUT, n_encoder_targets: int = TOY_FIXTURE_ENCODER_TARGETS,
                     seed: int = DEFAULT_SEED, reference_size: int = TOY_REFERENCE_SIZE,
                     bundle: Optional[BackendBundle] = None) -> Fixture:
    """
    玩具隐藏目标任务：目标 = G(z_t)，z_t、源、留出源各取自独立的种子流
    """
    bundle = bundle or build_backend(load_profile(profile))
    g = bundle.generator
    dtype = module_dtype(g)
    target_latents = _seeded_latents(seed, n_targets, g.latent_shape, dtype, g.space_id, "t")
    targets = {k: decode(g, z) for k, z in target_latents.items()}
    encoder_targets = [decode(g, z) for z in
                       _seeded_latents(seed + 3, n_encoder_targets, g.latent_shape, dtype, g.space_id, "e").values()]
    return Fixture(
        bundle=bundle,
        targets=targets,
        pool=_seeded_latents(seed + 1, n_pool, g.latent_shape, dtype, g.space_id, "s"),
        held_out=_seeded_latents(seed + 2, n_held_out, g.latent_shape, dtype, g.space_id, "h"),
        face={k: True for k in targets},
        reference_features=reference_features_from_generator(bundle, reference_size, seed) if reference_size else None,
        encoder_targets=encoder_targets,
        name=f"toy:{bundle.profile.name}:s{seed}",
    )


# ---------------------------------------------------------------------------
# 从目录加载
# ---------------------------------------------------------------------------

def image_io_range(bundle: BackendBundle):
    """
    8 位图像读写所用的固定取值区间，写出与读回使用同一映射
    优先取生成器声明的交换区间，否则取其有限的 value_range
    """
    g = bundle.generator
    lo, hi = g.interchange_range or g.value_range
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ConfigError(f"生成器 {g.space_id} 没有声明有限的图像交换区间")
    return float(lo), float(hi)


def load_target_image(path, bundle: BackendBundle) -> ImageTensor:
    g = bundle.generator
    value_range = image_io_range(bundle)
    data = file_handler.read_image(path, channels=g.image_shape[2], value_range=value_range,
                                   size=g.image_shape[:2], dtype=module_dtype(g))
    return ImageTensor(data, value_range=value_range)


def load_latent(path, bundle: BackendBundle) -> LatentCode:
    """读取源：.essv 直接作为隐编码，图像先反演"""
    path = Path(path)
    g = bundle.generator
    if path.suffix.lower() == ESSV_SUFFIX:
        array, meta = file_handler.read_essv(path)
        space_id = meta.get('space_id', g.space_id)
        return LatentCode(torch.as_tensor(array).to(module_dtype(g)), space_id)
    with torch.no_grad():
        return invert(bundle.inverter, load_target_image(path, bundle))


def load_latent_dir(directory, bundle: BackendBundle) -> Dict[str, LatentCode]:
    """源目录：<id>.essv 或 <id>.png；同一 id 同时存在时优先使用 .essv"""
    latents = {k: load_latent(p, bundle) for k, p in file_handler.list_images(directory).items()}
    latents.update({k: load_latent(p, bundle) for k, p in file_handler.list_latents(directory).items()})
    if not latents:
        raise EmptyBatch(f"源目录为空: {directory}")
    return dict(sorted(latents.items()))


def load_reference_features(directory, bundle: BackendBundle) -> torch.Tensor:
    images = [load_target_image(p, bundle) for p in file_handler.list_images(directory).values()]
    if not images:
        raise EmptyBatch(f"参考图像目录为空: {directory}")
    with torch.no_grad():
        return feature_embed(bundle.features, torch.stack([img.data for img in images]))


def load_fixture(bundle: BackendBundle, targets_dir, sources_dir, held_out_dir=None, reference_dir=None) -> Fixture:
    """从目录构造夹具；未给出参考目录时由生成器抽取参考集"""
    target_paths = file_handler.list_images(targets_dir)
    if not target_paths:
        raise EmptyBatch(f"目标目录为空: {targets_dir}")
    flags = file_handler.read_target_flags(targets_dir)
    targets = {k: load_target_image(p, bundle) for k, p in target_paths.items()}
    reference = (load_reference_features(reference_dir, bundle) if reference_dir
                 else reference_features_from_generator(bundle))
    return Fixture(
        bundle=bundle,
        targets=targets,
        pool=load_latent_dir(sources_dir, bundle),
        held_out=load_latent_dir(held_out_dir, bundle) if held_out_dir else {},
        face={k: bool(flags.get(k, {}).get('face', True)) for k in targets},
        reference_features=reference,
        name=f"dir:{Path(targets_dir).name}",
    )


# ---------------------------------------------------------------------------
# 流水线
# ---------------------------------------------------------------------------

@dataclass
class PipelineResult:
    report: EvaluationReport
    essences: Dict[str, EssenceVector]
    manipulations: Dict[str, Dict[str, ImageTensor]]


def held_out_consistency(b: EssenceVector, target: ImageTensor, held_out: Sequence[LatentCode],
                         bundle: BackendBundle) -> Optional[float]:
    """本质向量在留出源上的一致性损失（留出源少于 2 个时为 None）"""
    if len(held_out) < 2:
        return None
    batch = SourceBatch(tuple(held_out), "held-out")
    with torch.no_grad():
        breakdown = EssenceObjective(target, batch, bundle.generator, bundle.encoder, LossWeights())(b.data)
    return float(breakdown.consistency)


def evaluate_manipulations(bundle: BackendBundle, targets: Dict[str, ImageTensor],
                           manipulations: Dict[str, Dict[str, ImageTensor]], source_images: Dict[str, ImageTensor],
                           face: Optional[Dict[str, bool]] = None, reference_features=None,
                           config_digest: str = "", jobs: Optional[int] = None) -> EvaluationReport:
    """
    对 {target_id: {source_id: I_st}} 计算逐对指标、逐目标 FID 并聚合
    每个 (目标, 源) 对都必须有结果图像，否则抛出 MissingPair；FID 只对人脸目标计算
    """
    face = face or {}
    pairs = []
    expected = []
    for target_id in sorted(targets):
        for source_id in sorted(source_images):
            expected.append((target_id, source_id))
            manipulated = manipulations.get(target_id, {}).get(source_id)
            if manipulated is not None:
                pairs.append(EvaluationPair(target_id, source_id, source_images[source_id],
                                            targets[target_id], manipulated))
    records = evaluate_pairs(pairs, bundle.face, bundle.encoder, bundle.second_encoder, jobs=jobs)

    fids = {}
    if reference_features is not None:
        for target_id in sorted(targets):
            if face.get(target_id, True) and manipulations.get(target_id):
                images = [manipulations[target_id][s] for s in sorted(manipulations[target_id])]
                if len(images) <= bundle.features.feature_dim:
                    logger.warning(f"目标 {target_id} 只有 {len(images)} 张结果图像，少于 F + 1，跳过 FID")
                    continue
                fids[target_id] = fid_from_images(images, reference_features, bundle.features)
    return aggregate(records, fids, expected_pairs=expected, config_digest=config_digest)


def run_pipeline(fixture: Fixture, cfg: OptimizerConfig = OptimizerConfig(), method: str = METHOD_OPTIMIZER,
                 encoder: Optional[EssenceEncoder] = None, jobs: Optional[int] = None,
                 show_progress: Optional[bool] = None) -> PipelineResult:
    """
    对夹具中每个目标求本质向量（优化或编码器提取），作用于评估源后计算报告
    优化所用的 N 个源从训练源池按 cfg.seed 抽取，对所有目标相同
    """
    bundle = fixture.bundle
    g = bundle.generator
    if method == METHOD_OPTIMIZER:
        sources = sample_source_batch(fixture.pool_list(), cfg.batch_size, cfg.seed)
    elif method == METHOD_ENCODER:
        if encoder is None:
            raise ConfigError("method = encoder 需要提供已微调的本质编码器")
    else:
        raise ConfigError(f"未知的方法: {method}")

    evaluation_sources = fixture.evaluation_sources
    with torch.no_grad():
        source_images = {k: decode(g, z) for k, z in sorted(evaluation_sources.items())}
    held_out = [fixture.held_out[k] for k in sorted(fixture.held_out)]

    essences, manipulations, extra = {}, {}, {}
    for target_id in sorted(fixture.targets):
        target = fixture.targets[target_id]
        if method == METHOD_OPTIMIZER:
            b, trace = optimize_essence(target, sources, g, bundle.encoder, bundle.inverter, cfg,
                                        show_progress=show_progress)
            final = trace.final.to_dict()
        else:
            b = encoder.extract(target)
            final = None
        essences[target_id] = b
        manipulations[target_id] = {k: apply_essence(z, b, g) for k, z in sorted(evaluation_sources.items())}
        extra[target_id] = {
            'essence_norm': b.norm(),
            'held_out_consistency': held_out_consistency(b, target, held_out, bundle),
            'final': final,
        }

    config_digest = canonical_digest({
        'method': method,
        'config': cfg.to_dict() if method == METHOD_OPTIMIZER else encoder.config.to_dict(),
        'fixture': fixture.digest(),
    })
    report = evaluate_manipulations(bundle, fixture.targets, manipulations, source_images, fixture.face,
                                    fixture.reference_features, config_digest, jobs=jobs)
    report.extra = extra
    logger.info(f"流水线完成 ({method}): {report.summary_line()}")
    return PipelineResult(report, essences, manipulations)


# ---------------------------------------------------------------------------
# 消融与敏感性
# ---------------------------------------------------------------------------

def variant_config(variant: str, cfg: OptimizerConfig = OptimizerConfig()) -> OptimizerConfig:
    """把对应损失项的权重置 0；full 保持不变"""
    weights = cfg.weights
    if variant == "full":
        return cfg
    if variant == "no_consistency":
        weights = dataclasses.replace(weights, lambda_consistency=0.0)
    elif variant == "no_similarity":
        weights = dataclasses.replace(weights, lambda_similarity=0.0)
    elif variant == "no_l2":
        weights = dataclasses.replace(weights, lambda_l2=0.0)
    else:
        raise ConfigError(f"未知的消融变体: {variant}（可选 {', '.join(ABLATION_VARIANTS)}）")
    return dataclasses.replace(cfg, weights=weights)


def ablation_run(variant: str, fixture: Fixture, cfg: OptimizerConfig = OptimizerConfig(),
                 jobs: Optional[int] = None, show_progress: Optional[bool] = None) -> PipelineResult:
    """
    以指定变体运行优化方法并评估，报告标记变体名
    no_similarity 变体的本质向量与目标无关（只依赖源和配置）
    """
    variant_cfg = variant_config(variant, cfg)
    logger.info(f"消融变体 {variant}: 权重 {variant_cfg.weights.to_dict()}")
    result = run_pipeline(fixture, variant_cfg, METHOD_OPTIMIZER, jobs=jobs, show_progress=show_progress)
    result.report = result.report.tagged(variant)
    if variant == "no_similarity":
        result.report.extra['target_agnostic'] = True
    return result


def baseline_report(fixture: Fixture, jobs: Optional[int] = None) -> EvaluationReport:
    """b = 0 的基线：评估源原样作为操作结果"""
    g = fixture.bundle.generator
    with torch.no_grad():
        source_images = {k: decode(g, z) for k, z in sorted(fixture.evaluation_sources.items())}
    manipulations = {t: dict(source_images) for t in fixture.targets}
    report = evaluate_manipulations(fixture.bundle, fixture.targets, manipulations, source_images, fixture.face,
                                    fixture.reference_features, "baseline", jobs=jobs)
    return report.tagged("baseline")


def sensitivity_run(n_values: Sequence[int], fixture: Fixture, method: str = METHOD_OPTIMIZER,
                    cfg: OptimizerConfig = OptimizerConfig(), encoder_cfg: EncoderTrainConfig = EncoderTrainConfig(),
                    jobs: Optional[int] = None, show_progress: Optional[bool] = None) -> Dict[int, EvaluationReport]:
    """
    对每个 N 用相同的种子和目标重新求解并评估，返回 {N: 报告}
    method = encoder 时每个 N 各微调一个编码器
    """
    n_values = [int(n) for n in n_values]
    if not n_values:
        raise EmptyBatch("n_values 为空")
    too_small = [n for n in n_values if n < 2]
    if too_small:
        raise BatchTooSmall(f"一致性损失需要 N >= 2，收到 {too_small}")
    if method == METHOD_OPTIMIZER:
        too_large = [n for n in n_values if n > len(fixture.pool)]
        if too_large:
            raise ConfigError(f"N = {too_large} 超过训练源池大小 {len(fixture.pool)}")

    reports = {}
    for n in n_values:
        logger.info(f"敏感性实验: N = {n} ({method})")
        if method == METHOD_OPTIMIZER:
            result = run_pipeline(fixture, dataclasses.replace(cfg, batch_size=n), METHOD_OPTIMIZER,
                                  jobs=jobs, show_progress=show_progress)
        elif method == METHOD_ENCODER:
            if not fixture.encoder_targets:
                raise EmptyBatch("夹具没有编码器训练目标")
            bundle = fixture.bundle
            encoder = finetune_essence_encoder(
                bundle.trainable_inverter(), fixture.encoder_targets, fixture.pool_list(),
                bundle.generator, bundle.encoder, dataclasses.replace(encoder_cfg, batch_size=n),
                show_progress=show_progress,
            )
            result = run_pipeline(fixture, cfg, METHOD_ENCODER, encoder=encoder, jobs=jobs,
                                  show_progress=show_progress)
        else:
            raise ConfigError(f"未知的方法: {method}")
        reports[n] = result.report.tagged(f"N={n}")
    return reports


def sensitivity_table(reports: Dict[int, EvaluationReport]) -> List[dict]:
    """按 N 排列的汇总表"""
    rows = []
    for n in sorted(reports):
        report = reports[n]
        row = {'N': n}
        for name, (mean, std) in report.overall.items():
            row[f'{name}_mean'] = mean
            row[f'{name}_std'] = std
        rows.append(row)
    return rows
