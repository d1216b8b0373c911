"""
命令行子命令实现
每个 cmd_* 接收 argparse 命名空间并返回退出码（0 成功，1 配置错误，2 后端错误，3 数值错误）
"""

from pathlib import Path
from typing import Dict, Optional, Tuple

import torch

from common.constants import *
from common.error_handler import (
    logger, cli_error_handler, ConfigError, EmptyBatch, FormatError, SpaceMismatch, BatchTooSmall,
)
from common.imports import get_dependency_info
from core.types import EssenceVector, ImageTensor, LatentCode, Provenance
from core.backends import (
    BackendBundle, build_backend, load_profile, list_profiles, check_conformance, decode, module_dtype,
)
from core.essence_optimizer import optimize_essence, inversion_essence, apply_essence, sample_source_batch
from core.encoder_trainer import finetune_essence_encoder, save_encoder, load_encoder, extract
from core.experiments import (
    Fixture, make_toy_fixture, load_fixture, load_target_image, image_io_range, load_latent, load_latent_dir,
    load_reference_features, reference_features_from_generator, evaluate_manipulations,
    ablation_run, variant_config, baseline_report, sensitivity_run, sensitivity_table,
)
from core.evaluation import semantic_delta
from core.export_manager import ExportConfig, ExportManager
from cli.manifest import RunManifest
from utils.config import OptimizerConfig, EncoderTrainConfig, load_config_file, merge_config
from utils import file_handler

INIT_CHOICES = {'noise': INIT_NOISE, 'inversion': INIT_TARGET_INVERSION}
CONFIG_SECTIONS = ('optimizer', 'encoder')
EXPERIMENT_KEYS = ('variants', 'n_values', 'method')


# ---------------------------------------------------------------------------
# 公共辅助
# ---------------------------------------------------------------------------

def load_bundle(name: str) -> BackendBundle:
    profile = load_profile(name)
    logger.info(f"使用后端配置 {profile.name} ({profile.kind})")
    return build_backend(profile)


def profile_summary(bundle: BackendBundle) -> dict:
    return {'name': bundle.profile.name, 'digest': bundle.digest, 'space_id': bundle.generator.space_id,
            'encoder_id': bundle.encoder.encoder_id}


def _weights_overrides(args) -> dict:
    return {
        'lambda_consistency': getattr(args, 'lambda_c', None),
        'lambda_l2': getattr(args, 'lambda_l2', None),
    }


def read_config_values(args) -> dict:
    return load_config_file(args.config) if getattr(args, 'config', None) else {}


def config_section(values: dict, section: str) -> dict:
    """
    取配置中的一节
    分节存放的配置（消融、敏感性实验的运行清单）取对应小节，平铺的配置原样返回
    """
    if any(isinstance(values.get(name), dict) for name in CONFIG_SECTIONS):
        return dict(values.get(section) or {})
    return {k: v for k, v in values.items() if k not in EXPERIMENT_KEYS}


def optimizer_config_values(args, file_values: Optional[dict] = None) -> dict:
    """命令行 > --config 文件 > 内置默认值；返回合并后的字典（尚未校验）"""
    if file_values is None:
        file_values = read_config_values(args)
    init = getattr(args, 'init', None)
    cli_values = {
        'iterations': getattr(args, 'iters', None),
        'learning_rate': getattr(args, 'lr', None),
        'batch_size': getattr(args, 'n', None),
        'seed': getattr(args, 'seed', None),
        'init_mode': INIT_CHOICES[init] if init else None,
        'weights': _weights_overrides(args),
    }
    return merge_config(OptimizerConfig().to_dict(), config_section(file_values, 'optimizer'), cli_values)


def resolve_optimizer_config(args, file_values: Optional[dict] = None) -> OptimizerConfig:
    return OptimizerConfig.from_dict(optimizer_config_values(args, file_values))


def resolve_encoder_config(args, file_values: Optional[dict] = None) -> EncoderTrainConfig:
    if file_values is None:
        file_values = read_config_values(args)
    cli_values = {
        'iterations': getattr(args, 'iters', None),
        'learning_rate': getattr(args, 'lr', None),
        'batch_size': getattr(args, 'n', None),
        'seed': getattr(args, 'seed', None),
        'weights': _weights_overrides(args),
    }
    merged = merge_config(EncoderTrainConfig().to_dict(), config_section(file_values, 'encoder'), cli_values)
    return EncoderTrainConfig.from_dict(merged)


def resolve_transfer_config(args) -> Tuple[OptimizerConfig, dict, bool]:
    """
    transfer 的配置；iterations = 0 且以目标反演初始化时不做优化
    返回: (校验后的配置, 写入清单与元数据的配置快照, 是否仅输出目标反演)
    """
    values = optimizer_config_values(args)
    if values.get('iterations') != 0:
        cfg = OptimizerConfig.from_dict(values)
        return cfg, cfg.to_dict(), False
    if values.get('init_mode') != INIT_TARGET_INVERSION:
        raise ConfigError("迭代次数为 0 时必须使用 --init inversion（直接输出目标反演）")
    # 其余字段照常校验
    cfg = OptimizerConfig.from_dict({**values, 'iterations': 1})
    return cfg, {**cfg.to_dict(), 'iterations': 0}, True


def essence_metadata(b: EssenceVector, bundle: BackendBundle, config: Optional[dict] = None) -> dict:
    return {
        'kind': 'essence',
        'space_id': b.space_id,
        'shape': list(b.shape),
        'provenance': b.provenance.to_dict(),
        'config': config or {},
        'profile': bundle.profile.name,
        'profile_digest': bundle.digest,
    }


def write_essence(path, b: EssenceVector, bundle: BackendBundle, config: Optional[dict] = None):
    file_handler.write_essv(path, b.data, essence_metadata(b, bundle, config))


def read_essence(path, bundle: BackendBundle) -> EssenceVector:
    """读取 ESSV1 本质向量；元数据中的 space_id 必须与当前生成器一致"""
    array, meta = file_handler.read_essv(path)
    if meta.get('kind') not in (None, 'essence'):
        raise FormatError(f"{path} 不是本质向量文件（kind = {meta.get('kind')}）")
    space_id = meta.get('space_id', bundle.generator.space_id)
    if space_id != bundle.generator.space_id:
        raise SpaceMismatch(f"本质向量属于 {space_id}，当前生成器为 {bundle.generator.space_id}")
    provenance = meta.get('provenance') or {
        'method': METHOD_OPTIMIZER, 'target_digest': 'unknown', 'config_digest': 'unknown',
    }
    data = torch.as_tensor(array).to(module_dtype(bundle.generator))
    return EssenceVector(data, space_id, Provenance.from_dict(provenance))


def load_sources(path, bundle: BackendBundle) -> Dict[str, LatentCode]:
    """源：目录（<id>.png / <id>.essv）或单个 .essv 文件"""
    path = Path(path)
    if path.is_dir():
        return load_latent_dir(path, bundle)
    if path.is_file():
        return {path.stem: load_latent(path, bundle)}
    raise ConfigError(f"源路径不存在: {path}")


def load_source_images(directory, bundle: BackendBundle) -> Dict[str, ImageTensor]:
    """评估所用的源图像：有 PNG 时直接读取，否则解码 .essv 隐编码"""
    images = {k: load_target_image(p, bundle) for k, p in file_handler.list_images(directory).items()}
    for source_id, path in file_handler.list_latents(directory).items():
        if source_id not in images:
            with torch.no_grad():
                images[source_id] = decode(bundle.generator, load_latent(path, bundle))
    if not images:
        raise EmptyBatch(f"源目录为空: {directory}")
    return dict(sorted(images.items()))


def load_manipulations(directory, bundle: BackendBundle) -> Dict[str, Dict[str, ImageTensor]]:
    return {
        target_id: {source_id: load_target_image(p, bundle) for source_id, p in sorted(paths.items())}
        for target_id, paths in file_handler.list_manipulations(directory).items()
    }


def build_fixture(args, bundle: BackendBundle) -> Fixture:
    if getattr(args, 'fixture', None) == 'toy':
        return make_toy_fixture(bundle=bundle, seed=args.seed if args.seed is not None else DEFAULT_SEED)
    if not (args.targets and args.sources):
        raise ConfigError("需要 --fixture toy 或同时给出 --targets 与 --sources")
    return load_fixture(bundle, args.targets, args.sources, getattr(args, 'held_out', None),
                        getattr(args, 'reference', None))


def write_deltas(directory: Path, bundle: BackendBundle, manipulations: Dict[str, Dict[str, ImageTensor]],
                 source_images: Dict[str, ImageTensor]) -> Path:
    """导出语义差 d = C(I_st) - C(I_s)，供外部解码器使用"""
    count = 0
    for target_id, results in sorted(manipulations.items()):
        for source_id, manipulated in sorted(results.items()):
            if source_id not in source_images:
                continue
            delta = semantic_delta(source_images[source_id], manipulated, bundle.encoder)
            file_handler.write_delta(file_handler.delta_path_for(directory, target_id, source_id), delta.data,
                                     {'target_id': target_id, 'source_id': source_id, 'encoder_id': delta.encoder_id})
            count += 1
    logger.info(f"已导出 {count} 个语义差到 {directory}")
    return directory


def write_manipulations(out_dir: Path, results: Dict[str, ImageTensor], bundle: BackendBundle) -> Path:
    """结果图像按生成器的固定交换区间写成 8 位 PNG，evaluate 读回时使用同一区间"""
    directory = out_dir / "manipulations"
    value_range = image_io_range(bundle)
    for source_id, image in sorted(results.items()):
        file_handler.write_image(directory / f"{source_id}.png", image.data, value_range)
    return directory


# ---------------------------------------------------------------------------
# 子命令
# ---------------------------------------------------------------------------

@cli_error_handler("本质迁移失败")
def cmd_transfer(args) -> int:
    out_path = Path(args.out)
    out_dir = out_path.parent
    file_handler.ensure_output_free(out_path, args.force)

    bundle = load_bundle(args.profile)
    g = bundle.generator
    cfg, config, inversion_only = resolve_transfer_config(args)
    target = load_target_image(args.target, bundle)
    sources = load_sources(args.sources, bundle)
    held_out = load_latent_dir(args.held_out, bundle) if args.held_out else {}

    manifest = RunManifest(
        command="transfer",
        config=config,
        profile=profile_summary(bundle),
        seed=cfg.seed,
        inputs={'target': args.target, 'sources': args.sources, 'held_out': args.held_out, 'essence': args.essence},
        outputs={'essence': out_path},
    )
    manifest.write(out_dir)

    if args.essence:
        b = read_essence(args.essence, bundle)
        logger.info(f"应用已有本质向量 {args.essence}（不做优化）")
    elif inversion_only:
        b = inversion_essence(target, g, bundle.inverter, config)
        write_essence(out_path, b, bundle, config)
    else:
        pool = [sources[k] for k in sorted(sources)]
        batch = sample_source_batch(pool, cfg.batch_size, cfg.seed)
        b, trace = optimize_essence(target, batch, g, bundle.encoder, bundle.inverter, cfg)
        write_essence(out_path, b, bundle, cfg.to_dict())
        ExportManager().export_trace(trace, out_dir / TRACE_FILENAME)

    all_sources = {**sources, **held_out}
    results = {k: apply_essence(z, b, g) for k, z in sorted(all_sources.items())}
    manipulations_dir = write_manipulations(out_dir, results, bundle)

    outputs = {'manipulations': manipulations_dir}
    if args.essence:
        outputs['essence'] = None
    if args.grid:
        grid_path = out_dir / f"grid.{args.grid_format.lower()}"
        with torch.no_grad():
            source_images = [(k, decode(g, z)) for k, z in sorted(all_sources.items())]
        exporter = ExportManager(ExportConfig.for_path(grid_path))
        exporter.export_grid([("target", target)], source_images, {"target": results}, grid_path,
                             value_range=image_io_range(bundle))
        outputs['grid'] = grid_path
    manifest.finish(out_dir, **outputs)
    logger.info(f"迁移完成: {len(results)} 张结果图像写入 {manipulations_dir}")
    return EXIT_OK


@cli_error_handler("本质提取失败")
def cmd_extract(args) -> int:
    out_path = Path(args.out)
    file_handler.ensure_output_free(out_path, args.force)
    bundle = load_bundle(args.profile)
    encoder = load_encoder(args.checkpoint, bundle)
    target = load_target_image(args.target, bundle)

    manifest = RunManifest(
        command="extract",
        config=encoder.config.to_dict(),
        profile=profile_summary(bundle),
        seed=encoder.config.seed,
        inputs={'checkpoint': args.checkpoint, 'target': args.target},
        outputs={'essence': out_path},
    )
    manifest.write(out_path.parent)
    b = extract(encoder, target)
    write_essence(out_path, b, bundle, encoder.config.to_dict())
    manifest.finish(out_path.parent)
    logger.info(f"本质向量已写入 {out_path}")
    return EXIT_OK


def _load_image_set(directory, bundle: BackendBundle, limit: int, label: str):
    paths = file_handler.list_images(directory)
    if not paths:
        raise EmptyBatch(f"{label}目录为空: {directory}")
    if len(paths) > limit:
        logger.info(f"{label}共 {len(paths)} 张，按名称取前 {limit} 张")
    return [load_target_image(paths[k], bundle) for k in sorted(paths)[:limit]]


@cli_error_handler("本质编码器训练失败")
def cmd_train_encoder(args) -> int:
    out_path = Path(args.out)
    file_handler.ensure_output_free(out_path, args.force)
    bundle = load_bundle(args.profile)
    cfg = resolve_encoder_config(args)
    train_targets = _load_image_set(args.train_dir, bundle, cfg.train_set_size, "训练集")
    eval_targets = _load_image_set(args.eval_dir, bundle, cfg.eval_set_size, "评估集") if cfg.eval_set_size else []
    if args.sources:
        pool = list(load_sources(args.sources, bundle).values())
    else:
        # 未指定源时以训练图像的反演作为源池
        pool = list(load_sources(args.train_dir, bundle).values())

    manifest = RunManifest(
        command="train-encoder",
        config=cfg.to_dict(),
        profile=profile_summary(bundle),
        seed=cfg.seed,
        inputs={'train_dir': args.train_dir, 'eval_dir': args.eval_dir, 'sources': args.sources},
        outputs={'checkpoint': out_path},
    )
    manifest.write(out_path.parent)
    encoder = finetune_essence_encoder(bundle.trainable_inverter(), train_targets, pool, bundle.generator,
                                       bundle.encoder, cfg, eval_targets=eval_targets)
    save_encoder(encoder, out_path, bundle.digest, bundle.profile.name)
    manifest.finish(out_path.parent)
    return EXIT_OK


@cli_error_handler("评估失败")
def cmd_evaluate(args) -> int:
    out_dir = Path(args.out)
    file_handler.ensure_output_free(out_dir, args.force, is_dir=True)
    bundle = load_bundle(args.profile)

    target_paths = file_handler.list_images(args.targets)
    if not target_paths:
        raise EmptyBatch(f"目标目录为空: {args.targets}")
    flags = file_handler.read_target_flags(args.targets)
    targets = {k: load_target_image(p, bundle) for k, p in target_paths.items()}
    source_images = load_source_images(args.sources, bundle)
    manipulations = load_manipulations(args.manipulations, bundle)

    manifest = RunManifest(
        command="evaluate",
        config={'percent': args.percent, 'jobs': args.jobs},
        profile=profile_summary(bundle),
        seed=None,
        inputs={'manipulations': args.manipulations, 'sources': args.sources, 'targets': args.targets,
                'reference': args.reference},
        outputs={'report': out_dir},
    )
    manifest.write(out_dir)

    reference = (load_reference_features(args.reference, bundle) if args.reference
                 else reference_features_from_generator(bundle))
    face = {k: bool(flags.get(k, {}).get('face', True)) for k in targets}
    report = evaluate_manipulations(bundle, targets, manipulations, source_images, face, reference, jobs=args.jobs)
    paths = ExportManager().export_report(report, out_dir, percent=args.percent)
    if getattr(args, 'deltas', False):
        paths['deltas'] = write_deltas(out_dir / "deltas", bundle, manipulations, source_images)
    manifest.finish(out_dir, **paths)
    print(report.summary_line(percent=args.percent))
    return EXIT_OK


@cli_error_handler("消融实验失败")
def cmd_ablate(args) -> int:
    out_dir = Path(args.out)
    file_handler.ensure_output_free(out_dir, args.force, is_dir=True)
    file_values = read_config_values(args)
    variants = args.variants or file_values.get('variants') or list(ABLATION_VARIANTS)
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise ConfigError(f"未知的消融变体: {unknown}")
    bundle = load_bundle(args.profile)
    cfg = resolve_optimizer_config(args, file_values)
    fixture = build_fixture(args, bundle)

    manifest = RunManifest(
        command="ablate",
        config={'optimizer': cfg.to_dict(), 'variants': list(variants)},
        profile=profile_summary(bundle),
        seed=cfg.seed,
        inputs={'fixture': args.fixture, 'targets': args.targets, 'sources': args.sources,
                'held_out': args.held_out},
        outputs={'report': out_dir},
    )
    manifest.write(out_dir)

    exporter = ExportManager()
    rows = []
    baseline = baseline_report(fixture, jobs=args.jobs)
    exporter.export_report(baseline, out_dir / "baseline")
    for variant in variants:
        result = ablation_run(variant, fixture, cfg, jobs=args.jobs)
        report = result.report
        exporter.export_report(report, out_dir / variant, percent=args.percent)
        for target_id, b in sorted(result.essences.items()):
            write_essence(out_dir / variant / "essences" / f"{target_id}{ESSV_SUFFIX}", b, bundle,
                          variant_config(variant, cfg).to_dict())
        consistencies = [v['held_out_consistency'] for k, v in sorted(report.extra.items())
                         if isinstance(v, dict) and v.get('held_out_consistency') is not None]
        norms = [v['essence_norm'] for k, v in sorted(report.extra.items()) if isinstance(v, dict)]
        row = {'variant': variant}
        row.update({f'{name}_mean': mean for name, (mean, _) in report.overall.items()})
        row['essence_norm_mean'] = float(sum(norms) / len(norms)) if norms else None
        row['held_out_consistency_mean'] = float(sum(consistencies) / len(consistencies)) if consistencies else None
        rows.append(row)
    exporter.export_table(rows, out_dir / "ablation.csv")
    manifest.finish(out_dir, summary=out_dir / "ablation.csv")
    return EXIT_OK


@cli_error_handler("敏感性实验失败")
def cmd_sensitivity(args) -> int:
    out_dir = Path(args.out)
    file_handler.ensure_output_free(out_dir, args.force, is_dir=True)
    file_values = read_config_values(args)
    n_values = args.n_values or file_values.get('n_values')
    if not n_values:
        raise ConfigError("需要 --n-values（或在 --config 中给出 n_values）")
    too_small = [n for n in n_values if n < 2]
    if too_small:
        raise BatchTooSmall(f"一致性损失需要 N >= 2，收到 {too_small}")
    method = args.method or file_values.get('method') or METHOD_OPTIMIZER
    if method not in (METHOD_OPTIMIZER, METHOD_ENCODER):
        raise ConfigError(f"未知的方法: {method}")
    bundle = load_bundle(args.profile)
    cfg = resolve_optimizer_config(args, file_values)
    encoder_cfg = resolve_encoder_config(args, file_values) if method == METHOD_ENCODER else EncoderTrainConfig()
    fixture = build_fixture(args, bundle)

    manifest = RunManifest(
        command="sensitivity",
        config={'optimizer': cfg.to_dict(), 'encoder': encoder_cfg.to_dict(), 'n_values': list(n_values),
                'method': method},
        profile=profile_summary(bundle),
        seed=cfg.seed,
        inputs={'fixture': args.fixture, 'targets': args.targets, 'sources': args.sources,
                'held_out': args.held_out},
        outputs={'report': out_dir},
    )
    manifest.write(out_dir)

    reports = sensitivity_run(n_values, fixture, method, cfg, encoder_cfg, jobs=args.jobs)
    exporter = ExportManager()
    for n, report in sorted(reports.items()):
        exporter.export_report(report, out_dir / f"N{n}", percent=args.percent)
    exporter.export_table(sensitivity_table(reports), out_dir / "sensitivity.csv")
    manifest.finish(out_dir, summary=out_dir / "sensitivity.csv")
    return EXIT_OK


@cli_error_handler("网格图生成失败")
def cmd_grid(args) -> int:
    out_path = Path(args.out)
    file_handler.ensure_output_free(out_path, args.force)
    export_config = ExportConfig.for_path(out_path, cell_size=args.cell_size, layout=args.layout)
    bundle = load_bundle(args.profile)
    target_paths = file_handler.list_images(args.targets)
    if not target_paths:
        raise EmptyBatch(f"目标目录为空: {args.targets}")
    targets = [(k, load_target_image(p, bundle)) for k, p in sorted(target_paths.items())]
    sources = sorted(load_source_images(args.sources, bundle).items())
    manipulations = load_manipulations(args.manipulations, bundle)

    manifest = RunManifest(
        command="grid",
        config={'format': export_config.format_type, 'cell_size': export_config.cell_size,
                'layout': export_config.layout},
        profile=profile_summary(bundle),
        seed=None,
        inputs={'targets': args.targets, 'sources': args.sources, 'manipulations': args.manipulations},
        outputs={'grid': out_path},
    )
    manifest.write(out_path.parent)
    ExportManager(export_config).export_grid(targets, sources, manipulations, out_path,
                                             value_range=image_io_range(bundle))
    manifest.finish(out_path.parent)
    return EXIT_OK


@cli_error_handler("列出后端配置失败")
def cmd_profiles(args) -> int:
    status = EXIT_OK
    if args.check:
        deps = get_dependency_info()
        print("依赖: " + ", ".join(f"{name}={'ok' if ok else 'missing'}" for name, ok in deps.items()))
    for name, profile in list_profiles().items():
        line = f"{name:<16} {profile.kind:<8} {profile.digest()[:12]}"
        if args.check:
            try:
                check_conformance(build_backend(profile))
                line += "  ok"
            except Exception as e:
                line += f"  FAILED: {e}"
                status = EXIT_BACKEND_ERROR
        print(line)
    return status
