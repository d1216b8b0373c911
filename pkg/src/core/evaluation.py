"""
评估模块
身份分数、语义分数、FID、两阶段聚合以及语义差提取
"""

import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import torch

from common.constants import FID_JITTER, REPORT_PERCENT_SCALE, REPORT_CSV_COLUMNS
from common.error_handler import (
    logger, ConfigError, MissingPair, DuplicatePair, SingularCovariance, ShapeMismatch, NumericError,
)
from core.geometry import cosine_similarity
from core.types import ImageTensor, SemanticDelta
from core.backends import (
    FaceEmbedderInterface, SemanticEncoderInterface, FeatureExtractorInterface, embed, identity_embed, feature_embed,
)
from utils.config import app_config

METRIC_NAMES = ("id_source", "id_target", "sem_clip", "sem_blip")
SUCCESS_METRIC = "success"


@dataclass(frozen=True)
class MetricRecord:
    """单个 (目标, 源) 对的评估结果；未配置第二语义编码器时 sem_blip 为 None"""
    target_id: str
    source_id: str
    id_source: float
    id_target: float
    sem_clip: float
    sem_blip: Optional[float] = None

    def __post_init__(self):
        for name in METRIC_NAMES:
            value = getattr(self, name)
            if value is None:
                continue
            if not math.isfinite(value) or abs(value) > 1.0:
                raise NumericError(f"{name} 超出 [-1, 1]: {value}")

    @property
    def key(self) -> Tuple[str, str]:
        return self.target_id, self.source_id

    @property
    def success(self) -> bool:
        """身份保持判据：与源的身份相似度高于与目标的"""
        return self.id_source > self.id_target

    def to_row(self) -> dict:
        return {column: getattr(self, column) for column in REPORT_CSV_COLUMNS}


@dataclass(frozen=True)
class GaussianStats:
    """特征集合的高斯拟合 (μ, Σ)"""
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise ShapeMismatch(f"协方差形状 {cov.shape} 与均值维度 {mean.shape[0]} 不符")
        if not (np.isfinite(mean).all() and np.isfinite(cov).all()):
            raise NumericError("高斯统计量含有非有限值")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-10):
            raise NumericError("协方差矩阵不对称")
        object.__setattr__(self, 'mean', mean)
        object.__setattr__(self, 'cov', cov)

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    @classmethod
    def from_features(cls, features) -> "GaussianStats":
        """features: (n, F)，要求 n >= F + 1"""
        features = np.asarray(features.detach().cpu().numpy() if isinstance(features, torch.Tensor) else features,
                              dtype=np.float64)
        if features.ndim != 2:
            raise ShapeMismatch(f"特征矩阵必须为 (n, F)，实际为 {features.shape}")
        n, dim = features.shape
        if n < dim + 1:
            raise ConfigError(f"FID 需要至少 F + 1 = {dim + 1} 个样本，实际 {n} 个")
        cov = np.cov(features, rowvar=False)
        return cls(features.mean(axis=0), (cov + cov.T) / 2.0)


@dataclass
class EvaluationReport:
    """
    评估报告
    per_target: {target_id: {指标: 该目标在各源上的均值}}
    overall: {指标: (均值, 标准差)}，均值为各目标均值的均值，标准差为各目标均值的总体标准差
    """
    records: Tuple[MetricRecord, ...]
    per_target: Dict[str, Dict[str, float]]
    overall: Dict[str, Tuple[float, float]]
    fid: Dict[str, float] = field(default_factory=dict)
    config_digest: str = ""
    variant: Optional[str] = None
    extra: Dict[str, dict] = field(default_factory=dict)

    @property
    def success_rate(self) -> float:
        return self.overall[SUCCESS_METRIC][0]

    @property
    def target_ids(self) -> List[str]:
        return sorted(self.per_target)

    def mean(self, metric: str) -> float:
        return self.overall[metric][0]

    def std(self, metric: str) -> float:
        return self.overall[metric][1]

    def fid_summary(self) -> Optional[Tuple[float, float]]:
        if not self.fid:
            return None
        values = np.array([self.fid[t] for t in sorted(self.fid)], dtype=np.float64)
        return float(values.mean()), float(values.std())

    def tagged(self, variant: str) -> "EvaluationReport":
        return EvaluationReport(self.records, self.per_target, self.overall, self.fid,
                                self.config_digest, variant, self.extra)

    def to_dict(self, percent: bool = False) -> dict:
        """percent=True 时余弦类指标乘以 100（FID 不变）"""
        scale = REPORT_PERCENT_SCALE if percent else 1.0
        overall = {name: {'mean': mean * scale, 'std': std * scale} for name, (mean, std) in self.overall.items()}
        fid_summary = self.fid_summary()
        return {
            'variant': self.variant,
            'config_digest': self.config_digest,
            'scale': scale,
            'overall': overall,
            'per_target': {t: {k: v * scale for k, v in m.items()} for t, m in sorted(self.per_target.items())},
            'fid': dict(sorted(self.fid.items())),
            'fid_summary': {'mean': fid_summary[0], 'std': fid_summary[1]} if fid_summary else None,
            'extra': self.extra,
        }

    def csv_rows(self, percent: bool = False) -> List[dict]:
        scale = REPORT_PERCENT_SCALE if percent else 1.0
        rows = []
        for record in self.records:
            row = record.to_row()
            rows.append({k: (v * scale if isinstance(v, float) else v) for k, v in row.items()})
        return rows

    def summary_line(self, percent: bool = False) -> str:
        scale = REPORT_PERCENT_SCALE if percent else 1.0
        parts = [f"{name}={mean * scale:.3f}±{std * scale:.3f}" for name, (mean, std) in self.overall.items()]
        fid_summary = self.fid_summary()
        if fid_summary:
            parts.append(f"fid={fid_summary[0]:.3f}±{fid_summary[1]:.3f}")
        return ", ".join(parts)


# ---------------------------------------------------------------------------
# 指标
# ---------------------------------------------------------------------------

def id_scores(I_s: ImageTensor, I_t: ImageTensor, I_st: ImageTensor, r: FaceEmbedderInterface) -> Tuple[float, float]:
    """(⟨R(I_s), R(I_st)⟩, ⟨R(I_t), R(I_st)⟩)，只报告不强制 id_source > id_target"""
    with torch.no_grad():
        manipulated = identity_embed(r, I_st)
        id_source = float(cosine_similarity(identity_embed(r, I_s), manipulated))
        id_target = float(cosine_similarity(identity_embed(r, I_t), manipulated))
    return id_source, id_target


def semantic_score(I_t: ImageTensor, I_st: ImageTensor, c: SemanticEncoderInterface) -> float:
    """⟨C(I_t), C(I_st)⟩"""
    with torch.no_grad():
        return float(cosine_similarity(embed(c, I_t), embed(c, I_st)))


def semantic_delta(I_s: ImageTensor, I_st: ImageTensor, c: SemanticEncoderInterface) -> SemanticDelta:
    """d = C(I_st) - C(I_s)，原始嵌入差，不做归一化"""
    if I_s.shape != I_st.shape:
        raise ShapeMismatch(f"源图像形状 {I_s.shape} 与操作后图像 {I_st.shape} 不一致")
    with torch.no_grad():
        return embed(c, I_st) - embed(c, I_s)


def _sqrtm_psd(matrix: np.ndarray) -> np.ndarray:
    eigvals, eigvecs = scipy.linalg.eigh(matrix)
    return (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T


def _trace_sqrt_product(sigma_a: np.ndarray, sigma_b: np.ndarray) -> float:
    """Tr((Σ_a Σ_b)^{1/2}) = Σ sqrt(eig(Σ_a^{1/2} Σ_b Σ_a^{1/2}))，负特征值截断为 0"""
    root_a = _sqrtm_psd(sigma_a)
    inner = root_a @ sigma_b @ root_a
    eigvals = scipy.linalg.eigvalsh((inner + inner.T) / 2.0)
    if not np.isfinite(eigvals).all():
        raise np.linalg.LinAlgError("非有限特征值")
    return float(np.sqrt(np.clip(eigvals, 0.0, None)).sum())


def frechet_distance(stats_a: GaussianStats, stats_b: GaussianStats) -> float:
    """‖μ_a - μ_b‖² + Tr(Σ_a + Σ_b - 2(Σ_a Σ_b)^{1/2})"""
    if stats_a.dim != stats_b.dim:
        raise ShapeMismatch(f"特征维度不一致: {stats_a.dim} != {stats_b.dim}")
    diff = stats_a.mean - stats_b.mean
    sigma_a, sigma_b = stats_a.cov, stats_b.cov
    try:
        trace_sqrt = _trace_sqrt_product(sigma_a, sigma_b)
    except (np.linalg.LinAlgError, ValueError) as first_error:
        logger.warning(f"矩阵平方根失败，对角加 {FID_JITTER} 后重试: {first_error}")
        offset = np.eye(stats_a.dim) * FID_JITTER
        try:
            trace_sqrt = _trace_sqrt_product(sigma_a + offset, sigma_b + offset)
        except (np.linalg.LinAlgError, ValueError) as e:
            raise SingularCovariance(f"正则化后矩阵平方根仍失败: {e}") from e
    value = float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * trace_sqrt)
    # 舍入可能产生极小的负值
    return max(value, 0.0)


def fid(set_a, set_b) -> float:
    """两组特征矩阵 (n, F) 之间的 Fréchet 距离"""
    return frechet_distance(GaussianStats.from_features(set_a), GaussianStats.from_features(set_b))


def fid_from_images(images: Sequence[ImageTensor], reference_features, f: FeatureExtractorInterface) -> float:
    """对一组图像提取特征后与参考特征集计算 FID"""
    with torch.no_grad():
        features = feature_embed(f, torch.stack([img.data for img in images]))
    return fid(features, reference_features)


# ---------------------------------------------------------------------------
# 聚合
# ---------------------------------------------------------------------------

def _metric_names(records: Sequence[MetricRecord]) -> List[str]:
    blip = {r.sem_blip is not None for r in records}
    if len(blip) > 1:
        raise ConfigError("部分记录缺少 sem_blip，无法聚合")
    names = ["id_source", "id_target", "sem_clip"]
    if blip == {True}:
        names.append("sem_blip")
    return names + [SUCCESS_METRIC]


def aggregate(records: Iterable[MetricRecord], fids: Optional[Dict[str, float]] = None,
              expected_pairs: Optional[Iterable[Tuple[str, str]]] = None, config_digest: str = "") -> EvaluationReport:
    """
    两阶段聚合：先对每个目标在其各源上取均值，再对目标取均值
    标准差按各目标均值计算（ddof = 0）；结果与记录顺序无关
    """
    records = sorted(records, key=lambda r: r.key)
    if not records:
        raise MissingPair("没有任何评估记录")
    seen = set()
    for record in records:
        if record.key in seen:
            raise DuplicatePair(f"重复的评估对: {record.key}")
        seen.add(record.key)
    if expected_pairs is not None:
        missing = sorted(set(expected_pairs) - seen)
        if missing:
            raise MissingPair(f"缺少评估对: {missing[:5]}{' ...' if len(missing) > 5 else ''}")

    names = _metric_names(records)
    grouped = defaultdict(list)
    for record in records:
        grouped[record.target_id].append(record)

    per_target = {}
    for target_id in sorted(grouped):
        rows = grouped[target_id]
        per_target[target_id] = {
            name: float(np.mean([float(getattr(r, name)) for r in rows], dtype=np.float64)) for name in names
        }

    overall = {}
    for name in names:
        means = np.array([per_target[t][name] for t in sorted(per_target)], dtype=np.float64)
        overall[name] = (float(means.mean()), float(means.std()))

    fids = dict(fids or {})
    unknown = sorted(set(fids) - set(per_target))
    if unknown:
        raise MissingPair(f"FID 引用了没有评估记录的目标: {unknown}")
    return EvaluationReport(tuple(records), per_target, overall, fids, config_digest)


def pooled_mean(records: Iterable[MetricRecord], metric: str) -> float:
    """所有记录直接取均值（仅用于与两阶段均值对照）"""
    return float(np.mean([float(getattr(r, metric)) for r in records], dtype=np.float64))


# ---------------------------------------------------------------------------
# 逐对并发评估
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvaluationPair:
    target_id: str
    source_id: str
    source: ImageTensor
    target: ImageTensor
    manipulated: ImageTensor


def evaluate_pair(pair: EvaluationPair, face: FaceEmbedderInterface, encoder: SemanticEncoderInterface,
                  second_encoder: Optional[SemanticEncoderInterface] = None) -> MetricRecord:
    id_source, id_target = id_scores(pair.source, pair.target, pair.manipulated, face)
    return MetricRecord(
        target_id=pair.target_id,
        source_id=pair.source_id,
        id_source=id_source,
        id_target=id_target,
        sem_clip=semantic_score(pair.target, pair.manipulated, encoder),
        sem_blip=semantic_score(pair.target, pair.manipulated, second_encoder) if second_encoder is not None else None,
    )


def evaluate_pairs(pairs: Sequence[EvaluationPair], face: FaceEmbedderInterface,
                   encoder: SemanticEncoderInterface, second_encoder: Optional[SemanticEncoderInterface] = None,
                   jobs: Optional[int] = None) -> List[MetricRecord]:
    """各对独立计算，可并发；返回按 (target_id, source_id) 排序的记录"""
    jobs = app_config.jobs if jobs is None else max(1, int(jobs))
    if jobs == 1:
        records = [evaluate_pair(p, face, encoder, second_encoder) for p in pairs]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(lambda p: evaluate_pair(p, face, encoder, second_encoder), pairs))
    logger.debug(f"完成 {len(records)} 个评估对（jobs={jobs}）")
    return sorted(records, key=lambda r: r.key)
