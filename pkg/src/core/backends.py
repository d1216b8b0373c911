"""
后端模块
方法所依赖的五类外部模型的能力接口、可复现的玩具实现，以及预训练检查点适配器和配置注册表

接口约定:
    生成器        forward(z: (..., L, D)) -> (..., H, W, C)，对 z 可微
    语义编码器    forward(x: (..., H, W, C)) -> (..., E)，对 x 可微
    反演器        forward(x: (..., H, W, C)) -> (..., L, D)
    人脸嵌入器    forward(x) -> (..., R)
    特征提取器    forward(x) -> (..., F)
"""

import hashlib
import json
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Tuple

import torch
from torch import nn
import torch.nn.functional as F

from common.constants import *
from common.error_handler import (
    logger, ShapeMismatch, SpaceMismatch, ZeroEmbedding, ConfigError, BackendError,
    ProfileNotFound, ConformanceError, CheckpointMismatch,
)
from common.imports import open_clip
from common.path_utils import get_profile_dir
from core.types import LatentCode, ImageTensor, SemanticEmbedding
from utils.config import app_config, canonical_digest


UNBOUNDED = (-math.inf, math.inf)
SIGNED_UNIT = (-1.0, 1.0)


# ---------------------------------------------------------------------------
# 能力接口
# ---------------------------------------------------------------------------

class GeneratorInterface(nn.Module, ABC):
    """生成器 G: 隐编码 -> 图像（确定性，对隐编码可微）"""

    space_id: str = ""
    latent_shape: Tuple[int, int] = (1, 1)
    image_shape: Tuple[int, int, int] = (1, 1, 1)
    value_range: Tuple[float, float] = UNBOUNDED
    # 8 位图像交换所用的固定区间；None 时沿用 value_range（须有限）
    interchange_range: Optional[Tuple[float, float]] = None

    @abstractmethod
    def forward(self, z: torch.Tensor) -> torch.Tensor:
        ...


class SemanticEncoderInterface(nn.Module, ABC):
    """语义编码器 C（CLIP/BLIP 角色）: 图像 -> 语义嵌入"""

    encoder_id: str = ""
    embed_dim: int = 1
    # None 表示适配器内部自行缩放/归一化
    input_shape: Optional[Tuple[int, int, int]] = None

    @abstractmethod
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        ...


class InverterInterface(nn.Module, ABC):
    """反演器: 图像 -> 配对生成器的隐编码"""

    space_id: str = ""
    latent_shape: Tuple[int, int] = (1, 1)

    @abstractmethod
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        ...

    @property
    def trainable(self) -> bool:
        return any(True for _ in self.parameters())


class FaceEmbedderInterface(nn.Module, ABC):
    """人脸身份嵌入器 R（ArcFace 角色），仅用于评估"""

    identity_dim: int = 1

    @abstractmethod
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        ...


class FeatureExtractorInterface(nn.Module, ABC):
    """FID 统计所用的特征提取器（Inception 角色）"""

    feature_dim: int = 1

    @abstractmethod
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        ...


def _flatten_trailing(x: torch.Tensor, ndim: int) -> torch.Tensor:
    """将最后 ndim 个维度展平"""
    return x.reshape(*x.shape[:x.dim() - ndim], -1)


def _seeded_normal(seed: int, shape, dtype) -> torch.Tensor:
    generator = torch.Generator().manual_seed(int(seed))
    return torch.randn(*shape, generator=generator, dtype=torch.float64).to(dtype)


# ---------------------------------------------------------------------------
# 玩具后端
# ---------------------------------------------------------------------------

class ToyGenerator(GeneratorInterface):
    """
    玩具线性生成器 decode(z) = reshape(A · flatten(z))
    warp > 0 时叠加 warp · tanh(B · flatten(z))，用于需要非线性生成器的实验
    """

    def __init__(self, seed=TOY_SEED, latent_shape=TOY_LATENT_SHAPE, image_shape=TOY_IMAGE_SHAPE,
                 warp=0.0, dtype=torch.float64):
        super().__init__()
        self.seed = int(seed)
        self.latent_shape = tuple(latent_shape)
        self.image_shape = tuple(image_shape)
        self.warp = float(warp)
        self.space_id = f"toy-w:s{self.seed}:{self.latent_shape[0]}x{self.latent_shape[1]}"
        if self.warp:
            self.space_id += f":warp{self.warp:g}"
        q = self.latent_shape[0] * self.latent_shape[1]
        p = math.prod(self.image_shape)
        self.register_buffer('A', _seeded_normal(self.seed, (p, q), dtype))
        if self.warp:
            self.register_buffer('B', _seeded_normal(self.seed + 100, (p, q), dtype) / math.sqrt(q))
        # z ~ N(0, I) 时像素 i 的标准差为 ‖A_i‖；交换区间取最大标准差的固定倍数并取整，所有图像共用
        pixel_std = float(torch.linalg.vector_norm(self.A, dim=1).max())
        bound = float(math.ceil(TOY_INTERCHANGE_SIGMAS * pixel_std + self.warp))
        self.interchange_range = (-bound, bound)

    def forward(self, z):
        flat = _flatten_trailing(z, 2)
        x = flat @ self.A.T
        if self.warp:
            x = x + self.warp * torch.tanh(flat @ self.B.T)
        return x.reshape(*flat.shape[:-1], *self.image_shape)


class ToySemanticEncoder(SemanticEncoderInterface):
    """玩具线性语义编码器 raw_embed(x) = M · flatten(x)；embed 不做归一化（归一化在余弦运算内部）"""

    def __init__(self, seed=TOY_SEED + 1, image_shape=TOY_IMAGE_SHAPE, embed_dim=TOY_EMBED_DIM,
                 dtype=torch.float64, role="clip"):
        super().__init__()
        self.seed = int(seed)
        self.input_shape = tuple(image_shape)
        self.embed_dim = int(embed_dim)
        self.encoder_id = f"toy-{role}:s{self.seed}:E{self.embed_dim}"
        self.register_buffer('M', _seeded_normal(self.seed, (self.embed_dim, math.prod(self.input_shape)), dtype))

    def raw_embed(self, x):
        return _flatten_trailing(x, 3) @ self.M.T

    def forward(self, x):
        return self.raw_embed(x)


class ToyPseudoInverter(InverterInterface):
    """A 的伪逆反演器（A 列满秩时对线性生成器精确反演），无可训练参数"""

    def __init__(self, generator: ToyGenerator):
        super().__init__()
        self.space_id = generator.space_id
        self.latent_shape = generator.latent_shape
        self.register_buffer('W', torch.linalg.pinv(generator.A))

    def forward(self, x):
        flat = _flatten_trailing(x, 3) @ self.W.T
        return flat.reshape(*flat.shape[:-1], *self.latent_shape)


class ToyLinearInverter(InverterInterface):
    """可训练的线性反演器，以 A 的伪逆初始化（相当于已预训练用于反演）"""

    def __init__(self, generator: ToyGenerator):
        super().__init__()
        self.space_id = generator.space_id
        self.latent_shape = generator.latent_shape
        q, p = generator.A.shape[1], generator.A.shape[0]
        self.linear = nn.Linear(p, q, bias=True, dtype=generator.A.dtype)
        with torch.no_grad():
            self.linear.weight.copy_(torch.linalg.pinv(generator.A))
            self.linear.bias.zero_()

    def forward(self, x):
        flat = self.linear(_flatten_trailing(x, 3))
        return flat.reshape(*flat.shape[:-1], *self.latent_shape)


class ToyFaceEmbedder(FaceEmbedderInterface):
    """玩具身份嵌入器：固定随机投影；flatten=True 时直接展平图像"""

    def __init__(self, seed=TOY_SEED + 2, image_shape=TOY_IMAGE_SHAPE, identity_dim=TOY_IDENTITY_DIM,
                 flatten=False, dtype=torch.float64):
        super().__init__()
        self.flatten = bool(flatten)
        p = math.prod(image_shape)
        self.identity_dim = p if self.flatten else int(identity_dim)
        if not self.flatten:
            self.register_buffer('R', _seeded_normal(seed, (self.identity_dim, p), dtype))

    def forward(self, x):
        flat = _flatten_trailing(x, 3)
        return flat if self.flatten else flat @ self.R.T


class ToyFeatureExtractor(FeatureExtractorInterface):
    """玩具特征提取器 tanh(P · flatten(x) / sqrt(p))"""

    def __init__(self, seed=TOY_SEED + 3, image_shape=TOY_IMAGE_SHAPE, feature_dim=TOY_FEATURE_DIM,
                 dtype=torch.float64):
        super().__init__()
        self.feature_dim = int(feature_dim)
        p = math.prod(image_shape)
        self.register_buffer('P', _seeded_normal(seed, (self.feature_dim, p), dtype) / math.sqrt(p))

    def forward(self, x):
        return torch.tanh(_flatten_trailing(x, 3) @ self.P.T)


# ---------------------------------------------------------------------------
# 预训练检查点适配器
# ---------------------------------------------------------------------------

def file_sha256(path) -> str:
    """计算文件的 sha256"""
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def load_checkpoint_module(spec: dict, role: str):
    """
    加载 TorchScript 检查点并校验摘要
    spec: {"path": ..., "sha256": ...}
    """
    path = Path(spec.get('path', '')).expanduser()
    if not path.exists():
        raise BackendError(f"{role} 检查点不存在: {path}")
    expected = spec.get('sha256')
    if expected:
        actual = file_sha256(path)
        if actual != expected:
            raise CheckpointMismatch(f"{role} 检查点摘要不匹配: {actual[:12]} != {expected[:12]}")
    module = torch.jit.load(str(path), map_location=app_config.device)
    module.eval()
    logger.info(f"已加载 {role} 检查点: {path.name}")
    return module


def _hwc_to_nchw(x):
    return x.movedim(-1, -3)


def _nchw_to_hwc(x):
    return x.movedim(-3, -1)


class CheckpointGenerator(GeneratorInterface):
    """StyleGAN 类生成器适配器：检查点输入 (N, L, D)，输出 [-1, 1] 的 NCHW 图像；噪声须在导出时冻结"""

    value_range = SIGNED_UNIT

    def __init__(self, spec, latent_shape=ADAPTER_LATENT_SHAPE, image_shape=ADAPTER_IMAGE_SHAPE):
        super().__init__()
        self.module = load_checkpoint_module(spec, "生成器")
        self.latent_shape = tuple(latent_shape)
        self.image_shape = tuple(image_shape)
        self.space_id = f"w+:{spec.get('sha256', 'unpinned')[:12]}"

    def forward(self, z):
        batch_shape = z.shape[:-2]
        images = self.module(z.reshape(-1, *self.latent_shape))
        return _nchw_to_hwc(images).reshape(*batch_shape, *self.image_shape)


class CheckpointInverter(InverterInterface):
    """e4e 类反演编码器适配器（pSp 框架封装视为可求梯度的可训练反演器）"""

    def __init__(self, spec, generator: GeneratorInterface):
        super().__init__()
        self.module = load_checkpoint_module(spec, "反演器")
        self.space_id = generator.space_id
        self.latent_shape = generator.latent_shape

    def forward(self, x):
        batch_shape = x.shape[:-3]
        codes = self.module(_hwc_to_nchw(x.reshape(-1, *x.shape[-3:])))
        return codes.reshape(*batch_shape, *self.latent_shape)


class CheckpointFaceEmbedder(FaceEmbedderInterface):
    """ArcFace 类身份嵌入器适配器（输入须预先对齐）"""

    def __init__(self, spec, identity_dim=512):
        super().__init__()
        self.module = load_checkpoint_module(spec, "人脸嵌入器")
        self.identity_dim = int(identity_dim)

    def forward(self, x):
        batch_shape = x.shape[:-3]
        out = self.module(_hwc_to_nchw(x.reshape(-1, *x.shape[-3:])))
        return out.reshape(*batch_shape, self.identity_dim)


class CheckpointFeatureExtractor(FeatureExtractorInterface):
    """Inception 类特征提取器适配器"""

    def __init__(self, spec, feature_dim=ADAPTER_FEATURE_DIM):
        super().__init__()
        self.module = load_checkpoint_module(spec, "特征提取器")
        self.feature_dim = int(feature_dim)

    def forward(self, x):
        batch_shape = x.shape[:-3]
        out = self.module(_hwc_to_nchw(x.reshape(-1, *x.shape[-3:])))
        return out.reshape(*batch_shape, self.feature_dim)


CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class ClipSemanticEncoder(SemanticEncoderInterface):
    """open_clip 图像编码器适配器：内部完成缩放与归一化，输入为 [-1, 1] 的 RGB 图像"""

    def __init__(self, model_name="ViT-B-32", pretrained="openai", role="clip"):
        super().__init__()
        if not open_clip:
            raise BackendError("CLIP 适配器需要 open_clip，请先安装 open_clip_torch")
        model, _, _ = open_clip.create_model_and_transforms(model_name, pretrained=pretrained)
        self.model = model.to(app_config.device).eval()
        self.resolution = int(self.model.visual.image_size[0]
                              if isinstance(self.model.visual.image_size, (tuple, list))
                              else self.model.visual.image_size)
        self.embed_dim = int(self.model.visual.output_dim)
        # 标识包含视觉主干名称
        self.encoder_id = f"{role}:{model_name}:{pretrained}"
        self.register_buffer('mean', torch.tensor(CLIP_MEAN).view(1, 3, 1, 1))
        self.register_buffer('std', torch.tensor(CLIP_STD).view(1, 3, 1, 1))

    def forward(self, x):
        batch_shape = x.shape[:-3]
        images = _hwc_to_nchw(x.reshape(-1, *x.shape[-3:])).float()
        images = (images + 1.0) / 2.0
        images = F.interpolate(images, size=(self.resolution, self.resolution), mode='bicubic', align_corners=False)
        images = (images - self.mean) / self.std
        features = self.model.encode_image(images)
        return features.reshape(*batch_shape, self.embed_dim).to(x.dtype)


# ---------------------------------------------------------------------------
# 操作
# ---------------------------------------------------------------------------

def module_dtype(module: nn.Module, default=None):
    for tensor in list(module.buffers()) + list(module.parameters()):
        if tensor.is_floating_point():
            return tensor.dtype
    return default or app_config.torch_dtype


def decode(g: GeneratorInterface, z: LatentCode) -> ImageTensor:
    """G(z)：检查隐空间与形状后解码为图像"""
    if z.space_id != g.space_id:
        raise SpaceMismatch(f"隐编码属于 {z.space_id}，生成器为 {g.space_id}")
    if z.shape != tuple(g.latent_shape):
        raise ShapeMismatch(f"隐编码形状 {z.shape} 与生成器 {tuple(g.latent_shape)} 不一致")
    image = g(z.data.to(module_dtype(g)))
    lo, hi = g.value_range
    if math.isfinite(lo) and math.isfinite(hi):
        image = image.clamp(lo, hi)
    return ImageTensor(image, value_range=g.value_range)


def embed(c: SemanticEncoderInterface, img: ImageTensor) -> SemanticEmbedding:
    """C(I)：语义编码，输出（近似）零向量时抛出 ZeroEmbedding"""
    if c.input_shape is not None and img.shape != tuple(c.input_shape):
        raise ShapeMismatch(f"图像形状 {img.shape} 与编码器输入 {tuple(c.input_shape)} 不一致")
    vector = c(img.data.to(module_dtype(c)))
    if float(torch.linalg.vector_norm(vector.detach())) <= COSINE_EPS:
        raise ZeroEmbedding(f"编码器 {c.encoder_id} 输出零向量")
    return SemanticEmbedding(vector, c.encoder_id)


def invert(inv: InverterInterface, img: ImageTensor) -> LatentCode:
    """图像反演为配对生成器的隐编码"""
    try:
        code = inv(img.data.to(module_dtype(inv)))
    except RuntimeError as e:
        raise ShapeMismatch(f"反演器无法处理形状为 {img.shape} 的图像: {e}") from e
    if tuple(code.shape) != tuple(inv.latent_shape):
        raise ShapeMismatch(f"反演结果形状 {tuple(code.shape)} 与 {tuple(inv.latent_shape)} 不一致")
    return LatentCode(code, inv.space_id)


def identity_embed(r: FaceEmbedderInterface, img: ImageTensor) -> torch.Tensor:
    """身份嵌入向量"""
    return r(img.data.to(module_dtype(r)))


def feature_embed(f: FeatureExtractorInterface, images: torch.Tensor) -> torch.Tensor:
    """批量提取 FID 特征，images: (N, H, W, C)"""
    return f(images.to(module_dtype(f)))


# ---------------------------------------------------------------------------
# 配置注册表
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BackendProfile:
    """后端配置：名称 -> {类型, 种子, 检查点, 预处理}"""
    name: str
    kind: str = "toy"
    seed: int = TOY_SEED
    latent_shape: Tuple[int, int] = TOY_LATENT_SHAPE
    image_shape: Tuple[int, int, int] = TOY_IMAGE_SHAPE
    embed_dim: int = TOY_EMBED_DIM
    feature_dim: int = TOY_FEATURE_DIM
    identity_dim: int = TOY_IDENTITY_DIM
    warp: float = 0.0
    second_encoder: bool = True
    dtype: str = "float64"
    checkpoints: dict = field(default_factory=dict)
    clip: dict = field(default_factory=dict)
    second_clip: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("toy", "adapter"):
            raise ConfigError(f"未知的后端类型: {self.kind}")
        object.__setattr__(self, 'latent_shape', tuple(self.latent_shape))
        object.__setattr__(self, 'image_shape', tuple(self.image_shape))

    def to_dict(self):
        return asdict(self)

    def digest(self):
        return canonical_digest(self.to_dict())


BUILTIN_PROFILES = {
    'toy': BackendProfile(name='toy'),
    'toy-warped': BackendProfile(name='toy-warped', warp=TOY_WARP),
}


@dataclass
class BackendBundle:
    """一次运行所用的全部后端"""
    profile: BackendProfile
    generator: GeneratorInterface
    encoder: SemanticEncoderInterface
    inverter: InverterInterface
    face: FaceEmbedderInterface
    features: FeatureExtractorInterface
    second_encoder: Optional[SemanticEncoderInterface] = None

    @property
    def digest(self):
        return self.profile.digest()

    def trainable_inverter(self) -> InverterInterface:
        """返回可训练反演器（玩具配置下为以伪逆初始化的线性反演器）"""
        if isinstance(self.generator, ToyGenerator):
            return ToyLinearInverter(self.generator)
        return self.inverter


def make_toy_backend(seed=TOY_SEED, latent_shape=TOY_LATENT_SHAPE, image_shape=TOY_IMAGE_SHAPE,
                     embed_dim=TOY_EMBED_DIM, feature_dim=TOY_FEATURE_DIM, identity_dim=TOY_IDENTITY_DIM,
                     warp=0.0, second_encoder=True, dtype=torch.float64, name=None) -> BackendBundle:
    """构造玩具后端；各组件从各自的种子流（seed + 偏移）抽取矩阵"""
    profile = BackendProfile(
        name=name or ('toy-warped' if warp else 'toy'), seed=seed, latent_shape=latent_shape,
        image_shape=image_shape, embed_dim=embed_dim, feature_dim=feature_dim,
        identity_dim=identity_dim, warp=warp, second_encoder=second_encoder,
        dtype='float64' if dtype == torch.float64 else 'float32',
    )
    return build_backend(profile)


def build_backend(profile: BackendProfile) -> BackendBundle:
    """按配置构造后端"""
    dtype = torch.float64 if profile.dtype == 'float64' else torch.float32
    if profile.kind == 'toy':
        generator = ToyGenerator(profile.seed, profile.latent_shape, profile.image_shape, profile.warp, dtype)
        encoder = ToySemanticEncoder(profile.seed + 1, profile.image_shape, profile.embed_dim, dtype)
        second = (ToySemanticEncoder(profile.seed + 4, profile.image_shape, profile.embed_dim, dtype, role="blip")
                  if profile.second_encoder else None)
        bundle = BackendBundle(
            profile=profile,
            generator=generator,
            encoder=encoder,
            inverter=ToyPseudoInverter(generator),
            face=ToyFaceEmbedder(profile.seed + 2, profile.image_shape, profile.identity_dim, dtype=dtype),
            features=ToyFeatureExtractor(profile.seed + 3, profile.image_shape, profile.feature_dim, dtype),
            second_encoder=second,
        )
    else:
        checkpoints = profile.checkpoints
        for role in ('generator', 'inverter', 'face', 'features'):
            if role not in checkpoints:
                raise ConfigError(f"适配器配置 {profile.name} 缺少 {role} 检查点")
        generator = CheckpointGenerator(checkpoints['generator'], profile.latent_shape, profile.image_shape)
        clip_spec = profile.clip or {}
        bundle = BackendBundle(
            profile=profile,
            generator=generator,
            encoder=ClipSemanticEncoder(clip_spec.get('model', 'ViT-B-32'), clip_spec.get('pretrained', 'openai')),
            inverter=CheckpointInverter(checkpoints['inverter'], generator),
            face=CheckpointFaceEmbedder(checkpoints['face'], profile.identity_dim),
            features=CheckpointFeatureExtractor(checkpoints['features'], profile.feature_dim),
            second_encoder=(ClipSemanticEncoder(profile.second_clip.get('model', 'ViT-B-16'),
                                                profile.second_clip.get('pretrained', 'openai'), role="blip")
                            if profile.second_clip else None),
        )
        check_conformance(bundle)
    for module in (bundle.generator, bundle.encoder, bundle.face, bundle.features, bundle.second_encoder):
        if module is not None:
            module.eval().requires_grad_(False)
    return bundle


def _read_profile_file(path: Path) -> dict:
    if path.suffix == '.toml':
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, 'rb') as f:
            return tomllib.load(f)
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def load_profile(name: str) -> BackendProfile:
    """
    按名称解析后端配置
    优先查找内置配置，其次查找 $ESSENCEKIT_PROFILE_DIR 下的 <name>.json / <name>.toml
    """
    if name in BUILTIN_PROFILES:
        return BUILTIN_PROFILES[name]
    profile_dir = get_profile_dir()
    if profile_dir is not None:
        for suffix in ('.json', '.toml'):
            path = profile_dir / f"{name}{suffix}"
            if path.exists():
                data = _read_profile_file(path)
                data.setdefault('name', name)
                try:
                    return BackendProfile(**data)
                except TypeError as e:
                    raise ConfigError(f"后端配置 {path} 含有未知字段: {e}") from e
    raise ProfileNotFound(f"找不到后端配置: {name}")


def list_profiles():
    """列出所有可用配置"""
    profiles = dict(BUILTIN_PROFILES)
    profile_dir = get_profile_dir()
    if profile_dir is not None and profile_dir.is_dir():
        for path in sorted(profile_dir.iterdir()):
            if path.suffix in ('.json', '.toml') and path.stem not in profiles:
                try:
                    profiles[path.stem] = load_profile(path.stem)
                except Exception as e:
                    logger.warning(f"跳过无效的后端配置 {path.name}: {e}")
    return profiles


# ---------------------------------------------------------------------------
# 接口一致性检查
# ---------------------------------------------------------------------------

def check_conformance(bundle: BackendBundle, seed: int = 0):
    """
    后端一致性检查：形状与确定性（相同输入两次调用结果逐位相同）
    返回: dict 检查结果；不通过时抛出 ConformanceError
    """
    g = bundle.generator
    generator = torch.Generator().manual_seed(seed)
    dtype = module_dtype(g)
    z = torch.randn(*g.latent_shape, generator=generator, dtype=torch.float64).to(dtype)
    results = {}

    with torch.no_grad():
        image_a, image_b = g(z), g(z)
        results['generator_shape'] = tuple(image_a.shape) == tuple(g.image_shape)
        results['generator_deterministic'] = torch.equal(image_a, image_b)
        lo, hi = g.interchange_range or g.value_range
        results['generator_interchange_finite'] = math.isfinite(lo) and math.isfinite(hi) and lo < hi

        encoders = [('encoder', bundle.encoder)]
        if bundle.second_encoder is not None:
            encoders.append(('second_encoder', bundle.second_encoder))
        for label, c in encoders:
            emb_a, emb_b = c(image_a.to(module_dtype(c))), c(image_a.to(module_dtype(c)))
            results[f'{label}_shape'] = tuple(emb_a.shape) == (c.embed_dim,)
            results[f'{label}_deterministic'] = torch.equal(emb_a, emb_b)

        code_a = bundle.inverter(image_a.to(module_dtype(bundle.inverter)))
        code_b = bundle.inverter(image_a.to(module_dtype(bundle.inverter)))
        results['inverter_shape'] = tuple(code_a.shape) == tuple(g.latent_shape)
        results['inverter_deterministic'] = torch.equal(code_a, code_b)

        ident_a, ident_b = bundle.face(image_a), bundle.face(image_a)
        results['face_shape'] = tuple(ident_a.shape) == (bundle.face.identity_dim,)
        results['face_deterministic'] = torch.equal(ident_a, ident_b)

        feat_a, feat_b = bundle.features(image_a), bundle.features(image_a)
        results['features_shape'] = tuple(feat_a.shape) == (bundle.features.feature_dim,)
        results['features_deterministic'] = torch.equal(feat_a, feat_b)

    failed = [key for key, ok in results.items() if not ok]
    if failed:
        raise ConformanceError(f"后端 {bundle.profile.name} 未通过一致性检查: {failed}")
    logger.debug(f"后端 {bundle.profile.name} 通过一致性检查")
    return results
