"""
文件处理工具模块
ESSV1 二进制格式、PNG 图像读写、资产目录加载和原子写入
"""

import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch
from PIL import Image

from common.constants import (
    ESSV_MAGIC, ESSV_SUFFIX, DELTA_SUFFIX, SUPPORTED_IMAGE_FORMATS, TARGETS_META_FILENAME, MANIFEST_FILENAME,
)
from common.error_handler import logger, resource_manager, FormatError, ConfigError, OutputExists
from common.path_utils import sidecar_path

ESSV_HEADER = struct.Struct('<5sII')
_IMAGE_SUFFIXES = tuple(fmt[0] for fmt in SUPPORTED_IMAGE_FORMATS)


# ---------------------------------------------------------------------------
# 原子写入
# ---------------------------------------------------------------------------

def atomic_write_bytes(path, payload: bytes):
    """先写临时文件再重命名，保证输出要么完整要么不存在"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(payload)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode('utf-8'))


def atomic_write_json(path, payload):
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False, default=str) + "\n")


def read_json(path):
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except (OSError, ValueError) as e:
        raise FormatError(f"无法读取 JSON 文件 {path}: {e}") from e


def ensure_output_free(path, force: bool = False, is_dir: bool = False):
    """
    输出冲突策略：目标已存在（或目录中已有运行清单）时拒绝，除非指定 force
    """
    path = Path(path)
    if force:
        return
    if is_dir:
        if (path / MANIFEST_FILENAME).exists():
            raise OutputExists(f"输出目录已包含运行清单: {path}（使用 --force 覆盖）")
    elif path.exists() or (path.parent / MANIFEST_FILENAME).exists():
        raise OutputExists(f"输出已存在: {path}（使用 --force 覆盖）")


# ---------------------------------------------------------------------------
# ESSV1 格式
# ---------------------------------------------------------------------------

def encode_essv(array) -> bytes:
    """ESSV1: 5 字节魔数 + u32 LE L + u32 LE D + L·D 个 float32 LE"""
    data = np.asarray(array.detach().cpu().numpy() if isinstance(array, torch.Tensor) else array)
    if data.ndim != 2:
        raise FormatError(f"ESSV1 只能存储二维数组，实际为 {data.shape}")
    rows, cols = data.shape
    return ESSV_HEADER.pack(ESSV_MAGIC, rows, cols) + data.astype('<f4').tobytes(order='C')


def decode_essv(payload: bytes) -> np.ndarray:
    """解析 ESSV1 字节，返回 (L, D) float32 数组"""
    if len(payload) < ESSV_HEADER.size:
        raise FormatError("ESSV1 文件过短")
    magic, rows, cols = ESSV_HEADER.unpack_from(payload)
    if magic != ESSV_MAGIC:
        raise FormatError(f"魔数错误: {magic!r}")
    expected = ESSV_HEADER.size + rows * cols * 4
    if len(payload) != expected:
        raise FormatError(f"ESSV1 长度不符: 期望 {expected} 字节，实际 {len(payload)} 字节")
    return np.frombuffer(payload, dtype='<f4', offset=ESSV_HEADER.size).reshape(rows, cols).copy()


def write_essv(path, array, metadata: dict):
    """写入 ESSV1 文件及 JSON 元数据（space_id、来源、配置快照）"""
    atomic_write_bytes(path, encode_essv(array))
    atomic_write_json(sidecar_path(path), metadata)
    logger.debug(f"已写入 {Path(path).name}")


def read_essv(path) -> Tuple[np.ndarray, dict]:
    """读取 ESSV1 文件；元数据文件缺失时返回空字典"""
    path = Path(path)
    with resource_manager(open(path, 'rb')) as f:
        array = decode_essv(f.read())
    meta_path = sidecar_path(path)
    metadata = read_json(meta_path) if meta_path.exists() else {}
    return array, metadata


def write_delta(path, delta: torch.Tensor, metadata: dict):
    """导出语义差向量（.npy，逐位保真）及元数据"""
    buffer = io.BytesIO()
    np.save(buffer, delta.detach().cpu().numpy(), allow_pickle=False)
    atomic_write_bytes(path, buffer.getvalue())
    atomic_write_json(sidecar_path(path), metadata)


def read_delta(path) -> Tuple[np.ndarray, dict]:
    path = Path(path)
    array = np.load(path, allow_pickle=False)
    meta_path = sidecar_path(path)
    return array, (read_json(meta_path) if meta_path.exists() else {})


# ---------------------------------------------------------------------------
# 图像读写（8 位 PNG，按声明的取值区间换算）
# ---------------------------------------------------------------------------

def image_to_uint8(data: torch.Tensor, value_range) -> np.ndarray:
    """
    浮点图像 -> uint8，按声明的有限区间 [lo, hi] 线性映射到 [0, 255]
    区间外的像素截断并记录警告
    """
    lo, hi = (float(v) for v in value_range)
    if not (np.isfinite(lo) and np.isfinite(hi)) or hi <= lo:
        raise FormatError(f"8 位图像换算需要有限的取值区间，实际为 {value_range}")
    array = data.detach().cpu().to(torch.float64).numpy()
    scaled = (array - lo) / (hi - lo)
    clipped = int(np.count_nonzero((scaled < 0.0) | (scaled > 1.0)))
    if clipped:
        logger.warning(f"{clipped} 个像素超出区间 [{lo:g}, {hi:g}]，已截断")
    return np.round(np.clip(scaled, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, data: torch.Tensor, value_range=(0.0, 1.0)):
    """写入 8 位 PNG/JPG"""
    pixels = image_to_uint8(data, value_range)
    if pixels.shape[2] == 1:
        pil_image = Image.fromarray(pixels[:, :, 0], mode='L')
    else:
        pil_image = Image.fromarray(pixels, mode='RGB')
    buffer = io.BytesIO()
    fmt = 'JPEG' if Path(path).suffix.lower() in ('.jpg', '.jpeg') else 'PNG'
    with resource_manager(pil_image):
        pil_image.save(buffer, format=fmt)
    atomic_write_bytes(path, buffer.getvalue())


def read_image(path, channels: int = 3, value_range=(0.0, 1.0), size: Optional[Tuple[int, int]] = None,
               dtype=torch.float64) -> torch.Tensor:
    """
    读取图像为 (H, W, C) 浮点张量
    参数:
        channels: 1（灰度）或 3（RGB）
        value_range: 目标取值区间
        size: 可选 (H, W)，不一致时用 LANCZOS 缩放
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"图片文件不存在: {path}")
    with resource_manager(Image.open(path)) as pil_image:
        pil_image = pil_image.convert('L' if channels == 1 else 'RGB')
        if size is not None and pil_image.size != (size[1], size[0]):
            pil_image = pil_image.resize((size[1], size[0]), Image.Resampling.LANCZOS)
        array = np.asarray(pil_image, dtype=np.float64) / 255.0
    if array.ndim == 2:
        array = array[:, :, None]
    lo, hi = value_range
    return torch.as_tensor(lo + array * (hi - lo), dtype=dtype)


def list_assets(directory, suffixes) -> Dict[str, Path]:
    """列出目录下指定后缀的文件，返回 {stem: path}（按名称排序）"""
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"目录不存在: {directory}")
    assets = {}
    for path in sorted(directory.iterdir()):
        if path.is_file() and path.suffix.lower() in suffixes:
            if path.stem in assets:
                raise ConfigError(f"资产标识重复: {path.stem}")
            assets[path.stem] = path
    return assets


def list_images(directory) -> Dict[str, Path]:
    return list_assets(directory, _IMAGE_SUFFIXES)


def list_latents(directory) -> Dict[str, Path]:
    return list_assets(directory, (ESSV_SUFFIX,))


def read_target_flags(directory) -> Dict[str, dict]:
    """读取目标目录中的 targets.json（{"<id>": {"face": bool}}），缺失时返回空字典"""
    meta_path = Path(directory) / TARGETS_META_FILENAME
    return read_json(meta_path) if meta_path.exists() else {}


def list_manipulations(directory) -> Dict[str, Dict[str, Path]]:
    """操作结果目录结构 <target_id>/<source_id>.png"""
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"目录不存在: {directory}")
    result = {}
    for sub in sorted(p for p in directory.iterdir() if p.is_dir()):
        images = list_images(sub)
        if images:
            result[sub.name] = images
    return result


def delta_path_for(directory, target_id: str, source_id: str) -> Path:
    return Path(directory) / target_id / f"{source_id}{DELTA_SUFFIX}"
