"""
路径工具模块
统一管理项目路径、导入路径和后端配置目录
"""

import sys
import os
from pathlib import Path

from common.constants import ENV_PROFILE_DIR


def setup_project_paths():
    """
    设置项目路径，确保可以正确导入项目模块
    """
    src_path = str(get_project_root())
    if src_path not in sys.path:
        sys.path.insert(0, src_path)


def get_project_root():
    """获取源码根目录路径"""
    current_file = Path(__file__).resolve()
    return current_file.parent.parent  # src/common -> src


def get_profile_dir():
    """
    获取后端配置目录
    返回: Path 或 None（未设置环境变量时）
    """
    value = os.environ.get(ENV_PROFILE_DIR)
    if not value:
        return None
    return Path(value).expanduser()


def sidecar_path(path):
    """获取文件的 JSON 元数据路径（essence.essv -> essence.essv.json）"""
    path = Path(path)
    return path.with_name(path.name + ".json")


# 自动设置路径（导入时执行）
setup_project_paths()
