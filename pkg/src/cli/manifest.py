"""
运行清单模块
每个输出目录恰好一份 run_manifest.json，在耗时工作开始前写出，结束时原地更新状态
"""

import sys
from dataclasses import dataclass, field, asdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from common.constants import APP_VERSION, MANIFEST_FILENAME
from common.error_handler import logger, FormatError
from utils.file_handler import atomic_write_json, read_json


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec='seconds')


@dataclass
class RunManifest:
    """一次命令运行的完整记录：命令、解析后的配置、后端摘要、种子、输入输出路径和时间戳"""
    command: str
    config: dict
    profile: dict
    seed: Optional[int]
    inputs: dict
    outputs: dict
    started_at: str = field(default_factory=_now)
    finished_at: Optional[str] = None
    status: str = "running"
    version: str = APP_VERSION
    argv: list = field(default_factory=lambda: list(sys.argv[1:]))

    @staticmethod
    def path_for(output_dir) -> Path:
        return Path(output_dir) / MANIFEST_FILENAME

    def to_dict(self) -> dict:
        data = asdict(self)
        data['inputs'] = {k: (str(v) if v is not None else None) for k, v in self.inputs.items()}
        data['outputs'] = {k: (str(v) if v is not None else None) for k, v in self.outputs.items()}
        return data

    def write(self, output_dir) -> Path:
        path = self.path_for(output_dir)
        atomic_write_json(path, self.to_dict())
        logger.debug(f"运行清单已写入: {path}")
        return path

    def finish(self, output_dir, status: str = "completed", **outputs) -> Path:
        self.outputs.update(outputs)
        self.status = status
        self.finished_at = _now()
        return self.write(output_dir)

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = cls.path_for(path)
        data = read_json(path)
        try:
            return cls(**data)
        except TypeError as e:
            raise FormatError(f"运行清单格式不正确: {path}: {e}") from e
