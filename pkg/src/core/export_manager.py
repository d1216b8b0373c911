"""
导出管理模块
网格图导出（PNG/JPG 用 Pillow，PDF 用 reportlab）以及评估报告、优化轨迹的 JSON/CSV 导出
"""

import csv
import io
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from PIL import Image
from reportlab.lib.utils import ImageReader
from reportlab.pdfgen import canvas

from common.constants import *
from common.error_handler import logger, ConfigError, resource_manager
from core.types import ImageTensor
from core.layout_engine import LayoutEngine
from core.evaluation import EvaluationReport
from utils.file_handler import atomic_write_bytes, atomic_write_json, atomic_write_text


@dataclass
class ExportConfig:
    """导出配置类"""
    format_type: str = 'PNG'
    cell_size: int = GRID_CELL_SIZE
    spacing: int = GRID_SPACING
    margin: int = GRID_MARGIN
    jpeg_quality: int = 95
    layout: str = GRID_LAYOUT_ROWS

    def __post_init__(self):
        if self.layout not in GRID_LAYOUTS:
            raise ConfigError(f"未知的网格布局: {self.layout}（可选 {', '.join(GRID_LAYOUTS)}）")

    @classmethod
    def for_path(cls, path, **kwargs):
        """按扩展名推断格式"""
        suffix = Path(path).suffix.lower().lstrip('.')
        format_type = {'jpeg': 'JPG'}.get(suffix, suffix.upper())
        if format_type not in GRID_EXPORT_FORMATS:
            raise ConfigError(f"不支持的网格导出格式: .{suffix}（可选 {', '.join(GRID_EXPORT_FORMATS)}）")
        return cls(format_type=format_type, **kwargs)


def _csv_text(rows: List[dict], columns: Sequence[str]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(columns), lineterminator="\n", extrasaction='ignore')
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row.get(k) is None else repr(row[k]) if isinstance(row.get(k), float) else row[k])
                         for k in columns})
    return buffer.getvalue()


class ExportManager:
    """导出管理器类"""

    def __init__(self, config: Optional[ExportConfig] = None):
        self.config = config or ExportConfig()
        self.layout_engine = LayoutEngine(self.config.cell_size, self.config.spacing, self.config.margin)

    # ------------------------------------------------------------------
    # 网格图
    # ------------------------------------------------------------------

    def export_grid(self, targets: Sequence[Tuple[str, ImageTensor]], sources: Sequence[Tuple[str, ImageTensor]],
                    results: Dict[str, Dict[str, ImageTensor]], output_path, value_range=None) -> Path:
        """
        导出网格图，格式由 config.format_type 决定，布局由 config.layout 决定
        value_range: 无界图像的显示区间（通常为生成器的交换区间）
        返回: Path - 写入的文件
        """
        output_path = Path(output_path)
        grid = self.layout_engine.render_grid(targets, sources, results, self.config.layout, value_range)
        with resource_manager(grid):
            if self.config.format_type == 'PDF':
                self._export_grid_pdf(grid, output_path, len(targets), len(sources))
            else:
                buffer = io.BytesIO()
                if self.config.format_type == 'JPG':
                    grid.save(buffer, "JPEG", quality=self.config.jpeg_quality)
                else:
                    grid.save(buffer, "PNG")
                atomic_write_bytes(output_path, buffer.getvalue())
        logger.info(f"网格图已导出: {output_path} ({len(targets)} 个目标 × {len(sources)} 个源)")
        return output_path

    def _export_grid_pdf(self, grid: Image.Image, output_path: Path, n_targets: int, n_sources: int):
        """单页 PDF，页面尺寸与网格像素尺寸一致（1 px = 1 pt），底部留出信息栏"""
        footer = 24
        width, height = grid.size
        buffer = io.BytesIO()
        c = canvas.Canvas(buffer, pagesize=(width, height + footer))
        png = io.BytesIO()
        grid.save(png, "PNG")
        png.seek(0)
        c.drawImage(ImageReader(png), 0, footer, width=width, height=height)
        self._add_page_info(c, n_targets, n_sources)
        c.showPage()
        c.save()
        atomic_write_bytes(output_path, buffer.getvalue())

    def _add_page_info(self, canvas_obj, n_targets, n_sources):
        try:
            canvas_obj.setFont("Helvetica", 8)
            info_text = f"{APP_NAME} | targets: {n_targets} | sources: {n_sources} | " \
                        f"Generated: {datetime.now().strftime('%Y-%m-%d %H:%M')}"
            canvas_obj.drawString(8, 8, info_text)
        except Exception as e:
            logger.warning(f"添加页面信息失败: {e}")

    # ------------------------------------------------------------------
    # 报告
    # ------------------------------------------------------------------

    def export_report(self, report: EvaluationReport, output_dir, percent: bool = False) -> Dict[str, Path]:
        """
        写出 report.json、metrics.csv 和 fid.csv
        JSON 中始终保存原始余弦值；percent 只影响 CSV 与 JSON 中的展示字段缩放
        """
        output_dir = Path(output_dir)
        paths = {
            'json': output_dir / REPORT_JSON_FILENAME,
            'csv': output_dir / REPORT_CSV_FILENAME,
            'fid': output_dir / FID_CSV_FILENAME,
        }
        payload = report.to_dict(percent=False)
        payload['success_rate'] = report.success_rate
        if percent:
            payload['presentation'] = report.to_dict(percent=True)
        atomic_write_json(paths['json'], payload)
        atomic_write_text(paths['csv'], _csv_text(report.csv_rows(percent), REPORT_CSV_COLUMNS))
        fid_rows = [{'target_id': t, 'fid': report.fid[t]} for t in sorted(report.fid)]
        atomic_write_text(paths['fid'], _csv_text(fid_rows, ['target_id', 'fid']))
        logger.info(f"评估报告已导出到 {output_dir}")
        return paths

    def export_table(self, rows: List[dict], output_path) -> Path:
        """通用汇总表（敏感性实验、消融汇总）"""
        columns = []
        for row in rows:
            columns.extend(k for k in row if k not in columns)
        atomic_write_text(output_path, _csv_text(rows, columns))
        return Path(output_path)

    def export_trace(self, trace, output_path) -> Path:
        atomic_write_json(output_path, trace.to_dict())
        return Path(output_path)
