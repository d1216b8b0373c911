"""
网格排版引擎模块
默认三行布局：第一行目标、第二行源、第三行结果，每列是一个 (目标, 源) 对
另有矩阵布局：第一行放目标、第一列放源，交叉单元放对应的迁移结果
"""

import math
from typing import Dict, Sequence, Tuple

from PIL import Image, ImageDraw

from common.constants import (
    GRID_CELL_SIZE, GRID_SPACING, GRID_MARGIN, GRID_BACKGROUND, GRID_LAYOUT_ROWS, GRID_LAYOUT_MATRIX, GRID_LAYOUTS,
)
from common.error_handler import logger, ConfigError
from core.types import ImageTensor
from utils.file_handler import image_to_uint8


def display_range(images: Sequence[ImageTensor]) -> Tuple[float, float]:
    """无界图像在同一网格中共用的显示区间（所有单元的最小/最大值）"""
    lo = min(float(image.data.min()) for image in images)
    hi = max(float(image.data.max()) for image in images)
    return (lo, hi) if hi - lo > 1e-12 else (lo, lo + 1.0)


class LayoutEngine:
    """目标/源/结果网格排版类"""

    def __init__(self, cell_size=GRID_CELL_SIZE, spacing=GRID_SPACING, margin=GRID_MARGIN):
        if cell_size < 1 or spacing < 0 or margin < 0:
            raise ConfigError(f"非法的网格参数: cell={cell_size}, spacing={spacing}, margin={margin}")
        self.cell_size = int(cell_size)
        self.spacing = int(spacing)
        self.margin = int(margin)

        # 布局缓存
        self._layout_cache = {}
        self._max_layout_cache = 20

    def _manage_layout_cache(self):
        """管理布局缓存大小"""
        if len(self._layout_cache) >= self._max_layout_cache:
            oldest_key = next(iter(self._layout_cache))
            del self._layout_cache[oldest_key]

    def clear_cache(self):
        self._layout_cache.clear()
        logger.debug("布局引擎缓存已清空")

    def calculate_grid_layout(self, rows: int, cols: int) -> dict:
        """
        计算网格布局
        参数:
            rows: 行数
            cols: 列数
        返回: dict - 画布尺寸与每个单元左上角坐标 {(row, col): (x, y)}
        """
        if rows < 1 or cols < 1:
            raise ConfigError(f"网格至少需要一行一列，实际 {rows} × {cols}")
        cache_key = (rows, cols)
        if cache_key in self._layout_cache:
            return dict(self._layout_cache[cache_key])

        pitch = self.cell_size + self.spacing
        width = 2 * self.margin + cols * self.cell_size + (cols - 1) * self.spacing
        height = 2 * self.margin + rows * self.cell_size + (rows - 1) * self.spacing
        positions = {
            (row, col): (self.margin + col * pitch, self.margin + row * pitch)
            for row in range(rows) for col in range(cols)
        }
        result = {
            'rows': rows,
            'cols': cols,
            'width': width,
            'height': height,
            'cell_size': self.cell_size,
            'positions': positions,
        }

        self._manage_layout_cache()
        self._layout_cache[cache_key] = dict(result)
        return result

    @staticmethod
    def grid_shape(n_targets: int, n_sources: int, layout: str = GRID_LAYOUT_ROWS) -> Tuple[int, int]:
        """给定目标数与源数时的 (行数, 列数)"""
        if layout not in GRID_LAYOUTS:
            raise ConfigError(f"未知的网格布局: {layout}（可选 {', '.join(GRID_LAYOUTS)}）")
        if n_targets < 1 or n_sources < 1:
            raise ConfigError(f"网格至少需要一个目标和一个源，实际 {n_targets} × {n_sources}")
        if layout == GRID_LAYOUT_MATRIX:
            return n_sources + 1, n_targets + 1
        return 3, n_targets * n_sources

    def _cell_image(self, image: ImageTensor, fallback_range) -> Image.Image:
        lo, hi = image.value_range
        value_range = (lo, hi) if math.isfinite(lo) and math.isfinite(hi) else fallback_range
        pixels = image_to_uint8(image.data, value_range)
        if pixels.shape[2] == 1:
            cell = Image.fromarray(pixels[:, :, 0], mode='L').convert('RGB')
        else:
            cell = Image.fromarray(pixels, mode='RGB')
        # 玩具图像很小，放大时保持像素块
        resample = Image.Resampling.NEAREST if min(cell.size) < self.cell_size else Image.Resampling.LANCZOS
        return cell.resize((self.cell_size, self.cell_size), resample)

    def _draw_placeholder(self, draw, position):
        x, y = position
        draw.rectangle([x, y, x + self.cell_size - 1, y + self.cell_size - 1],
                       fill=(220, 220, 220), outline=(200, 200, 200))

    def render_grid(self, targets: Sequence[Tuple[str, ImageTensor]], sources: Sequence[Tuple[str, ImageTensor]],
                    results: Dict[str, Dict[str, ImageTensor]], layout: str = GRID_LAYOUT_ROWS,
                    value_range=None) -> Image.Image:
        """
        渲染网格图
        参数:
            targets: [(target_id, 图像)]
            sources: [(source_id, 图像)]
            results: {target_id: {source_id: 结果图像}}；缺失的单元画占位框
            layout: rows（目标/源/结果三行，按 目标 × 源 的顺序排列各列）或 matrix
            value_range: 无界图像的显示区间；为 None 时取整个网格的最小/最大值
        返回: PIL.Image (RGB)
        """
        rows, cols = self.grid_shape(len(targets), len(sources), layout)
        grid_layout = self.calculate_grid_layout(rows, cols)
        canvas = Image.new('RGB', (grid_layout['width'], grid_layout['height']), GRID_BACKGROUND)
        draw = ImageDraw.Draw(canvas)
        positions = grid_layout['positions']

        present = [image for _, image in targets] + [image for _, image in sources] + [
            image for per_target in results.values() for image in per_target.values()]
        fallback = tuple(value_range) if value_range is not None else display_range(present)

        def place(image, cell):
            if image is None:
                self._draw_placeholder(draw, positions[cell])
            else:
                canvas.paste(self._cell_image(image, fallback), positions[cell])

        if layout == GRID_LAYOUT_MATRIX:
            self._draw_placeholder(draw, positions[(0, 0)])
            for col, (_, target) in enumerate(targets, start=1):
                place(target, (0, col))
            for row, (source_id, source) in enumerate(sources, start=1):
                place(source, (row, 0))
                for col, (target_id, _) in enumerate(targets, start=1):
                    place(results.get(target_id, {}).get(source_id), (row, col))
        else:
            pairs = [(t, s) for t in targets for s in sources]
            for col, ((target_id, target), (source_id, source)) in enumerate(pairs):
                place(target, (0, col))
                place(source, (1, col))
                place(results.get(target_id, {}).get(source_id), (2, col))
        return canvas

    def get_layout_info(self, n_targets: int, n_sources: int, layout: str = GRID_LAYOUT_ROWS) -> dict:
        grid_layout = self.calculate_grid_layout(*self.grid_shape(n_targets, n_sources, layout))
        return {key: grid_layout[key] for key in ('rows', 'cols', 'width', 'height', 'cell_size')}
