"""
导入工具模块
统一管理可选依赖的导入和检查
"""

import importlib
from typing import Optional, Any


class OptionalImport:
    """
    可选依赖的延迟失败包装：导入失败时对象为假值，访问任何属性才抛出 ImportError
    package 不为空时导入 package.module_name 子模块
    """

    def __init__(self, module_name: str, package: Optional[str] = None):
        self.module_name = module_name
        self.qualified_name = f"{package}.{module_name}" if package else module_name
        self.module = None
        self._import_error = None
        try:
            self.module = importlib.import_module(self.qualified_name)
        except ImportError as e:
            self._import_error = e
        self.available = self.module is not None

    def __getattr__(self, name: str) -> Any:
        if not self.available:
            raise ImportError(f"可选依赖 {self.qualified_name} 不可用: {self._import_error}")
        return getattr(self.module, name)

    def __bool__(self) -> bool:
        """检查模块是否可用"""
        return self.available


# 预训练适配器才需要的依赖
open_clip = OptionalImport('open_clip')

TORCH_AVAILABLE = False
NUMPY_AVAILABLE = False
SCIPY_AVAILABLE = False
PIL_AVAILABLE = False
REPORTLAB_AVAILABLE = False

try:
    import torch  # noqa: F401
    TORCH_AVAILABLE = True
except ImportError:
    pass

try:
    import numpy  # noqa: F401
    NUMPY_AVAILABLE = True
except ImportError:
    pass

try:
    import scipy.linalg  # noqa: F401
    SCIPY_AVAILABLE = True
except ImportError:
    pass

try:
    from PIL import Image  # noqa: F401
    PIL_AVAILABLE = True
except ImportError:
    pass

try:
    from reportlab.pdfgen import canvas  # noqa: F401
    REPORTLAB_AVAILABLE = True
except ImportError:
    pass


def check_required_dependencies():
    """检查必需的依赖是否可用"""
    missing_deps = []

    if not TORCH_AVAILABLE:
        missing_deps.append("torch")
    if not NUMPY_AVAILABLE:
        missing_deps.append("numpy")
    if not SCIPY_AVAILABLE:
        missing_deps.append("scipy")
    if not PIL_AVAILABLE:
        missing_deps.append("Pillow")

    if missing_deps:
        raise ImportError(f"Missing required dependencies: {', '.join(missing_deps)}")

    return True


def get_dependency_info():
    """获取依赖信息"""
    return {
        'torch': TORCH_AVAILABLE,
        'numpy': NUMPY_AVAILABLE,
        'scipy': SCIPY_AVAILABLE,
        'PIL': PIL_AVAILABLE,
        'ReportLab': REPORTLAB_AVAILABLE,
        'open_clip': bool(open_clip),
    }
