"""
公共模块测试
测试common目录下的公共功能模块
"""

import unittest
import sys
import os
import logging
from pathlib import Path
from unittest.mock import patch

# 添加src目录到路径
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root / "src"))

from common.imports import OptionalImport, check_required_dependencies, get_dependency_info
from common.constants import *
from common.path_utils import get_project_root, get_profile_dir, sidecar_path
from common.error_handler import (
    logger, setup_logging, cli_error_handler, resource_manager,
    EssenceKitError, ConfigError, BackendError, NumericError,
    BatchTooSmall, OutputExists, ShapeMismatch, CheckpointMismatch, ZeroVector, SingularCovariance,
)


class TestImports(unittest.TestCase):
    """导入管理测试"""

    def test_dependency_check(self):
        """测试依赖检查"""
        self.assertTrue(check_required_dependencies())

    def test_dependency_info(self):
        """测试依赖信息获取"""
        info = get_dependency_info()
        self.assertIsInstance(info, dict)
        for name in ('torch', 'numpy', 'scipy', 'PIL', 'ReportLab', 'open_clip'):
            self.assertIn(name, info)
        self.assertTrue(info['torch'])

    def test_optional_import(self):
        """测试可选导入：缺失模块为假值，访问属性时报错"""
        missing = OptionalImport('module_that_does_not_exist')
        self.assertFalse(missing)
        with self.assertRaises(ImportError):
            missing.anything
        present = OptionalImport('linalg', package='numpy')
        self.assertTrue(present)
        self.assertTrue(callable(present.norm))


class TestConstants(unittest.TestCase):
    """常量定义测试"""

    def test_version_constants(self):
        """测试版本常量"""
        self.assertIsInstance(APP_VERSION, str)
        self.assertRegex(APP_VERSION, r'^\d+\.\d+\.\d+$')
        self.assertEqual(CLI_NAME, "essencekit")

    def test_format_constants(self):
        """测试格式常量"""
        self.assertEqual(ESSV_MAGIC, b"ESSV1")
        self.assertEqual(len(ESSV_MAGIC), 5)
        self.assertIn(('.png', 'PNG'), SUPPORTED_IMAGE_FORMATS)
        self.assertEqual(REPORT_CSV_COLUMNS,
                         ["target_id", "source_id", "id_source", "id_target", "sem_clip", "sem_blip"])

    def test_exit_codes(self):
        """测试退出码互不相同"""
        codes = {EXIT_OK, EXIT_CONFIG_ERROR, EXIT_BACKEND_ERROR, EXIT_NUMERIC_ERROR}
        self.assertEqual(len(codes), 4)
        self.assertEqual(EXIT_OK, 0)

    def test_fixture_sizes(self):
        """测试玩具夹具的留出源足够计算逐目标 FID"""
        self.assertGreaterEqual(TOY_FIXTURE_HELD_OUT, TOY_FEATURE_DIM + 1)
        self.assertGreaterEqual(TOY_FIXTURE_POOL, DEFAULT_OPT_BATCH_SIZE)
        self.assertEqual(ABLATION_VARIANTS[0], "full")


class TestPathUtils(unittest.TestCase):
    """路径工具测试"""

    def test_project_root(self):
        """测试源码根目录获取"""
        root = get_project_root()
        self.assertIsInstance(root, Path)
        self.assertTrue((root / "common").exists())
        self.assertIn(str(root), sys.path)

    def test_profile_dir(self):
        """测试后端配置目录环境变量"""
        with patch.dict(os.environ, {ENV_PROFILE_DIR: ""}):
            self.assertIsNone(get_profile_dir())
        with patch.dict(os.environ, {ENV_PROFILE_DIR: "/tmp/profiles"}):
            self.assertEqual(get_profile_dir(), Path("/tmp/profiles"))

    def test_sidecar_path(self):
        """测试元数据文件路径"""
        self.assertEqual(sidecar_path("out/essence.essv"), Path("out/essence.essv.json"))


class TestErrorHandler(unittest.TestCase):
    """错误处理测试"""

    def test_logger(self):
        """测试日志记录器"""
        self.assertEqual(logger.name, APP_NAME)
        self.assertFalse(logger.propagate)
        handlers = len(logger.handlers)
        setup_logging(logging.WARNING)
        self.assertEqual(len(logger.handlers), handlers)
        self.assertEqual(logger.level, logging.WARNING)
        setup_logging(logging.INFO)

    def test_exception_hierarchy(self):
        """测试异常层次与退出码"""
        self.assertTrue(issubclass(BatchTooSmall, ConfigError))
        self.assertTrue(issubclass(OutputExists, ConfigError))
        self.assertTrue(issubclass(ShapeMismatch, BackendError))
        self.assertTrue(issubclass(CheckpointMismatch, BackendError))
        self.assertTrue(issubclass(ZeroVector, NumericError))
        self.assertTrue(issubclass(NumericError, EssenceKitError))
        self.assertEqual(BatchTooSmall.exit_code, EXIT_CONFIG_ERROR)
        self.assertEqual(CheckpointMismatch.exit_code, EXIT_BACKEND_ERROR)
        self.assertEqual(SingularCovariance.exit_code, EXIT_NUMERIC_ERROR)

    def test_cli_error_handler(self):
        """测试命令行错误处理装饰器的退出码映射"""

        @cli_error_handler("测试命令")
        def run(exc=None):
            if exc is not None:
                raise exc
            return EXIT_OK

        with patch('common.error_handler.show_error_message'), patch.object(logger, 'error'):
            self.assertEqual(run(), EXIT_OK)
            self.assertEqual(run(BatchTooSmall("N = 1")), EXIT_CONFIG_ERROR)
            self.assertEqual(run(CheckpointMismatch("x")), EXIT_BACKEND_ERROR)
            self.assertEqual(run(ZeroVector("x")), EXIT_NUMERIC_ERROR)
            self.assertEqual(run(RuntimeError("boom")), EXIT_BACKEND_ERROR)

    def test_resource_manager(self):
        """测试资源管理器"""
        class MockResource:
            def __init__(self):
                self.closed = False

            def close(self):
                self.closed = True

        resource = MockResource()
        with resource_manager(resource) as r:
            self.assertIs(r, resource)
            self.assertFalse(r.closed)
        self.assertTrue(resource.closed)

        cleaned = []
        with resource_manager("item", cleanup_func=cleaned.append):
            pass
        self.assertEqual(cleaned, ["item"])


if __name__ == '__main__':
    unittest.main()
