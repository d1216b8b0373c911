"""
错误处理模块
提供统一的异常层次、日志记录和命令行友好的错误提示
"""

import sys
import traceback
import logging
from typing import Optional, Callable
from contextlib import contextmanager
from functools import wraps

from common.constants import APP_NAME, EXIT_CONFIG_ERROR, EXIT_BACKEND_ERROR, EXIT_NUMERIC_ERROR


class EssenceKitError(Exception):
    """EssenceKit基础异常类"""
    exit_code = EXIT_BACKEND_ERROR


class ConfigError(EssenceKitError):
    """配置相关错误"""
    exit_code = EXIT_CONFIG_ERROR


class BackendError(EssenceKitError):
    """后端（生成器/编码器/检查点）相关错误"""
    exit_code = EXIT_BACKEND_ERROR


class NumericError(EssenceKitError):
    """数值计算相关错误"""
    exit_code = EXIT_NUMERIC_ERROR


# 配置类错误
class EmptyBatch(ConfigError):
    """批次为空"""


class BatchTooSmall(ConfigError):
    """批次过小（一致性损失至少需要两个样本）"""


class MissingInverter(ConfigError):
    """请求目标反演初始化但未提供反演器"""


class OutputExists(ConfigError):
    """输出路径已存在且未指定 --force"""


class MissingPair(ConfigError):
    """评估记录缺少 (target, source) 组合"""


class DuplicatePair(ConfigError):
    """评估记录存在重复的 (target, source) 组合"""


class ProfileNotFound(ConfigError):
    """找不到后端配置"""


# 后端类错误
class ShapeMismatch(BackendError):
    """张量形状不匹配"""


class SpaceMismatch(BackendError):
    """隐空间标识不匹配"""


class DimMismatch(BackendError):
    """向量维度不匹配"""


class NonTrainableInverter(BackendError):
    """反演器没有可训练参数"""


class CheckpointMismatch(BackendError):
    """检查点与后端配置不匹配"""


class ConformanceError(BackendError):
    """后端未通过接口一致性检查"""


class FormatError(BackendError):
    """文件格式错误"""


# 数值类错误
class ZeroVector(NumericError):
    """余弦运算遇到零向量"""


class ZeroEmbedding(NumericError):
    """编码器输出（近似）零向量"""


class SingularCovariance(NumericError):
    """协方差矩阵平方根在正则化后仍然失败"""


class NonFiniteLoss(NumericError):
    """损失出现 NaN 或 Inf"""


LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(log_level=logging.INFO):
    """设置日志记录"""
    package_logger = logging.getLogger(APP_NAME)
    if not package_logger.handlers:
        handler = logging.StreamHandler(sys.stdout)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        package_logger.addHandler(handler)
    package_logger.setLevel(log_level)
    package_logger.propagate = False
    return package_logger


logger = setup_logging()


def show_error_message(title: str, message: str):
    """在标准错误输出上显示错误信息"""
    print(f"ERROR - {title}: {message}", file=sys.stderr)


def handle_exception(exc_type, exc_value, exc_traceback):
    """全局异常处理器"""
    if issubclass(exc_type, KeyboardInterrupt):
        sys.__excepthook__(exc_type, exc_value, exc_traceback)
        return

    error_msg = f"未处理的异常: {exc_type.__name__}: {exc_value}"
    logger.error(error_msg, exc_info=(exc_type, exc_value, exc_traceback))
    detailed_msg = ''.join(traceback.format_exception(exc_type, exc_value, exc_traceback))
    show_error_message("程序错误", f"{error_msg}\n{detailed_msg}")


def install_excepthook():
    """仅在命令行进程中安装全局异常处理器"""
    sys.excepthook = handle_exception


def cli_error_handler(error_message: str = "命令执行失败"):
    """
    命令行错误处理装饰器
    将 EssenceKitError 映射为对应的退出码，其他异常按后端错误处理
    """
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            try:
                return func(*args, **kwargs)
            except EssenceKitError as e:
                logger.error(f"{error_message} in {func.__name__}: {type(e).__name__}: {e}")
                show_error_message(type(e).__name__, str(e))
                return e.exit_code
            except Exception as e:
                logger.error(f"{error_message} in {func.__name__}: {e}", exc_info=True)
                show_error_message("错误", f"{error_message}: {e}")
                return EXIT_BACKEND_ERROR
        return wrapper
    return decorator


@contextmanager
def resource_manager(resource, cleanup_func: Optional[Callable] = None):
    """资源管理上下文管理器"""
    try:
        yield resource
    finally:
        try:
            if cleanup_func:
                cleanup_func(resource)
            elif hasattr(resource, 'close'):
                resource.close()
        except Exception as e:
            logger.warning(f"资源清理失败: {e}")
