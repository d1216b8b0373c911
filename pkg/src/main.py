"""
EssenceKit 主程序入口
本质迁移工具 - 学习隐空间中的加性本质向量，迁移到源图像并评估
"""

import argparse
import logging
import sys

# 导入公共模块（自动设置路径）
from common.path_utils import setup_project_paths
from common.constants import *
from common.error_handler import logger, setup_logging, install_excepthook
from common.imports import check_required_dependencies
from utils.config import app_config


class CliArgumentParser(argparse.ArgumentParser):
    """参数错误按配置错误处理（退出码 1），并打印用法"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG_ERROR, f"{self.prog}: error: {message}\n")


def _add_optimizer_args(parser):
    group = parser.add_argument_group("优化器参数（覆盖配置文件与默认值）")
    group.add_argument("--iters", type=int, help=f"迭代次数（默认 {DEFAULT_OPT_ITERATIONS}）")
    group.add_argument("--lr", type=float, help=f"学习率（默认 {DEFAULT_OPT_LEARNING_RATE}）")
    group.add_argument("--n", type=int, help=f"源批次大小 N（默认 {DEFAULT_OPT_BATCH_SIZE}）")
    group.add_argument("--lambda-c", dest="lambda_c", type=float,
                       help=f"一致性损失权重（默认 {DEFAULT_LAMBDA_CONSISTENCY}）")
    group.add_argument("--lambda-l2", dest="lambda_l2", type=float, help=f"L2 惩罚权重（默认 {DEFAULT_LAMBDA_L2}）")
    group.add_argument("--seed", type=int, help=f"随机种子（默认 {DEFAULT_SEED}）")
    group.add_argument("--config", help="JSON/TOML 配置文件，也可以是之前写出的 run_manifest.json")


def _add_fixture_args(parser):
    parser.add_argument("--fixture", choices=["toy"], help="使用内置的玩具隐藏目标夹具")
    parser.add_argument("--targets", help="目标图像目录")
    parser.add_argument("--sources", help="训练源目录（.png 或 .essv）")
    parser.add_argument("--held-out", dest="held_out", help="留出源目录（评估用）")
    parser.add_argument("--reference", help="FID 参考图像目录（缺省时由生成器抽取）")


def build_parser() -> argparse.ArgumentParser:
    parser = CliArgumentParser(prog=CLI_NAME, description=f"{APP_NAME} {APP_VERSION} - {APP_TITLE}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="输出调试日志")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="只输出警告和错误")
    parser.add_argument("--jobs", type=int, default=1, help="评估并发数")
    parser.add_argument("--no-progress", action="store_true", help="不显示进度条")
    sub = parser.add_subparsers(dest="command", metavar="<command>")
    sub.required = True

    p = sub.add_parser("transfer", help="为一个目标优化本质向量并作用于所有源")
    p.add_argument("--target", required=True, help="目标图像")
    p.add_argument("--sources", required=True, help="源目录或单个 .essv 文件")
    p.add_argument("--profile", required=True, help="后端配置名称")
    p.add_argument("--init", choices=sorted(["noise", "inversion"]), help="初始化方式（默认 noise）")
    p.add_argument("--out", required=True, help="输出的 essence.essv 路径")
    p.add_argument("--held-out", dest="held_out", help="额外的留出源目录")
    p.add_argument("--essence", help="直接应用已有的 .essv 本质向量，不做优化")
    p.add_argument("--grid", action="store_true", help="额外输出目标/源/结果网格图")
    p.add_argument("--grid-format", choices=["png", "jpg", "pdf"], default="png")
    p.add_argument("--force", action="store_true", help="覆盖已有输出")
    _add_optimizer_args(p)

    p = sub.add_parser("extract", help="用微调后的本质编码器一次前向提取本质向量")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--profile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("train-encoder", help="将反演编码器微调为本质编码器")
    p.add_argument("--profile", required=True)
    p.add_argument("--train-dir", dest="train_dir", required=True)
    p.add_argument("--eval-dir", dest="eval_dir", required=True)
    p.add_argument("--sources", help="源目录（缺省时使用训练图像的反演）")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--iters", type=int, help=f"训练步数（默认 {DEFAULT_ENC_ITERATIONS}）")
    p.add_argument("--lr", type=float, help=f"学习率（默认 {DEFAULT_ENC_LEARNING_RATE}）")
    p.add_argument("--n", type=int, help=f"每步源数 N（默认 {DEFAULT_ENC_BATCH_SIZE}）")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")

    p = sub.add_parser("evaluate", help="计算身份分数、语义分数和 FID")
    p.add_argument("--manipulations", required=True, help="结果目录 <target_id>/<source_id>.png")
    p.add_argument("--sources", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--profile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reference")
    p.add_argument("--percent", action="store_true", help="余弦类指标按 ×100 展示")
    p.add_argument("--deltas", action="store_true", help="同时导出语义差 C(I_st) - C(I_s)（.npy）")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("ablate", help="损失项消融实验")
    p.add_argument("--profile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", nargs="+", choices=list(ABLATION_VARIANTS))
    p.add_argument("--percent", action="store_true")
    p.add_argument("--force", action="store_true")
    _add_fixture_args(p)
    _add_optimizer_args(p)

    p = sub.add_parser("sensitivity", help="源批次大小 N 的敏感性实验")
    p.add_argument("--profile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-values", "--n", dest="n_values", nargs="+", type=int,
                   help="源批次大小列表（可由 --config 给出）")
    p.add_argument("--method", choices=[METHOD_OPTIMIZER, METHOD_ENCODER], help=f"默认 {METHOD_OPTIMIZER}")
    p.add_argument("--percent", action="store_true")
    p.add_argument("--force", action="store_true")
    _add_fixture_args(p)
    group = p.add_argument_group("优化器参数")
    group.add_argument("--iters", type=int)
    group.add_argument("--lr", type=float)
    group.add_argument("--seed", type=int)
    group.add_argument("--config")

    p = sub.add_parser("grid", help="渲染目标/源/结果网格图（PNG/JPG/PDF）")
    p.add_argument("--targets", required=True)
    p.add_argument("--sources", required=True)
    p.add_argument("--manipulations", required=True)
    p.add_argument("--profile", default="toy")
    p.add_argument("--out", required=True)
    p.add_argument("--cell-size", dest="cell_size", type=int, default=GRID_CELL_SIZE)
    p.add_argument("--layout", choices=list(GRID_LAYOUTS), default=GRID_LAYOUT_ROWS,
                   help="rows: 目标/源/结果三行（默认）；matrix: 目标 × 源 交叉矩阵")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("profiles", help="列出可用的后端配置")
    p.add_argument("--check", action="store_true", help="构造每个后端并做一致性检查")
    return parser


def _dispatch(args) -> int:
    from cli import commands
    handlers = {
        "transfer": commands.cmd_transfer,
        "extract": commands.cmd_extract,
        "train-encoder": commands.cmd_train_encoder,
        "evaluate": commands.cmd_evaluate,
        "ablate": commands.cmd_ablate,
        "sensitivity": commands.cmd_sensitivity,
        "grid": commands.cmd_grid,
        "profiles": commands.cmd_profiles,
    }
    return handlers[args.command](args)


def main(argv=None) -> int:
    """命令行入口，返回退出码"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    setup_logging(logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO)
    try:
        check_required_dependencies()
    except ImportError as e:
        logger.error(str(e))
        return EXIT_BACKEND_ERROR

    app_config.jobs = args.jobs
    app_config.show_progress = not args.no_progress
    return _dispatch(args)


if __name__ == "__main__":
    setup_project_paths()
    install_excepthook()
    sys.exit(main())
