#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
开发工具脚本
提供常用的开发任务快捷命令
"""

import os
import sys
import subprocess
import tempfile
from pathlib import Path

# 设置环境变量以支持UTF-8输出
if sys.platform.startswith('win'):
    os.environ['PYTHONIOENCODING'] = 'utf-8'

PROJECT_ROOT = Path(__file__).parent.parent


def _run(args, description):
    """在项目根目录下运行子进程，返回是否成功"""
    try:
        result = subprocess.run(args, cwd=PROJECT_ROOT)
        return result.returncode == 0
    except Exception as e:
        print(f"Error: {description} failed: {e}")
        return False


def run_demo():
    """在玩具夹具上跑一次完整的消融实验"""
    print("Running EssenceKit demo on the toy fixture...")
    out_dir = Path(tempfile.mkdtemp(prefix="essencekit-demo-"))
    ok = _run([sys.executable, str(PROJECT_ROOT / "src" / "main.py"), "ablate", "--fixture", "toy",
               "--profile", "toy", "--variants", "full", "no_consistency", "--iters", "200",
               "--out", str(out_dir / "ablation")], "Demo")
    if ok:
        print(f"Results written to {out_dir}")
    return ok


def run_tests():
    """运行快速测试（跳过长耗时的验收测试）"""
    print("Running tests...")
    return _run([sys.executable, str(PROJECT_ROOT / "tests" / "run_tests.py"), "--quick"], "Test execution")


def run_acceptance():
    """运行全部测试，包括默认超参数下的验收测试"""
    print("Running full test suite...")
    return _run([sys.executable, str(PROJECT_ROOT / "tests" / "run_tests.py")], "Acceptance tests")


def run_integration_test():
    """运行集成测试"""
    print("Running integration tests...")
    return _run([sys.executable, str(PROJECT_ROOT / "tests" / "test_integration.py")], "Integration test")


def check_code_quality():
    """flake8 + black + isort 检查（需要 requirements-dev.txt）"""
    print("Checking code quality...")
    targets = ["src", "tests", "scripts"]
    checks = [
        ([sys.executable, "-m", "flake8", "--max-line-length", "120", *targets], "flake8"),
        ([sys.executable, "-m", "black", "--check", "--line-length", "120", *targets], "black"),
        ([sys.executable, "-m", "isort", "--check-only", "--profile", "black", *targets], "isort"),
    ]
    results = [_run(args, name) for args, name in checks]
    return all(results)


def install_deps(dev=False):
    """安装依赖"""
    print("Installing project dependencies...")
    requirements_file = PROJECT_ROOT / ("requirements-dev.txt" if dev else "requirements.txt")
    if not requirements_file.exists():
        print(f"Error: {requirements_file.name} not found")
        return False
    return _run([sys.executable, "-m", "pip", "install", "-r", str(requirements_file)], "Dependency installation")


def show_help():
    """显示帮助信息"""
    help_text = """
EssenceKit 开发工具

可用命令:
  demo         - 在玩具夹具上运行消融实验示例
  test         - 运行快速测试
  acceptance   - 运行全部测试（含验收测试，耗时较长）
  integration  - 运行集成测试
  quality      - 检查代码质量
  install      - 安装项目依赖
  install-dev  - 安装开发依赖
  help         - 显示此帮助信息

使用方法:
  python scripts/dev_tools.py <command>

示例:
  python scripts/dev_tools.py demo
  python scripts/dev_tools.py test
"""
    print(help_text)


def main():
    """主函数"""
    if len(sys.argv) < 2:
        show_help()
        return

    command = sys.argv[1].lower()

    commands = {
        'demo': run_demo,
        'test': run_tests,
        'acceptance': run_acceptance,
        'integration': run_integration_test,
        'quality': check_code_quality,
        'install': install_deps,
        'install-dev': lambda: install_deps(dev=True),
        'help': show_help,
    }

    if command not in commands:
        print(f"Error: Unknown command: {command}")
        show_help()
        sys.exit(1)

    if command == 'help':
        show_help()
        return
    if commands[command]():
        print(f"Success: {command} command completed")
    else:
        print(f"Error: {command} command failed")
        sys.exit(1)


if __name__ == "__main__":
    main()
