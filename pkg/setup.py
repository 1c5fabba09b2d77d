#!/usr/bin/env python3
"""
融合攻击检测系统环境准备脚本
检查解释器版本、安装固定版本依赖、建立 data/runs/logs 目录
"""
import importlib
import os
import subprocess
import sys

MIN_PYTHON = (3, 9)
WORK_DIRS = ("data", "runs", "logs")
CORE_PACKAGES = ("numpy", "pandas", "scipy", "torch")


def python_ok() -> bool:
    found = sys.version_info[:2]
    if found < MIN_PYTHON:
        print(f"错误: 需要 Python {MIN_PYTHON[0]}.{MIN_PYTHON[1]}+，当前为 {found[0]}.{found[1]}")
        return False
    print(f"✓ Python {found[0]}.{found[1]}")
    return True


def pip_install(requirements: str = "requirements.txt") -> bool:
    """按 requirements.txt 安装"""
    if not os.path.exists(requirements):
        print(f"错误: 缺少 {requirements}")
        return False
    print(f"pip install -r {requirements} ...")
    result = subprocess.run([sys.executable, "-m", "pip", "install", "-r", requirements])
    if result.returncode != 0:
        print(f"错误: pip 返回 {result.returncode}")
        return False
    return True


def make_work_dirs():
    for name in WORK_DIRS:
        os.makedirs(name, exist_ok=True)
    print(f"✓ 工作目录: {', '.join(WORK_DIRS)}")


def import_check() -> bool:
    """逐个导入核心依赖并打印版本"""
    missing = []
    for name in CORE_PACKAGES:
        try:
            module = importlib.import_module(name)
            print(f"✓ {name} {getattr(module, '__version__', '?')}")
        except ImportError:
            missing.append(name)
    if missing:
        print(f"错误: 以下依赖无法导入: {', '.join(missing)}（PyTorch CPU 版安装方式见 INSTALL.md）")
    return not missing


def usage():
    print("\n环境就绪，常用命令:")
    for line in ("python main.py gen --data data",
                 "python main.py train-teacher --data data --out runs",
                 "python main.py train-student --data data --out runs",
                 "python main.py eval --data data --out runs",
                 "python main.py explain --out runs --image data/ds_c/test/<样本>.pgm",
                 "pytest -m 'not slow'"):
        print(f"  {line}")


def main() -> int:
    if not python_ok():
        return 1
    make_work_dirs()
    if not (pip_install() and import_check()):
        return 1
    usage()
    return 0


def build_metadata():
    """供 pip/setuptools 构建调用：平铺模块打包元数据"""
    from setuptools import setup
    here = os.path.dirname(os.path.abspath(__file__))
    modules = sorted(f[:-3] for f in os.listdir(here)
                     if f.endswith(".py") and f not in ("setup.py", "conftest.py"))
    setup(name="fusion-attack-detection", version="0.1.0",
          python_requires=">=3.9", py_modules=modules,
          install_requires=list(CORE_PACKAGES))


if __name__ == "__main__":
    if len(sys.argv) > 1:
        build_metadata()
    else:
        sys.exit(main())
