#!/usr/bin/env python3
"""
融合攻击检测系统入口
配置日志后把命令行参数交给 cli
"""
import logging
import os
import sys
import time
from typing import List, Optional

from config import LOGGING_CONFIG


def setup_logging(level: Optional[str] = None):
    """文件 + 标准输出双通道日志；level 缺省取 LOGGING_CONFIG"""
    log_file = LOGGING_CONFIG['file']
    os.makedirs(os.path.dirname(log_file) or '.', exist_ok=True)
    name = (level or LOGGING_CONFIG['level']).upper()

    root = logging.getLogger()
    root.setLevel(getattr(logging, name, logging.INFO))
    formatter = logging.Formatter(LOGGING_CONFIG['format'])
    for handler in (logging.FileHandler(log_file, encoding='utf-8'), logging.StreamHandler(sys.stdout)):
        handler.setFormatter(formatter)
        root.addHandler(handler)

    logging.getLogger(__name__).info(f"融合攻击检测系统启动 pid={os.getpid()} "
                                     f"{time.strftime('%Y-%m-%d %H:%M:%S')} 日志级别 {name}")


def main(argv: Optional[List[str]] = None) -> int:
    setup_logging()
    from cli import main as cli_main
    try:
        return cli_main(argv)
    except KeyboardInterrupt:
        logging.getLogger(__name__).warning("用户中断")
        return 1


if __name__ == "__main__":
    sys.exit(main())
