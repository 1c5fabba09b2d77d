"""根目录 conftest，使平铺模块可被测试导入"""
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
