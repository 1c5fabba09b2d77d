"""
模型检查点管理模块
DMAD-CKPT v1 格式：首行文件头，随后逐参数记录（名称、形状、小端32位浮点原始字节）
"""
import hashlib
import logging
import os
from collections import OrderedDict
from typing import Dict, Iterable, Optional

import numpy as np
import torch

from errors import CheckpointError

HEADER = b"DMAD-CKPT v1\n"


class CheckpointStore:
    """检查点读写与哈希"""

    def __init__(self):
        self.logger = logging.getLogger(__name__)

    def encode(self, records: Dict[str, np.ndarray]) -> bytes:
        """把参数记录编码为字节串"""
        chunks = [HEADER]
        for name, array in records.items():
            if not name or any(ch.isspace() for ch in name):
                raise CheckpointError(f"参数名不能为空或包含空白字符: {name!r}")
            array = np.ascontiguousarray(array, dtype="<f4")
            shape = ",".join(str(d) for d in array.shape) if array.ndim else "1"
            chunks.append(f"{name} {shape}\n".encode("utf-8"))
            chunks.append(array.tobytes(order="C"))
        return b"".join(chunks)

    def decode(self, data: bytes) -> "OrderedDict[str, np.ndarray]":
        """解析字节串，格式错误时报告字节偏移"""
        if not data.startswith(HEADER):
            raise CheckpointError("文件头不是 DMAD-CKPT v1", 0)
        records: "OrderedDict[str, np.ndarray]" = OrderedDict()
        offset = len(HEADER)
        while offset < len(data):
            line_end = data.find(b"\n", offset)
            if line_end < 0:
                raise CheckpointError("记录头缺少换行符", offset)
            try:
                name, shape_text = data[offset:line_end].decode("utf-8").split(" ")
                shape = tuple(int(d) for d in shape_text.split(","))
            except (UnicodeDecodeError, ValueError):
                raise CheckpointError("记录头格式错误", offset)
            if any(d < 1 for d in shape):
                raise CheckpointError(f"参数 {name} 形状非法: {shape}", offset)
            if name in records:
                raise CheckpointError(f"参数 {name} 重复出现", offset)
            start = line_end + 1
            size = int(np.prod(shape)) * 4
            if start + size > len(data):
                raise CheckpointError(f"参数 {name} 数据被截断", start)
            records[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=start).reshape(shape).copy()
            offset = start + size
        return records

    def save(self, path: str, records: Dict[str, np.ndarray]) -> str:
        """写入检查点文件"""
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        payload = self.encode(records)
        with open(path, "wb") as f:
            f.write(payload)
        self.logger.info(f"检查点已保存: {path}, 共 {len(records)} 个参数")
        return path

    def load(self, path: str) -> "OrderedDict[str, np.ndarray]":
        """读取检查点文件"""
        with open(path, "rb") as f:
            records = self.decode(f.read())
        self.logger.info(f"检查点已读取: {path}, 共 {len(records)} 个参数")
        return records

    def module_records(self, module: torch.nn.Module, prefix: str) -> "OrderedDict[str, np.ndarray]":
        """导出模块全部参数，名称加前缀"""
        records: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, tensor in module.state_dict().items():
            records[f"{prefix}.{name}"] = tensor.detach().cpu().numpy().astype("<f4")
        return records

    def load_module(self, module: torch.nn.Module, records: Dict[str, np.ndarray], prefix: str) -> torch.nn.Module:
        """按前缀把记录载入模块，名称与形状必须完全对应"""
        state = module.state_dict()
        wanted = {f"{prefix}.{name}" for name in state}
        present = {name for name in records if name.startswith(prefix + ".")}
        missing = sorted(wanted - present)
        unexpected = sorted(present - wanted)
        if missing or unexpected:
            raise CheckpointError(f"检查点与模型结构不符, 缺少 {missing[:5]}, 多余 {unexpected[:5]}")
        with torch.no_grad():
            for name, tensor in state.items():
                array = records[f"{prefix}.{name}"]
                if tuple(array.shape) != tuple(tensor.shape):
                    raise CheckpointError(f"参数 {prefix}.{name} 形状 {array.shape} 与模型 {tuple(tensor.shape)} 不符")
                tensor.copy_(torch.from_numpy(array).to(tensor.dtype))
        return module

    def prefixes(self, records: Iterable[str]) -> set:
        return {name.split(".", 1)[0] for name in records}

    def state_hash(self, module: torch.nn.Module, names: Optional[Iterable[str]] = None) -> str:
        """参数名称、形状与原始字节的 sha256，用于冻结参数审计"""
        selected = set(names) if names is not None else None
        digest = hashlib.sha256()
        for name, tensor in module.state_dict().items():
            if selected is not None and name not in selected:
                continue
            array = tensor.detach().cpu().contiguous().numpy()
            digest.update(name.encode("utf-8"))
            digest.update(str(tuple(array.shape)).encode("utf-8"))
            digest.update(array.tobytes())
        return digest.hexdigest()


# 全局检查点管理实例
checkpoint_store = CheckpointStore()
