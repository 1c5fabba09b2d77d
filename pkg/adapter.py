"""
适配器模块
把教师嵌入映射到学生嵌入空间：先线性投影，再叠加带归一化、激活与 dropout 的残差分支
"""
import logging
from dataclasses import dataclass
from typing import List, Optional

import torch

from errors import ConfigError, DimensionError
from tensor_nn import LayerNorm, RngState, apply_dropout, gelu, init_linear, module_mode

logger = logging.getLogger(__name__)


@dataclass
class AdapterConfig:
    """适配器参数，hidden 缺省为 2·d_out"""

    d_in: int = 64
    d_out: int = 64
    hidden: Optional[int] = None
    dropout_rate: float = 0.1

    def validate(self) -> "AdapterConfig":
        if self.hidden is None:
            self.hidden = 2 * self.d_out
        if min(self.d_in, self.d_out, self.hidden) < 1:
            raise ConfigError(f"适配器宽度必须 >= 1: d_in={self.d_in}, d_out={self.d_out}, hidden={self.hidden}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"适配器 dropout 必须位于 [0,1): {self.dropout_rate}")
        return self


class Adapter(torch.nn.Module):
    """out = p + Linear3(drop(GELU(LN(Linear2(p))))), p = Linear1(x)；Linear3 零初始化"""

    def __init__(self, cfg: AdapterConfig, rng: RngState):
        super().__init__()
        self.cfg = cfg.validate()
        self.linear1 = init_linear(cfg.d_in, cfg.d_out, rng.spawn("linear1"))
        self.linear2 = init_linear(cfg.d_out, cfg.hidden, rng.spawn("linear2"))
        self.norm = LayerNorm(cfg.hidden)
        self.linear3 = init_linear(cfg.hidden, cfg.d_out, None)

    def forward(self, teacher_emb: torch.Tensor, rng: Optional[RngState] = None) -> torch.Tensor:
        if teacher_emb.shape[-1] != self.cfg.d_in:
            raise DimensionError(f"教师嵌入宽度 {teacher_emb.shape[-1]} 与适配器 d_in {self.cfg.d_in} 不符")
        p = self.linear1(teacher_emb)
        h = apply_dropout(gelu(self.norm(self.linear2(p))), self.cfg.dropout_rate, self.training, rng)
        return p + self.linear3(h)


def build_adapter(cfg: AdapterConfig, rng: RngState) -> Adapter:
    return Adapter(cfg, rng.spawn("adapter"))


def adapter_forward(adapter: Adapter, teacher_emb: torch.Tensor, training: bool,
                    rng: Optional[RngState] = None) -> torch.Tensor:
    """按指定模式执行适配器前向"""
    with module_mode(adapter, training):
        return adapter(teacher_emb, rng)


def adapter_trainables(adapter: Adapter) -> List[torch.nn.Parameter]:
    """适配器全部参数，确保可训练"""
    params = list(adapter.parameters())
    for param in params:
        param.requires_grad_(True)
    return params


def adapter_param_count(cfg: AdapterConfig) -> int:
    cfg.validate()
    d_in, d_out, hidden = cfg.d_in, cfg.d_out, cfg.hidden
    return d_in * d_out + d_out + (d_out * hidden + hidden) + (hidden * d_out + d_out) + 2 * hidden
