"""
教师网络模块
残差卷积网络，输出分类 logits 与全局池化嵌入，蒸馏阶段冻结使用
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import torch

from errors import ConfigError, DimensionError
from tensor_nn import RngState, conv2d, gelu, init_linear, module_mode, normal

logger = logging.getLogger(__name__)


@dataclass
class TeacherConfig:
    """教师网络结构参数，embed_dim 必须等于最后一级通道数"""

    channels: List[int] = field(default_factory=lambda: [16, 32, 64])
    blocks: List[int] = field(default_factory=lambda: [1, 1, 1])
    embed_dim: int = 64
    num_classes: int = 2
    image_size: int = 32
    in_channels: int = 1

    def validate(self) -> "TeacherConfig":
        self.channels = [int(c) for c in self.channels]
        self.blocks = [int(b) for b in self.blocks]
        if len(self.channels) != len(self.blocks) or len(self.channels) < 2:
            raise ConfigError(f"channels 与 blocks 长度必须相同且 >= 2: {self.channels}, {self.blocks}")
        if any(c < 1 for c in self.channels) or any(b < 0 for b in self.blocks):
            raise ConfigError(f"通道数必须 >= 1, 块数必须 >= 0: {self.channels}, {self.blocks}")
        if self.embed_dim != self.channels[-1]:
            raise ConfigError(f"embed_dim {self.embed_dim} 必须等于最后一级通道数 {self.channels[-1]}")
        if self.num_classes < 2 or self.image_size < 1 or self.in_channels < 1:
            raise ConfigError("num_classes >= 2, image_size 与 in_channels >= 1")
        return self


@dataclass
class TeacherOutput:
    logits: torch.Tensor
    embedding: torch.Tensor


class Conv(torch.nn.Module):
    """3×3 卷积（零填充 1），He 初始化"""

    def __init__(self, c_in: int, c_out: int, stride: int, rng: RngState):
        super().__init__()
        self.stride = stride
        self.weight = torch.nn.Parameter(normal((c_out, c_in, 3, 3), math.sqrt(2.0 / (c_in * 9)), rng))
        self.bias = torch.nn.Parameter(torch.zeros(c_out))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv2d(x, self.weight, stride=self.stride, pad=1, bias=self.bias)


class ChannelNorm(torch.nn.Module):
    """逐通道在空间位置上做层归一化，与批大小无关"""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = torch.nn.Parameter(torch.ones(channels))
        self.bias = torch.nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=(-2, -1), keepdim=True)
        var = x.var(dim=(-2, -1), keepdim=True, unbiased=False)
        normed = (x - mean) / torch.sqrt(var + self.eps)
        return normed * self.gain[:, None, None] + self.bias[:, None, None]


class ResidualBlock(torch.nn.Module):
    """conv → norm → GELU → conv，再加残差；分支末端不做归一化"""

    def __init__(self, channels: int, rng: RngState):
        super().__init__()
        self.conv1 = Conv(channels, channels, 1, rng.spawn("conv1"))
        self.norm1 = ChannelNorm(channels)
        self.conv2 = Conv(channels, channels, 1, rng.spawn("conv2"))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(gelu(self.norm1(self.conv1(x))))


class Downsample(torch.nn.Module):
    """步长 2 卷积 + GELU"""

    def __init__(self, c_in: int, c_out: int, rng: RngState):
        super().__init__()
        self.conv = Conv(c_in, c_out, 2, rng)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return gelu(self.conv(x))


class TeacherCNN(torch.nn.Module):
    """stem（卷积 + GELU）→ 各级（级间步长2下采样 + 残差块）→ 全局平均池化 → 无偏置线性头

    主干不做逐通道空间归一化（否则池化嵌入与输入无关）
    """

    def __init__(self, cfg: TeacherConfig, rng: RngState):
        super().__init__()
        self.cfg = cfg.validate()
        self.stem = Conv(cfg.in_channels, cfg.channels[0], 1, rng.spawn("stem"))
        stages = []
        for i, (width, depth) in enumerate(zip(cfg.channels, cfg.blocks)):
            stage_rng = rng.spawn(f"stage{i}")
            layers: List[torch.nn.Module] = []
            if i > 0:
                layers.append(Downsample(cfg.channels[i - 1], width, stage_rng.spawn("down")))
            layers += [ResidualBlock(width, stage_rng.spawn(f"block{j}")) for j in range(depth)]
            stages.append(torch.nn.Sequential(*layers))
        self.stages = torch.nn.ModuleList(stages)
        self.head = init_linear(cfg.embed_dim, cfg.num_classes, rng.spawn("head"), bias=False)

    def forward(self, images: torch.Tensor) -> TeacherOutput:
        cfg = self.cfg
        if images.dim() != 4 or tuple(images.shape[1:]) != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise DimensionError(f"教师输入形状 {tuple(images.shape)} 与配置 "
                                 f"{(cfg.in_channels, cfg.image_size, cfg.image_size)} 不符")
        x = gelu(self.stem(images))
        for stage in self.stages:
            x = stage(x)
        embedding = global_avg_pool(x)
        return TeacherOutput(logits=self.head(embedding), embedding=embedding)


def global_avg_pool(features: torch.Tensor) -> torch.Tensor:
    """b×c×h×w -> b×c"""
    return features.mean(dim=(-2, -1))


def build_teacher(cfg: TeacherConfig, rng: RngState) -> TeacherCNN:
    model = TeacherCNN(cfg, rng.spawn("teacher"))
    logger.info(f"教师网络已构建: 通道 {cfg.channels}, 块数 {cfg.blocks}, "
                f"参数 {sum(p.numel() for p in model.parameters())}")
    return model


def teacher_forward(model: TeacherCNN, images: torch.Tensor, training: bool,
                    rng: Optional[RngState] = None) -> TeacherOutput:
    """教师前向；网络无随机路径，rng 仅为接口对齐"""
    with module_mode(model, training):
        return model(images)


def freeze(model: torch.nn.Module) -> torch.nn.Module:
    """全部参数设为不可训练并切换到评估模式，可重复调用"""
    for param in model.parameters():
        param.requires_grad_(False)
    model.eval()
    return model


def is_frozen(model: torch.nn.Module) -> bool:
    return not any(p.requires_grad for p in model.parameters())
