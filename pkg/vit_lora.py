"""
学生网络模块
缩小版 Vision Transformer，在注意力 QKV 与全连接层上附加低秩适配（LoRA）
"""
import copy
import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import torch
import torch.nn.functional as F

from errors import ConfigError, ContractError, DimensionError
from tensor_nn import (LayerNorm, RngState, apply_dropout, gelu, init_linear, matmul, module_mode, normal,
                       softmax_rows, trunc_normal)

logger = logging.getLogger(__name__)

TARGET_QKV = "attention-qkv"
TARGET_FC = "fully-connected"


@dataclass
class ViTConfig:
    """学生网络结构参数"""

    image_size: int = 32
    patch_size: int = 8
    channels: int = 1
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    num_classes: int = 2

    def validate(self) -> "ViTConfig":
        if self.image_size < 1 or self.patch_size < 1 or self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} 必须能被 patch_size {self.patch_size} 整除")
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} 必须能被 heads {self.heads} 整除")
        if self.depth < 1 or self.channels < 1:
            raise ConfigError("depth 与 channels 必须 >= 1")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes 必须 >= 2: {self.num_classes}")
        if self.mlp_hidden < 1:
            raise ConfigError(f"mlp_ratio 过小: {self.mlp_ratio}")
        return self

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.dim * self.mlp_ratio))


@dataclass
class LoRAConfig:
    """低秩适配参数，默认 r=8, alpha=16, dropout=0.1"""

    rank: int = 8
    alpha: float = 16.0
    dropout_rate: float = 0.1
    targets: Tuple[str, ...] = (TARGET_QKV, TARGET_FC)

    def validate(self) -> "LoRAConfig":
        if self.rank < 1:
            raise ConfigError(f"LoRA 秩必须 >= 1: {self.rank}")
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise ConfigError(f"LoRA alpha 必须为正的有限值: {self.alpha}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"LoRA dropout 必须位于 [0,1): {self.dropout_rate}")
        unknown = set(self.targets) - {TARGET_QKV, TARGET_FC}
        if unknown:
            raise ConfigError(f"未知的 LoRA 目标层: {sorted(unknown)}")
        self.targets = tuple(self.targets)
        return self

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


@dataclass
class StudentOutput:
    """学生输出：分类 logits 与类别 token 嵌入"""

    logits: torch.Tensor
    embedding: torch.Tensor


class LoRAFactors(torch.nn.Module):
    """低秩因子 A[r×d_in] 与 B[d_out×r]"""

    def __init__(self, d_in: int, d_out: int, rank: int, rng: RngState):
        super().__init__()
        self.A = torch.nn.Parameter(normal((rank, d_in), math.sqrt(1.0 / rank), rng))
        self.B = torch.nn.Parameter(torch.zeros(d_out, rank))


class LoRALinear(torch.nn.Module):
    """冻结的基础线性层 + 可训练低秩旁路"""

    def __init__(self, weight: torch.Tensor, bias: torch.Tensor, rank: int, alpha: float,
                 dropout_rate: float, rng: RngState):
        super().__init__()
        d_out, d_in = weight.shape
        if rank > min(d_in, d_out):
            raise ConfigError(f"LoRA 秩 {rank} 超过层尺寸 min({d_in},{d_out})")
        self.weight = torch.nn.Parameter(weight.detach().clone(), requires_grad=False)
        self.bias = torch.nn.Parameter(bias.detach().clone(), requires_grad=False)
        self.lora = LoRAFactors(d_in, d_out, rank, rng)
        self.scale = alpha / rank
        self.dropout_rate = dropout_rate

    @classmethod
    def from_linear(cls, linear: torch.nn.Linear, cfg: LoRAConfig, rng: RngState) -> "LoRALinear":
        bias = linear.bias if linear.bias is not None else torch.zeros(linear.out_features)
        return cls(linear.weight, bias, cfg.rank, cfg.alpha, cfg.dropout_rate, rng)

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: torch.Tensor, rng: Optional[RngState] = None) -> torch.Tensor:
        return lora_forward(self, x, self.training, rng)


def lora_forward(layer: LoRALinear, x: torch.Tensor, training: bool, rng: Optional[RngState]) -> torch.Tensor:
    """y = W·x + b + scale·B·(A·drop(x))，dropout 只作用于低秩旁路"""
    if x.shape[-1] != layer.in_features:
        raise DimensionError(f"LoRA 输入宽度 {x.shape[-1]} 与 d_in {layer.in_features} 不符")
    base = F.linear(x, layer.weight, layer.bias)
    dropped = apply_dropout(x, layer.dropout_rate, training, rng)
    low_rank = F.linear(F.linear(dropped, layer.lora.A), layer.lora.B)
    return base + layer.scale * low_rank


def lora_merge(layer: Union[LoRALinear, torch.nn.Linear]) -> torch.nn.Linear:
    """合并为普通线性层，权重 W + scale·B·A"""
    if isinstance(layer, torch.nn.Linear):
        return copy.deepcopy(layer)
    if layer.training:
        raise ContractError("LoRA 合并需要评估模式")
    merged = torch.nn.Linear(layer.in_features, layer.out_features, dtype=layer.weight.dtype)
    with torch.no_grad():
        merged.weight.copy_(layer.weight + layer.scale * matmul(layer.lora.B, layer.lora.A))
        merged.bias.copy_(layer.bias)
    merged.weight.requires_grad_(False)
    merged.bias.requires_grad_(False)
    return merged


def _project(layer: torch.nn.Module, x: torch.Tensor, rng: Optional[RngState]) -> torch.Tensor:
    if isinstance(layer, LoRALinear):
        return layer(x, rng)
    return layer(x)


def extract_patches(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """b×c×H×W -> b×n×(c·p·p)，块按行优先排列"""
    b, c, h, w = images.shape
    p = patch_size
    patches = images.reshape(b, c, h // p, p, w // p, p)
    return patches.permute(0, 2, 4, 1, 3, 5).reshape(b, (h // p) * (w // p), c * p * p)


class PatchEmbedding(torch.nn.Module):
    """切块、线性投影、前置类别 token 并加位置嵌入"""

    def __init__(self, cfg: ViTConfig, rng: RngState):
        super().__init__()
        self.cfg = cfg
        self.proj = init_linear(cfg.patch_dim, cfg.dim, rng.spawn("proj"))
        self.cls_token = torch.nn.Parameter(trunc_normal((1, 1, cfg.dim), 0.02, rng.spawn("cls")))
        self.pos_embed = torch.nn.Parameter(trunc_normal((1, cfg.num_tokens, cfg.dim), 0.02, rng.spawn("pos")))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if images.dim() != 4 or tuple(images.shape[1:]) != (cfg.channels, cfg.image_size, cfg.image_size):
            raise DimensionError(f"输入图像形状 {tuple(images.shape)} 与配置 "
                                 f"{(cfg.channels, cfg.image_size, cfg.image_size)} 不符")
        tokens = self.proj(extract_patches(images, cfg.patch_size))
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        return torch.cat([cls, tokens], dim=1) + self.pos_embed


def patchify(embedding: PatchEmbedding, image: torch.Tensor) -> torch.Tensor:
    """单张 c×H×W 图像 -> n_tokens×D_s（索引0为类别 token）"""
    if image.dim() != 3:
        raise DimensionError(f"patchify 需要 c×H×W 输入: {tuple(image.shape)}")
    return embedding(image.unsqueeze(0))[0]


class Attention(torch.nn.Module):
    """前置归一化多头自注意力块（含残差）"""

    def __init__(self, cfg: ViTConfig, rng: RngState):
        super().__init__()
        self.heads = cfg.heads
        self.head_dim = cfg.dim // cfg.heads
        self.norm = LayerNorm(cfg.dim)
        self.qkv = init_linear(cfg.dim, 3 * cfg.dim, rng.spawn("qkv"))
        self.proj = init_linear(cfg.dim, cfg.dim, rng.spawn("proj"))
        self.last_attention: Optional[torch.Tensor] = None

    def forward(self, x: torch.Tensor, rng: Optional[RngState] = None) -> torch.Tensor:
        b, n, d = x.shape
        qkv = _project(self.qkv, self.norm(x), rng)
        qkv = qkv.reshape(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = matmul(q, k.transpose(-1, -2)) * (1.0 / math.sqrt(self.head_dim))
        attention = softmax_rows(scores)
        self.last_attention = attention.detach()
        out = matmul(attention, v).transpose(1, 2).reshape(b, n, d)
        return x + _project(self.proj, out, rng)


def mhsa_forward(tokens: torch.Tensor, block: Attention, training: bool,
                 rng: Optional[RngState] = None) -> torch.Tensor:
    """注意力块前向，接受 n×D 或 b×n×D"""
    single = tokens.dim() == 2
    with module_mode(block, training):
        out = block(tokens.unsqueeze(0) if single else tokens, rng)
    return out[0] if single else out


class MLP(torch.nn.Module):
    """前置归一化两层全连接块（含残差）"""

    def __init__(self, cfg: ViTConfig, rng: RngState):
        super().__init__()
        self.norm = LayerNorm(cfg.dim)
        self.fc1 = init_linear(cfg.dim, cfg.mlp_hidden, rng.spawn("fc1"))
        self.fc2 = init_linear(cfg.mlp_hidden, cfg.dim, rng.spawn("fc2"))

    def forward(self, x: torch.Tensor, rng: Optional[RngState] = None) -> torch.Tensor:
        hidden = gelu(_project(self.fc1, self.norm(x), rng))
        return x + _project(self.fc2, hidden, rng)


class Block(torch.nn.Module):
    def __init__(self, cfg: ViTConfig, rng: RngState):
        super().__init__()
        self.attn = Attention(cfg, rng.spawn("attn"))
        self.mlp = MLP(cfg, rng.spawn("mlp"))

    def forward(self, x: torch.Tensor, rng: Optional[RngState] = None) -> torch.Tensor:
        return self.mlp(self.attn(x, rng), rng)


class ViTStudent(torch.nn.Module):
    """学生 ViT：切块 → depth 个 Transformer 块 → 末层归一化 → 类别 token → 分类头"""

    def __init__(self, cfg: ViTConfig, rng: RngState):
        super().__init__()
        self.cfg = cfg.validate()
        self.lora_cfg: Optional[LoRAConfig] = None
        self.patch_embed = PatchEmbedding(cfg, rng.spawn("patch_embed"))
        self.blocks = torch.nn.ModuleList([Block(cfg, rng.spawn(f"block{i}")) for i in range(cfg.depth)])
        self.norm = LayerNorm(cfg.dim)
        self.head = init_linear(cfg.dim, cfg.num_classes, rng.spawn("head"))

    def forward(self, images: torch.Tensor, rng: Optional[RngState] = None) -> StudentOutput:
        x = self.patch_embed(images)
        for block in self.blocks:
            x = block(x, rng)
        embedding = self.norm(x)[:, 0]
        return StudentOutput(logits=self.head(embedding), embedding=embedding)

    def lora_layers(self):
        return [(name, module) for name, module in self.named_modules() if isinstance(module, LoRALinear)]


def vit_forward(model: ViTStudent, images: torch.Tensor, training: bool,
                rng: Optional[RngState] = None) -> StudentOutput:
    """按指定模式执行学生前向"""
    with module_mode(model, training):
        return model(images, rng)


def attach_lora(model: ViTStudent, cfg: LoRAConfig, rng: RngState) -> ViTStudent:
    """替换目标线性层为 LoRALinear，并冻结除低秩因子与分类头外的全部参数"""
    cfg.validate()
    for i, block in enumerate(model.blocks):
        layer_rng = rng.spawn(f"block{i}")
        if TARGET_QKV in cfg.targets:
            block.attn.qkv = LoRALinear.from_linear(block.attn.qkv, cfg, layer_rng.spawn("qkv"))
        if TARGET_FC in cfg.targets:
            block.attn.proj = LoRALinear.from_linear(block.attn.proj, cfg, layer_rng.spawn("proj"))
            block.mlp.fc1 = LoRALinear.from_linear(block.mlp.fc1, cfg, layer_rng.spawn("fc1"))
            block.mlp.fc2 = LoRALinear.from_linear(block.mlp.fc2, cfg, layer_rng.spawn("fc2"))
    for name, param in model.named_parameters():
        param.requires_grad_(".lora." in f".{name}" or name.startswith("head."))
    model.lora_cfg = cfg
    trainable, total = trainable_param_count(model)
    logger.info(f"LoRA 已挂载: r={cfg.rank}, alpha={cfg.alpha}, 可训练参数 {trainable}/{total}")
    return model


def build_student(cfg: ViTConfig, lora_cfg: Optional[LoRAConfig], rng: RngState) -> ViTStudent:
    """构建学生网络，lora_cfg 为 None 时返回全参数可训练的普通 ViT"""
    model = ViTStudent(cfg, rng.spawn("vit"))
    if lora_cfg is not None:
        attach_lora(model, lora_cfg, rng.spawn("lora"))
    return model


def merge_lora_model(model: ViTStudent) -> ViTStudent:
    """把全部 LoRALinear 合并为普通线性层，返回部署用副本"""
    merged = copy.deepcopy(model)
    merged.eval()
    for block in merged.blocks:
        block.attn.qkv = lora_merge(block.attn.qkv)
        block.attn.proj = lora_merge(block.attn.proj)
        block.mlp.fc1 = lora_merge(block.mlp.fc1)
        block.mlp.fc2 = lora_merge(block.mlp.fc2)
    merged.lora_cfg = None
    return merged


def trainable_param_count(model: torch.nn.Module) -> Tuple[int, int]:
    """(可训练标量数, 全部标量数)"""
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    total = sum(p.numel() for p in model.parameters())
    return trainable, total
