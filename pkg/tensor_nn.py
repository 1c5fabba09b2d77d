"""
数值基础模块
张量前向原语、可分流的计数器随机数发生器以及有限差分梯度校验
"""
import hashlib
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from errors import ConfigError, DimensionError, EvaluationError

logger = logging.getLogger(__name__)

_UINT64_MAX = 2 ** 64


@dataclass
class RngState:
    """计数器随机数状态，(seed, counter) 相同则抽样序列逐位相同"""

    seed: int
    counter: int = 0
    _generator: Optional[np.random.Generator] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= int(self.seed) < _UINT64_MAX:
            raise ConfigError(f"随机种子必须是64位无符号整数: {self.seed}")
        if not 0 <= int(self.counter) < _UINT64_MAX:
            raise ConfigError(f"计数器必须是64位无符号整数: {self.counter}")
        self.seed = int(self.seed)
        self.counter = int(self.counter)

    @property
    def generator(self) -> np.random.Generator:
        """惰性创建的 Philox 发生器，后续抽样在其上推进"""
        if self._generator is None:
            self._generator = np.random.Generator(np.random.Philox(key=self.seed, counter=self.counter))
        return self._generator

    def spawn(self, name: str) -> "RngState":
        """按名称派生独立子流，与调用顺序无关"""
        digest = hashlib.blake2b(f"{self.seed}:{self.counter}:{name}".encode("utf-8"), digest_size=8).digest()
        return RngState(seed=int.from_bytes(digest, "little"))

    def randint(self, high: int) -> int:
        return int(self.generator.integers(0, high))


def to_tensor(array, dtype: Optional[torch.dtype] = None) -> torch.Tensor:
    """numpy 数组转为默认精度张量"""
    return torch.as_tensor(np.asarray(array), dtype=dtype or torch.get_default_dtype())


@contextmanager
def float64_mode() -> Iterator[None]:
    """临时切换默认精度为64位（梯度校验用）"""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


@contextmanager
def module_mode(module: torch.nn.Module, training: bool) -> Iterator[torch.nn.Module]:
    """临时切换 train/eval 模式，退出时恢复各子模块原模式"""
    previous = {name: m.training for name, m in module.named_modules()}
    module.train(training)
    try:
        yield module
    finally:
        for name, m in module.named_modules():
            m.training = previous[name]


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """矩阵乘法，允许相同的前导批维度，不做广播"""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"矩阵乘法形状不匹配: {tuple(a.shape)} x {tuple(b.shape)}")
    return torch.matmul(a, b)


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    """沿最后一维的 softmax，先减去行最大值"""
    shifted = x - x.max(dim=-1, keepdim=True).values.detach()
    exp = torch.exp(shifted)
    return exp / exp.sum(dim=-1, keepdim=True)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """最后一维层归一化: gain*(x-mu)/sqrt(var+eps)+bias"""
    if eps <= 0:
        raise ConfigError(f"eps 必须为正: {eps}")
    d = x.shape[-1]
    if tuple(gain.shape) != (d,) or tuple(bias.shape) != (d,):
        raise DimensionError(f"层归一化参数形状 {tuple(gain.shape)}/{tuple(bias.shape)} 与输入末维 {d} 不符")
    return F.layer_norm(x, (d,), gain, bias, eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    """精确 erf 形式的 GELU"""
    return F.gelu(x, approximate="none")


def conv2d(x: torch.Tensor, kernels: torch.Tensor, stride: int = 1, pad: int = 0,
           bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """二维互相关（零填充），输入为 c×h×w 或 b×c×h×w"""
    if stride < 1:
        raise ConfigError(f"步长必须 >= 1: {stride}")
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 4 or kernels.dim() != 4:
        raise DimensionError(f"卷积输入/卷积核维度错误: {tuple(x.shape)}, {tuple(kernels.shape)}")
    _, c_in, h, w = x.shape
    _, k_in, kh, kw = kernels.shape
    if k_in != c_in:
        raise DimensionError(f"卷积通道不匹配: 输入 {tuple(x.shape)}, 卷积核 {tuple(kernels.shape)}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise DimensionError(f"卷积核 {tuple(kernels.shape)} 大于填充后的输入 {tuple(x.shape)} (pad={pad})")
    out = F.conv2d(x, kernels, bias=bias, stride=stride, padding=pad)
    return out[0] if single else out


def dropout_mask(shape: Sequence[int], rate: float, rng: RngState,
                 dtype: Optional[torch.dtype] = None) -> torch.Tensor:
    """反向 dropout 掩码：以概率 rate 置零，其余为 1/(1-rate)"""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout 比例必须位于 [0,1): {rate}")
    shape = tuple(int(s) for s in shape)
    if rate == 0.0:
        return torch.ones(shape, dtype=dtype or torch.get_default_dtype())
    keep = rng.generator.random(size=shape) >= rate
    return to_tensor(keep.astype(np.float64) / (1.0 - rate), dtype)


def apply_dropout(x: torch.Tensor, rate: float, training: bool, rng: Optional[RngState]) -> torch.Tensor:
    """训练模式下乘以 dropout 掩码，评估模式为恒等映射"""
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("训练模式下的 dropout 需要随机数流")
    return x * dropout_mask(x.shape, rate, rng, dtype=x.dtype)


def trunc_normal(shape: Sequence[int], std: float, rng: RngState) -> torch.Tensor:
    """截断正态初始化（截断于 ±2std）"""
    gen = rng.generator
    values = gen.standard_normal(size=tuple(shape))
    outside = np.abs(values) > 2.0
    while outside.any():
        values[outside] = gen.standard_normal(size=int(outside.sum()))
        outside = np.abs(values) > 2.0
    return to_tensor(values * std)


def normal(shape: Sequence[int], std: float, rng: RngState) -> torch.Tensor:
    return to_tensor(rng.generator.standard_normal(size=tuple(shape)) * std)


@dataclass
class ParamCheck:
    """单个参数的梯度校验结果"""

    name: str
    trainable: bool
    max_rel_error: float
    analytic: torch.Tensor
    numeric: torch.Tensor


@dataclass
class GradCheckReport:
    """梯度校验报告"""

    checks: Dict[str, ParamCheck]
    tol: float

    @property
    def max_rel_error(self) -> float:
        return max((c.max_rel_error for c in self.checks.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def worst(self) -> Tuple[str, float]:
        name = max(self.checks, key=lambda k: self.checks[k].max_rel_error)
        return name, self.checks[name].max_rel_error


ParamSource = Union[Mapping[str, torch.nn.Parameter], Iterable[Tuple[str, torch.nn.Parameter]]]


def _scalar(loss: torch.Tensor) -> float:
    value = float(loss)
    if not np.isfinite(value):
        raise EvaluationError(f"损失为非有限值: {value}")
    return value


def grad_check(loss_fn: Callable[[], torch.Tensor], params: ParamSource,
               h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """对比自动微分梯度与中心差分，逐参数报告最大相对误差"""
    if h <= 0:
        raise ConfigError(f"差分步长必须为正: {h}")
    named = list(params.items()) if isinstance(params, Mapping) else list(params)
    for name, p in named:
        if p.dtype != torch.float64:
            raise ConfigError(f"梯度校验需要64位精度, 参数 {name} 为 {p.dtype}")

    trainable = [(name, p) for name, p in named if p.requires_grad]
    loss = loss_fn()
    _scalar(loss)
    grads = torch.autograd.grad(loss, [p for _, p in trainable], allow_unused=True) if trainable else []
    analytic = {name: (g.detach().clone() if g is not None else torch.zeros_like(p))
                for (name, p), g in zip(trainable, grads)}

    checks: Dict[str, ParamCheck] = {}
    with torch.no_grad():
        for name, p in named:
            if not p.requires_grad:
                zeros = torch.zeros_like(p)
                checks[name] = ParamCheck(name, False, 0.0, zeros, zeros.clone())
                continue
            flat = p.data.view(-1)
            numeric = torch.zeros(flat.numel(), dtype=torch.float64)
            for i in range(flat.numel()):
                original = float(flat[i])
                flat[i] = original + h
                plus = _scalar(loss_fn())
                flat[i] = original - h
                minus = _scalar(loss_fn())
                flat[i] = original
                numeric[i] = (plus - minus) / (2.0 * h)
            numeric = numeric.view_as(p)
            a = analytic[name]
            denom = torch.maximum(torch.maximum(a.abs(), numeric.abs()), torch.full_like(a, 1e-8))
            rel = ((a - numeric).abs() / denom).max().item() if a.numel() else 0.0
            checks[name] = ParamCheck(name, True, rel, a, numeric)

    report = GradCheckReport(checks, tol)
    if not report.passed:
        worst, err = report.worst()
        logger.warning(f"梯度校验未通过: {worst} 最大相对误差 {err:.3e}")
    return report


class LayerNorm(torch.nn.Module):
    """带可学习增益与偏置的末维层归一化"""

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = torch.nn.Parameter(torch.ones(dim))
        self.bias = torch.nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


def init_linear(d_in: int, d_out: int, rng: Optional[RngState], bias: bool = True,
                std: float = 0.02) -> torch.nn.Linear:
    """线性层：权重截断正态（rng 为 None 时全零），偏置为零"""
    layer = torch.nn.Linear(d_in, d_out, bias=bias)
    with torch.no_grad():
        if rng is None:
            layer.weight.zero_()
        else:
            layer.weight.copy_(trunc_normal((d_out, d_in), std, rng))
        if bias:
            layer.bias.zero_()
    return layer
