"""
局部代理解释模块
网格分块扰动 + 加权岭回归，给出各区域对融合类判定的贡献并渲染叠加图
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch

from errors import ConfigError, ContractError, DimensionError, EvaluationError
from tensor_nn import RngState, softmax_rows

ATTRIBUTION_COLUMNS = ["region_row", "region_col", "weight"]


@dataclass
class LimeConfig:
    """扰动解释参数"""

    grid: int = 8
    num_samples: int = 1000
    keep_prob: float = 0.5
    kernel_width: float = 0.25
    ridge_penalty: float = 1.0
    baseline: float = 0.5
    seed: int = 42
    top_k: int = 8
    batch_size: int = 256

    def validate(self) -> "LimeConfig":
        if self.grid < 2:
            raise ConfigError(f"网格边长必须 >= 2: {self.grid}")
        if self.num_samples < self.grid ** 2:
            raise ConfigError(f"扰动样本数 {self.num_samples} 不能少于区域数 {self.grid ** 2}")
        if not 0.0 < self.keep_prob < 1.0:
            raise ConfigError(f"keep_prob 必须位于 (0,1): {self.keep_prob}")
        if self.kernel_width <= 0 or self.ridge_penalty < 0:
            raise ConfigError(f"kernel_width 必须为正且 ridge_penalty 不能为负: "
                              f"{self.kernel_width}, {self.ridge_penalty}")
        if not 0.0 <= self.baseline <= 1.0:
            raise ConfigError(f"baseline 必须位于 [0,1]: {self.baseline}")
        if self.top_k < 1 or self.batch_size < 1:
            raise ConfigError("top_k 与 batch_size 必须 >= 1")
        return self


@dataclass
class Attribution:
    """g×g 区域权重、截距与加权拟合优度"""

    weights: np.ndarray
    intercept: float
    local_fidelity_r2: float

    @property
    def grid(self) -> int:
        return self.weights.shape[0]

    def top_regions(self, k: int) -> List[Tuple[int, int, float]]:
        """权重为正的前 k 个区域 (行, 列, 权重)，按权重降序"""
        flat = self.weights.ravel()
        order = np.argsort(-flat, kind="stable")
        g = self.grid
        return [(int(i // g), int(i % g), float(flat[i])) for i in order[:k] if flat[i] > 0]


def segment_grid(image: np.ndarray, g: int) -> np.ndarray:
    """按近等宽行列带切成 g×g 区域，返回每个像素的区域编号"""
    plane = image[0] if image.ndim == 3 else image
    height, width = plane.shape
    if g < 1 or g > min(height, width):
        raise DimensionError(f"网格 {g} 与图像尺寸 {plane.shape} 不符")
    rows = np.concatenate([np.full(len(band), i) for i, band in enumerate(np.array_split(np.arange(height), g))])
    cols = np.concatenate([np.full(len(band), j) for j, band in enumerate(np.array_split(np.arange(width), g))])
    return rows[:, None] * g + cols[None, :]


def perturb_batch(image: np.ndarray, region_map: np.ndarray, cfg: LimeConfig,
                  rng: RngState) -> Tuple[np.ndarray, np.ndarray]:
    """伯努利掩码矩阵 Z 与对应扰动图像；第 0 行为全 1 掩码（原图）"""
    n_regions = int(region_map.max()) + 1
    z = (rng.generator.random(size=(cfg.num_samples, n_regions)) < cfg.keep_prob).astype(np.float64)
    z[0] = 1.0
    pixel_keep = z[:, region_map]
    images = image[None, ...] * pixel_keep[:, None] + cfg.baseline * (1.0 - pixel_keep[:, None])
    return z, images.astype(np.float32)


def kernel_weights(z: np.ndarray, kernel_width: float) -> np.ndarray:
    """π = exp(-d²/w²)，d 为掩码与全 1 掩码的余弦距离（全 0 掩码 d=1）"""
    norms = np.linalg.norm(z, axis=1)
    cosine = np.divide(z.sum(axis=1), norms * np.sqrt(z.shape[1]), out=np.zeros(len(z)), where=norms > 0)
    distance = 1.0 - cosine
    return np.exp(-distance ** 2 / kernel_width ** 2)


def fit_local_surrogate(z: np.ndarray, scores: np.ndarray, cfg: LimeConfig,
                        sample_weights: Optional[np.ndarray] = None) -> Attribution:
    """闭式加权岭回归 (ZᵀΠZ + λI)w = ZᵀΠf，截距不受惩罚，样本权重归一到均值 1"""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise EvaluationError("模型分数含非有限值")
    if z.shape[0] != scores.shape[0]:
        raise DimensionError(f"掩码行数 {z.shape[0]} 与分数个数 {scores.shape[0]} 不符")
    pi = kernel_weights(z, cfg.kernel_width) if sample_weights is None else np.asarray(sample_weights, float)
    pi = pi / pi.mean()

    n, m = z.shape
    design = np.hstack([z, np.ones((n, 1))])
    weighted = design * pi[:, None]
    penalty = cfg.ridge_penalty * np.eye(m + 1)
    penalty[m, m] = 0.0
    solution = np.linalg.solve(design.T @ weighted + penalty, weighted.T @ scores)
    coef, intercept = solution[:m], float(solution[m])

    fitted = design @ solution
    mean = np.sum(pi * scores) / np.sum(pi)
    ss_tot = np.sum(pi * (scores - mean) ** 2)
    ss_res = np.sum(pi * (scores - fitted) ** 2)
    r2 = 1.0 if ss_tot <= 1e-18 * max(1.0, n) else float(1.0 - ss_res / ss_tot)
    g = int(round(np.sqrt(m)))
    weights = coef.reshape(g, g) if g * g == m else coef.reshape(1, m)
    return Attribution(weights=weights, intercept=intercept, local_fidelity_r2=min(r2, 1.0))


Scorer = Union[torch.nn.Module, Callable[[torch.Tensor], object]]


def morph_probability(model: Scorer, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """模型输出（logits 或含 .logits 的对象）转为融合类 softmax 概率"""
    outputs = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            batch = torch.from_numpy(np.ascontiguousarray(images[start:start + batch_size]))
            out = model(batch.to(torch.get_default_dtype()))
            logits = getattr(out, "logits", out)
            outputs.append(softmax_rows(logits)[:, 1].double().numpy())
    return np.concatenate(outputs)


def render_overlay(image: np.ndarray, region_map: np.ndarray, attribution: Attribution, top_k: int) -> np.ndarray:
    """保留权重最高的 k 个正贡献区域，其余区域调暗，选中区域边界提亮"""
    plane = (image[0] if image.ndim == 3 else image).astype(np.float64)
    g = attribution.grid
    selected = np.zeros(region_map.max() + 1, dtype=bool)
    for row, col, _ in attribution.top_regions(top_k):
        selected[row * g + col] = True
    inside = selected[region_map]
    padded = np.pad(region_map, 1, mode="constant", constant_values=-1)
    center = padded[1:-1, 1:-1]
    edge = ((padded[:-2, 1:-1] != center) | (padded[2:, 1:-1] != center)
            | (padded[1:-1, :-2] != center) | (padded[1:-1, 2:] != center))
    out = np.where(inside, plane, 0.4 * plane)
    out = np.where(inside & edge, 1.0, out)
    return np.clip(out, 0.0, 1.0).astype(np.float32)[None]


class LimeExplainer:
    """分块扰动解释器"""

    def __init__(self, cfg: Optional[LimeConfig] = None):
        self.cfg = (cfg or LimeConfig()).validate()
        self.logger = logging.getLogger(__name__)

    def explain(self, model: Scorer, image: np.ndarray,
                rng: Optional[RngState] = None) -> Tuple[Attribution, np.ndarray]:
        """分块 → 扰动 → 打分 → 拟合，返回归因与叠加图"""
        cfg = self.cfg
        if getattr(model, "training", False):
            raise ContractError("解释前模型必须处于评估模式")
        rng = rng or RngState(cfg.seed).spawn("lime")
        region_map = segment_grid(image, cfg.grid)
        z, images = perturb_batch(image, region_map, cfg, rng)
        scores = morph_probability(model, images, cfg.batch_size)
        attribution = fit_local_surrogate(z, scores, cfg)
        self.logger.info(f"解释完成: 原图融合概率 {scores[0]:.4f}, 局部拟合 R² {attribution.local_fidelity_r2:.4f}")
        return attribution, render_overlay(image, region_map, attribution, cfg.top_k)


def explain(model: Scorer, image: np.ndarray, cfg: LimeConfig,
            rng: Optional[RngState] = None) -> Tuple[Attribution, np.ndarray]:
    return LimeExplainer(cfg).explain(model, image, rng)


def save_attribution_csv(attribution: Attribution, path: str) -> str:
    g = attribution.grid
    rows = [[i, j, float(attribution.weights[i, j])] for i in range(g) for j in range(attribution.weights.shape[1])]
    pd.DataFrame(rows, columns=ATTRIBUTION_COLUMNS).to_csv(path, index=False, lineterminator="\n")
    return path


def load_attribution_csv(path: str) -> np.ndarray:
    frame = pd.read_csv(path, float_precision="round_trip")
    g = int(frame["region_row"].max()) + 1
    weights = np.zeros((g, int(frame["region_col"].max()) + 1))
    weights[frame["region_row"].to_numpy(), frame["region_col"].to_numpy()] = frame["weight"].to_numpy()
    return weights
