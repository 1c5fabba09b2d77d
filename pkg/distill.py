"""
知识蒸馏训练模块
交叉熵、温度软化、KL 散度与组合损失，余弦退火学习率，教师微调与学生蒸馏两阶段训练（早停）
"""
import copy
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from adapter import Adapter, adapter_forward, adapter_trainables
from checkpoint import checkpoint_store
from data_synth import LabeledSample, augment_epoch, stack_images, stack_labels
from errors import (ConfigError, ContractError, DataError, DimensionError, EvaluationError, ProtocolError,
                    ScheduleError, TrainingAnomaly)
from teacher_cnn import is_frozen
from tensor_nn import RngState, softmax_rows

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["epoch", "train_loss", "val_loss", "kl_component", "ce_component", "lr", "seconds"]
KL_FLOOR = 1e-12
KL_TOLERANCE = 1e-6


@dataclass
class DistillConfig:
    """训练超参数"""

    lam: float = 0.5
    temperature: float = 3.0
    teacher_lr: float = 1e-4
    student_lr: float = 5e-4
    min_lr: float = 1e-5
    epochs: int = 30
    batch_size: int = 64
    patience: int = 5
    seed: int = 42
    augment_events: float = 0.5
    bonafide_weight: float = 2.0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def validate(self) -> "DistillConfig":
        if not (math.isfinite(self.temperature) and self.temperature > 0):
            raise ConfigError(f"温度必须为正: {self.temperature}")
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ConfigError(f"lambda 必须 >= 0: {self.lam}")
        if self.min_lr < 0 or self.min_lr > self.teacher_lr or self.min_lr > self.student_lr:
            raise ConfigError(f"min_lr {self.min_lr} 必须介于 0 与各初始学习率之间")
        if self.patience < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("patience、epochs、batch_size 必须 >= 1")
        if self.augment_events < 0 or self.bonafide_weight <= 0:
            raise ConfigError("augment_events 不能为负，bonafide_weight 必须为正")
        self.betas = (float(self.betas[0]), float(self.betas[1]))
        return self


@dataclass
class SoftDistribution:
    """温度软化后的概率分布"""

    probs: torch.Tensor
    temperature: float


@dataclass
class LossComponents:
    kl: torch.Tensor
    ce: torch.Tensor


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    kl_component: float
    ce_component: float
    lr: float
    seconds: float


@dataclass
class TrainReport:
    """逐轮训练记录、停止原因与最优轮次"""

    records: List[EpochRecord] = field(default_factory=list)
    stop_reason: str = "completed"
    best_epoch: int = 0
    best_val_loss: float = float("inf")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.__dict__ for r in self.records], columns=REPORT_COLUMNS)

    def losses(self) -> List[Tuple[float, float]]:
        return [(r.train_loss, r.val_loss) for r in self.records]

    @property
    def first_epoch_pathology(self) -> bool:
        """早停且最优轮次为第 1 轮"""
        return self.stop_reason == "early-stopped" and self.best_epoch == 1

    def to_csv(self, path: str) -> str:
        """写出报告 CSV，末行为 #stop: 停止原因"""
        frame = self.to_frame()
        with open(path, "w", encoding="utf-8", newline="") as f:
            frame.to_csv(f, index=False, lineterminator="\n", float_format="%.8g")
            f.write(f"#stop: {self.stop_reason} best_epoch={self.best_epoch}\n")
        return path


def cross_entropy(z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """批平均交叉熵，经 log-sum-exp 计算"""
    if z.dim() != 2:
        raise DimensionError(f"logits 必须为 batch×C: {tuple(z.shape)}")
    y = torch.as_tensor(y, dtype=torch.long)
    if y.shape != (z.shape[0],):
        raise DimensionError(f"标签形状 {tuple(y.shape)} 与 logits {tuple(z.shape)} 不符")
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= z.shape[1]):
        raise DataError(f"标签越界 [0,{z.shape[1]}): {y.tolist()}")
    log_norm = torch.logsumexp(z, dim=1)
    return (log_norm - z.gather(1, y[:, None])[:, 0]).mean()


def soften(v: torch.Tensor, temperature: float) -> SoftDistribution:
    """softmax(v / T)"""
    if not temperature > 0:
        raise ConfigError(f"温度必须为正: {temperature}")
    return SoftDistribution(softmax_rows(v / temperature), float(temperature))


def kl_divergence(p_t: SoftDistribution, p_s: SoftDistribution) -> torch.Tensor:
    """批平均 KL(p_t || p_s)；p_t=0 的项记 0，p_s 在对数内下限 1e-12"""
    if p_t.probs.shape != p_s.probs.shape:
        raise DimensionError(f"KL 输入形状不符: {tuple(p_t.probs.shape)} vs {tuple(p_s.probs.shape)}")
    if p_t.temperature != p_s.temperature:
        raise ConfigError(f"KL 两侧温度不同: {p_t.temperature} vs {p_s.temperature}")
    log_s = torch.log(p_s.probs.clamp_min(KL_FLOOR))
    terms = torch.xlogy(p_t.probs, p_t.probs) - torch.where(p_t.probs > 0, p_t.probs * log_s,
                                                              torch.zeros_like(log_s))
    return terms.sum(dim=-1).mean()


def combined_loss(z_s: torch.Tensor, y: torch.Tensor, teacher_emb: torch.Tensor, student_emb: torch.Tensor,
                  adapter: Adapter, cfg: DistillConfig, training: bool = False,
                  rng: Optional[RngState] = None) -> Tuple[torch.Tensor, LossComponents]:
    """λ·KL(软化适配教师嵌入, 软化学生嵌入) + CE，KL 项不乘 T²"""
    ce = cross_entropy(z_s, y)
    if cfg.lam == 0:
        kl = torch.zeros((), dtype=ce.dtype)
        return ce, LossComponents(kl, ce)
    adapted = adapter_forward(adapter, teacher_emb, training, rng)
    if adapted.shape != student_emb.shape:
        raise DimensionError(f"适配后教师嵌入 {tuple(adapted.shape)} 与学生嵌入 {tuple(student_emb.shape)} 不符")
    kl = kl_divergence(soften(adapted, cfg.temperature), soften(student_emb, cfg.temperature))
    if float(kl) < -KL_TOLERANCE:
        raise EvaluationError(f"KL 散度为负: {float(kl)}")
    return cfg.lam * kl + ce, LossComponents(kl, ce)


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float) -> float:
    """余弦退火: lr_min + 0.5(lr0-lr_min)(1+cos(π·step/total))"""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ScheduleError(f"调度步数越界: step={step}, total_steps={total_steps}")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def to_batch(samples: Sequence[LabeledSample]) -> Tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(stack_images(samples)).to(torch.get_default_dtype())
    return images, torch.from_numpy(stack_labels(samples))


def score_samples(model: torch.nn.Module, samples: Sequence[LabeledSample], batch_size: int = 256) -> np.ndarray:
    """评估模式下的融合类 softmax 概率（攻击分数）"""
    model.eval()
    scores = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            images, _ = to_batch(samples[start:start + batch_size])
            scores.append(softmax_rows(model(images).logits)[:, 1].double().numpy())
    return np.concatenate(scores) if scores else np.zeros(0)


StepFn = Callable[[Sequence[LabeledSample], bool, Optional[RngState]], Tuple[torch.Tensor, LossComponents]]


class DistillationTrainer:
    """两阶段训练引擎"""

    def __init__(self):
        self.logger = logging.getLogger(__name__)

    def _check_splits(self, train: Sequence[LabeledSample], val: Sequence[LabeledSample]):
        if not train or not val:
            raise DataError(f"训练或验证集为空: train={len(train)}, val={len(val)}")
        if any(s.split == "c" for s in list(train) + list(val)):
            raise ProtocolError("训练流程拒绝使用评测划分 DS-C 的样本")
        overlap = {s.sample_id for s in train} & {s.sample_id for s in val}
        if overlap:
            raise DataError(f"训练集与验证集样本重叠: {sorted(overlap)[:5]}")

    def _evaluate(self, step_fn: StepFn, samples: Sequence[LabeledSample], batch_size: int) -> Tuple[float, float, float]:
        totals = np.zeros(3)
        with torch.no_grad():
            for start in range(0, len(samples), batch_size):
                batch = samples[start:start + batch_size]
                total, parts = step_fn(batch, False, None)
                totals += len(batch) * np.array([float(total), float(parts.kl), float(parts.ce)])
        return tuple(totals / len(samples))

    def _fit(self, name: str, modules: Dict[str, torch.nn.Module], params: List[torch.nn.Parameter],
             frozen: Dict[str, torch.nn.Module], step_fn: StepFn, train: Sequence[LabeledSample],
             val: Sequence[LabeledSample], lr0: float, cfg: DistillConfig, rng: RngState) -> TrainReport:
        optimizer = torch.optim.Adam(params, lr=lr0, betas=cfg.betas, eps=cfg.eps)
        frozen_names = {key: [n for n, p in m.named_parameters() if not p.requires_grad] for key, m in frozen.items()}
        frozen_hashes = {key: checkpoint_store.state_hash(m, frozen_names[key]) for key, m in frozen.items()}
        report = TrainReport()
        best_state = None
        stale = 0

        for epoch in range(1, cfg.epochs + 1):
            started = time.perf_counter()
            lr = cosine_lr(epoch - 1, cfg.epochs, lr0, cfg.min_lr)
            for group in optimizer.param_groups:
                group["lr"] = lr
            epoch_rng = rng.spawn(f"epoch{epoch}")
            samples = list(train)
            if cfg.augment_events > 0:
                samples = augment_epoch(samples, epoch_rng.spawn("augment"), cfg.augment_events, cfg.bonafide_weight)
            order = epoch_rng.spawn("shuffle").generator.permutation(len(samples))

            for module in modules.values():
                module.train(True)
            sums = np.zeros(3)
            for b, start in enumerate(range(0, len(samples), cfg.batch_size)):
                batch = [samples[i] for i in order[start:start + cfg.batch_size]]
                total, parts = step_fn(batch, True, epoch_rng.spawn(f"dropout{b}"))
                if not torch.isfinite(total):
                    raise TrainingAnomaly(f"{name} 第 {epoch} 轮第 {b} 批损失非有限: {float(total)}")
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                sums += len(batch) * np.array([float(total), float(parts.kl), float(parts.ce)])
            train_loss, kl_part, ce_part = sums / len(samples)

            for module in modules.values():
                module.eval()
            val_loss = self._evaluate(step_fn, val, cfg.batch_size)[0]
            if not math.isfinite(val_loss):
                raise TrainingAnomaly(f"{name} 第 {epoch} 轮验证损失非有限: {val_loss}")

            for key, module in frozen.items():
                if checkpoint_store.state_hash(module, frozen_names[key]) != frozen_hashes[key]:
                    raise ContractError(f"{name} 第 {epoch} 轮后冻结参数 {key} 被修改")

            report.records.append(EpochRecord(epoch, float(train_loss), float(val_loss), float(kl_part),
                                              float(ce_part), lr, time.perf_counter() - started))
            self.logger.info(f"{name} 第 {epoch}/{cfg.epochs} 轮: 训练损失 {train_loss:.4f}, "
                             f"验证损失 {val_loss:.4f}, lr {lr:.2e}")

            if val_loss < report.best_val_loss:
                report.best_val_loss = float(val_loss)
                report.best_epoch = epoch
                best_state = {key: copy.deepcopy(m.state_dict()) for key, m in modules.items()}
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    report.stop_reason = "early-stopped"
                    self.logger.info(f"{name} 早停于第 {epoch} 轮, 最优轮次 {report.best_epoch}")
                    break

        for key, module in modules.items():
            module.load_state_dict(best_state[key])
            module.eval()
        return report

    def train_teacher(self, model: torch.nn.Module, train: Sequence[LabeledSample], val: Sequence[LabeledSample],
                      cfg: DistillConfig, rng: RngState) -> TrainReport:
        """教师微调：仅交叉熵"""
        cfg.validate()
        self._check_splits(train, val)
        params = [p for p in model.parameters() if p.requires_grad]
        if not params:
            raise ContractError("教师网络没有可训练参数")

        def step(batch, training, step_rng):
            images, labels = to_batch(batch)
            ce = cross_entropy(model(images).logits, labels)
            return ce, LossComponents(torch.zeros((), dtype=ce.dtype), ce)

        self.logger.info(f"开始教师训练: 训练 {len(train)}, 验证 {len(val)}")
        return self._fit("教师", {"teacher": model}, params, {}, step, train, val, cfg.teacher_lr, cfg, rng)

    def train_student(self, student: torch.nn.Module, teacher: torch.nn.Module, adapter: Adapter,
                      train: Sequence[LabeledSample], val: Sequence[LabeledSample], cfg: DistillConfig,
                      rng: RngState) -> TrainReport:
        """学生蒸馏：更新 LoRA 因子、分类头与适配器"""
        cfg.validate()
        if not is_frozen(teacher):
            raise ContractError("学生蒸馏要求教师网络已冻结")
        self._check_splits(train, val)
        teacher.eval()
        params = [p for p in student.parameters() if p.requires_grad] + adapter_trainables(adapter)

        def step(batch, training, step_rng):
            images, labels = to_batch(batch)
            with torch.no_grad():
                teacher_emb = teacher(images).embedding
            out = student(images, step_rng if training else None)
            return combined_loss(out.logits, labels, teacher_emb, out.embedding, adapter, cfg, training,
                                 step_rng.spawn("adapter") if training else None)

        self.logger.info(f"开始学生蒸馏: 训练 {len(train)}, 验证 {len(val)}, λ={cfg.lam}, T={cfg.temperature}")
        return self._fit("学生", {"student": student, "adapter": adapter}, params,
                         {"student": student, "teacher": teacher}, step, train, val, cfg.student_lr, cfg, rng)


# 全局训练引擎实例
distill_trainer = DistillationTrainer()


def train_teacher(model: torch.nn.Module, train: Sequence[LabeledSample], val: Sequence[LabeledSample],
                  cfg: DistillConfig, rng: RngState) -> TrainReport:
    return distill_trainer.train_teacher(model, train, val, cfg, rng)


def train_student(student: torch.nn.Module, teacher: torch.nn.Module, adapter: Adapter,
                  train: Sequence[LabeledSample], val: Sequence[LabeledSample], cfg: DistillConfig,
                  rng: RngState) -> TrainReport:
    return distill_trainer.train_student(student, teacher, adapter, train, val, cfg, rng)
