"""
流程管理模块
串联数据生成、教师训练、学生蒸馏、评测、解释、对比、消融与协议审计，产物写入输出目录
"""
import copy
import logging
import os
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from adapter import build_adapter
from checkpoint import checkpoint_store
from config import RunConfig
from data_synth import DatasetStore, LabeledSample, build_protocol, save_pgm
from distill import TrainReport, score_samples, train_student, train_teacher
from errors import DataError, DependencyError, DimensionError
from explain_lime import LimeExplainer, save_attribution_csv
from metrics import ScoreRecord, mad_metrics
from teacher_cnn import build_teacher, freeze
from tensor_nn import RngState
from vit_lora import build_student, merge_lora_model

TEACHER_CKPT = "teacher.ckpt"
STUDENT_CKPT = "student.ckpt"
MERGED_CKPT = "student_merged.ckpt"
ACCESS_LOG = "files_read.txt"


class MorphPipelineManager:
    """融合攻击检测流程管理器"""

    def __init__(self):
        self.logger = logging.getLogger(__name__)
        self.update_callbacks: List[Callable[[str], None]] = []

    def add_update_callback(self, callback: Callable[[str], None]):
        """添加进度回调函数"""
        self.update_callbacks.append(callback)

    def notify_update(self, message: str):
        for callback in self.update_callbacks:
            try:
                callback(message)
            except Exception as e:
                self.logger.error(f"回调函数执行失败: {e}")

    def _prepare_out(self, cfg: RunConfig, out_dir: str) -> str:
        os.makedirs(out_dir, exist_ok=True)
        cfg.to_json(os.path.join(out_dir, "run_config.json"))
        return out_dir

    def _write_access_log(self, store: DatasetStore, out_dir: str):
        """与已有记录取并集后排序写出，重复运行结果不变"""
        path = os.path.join(out_dir, ACCESS_LOG)
        seen = set(store.opened)
        if os.path.exists(path):
            with open(path, encoding="utf-8") as f:
                seen |= {line.strip() for line in f if line.strip()}
        with open(path, "w", encoding="utf-8") as f:
            f.writelines(f"{p}\n" for p in sorted(seen))

    # 模型构建与检查点

    def _streams(self, cfg: RunConfig) -> RngState:
        return RngState(cfg.distill.seed)

    def new_teacher(self, cfg: RunConfig):
        return build_teacher(cfg.teacher, self._streams(cfg).spawn("init"))

    def new_student(self, cfg: RunConfig, with_lora: bool = True):
        init = self._streams(cfg).spawn("init")
        return build_student(cfg.vit, cfg.lora if with_lora else None, init), build_adapter(cfg.adapter, init)

    def load_model(self, cfg: RunConfig, path: str) -> Tuple[str, torch.nn.Module]:
        """按参数名前缀识别教师或学生检查点，学生再按 .lora. 区分 LoRA 与合并版"""
        if not os.path.exists(path):
            raise DependencyError(f"检查点不存在: {path}")
        records = checkpoint_store.load(path)
        prefixes = checkpoint_store.prefixes(records)
        if "teacher" in prefixes:
            model = checkpoint_store.load_module(self.new_teacher(cfg), records, "teacher")
            return "teacher", freeze(model)
        if "student" in prefixes:
            with_lora = any(".lora." in name for name in records)
            student, _ = self.new_student(cfg, with_lora)
            checkpoint_store.load_module(student, records, "student")
            student.eval()
            return ("student" if with_lora else "student-merged"), student
        raise DataError(f"无法识别的检查点 {path}: 前缀 {sorted(prefixes)}")

    # 各流程步骤

    def generate(self, cfg: RunConfig, data_dir: str) -> pd.DataFrame:
        """生成三段式数据集并写出清单，返回每个划分的样本计数"""
        try:
            self.notify_update(f"开始生成数据集: {data_dir}")
            splits = build_protocol(cfg.data)
            manifest = DatasetStore(data_dir).write_protocol(splits)
            cfg.to_json(os.path.join(data_dir, "run_config.json"))
            counts = manifest.groupby(["split", "label"]).size().unstack(fill_value=0)
            self.notify_update(f"数据集生成完成: 共 {len(manifest)} 个样本")
            return counts
        except Exception as e:
            self.logger.error(f"生成数据集失败: {e}")
            self.notify_update(f"生成数据集失败: {e}")
            raise

    def _train_val(self, store: DatasetStore, split: str, allowed: Optional[set] = None):
        train = store.load_split(split, ["train"], allow_eval=False)
        val = store.load_split(split, ["val"], allow_eval=False)
        if allowed is not None:
            keep = lambda s: set(s.subject_ids) <= allowed
            train, val = [s for s in train if keep(s)], [s for s in val if keep(s)]
        return train, val

    def train_teacher(self, cfg: RunConfig, data_dir: str, out_dir: str) -> TrainReport:
        """在 DS-A 上微调教师网络"""
        try:
            self._prepare_out(cfg, out_dir)
            store = DatasetStore(data_dir)
            train, val = self._train_val(store, "a")
            model = self.new_teacher(cfg)
            report = train_teacher(model, train, val, cfg.distill, self._streams(cfg).spawn("train_teacher"))
            checkpoint_store.save(os.path.join(out_dir, TEACHER_CKPT), checkpoint_store.module_records(model, "teacher"))
            report.to_csv(os.path.join(out_dir, "teacher_report.csv"))
            self._write_access_log(store, out_dir)
            self.notify_update(f"教师训练完成: {len(report.records)} 轮, 最优第 {report.best_epoch} 轮 "
                               f"验证损失 {report.best_val_loss:.4f}")
            return report
        except Exception as e:
            self.logger.error(f"教师训练失败: {e}")
            self.notify_update(f"教师训练失败: {e}")
            raise

    def _distill(self, cfg: RunConfig, store: DatasetStore, teacher_path: str,
                 allowed: Optional[set] = None):
        if not os.path.exists(teacher_path):
            raise DependencyError(f"学生蒸馏需要教师检查点: {teacher_path}")
        _, teacher = self.load_model(cfg, teacher_path)
        train, val = self._train_val(store, "b", allowed)
        student, adapter = self.new_student(cfg)
        report = train_student(student, teacher, adapter, train, val, cfg.distill,
                               self._streams(cfg).spawn("train_student"))
        return student, adapter, report

    def train_student(self, cfg: RunConfig, data_dir: str, out_dir: str) -> TrainReport:
        """在 DS-B 上蒸馏学生网络，写出 LoRA 版与合并版检查点"""
        try:
            self._prepare_out(cfg, out_dir)
            store = DatasetStore(data_dir)
            student, adapter, report = self._distill(cfg, store, os.path.join(out_dir, TEACHER_CKPT))
            records = checkpoint_store.module_records(student, "student")
            records.update(checkpoint_store.module_records(adapter, "adapter"))
            checkpoint_store.save(os.path.join(out_dir, STUDENT_CKPT), records)
            merged = merge_lora_model(student)
            checkpoint_store.save(os.path.join(out_dir, MERGED_CKPT), checkpoint_store.module_records(merged, "student"))
            report.to_csv(os.path.join(out_dir, "student_report.csv"))
            self._write_access_log(store, out_dir)
            self.notify_update(f"学生蒸馏完成: {len(report.records)} 轮, 最优第 {report.best_epoch} 轮 "
                               f"验证损失 {report.best_val_loss:.4f}")
            return report
        except Exception as e:
            self.logger.error(f"学生蒸馏失败: {e}")
            self.notify_update(f"学生蒸馏失败: {e}")
            raise

    def score_records(self, model: torch.nn.Module, samples: Sequence[LabeledSample]) -> List[ScoreRecord]:
        scores = np.clip(score_samples(model, samples), 0.0, 1.0)
        return [ScoreRecord(s.sample_id, s.label, float(p), s.technique) for s, p in zip(samples, scores)]

    def evaluate(self, cfg: RunConfig, data_dir: str, checkpoint: str, split: str,
                 out_dir: str) -> Tuple[Dict[str, float], pd.DataFrame]:
        """对一个划分打分，写出分数、DET 与按技术分组的指标"""
        try:
            self._prepare_out(cfg, out_dir)
            kind, model = self.load_model(cfg, checkpoint)
            samples = DatasetStore(data_dir).load_split(split)
            records = self.score_records(model, samples)
            mad_metrics.save_scores(records, os.path.join(out_dir, "scores.csv"))
            mad_metrics.save_det(mad_metrics.det_curve(records), os.path.join(out_dir, "det.csv"))
            summary = mad_metrics.summary(records)
            table = mad_metrics.per_technique_report(records)
            table.to_csv(os.path.join(out_dir, "per_technique.csv"), index=False, lineterminator="\n")
            self.notify_update(f"评测完成 ({kind}, 划分 {split}): D-EER {summary['d_eer']:.4f}")
            return summary, table
        except Exception as e:
            self.logger.error(f"评测失败: {e}")
            self.notify_update(f"评测失败: {e}")
            raise

    def explain(self, cfg: RunConfig, checkpoint: str, image_path: str, out_dir: str,
                top_k: Optional[int] = None):
        """对单张 PGM 图像生成区域归因 CSV 与叠加图"""
        try:
            self._prepare_out(cfg, out_dir)
            _, model = self.load_model(cfg, checkpoint)
            if not os.path.exists(image_path):
                raise DependencyError(f"图像不存在: {image_path}")
            image = DatasetStore(os.path.dirname(image_path) or ".").load_image(image_path)
            expected = (cfg.vit.channels, cfg.vit.image_size, cfg.vit.image_size)
            if image.shape != expected:
                raise DimensionError(f"图像形状 {image.shape} 与检查点配置 {expected} 不符")
            lime_cfg = copy.deepcopy(cfg.lime)
            if top_k is not None:
                lime_cfg.top_k = int(top_k)
            attribution, overlay = LimeExplainer(lime_cfg).explain(model, image)
            save_attribution_csv(attribution, os.path.join(out_dir, "attribution.csv"))
            with open(os.path.join(out_dir, "overlay.pgm"), "wb") as f:
                f.write(save_pgm(overlay))
            return attribution, attribution.top_regions(lime_cfg.top_k)
        except Exception as e:
            self.logger.error(f"解释失败: {e}")
            self.notify_update(f"解释失败: {e}")
            raise

    def compare(self, cfg: RunConfig, data_dir: str, out_dir: str) -> pd.DataFrame:
        """教师与学生在 DS-C 上的指标对比"""
        try:
            self._prepare_out(cfg, out_dir)
            samples = DatasetStore(data_dir).load_split("c")
            rows = []
            for name in (TEACHER_CKPT, STUDENT_CKPT):
                kind, model = self.load_model(cfg, os.path.join(out_dir, name))
                stats = mad_metrics.summary(self.score_records(model, samples))
                rows.append({"model": kind, "d_eer": stats["d_eer"], "bpcer@5": stats["bpcer@5"],
                             "bpcer@10": stats["bpcer@10"]})
            table = pd.DataFrame(rows)
            table.to_csv(os.path.join(out_dir, "comparison.csv"), index=False, lineterminator="\n")
            return table
        except Exception as e:
            self.logger.error(f"模型对比失败: {e}")
            self.notify_update(f"模型对比失败: {e}")
            raise

    def ablate(self, cfg: RunConfig, data_dir: str, out_dir: str, seeds: Sequence[int],
               limit_subjects: int = 8) -> pd.DataFrame:
        """蒸馏收益消融：有限主体的 DS-B 上比较 λ 与 λ=0，在 DS-C 上取 D-EER 中位数"""
        try:
            self._prepare_out(cfg, out_dir)
            store = DatasetStore(data_dir)
            manifest = store.read_manifest()
            pool = manifest[manifest["split"] == "b"]
            subjects = sorted((set(pool["subject_a"]) | set(pool["subject_b"])) - {""})
            allowed = set(subjects[:limit_subjects])
            evaluation = DatasetStore(data_dir).load_split("c")
            rows = []
            for seed in seeds:
                for lam in (cfg.distill.lam, 0.0):
                    run = copy.deepcopy(cfg)
                    run.distill.seed = int(seed)
                    run.distill.lam = float(lam)
                    student, _, _ = self._distill(run, store, os.path.join(out_dir, TEACHER_CKPT), allowed)
                    eer, _ = mad_metrics.d_eer(self.score_records(student, evaluation))
                    rows.append({"seed": int(seed), "lam": float(lam), "d_eer": eer})
                    self.notify_update(f"消融 seed={seed}, λ={lam}: D-EER {eer:.4f}")
            table = pd.DataFrame(rows)
            table.to_csv(os.path.join(out_dir, "ablation.csv"), index=False, lineterminator="\n")
            medians = table.groupby("lam")["d_eer"].median()
            kd, baseline = medians[float(cfg.distill.lam)], medians[0.0]
            if cfg.distill.lam > 0 and kd > baseline:
                self.logger.warning(f"蒸馏未带来收益: λ={cfg.distill.lam} 中位 D-EER {kd:.4f} > λ=0 的 {baseline:.4f}")
            return table
        except Exception as e:
            self.logger.error(f"消融实验失败: {e}")
            self.notify_update(f"消融实验失败: {e}")
            raise

    def audit(self, data_dir: str, out_dir: Optional[str] = None) -> Dict[str, object]:
        return DatasetStore(data_dir).audit(out_dir)


# 全局流程管理实例
pipeline_manager = MorphPipelineManager()
