"""
检测指标模块
MACER、BPCER、插值 D-EER、固定 MACER 下的 BPCER、DET 曲线导出与按融合技术分组报告
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from data_synth import BONAFIDE, LABEL_NAMES, MORPH
from errors import ConfigError, DataError, ProtocolError

SCORE_COLUMNS = ["sample_id", "label", "score", "technique"]
DET_COLUMNS = ["threshold", "macer", "bpcer"]
OPERATING_POINTS = (0.05, 0.10)


@dataclass(frozen=True)
class ScoreRecord:
    """单个样本的攻击分数（越大越像融合攻击）"""

    sample_id: str
    label: int
    score: float
    technique: str = ""

    def __post_init__(self):
        if self.label not in (BONAFIDE, MORPH):
            raise DataError(f"分数记录 {self.sample_id} 标签非法: {self.label}")
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise DataError(f"分数记录 {self.sample_id} 分数必须位于 [0,1]: {self.score}")


@dataclass(frozen=True)
class DetPoint:
    threshold: float
    macer: float
    bpcer: float


class MorphMetrics:
    """ISO 风格检测指标计算类；分数 >= 阈值即判为攻击"""

    def __init__(self):
        self.logger = logging.getLogger(__name__)

    @staticmethod
    def _split_scores(records: Sequence[ScoreRecord]) -> Tuple[np.ndarray, np.ndarray]:
        morph = np.sort(np.array([r.score for r in records if r.label == MORPH], dtype=np.float64))
        bona = np.sort(np.array([r.score for r in records if r.label == BONAFIDE], dtype=np.float64))
        if morph.size == 0 or bona.size == 0:
            raise ProtocolError(f"指标计算需要两类样本: 融合 {morph.size}, 真实 {bona.size}")
        return morph, bona

    @staticmethod
    def _rates(morph: np.ndarray, bona: np.ndarray, thresholds: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        macer = np.searchsorted(morph, thresholds, side="left") / morph.size
        bpcer = (bona.size - np.searchsorted(bona, thresholds, side="left")) / bona.size
        return macer, bpcer

    def error_rates_at(self, records: Sequence[ScoreRecord], threshold: float) -> Tuple[float, float]:
        """(MACER, BPCER)：融合样本分数 < t 的比例，真实样本分数 >= t 的比例"""
        morph, bona = self._split_scores(records)
        macer, bpcer = self._rates(morph, bona, np.array([threshold], dtype=np.float64))
        return float(macer[0]), float(bpcer[0])

    def _sweep(self, records: Sequence[ScoreRecord]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        morph, bona = self._split_scores(records)
        distinct = np.unique(np.concatenate([morph, bona]))
        thresholds = np.concatenate([[-np.inf], distinct, [np.inf]])
        macer, bpcer = self._rates(morph, bona, thresholds)
        return thresholds, macer, bpcer

    def det_curve(self, records: Sequence[ScoreRecord]) -> List[DetPoint]:
        """阈值取 -inf、全部不同分数、+inf"""
        thresholds, macer, bpcer = self._sweep(records)
        return [DetPoint(float(t), float(m), float(b)) for t, m, b in zip(thresholds, macer, bpcer)]

    def d_eer(self, records: Sequence[ScoreRecord]) -> Tuple[float, float]:
        """(等错误率, 阈值)；在 MACER-BPCER 变号处按阈值线性插值，恰好相等时取最小阈值"""
        thresholds, macer, bpcer = self._sweep(records)
        diff = macer - bpcer
        i = int(np.argmax(diff >= 0))
        if diff[i] == 0 or i == 0:
            return float(macer[i]), float(thresholds[i])
        alpha = -diff[i - 1] / (diff[i] - diff[i - 1])
        eer = macer[i - 1] + alpha * (macer[i] - macer[i - 1])
        lo, hi = thresholds[i - 1], thresholds[i]
        if np.isfinite(lo) and np.isfinite(hi):
            threshold = lo + alpha * (hi - lo)
        else:
            threshold = lo if np.isfinite(lo) else hi
        return float(eer), float(threshold)

    def bpcer_at_macer(self, records: Sequence[ScoreRecord], target: float) -> float:
        """MACER <= target 的所有阈值中最小的 BPCER"""
        if not 0.0 < target < 1.0:
            raise ConfigError(f"目标 MACER 必须位于 (0,1): {target}")
        _, macer, bpcer = self._sweep(records)
        return float(bpcer[macer <= target].min())

    def summary(self, records: Sequence[ScoreRecord]) -> Dict[str, float]:
        eer, threshold = self.d_eer(records)
        result = {"d_eer": eer, "eer_threshold": threshold}
        for target in OPERATING_POINTS:
            result[f"bpcer@{int(round(target * 100))}"] = self.bpcer_at_macer(records, target)
        return result

    def per_technique_report(self, records: Sequence[ScoreRecord],
                             techniques: Optional[Iterable[str]] = None) -> pd.DataFrame:
        """每种融合技术：全部真实样本 ∪ 该技术融合样本；无融合样本的技术输出告警行"""
        bona = [r for r in records if r.label == BONAFIDE]
        present = sorted({r.technique for r in records if r.label == MORPH})
        tags = list(dict.fromkeys(list(techniques) if techniques is not None else present))
        rows = []
        for tag in tags:
            subset = bona + [r for r in records if r.label == MORPH and r.technique == tag]
            n_morph = len(subset) - len(bona)
            if n_morph == 0:
                self.logger.warning(f"融合技术 {tag} 没有融合样本, 已跳过")
                rows.append({"technique": tag, "n_morph": 0, "d_eer": np.nan, "bpcer@5": np.nan,
                             "bpcer@10": np.nan, "warning": "no morph samples"})
                continue
            stats = self.summary(subset)
            rows.append({"technique": tag, "n_morph": n_morph, "d_eer": stats["d_eer"],
                         "bpcer@5": stats["bpcer@5"], "bpcer@10": stats["bpcer@10"], "warning": ""})
        return pd.DataFrame(rows, columns=["technique", "n_morph", "d_eer", "bpcer@5", "bpcer@10", "warning"])

    def save_scores(self, records: Sequence[ScoreRecord], path: str) -> str:
        frame = pd.DataFrame([[r.sample_id, LABEL_NAMES[r.label], r.score, r.technique] for r in records],
                             columns=SCORE_COLUMNS)
        frame.to_csv(path, index=False, lineterminator="\n")
        return path

    def load_scores(self, path: str) -> List[ScoreRecord]:
        frame = pd.read_csv(path, dtype={"sample_id": str, "label": str, "technique": str}, keep_default_na=False,
                            float_precision="round_trip")
        if list(frame.columns) != SCORE_COLUMNS:
            raise DataError(f"分数文件列名不符: {list(frame.columns)}")
        names = {v: k for k, v in LABEL_NAMES.items()}
        try:
            return [ScoreRecord(row.sample_id, names[row.label], float(row.score), row.technique)
                    for row in frame.itertuples(index=False)]
        except KeyError as e:
            raise DataError(f"分数文件含未知标签: {e}")

    def save_det(self, points: Sequence[DetPoint], path: str) -> str:
        frame = pd.DataFrame([[p.threshold, p.macer, p.bpcer] for p in points], columns=DET_COLUMNS)
        frame.to_csv(path, index=False, lineterminator="\n")
        return path

    def load_det(self, path: str) -> List[DetPoint]:
        frame = pd.read_csv(path, float_precision="round_trip")
        return [DetPoint(float(t), float(m), float(b)) for t, m, b in frame[DET_COLUMNS].itertuples(index=False)]


# 全局指标计算实例
mad_metrics = MorphMetrics()

error_rates_at = mad_metrics.error_rates_at
det_curve = mad_metrics.det_curve
d_eer = mad_metrics.d_eer
bpcer_at_macer = mad_metrics.bpcer_at_macer
per_technique_report = mad_metrics.per_technique_report
