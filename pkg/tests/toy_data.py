"""测试用玩具数据"""
import numpy as np

from data_synth import BONAFIDE, MORPH, LabeledSample


def make_toy_samples(n: int, size: int, seed: int, split: str = "a", partition: str = "train"):
    """线性可分玩具数据：融合样本整体偏亮，真实样本整体偏暗"""
    gen = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        label = MORPH if i % 2 else BONAFIDE
        level = 0.7 if label == MORPH else 0.3
        image = np.clip(level + gen.normal(0.0, 0.05, size=(1, size, size)), 0.0, 1.0).astype(np.float32)
        subjects = (f"t{seed}_{i}", f"u{seed}_{i}") if label == MORPH else (f"t{seed}_{i}",)
        samples.append(LabeledSample(f"{split}_{partition}_{seed}_{i}", image, label, subjects,
                                     technique="landmark" if label == MORPH else "", split=split,
                                     partition=partition))
    return samples
