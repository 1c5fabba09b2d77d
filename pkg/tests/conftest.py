"""共享测试夹具"""
import pytest
import torch

from adapter import AdapterConfig
from data_synth import DataConfig
from distill import DistillConfig
from teacher_cnn import TeacherConfig
from tensor_nn import RngState
from toy_data import make_toy_samples
from vit_lora import LoRAConfig, ViTConfig


@pytest.fixture
def rng():
    return RngState(42)


@pytest.fixture
def micro_vit_cfg():
    """4×4 图像、patch 2、D_s=8、depth 1、heads 2"""
    return ViTConfig(image_size=4, patch_size=2, channels=1, dim=8, depth=1, heads=2, mlp_ratio=2.0)


@pytest.fixture
def micro_teacher_cfg():
    return TeacherConfig(channels=[4, 8], blocks=[1, 1], embed_dim=8, image_size=4, in_channels=1)


@pytest.fixture
def micro_lora_cfg():
    return LoRAConfig(rank=2, alpha=4.0, dropout_rate=0.1)


@pytest.fixture
def micro_adapter_cfg():
    return AdapterConfig(d_in=8, d_out=8, hidden=16, dropout_rate=0.1)


@pytest.fixture
def small_data_cfg():
    return DataConfig(subjects={"a": 6, "b": 6, "c": 6}, pairs={"a": 6, "b": 6, "c": 6},
                      bonafide_per_subject=2, seed=7)


@pytest.fixture
def toy_splits():
    """8×8 玩具训练/验证集（DS-A 划分）"""
    return make_toy_samples(200, 8, 1, partition="train"), make_toy_samples(40, 8, 2, partition="val")


@pytest.fixture
def fast_distill_cfg():
    return DistillConfig(epochs=5, batch_size=32, patience=5, teacher_lr=5e-3, student_lr=5e-3,
                         min_lr=1e-4, augment_events=0.0, seed=42)
