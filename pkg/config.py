"""
融合攻击检测系统配置文件
各组件默认参数、运行配置文件解析（未知键严格拒绝）与日志配置
"""
import copy
import json
import os
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional

from adapter import AdapterConfig
from data_synth import DataConfig
from distill import DistillConfig
from errors import ConfigError
from explain_lime import LimeConfig
from teacher_cnn import TeacherConfig
from vit_lora import TARGET_FC, TARGET_QKV, LoRAConfig, ViTConfig

# 学生网络（缩小版 ViT）
VIT_CONFIG = {
    'image_size': 32,
    'patch_size': 8,
    'channels': 1,
    'dim': 64,
    'depth': 4,
    'heads': 4,
    'mlp_ratio': 2.0,
    'num_classes': 2
}

# 低秩适配
LORA_CONFIG = {
    'rank': 8,
    'alpha': 16.0,
    'dropout_rate': 0.1,
    'targets': [TARGET_QKV, TARGET_FC]
}

# 教师网络（残差卷积）
TEACHER_CONFIG = {
    'channels': [16, 32, 64],
    'blocks': [1, 1, 1],
    'embed_dim': 64,
    'num_classes': 2
}

# 适配器（d_in、d_out 由教师与学生嵌入宽度决定）
ADAPTER_CONFIG = {
    'hidden': None,
    'dropout_rate': 0.1
}

# 训练超参数（桌面规模网络从随机初始化开始训练，学习率高于 DistillConfig 缺省值）
DISTILL_CONFIG = {
    'lam': 0.5,
    'temperature': 3.0,
    'teacher_lr': 2e-3,
    'student_lr': 1e-3,
    'min_lr': 1e-5,
    'epochs': 30,
    'batch_size': 64,
    'patience': 5,
    'seed': 42,
    'augment_events': 0.5,
    'bonafide_weight': 2.0
}

# 合成数据与三段式协议
DATA_CONFIG = {
    'image_size': 32,
    'subjects': {'a': 20, 'b': 20, 'c': 20},
    'pairs': {'a': 80, 'b': 80, 'c': 80},
    'techniques': {s: ['landmark', 'generative', 'blend-only'] for s in ('a', 'b', 'c')},
    'bonafide_per_subject': 8,
    'morphs_per_pair': 1,
    'val_fraction': 0.2,
    'noise_sigma': 0.03,
    'beta_range': [0.4, 0.6],
    'ghost_opacity': 0.1,
    'ghost_shift': 7,
    'seed': 42
}

# 扰动解释
LIME_CONFIG = {
    'grid': 8,
    'num_samples': 1000,
    'keep_prob': 0.5,
    'kernel_width': 0.25,
    'ridge_penalty': 1.0,
    'baseline': 0.5,
    'seed': 42,
    'top_k': 8
}

# 数据与输出目录
DATA_DIR = './data'
OUTPUT_DIR = './runs'

# 日志配置
LOGGING_CONFIG = {
    'level': os.getenv('DMAD_LOG_LEVEL', 'INFO'),
    'format': '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    'file': os.getenv('DMAD_LOG_FILE', './logs/dmad_system.log')
}

DEFAULTS = {
    'vit': VIT_CONFIG,
    'lora': LORA_CONFIG,
    'teacher': TEACHER_CONFIG,
    'adapter': ADAPTER_CONFIG,
    'distill': DISTILL_CONFIG,
    'data': DATA_CONFIG,
    'lime': LIME_CONFIG,
    'output_dir': OUTPUT_DIR
}


@dataclass
class RunConfig:
    """一次运行的完整配置"""

    vit: ViTConfig
    lora: LoRAConfig
    teacher: TeacherConfig
    adapter: AdapterConfig
    distill: DistillConfig
    data: DataConfig
    lime: LimeConfig
    output_dir: str = OUTPUT_DIR

    def to_dict(self) -> Dict[str, Any]:
        result = asdict(self)
        result['lora']['targets'] = list(self.lora.targets)
        return result

    def to_json(self, path: Optional[str] = None) -> str:
        """序列化为 JSON；给出路径时同时写文件"""
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"
        if path is not None:
            with open(path, 'w', encoding='utf-8') as f:
                f.write(text)
        return text


def _merge(defaults: Dict[str, Any], user: Dict[str, Any], path: str = "") -> Dict[str, Any]:
    """把用户配置深度合并到默认值上，遇到未知键报告完整键路径"""
    if not isinstance(user, dict):
        raise ConfigError(f"配置项 {path or '<根>'} 必须是对象")
    merged = copy.deepcopy(defaults)
    for key, value in user.items():
        dotted = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"未知配置项: {dotted}")
        if isinstance(defaults[key], dict):
            merged[key] = _merge(defaults[key], value, dotted)
        else:
            merged[key] = value
    return merged


def build_run_config(document: Dict[str, Any]) -> RunConfig:
    """由合并后的字典构造并校验各组件配置"""
    doc = _merge(DEFAULTS, document)
    try:
        vit = ViTConfig(**doc['vit']).validate()
        lora = LoRAConfig(**{**doc['lora'], 'targets': tuple(doc['lora']['targets'])}).validate()
        data = DataConfig(**{**doc['data'], 'beta_range': tuple(doc['data']['beta_range'])}).validate()
        teacher = TeacherConfig(**doc['teacher'], image_size=vit.image_size, in_channels=vit.channels).validate()
        adapter = AdapterConfig(d_in=teacher.embed_dim, d_out=vit.dim, **doc['adapter']).validate()
        distill = DistillConfig(**doc['distill']).validate()
        lime = LimeConfig(**doc['lime']).validate()
    except TypeError as e:
        raise ConfigError(f"配置项类型错误: {e}")
    if data.image_size != vit.image_size:
        raise ConfigError(f"data.image_size {data.image_size} 与 vit.image_size {vit.image_size} 不一致")
    return RunConfig(vit, lora, teacher, adapter, distill, data, lime, str(doc['output_dir']))


def load_run_config(path: Optional[str] = None, seed: Optional[int] = None) -> RunConfig:
    """读取 JSON 运行配置；seed 覆盖 distill.seed 与 data.seed"""
    document: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, encoding='utf-8') as f:
                document = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"配置文件 {path} 不是合法 JSON: 第 {e.lineno} 行第 {e.colno} 列 {e.msg}")
    if seed is not None:
        document = copy.deepcopy(document)
        for section in ('distill', 'data'):
            document.setdefault(section, {})
            if not isinstance(document[section], dict):
                raise ConfigError(f"配置项 {section} 必须是对象")
            document[section]['seed'] = int(seed)
    return build_run_config(document)
