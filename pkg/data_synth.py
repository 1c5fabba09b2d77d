"""
合成数据模块
生成真实样本与伪造（融合）样本、类别不均衡感知的数据增强、三段式评测协议划分及 PGM 读写
"""
import hashlib
import itertools
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage

from errors import ConfigError, DataError, PgmParseError, ProtocolError
from tensor_nn import RngState

logger = logging.getLogger(__name__)

BONAFIDE = 0
MORPH = 1
LABEL_NAMES = {BONAFIDE: "bonafide", MORPH: "morph"}
TECHNIQUES = ("landmark", "generative", "blend-only")
SPLITS = ("a", "b", "c")
AUGMENT_OPS = ("flip", "rotate", "brightness", "contrast", "crop")
MANIFEST_COLUMNS = ["path", "label", "subject_a", "subject_b", "technique", "split"]

# 人脸模板（归一化坐标 y, x；轮廓为 中心y, 中心x, σy, σx）
_EYE_ANCHORS = ((0.38, 0.32), (0.38, 0.68))
_MOUTH_ANCHOR = (0.72, 0.5)
_FACE_OVAL = (0.5, 0.5, 0.32, 0.26)
_FACE_LEVEL = 0.45
_EYE_LEVEL = 0.75


@dataclass
class DataConfig:
    """合成数据与协议参数"""

    image_size: int = 32
    subjects: Dict[str, int] = field(default_factory=lambda: {"a": 20, "b": 20, "c": 20})
    pairs: Dict[str, int] = field(default_factory=lambda: {"a": 80, "b": 80, "c": 80})
    techniques: Dict[str, List[str]] = field(default_factory=lambda: {s: list(TECHNIQUES) for s in SPLITS})
    bonafide_per_subject: int = 8
    morphs_per_pair: int = 1
    val_fraction: float = 0.2
    noise_sigma: float = 0.03
    beta_range: Tuple[float, float] = (0.4, 0.6)
    ghost_opacity: float = 0.1
    ghost_shift: int = 7
    seed: int = 42

    def validate(self) -> "DataConfig":
        if self.image_size < 8:
            raise ConfigError(f"image_size 必须 >= 8: {self.image_size}")
        for name in ("subjects", "pairs", "techniques"):
            value = getattr(self, name)
            if set(value) != set(SPLITS):
                raise ConfigError(f"data.{name} 必须恰好包含划分 {list(SPLITS)}: {sorted(value)}")
        for split in SPLITS:
            if self.subjects[split] < 2:
                raise ConfigError(f"data.subjects.{split} 必须 >= 2: {self.subjects[split]}")
            unknown = set(self.techniques[split]) - set(TECHNIQUES)
            if unknown or not self.techniques[split]:
                raise ConfigError(f"data.techniques.{split} 含未知或为空: {self.techniques[split]}")
        if self.bonafide_per_subject < 1 or self.morphs_per_pair < 1:
            raise ConfigError("bonafide_per_subject 与 morphs_per_pair 必须 >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction 必须位于 (0,1): {self.val_fraction}")
        lo, hi = self.beta_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError(f"beta_range 非法: {self.beta_range}")
        self.beta_range = (float(lo), float(hi))
        if self.noise_sigma < 0 or self.ghost_opacity < 0 or self.ghost_shift < 0:
            raise ConfigError("noise_sigma、ghost_opacity、ghost_shift 不能为负")
        return self


@dataclass
class LabeledSample:
    """单个带标签样本；图像为 [1,S,S] 的 float32，取值 [0,1]"""

    sample_id: str
    image: np.ndarray
    label: int
    subject_ids: Tuple[str, ...]
    technique: str = ""
    split: str = ""
    partition: str = ""

    def __post_init__(self):
        if self.label not in (BONAFIDE, MORPH):
            raise DataError(f"样本 {self.sample_id} 标签非法: {self.label}")
        self.subject_ids = tuple(self.subject_ids)
        expected = 2 if self.label == MORPH else 1
        if len(set(self.subject_ids)) != expected or len(self.subject_ids) != expected:
            raise DataError(f"样本 {self.sample_id} 的主体编号 {self.subject_ids} 与标签 {self.label} 不符")
        if self.image.ndim != 3 or self.image.shape[0] != 1:
            raise DataError(f"样本 {self.sample_id} 图像形状必须为 [1,S,S]: {self.image.shape}")
        if self.image.size and (self.image.min() < 0.0 or self.image.max() > 1.0):
            raise DataError(f"样本 {self.sample_id} 像素越界 [0,1]")

    @property
    def is_morph(self) -> bool:
        return self.label == MORPH


@dataclass
class ProtocolSplits:
    """DS-A（教师训练/验证）、DS-B（学生训练/验证）、DS-C（仅评测）"""

    a: List[LabeledSample]
    b: List[LabeledSample]
    c: List[LabeledSample]

    def split(self, name: str) -> List[LabeledSample]:
        if name not in SPLITS:
            raise DataError(f"未知划分: {name}")
        return getattr(self, name)

    def partition(self, name: str, part: str) -> List[LabeledSample]:
        return [s for s in self.split(name) if s.partition == part]

    def subject_pools(self) -> Dict[str, set]:
        return {name: {sid for s in self.split(name) for sid in s.subject_ids} for name in SPLITS}


def subject_name(index: int) -> str:
    return f"s{index:04d}"


def _grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    centers = (np.arange(size) + 0.5) / size
    return np.meshgrid(centers, centers, indexing="ij")


def _blob(yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, sy: float, sx: float) -> np.ndarray:
    return np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))


def _normalize(image: np.ndarray) -> np.ndarray:
    lo, hi = image.min(), image.max()
    if hi - lo < 1e-12:
        return np.zeros_like(image)
    return (image - lo) / (hi - lo)


def gen_subject_prototype(subject_id: str, rng: RngState, image_size: int = 32) -> np.ndarray:
    """主体原型：脸部轮廓、双眼、嘴与一处面颊标记五个高斯团块叠加后归一化，再叠加低频正弦纹理，取值 [0,1]

    轮廓与双眼位置、幅度对所有主体相同，主体差异集中在面颊标记、嘴的幅度与纹理上
    """
    gen = rng.spawn(f"subject:{subject_id}").generator
    yy, xx = _grid(image_size)
    image = _FACE_LEVEL * _blob(yy, xx, *_FACE_OVAL)
    for cy, cx in _EYE_ANCHORS:
        jy, jx = gen.uniform(-0.005, 0.005, size=2)
        image += _EYE_LEVEL * _blob(yy, xx, cy + jy, cx + jx, 0.05, 0.06)
    jy, jx = gen.uniform(-0.01, 0.01, size=2)
    image += gen.uniform(0.45, 0.5) * _blob(yy, xx, _MOUTH_ANCHOR[0] + jy, _MOUTH_ANCHOR[1] + jx, 0.04, 0.1)
    # 标记只落在眼部行带以下的面颊
    cy = gen.uniform(0.6, 0.9)
    cx = gen.uniform(0.12, 0.3) if gen.random() < 0.5 else gen.uniform(0.7, 0.88)
    image += gen.uniform(0.5, 0.6) * _blob(yy, xx, cy, cx, 0.04, 0.04)
    fy, fx = gen.uniform(1.0, 3.0, size=2)
    fx *= gen.choice([-1.0, 1.0])
    phase = gen.uniform(0.0, 2.0 * np.pi)
    texture = gen.uniform(0.04, 0.05) * np.sin(2.0 * np.pi * (fy * yy + fx * xx) + phase)
    image = 0.05 + 0.9 * _normalize(image) + texture
    return np.clip(image, 0.0, 1.0).astype(np.float32)[None]


def _subjects_rng(cfg: DataConfig) -> RngState:
    return RngState(cfg.seed).spawn("subjects")


def _finish(image: np.ndarray, rng: RngState, cfg: DataConfig) -> np.ndarray:
    """亚像素平移与小角度旋转抖动，加高斯噪声后截断到 [0,1]"""
    gen = rng.generator
    plane = image[0].astype(np.float64)
    plane = ndimage.shift(plane, gen.uniform(-0.25, 0.25, size=2), order=1, mode="nearest")
    plane = ndimage.rotate(plane, gen.uniform(-1.5, 1.5), reshape=False, order=1, mode="nearest")
    plane = plane + gen.normal(0.0, cfg.noise_sigma, size=plane.shape)
    return np.clip(plane, 0.0, 1.0).astype(np.float32)[None]


def gen_bonafide(subject_id: str, rng: RngState, cfg: Optional[DataConfig] = None,
                 sample_id: Optional[str] = None) -> LabeledSample:
    """真实样本：原型 + 抖动 + 噪声"""
    cfg = cfg or DataConfig()
    prototype = gen_subject_prototype(subject_id, _subjects_rng(cfg), cfg.image_size)
    return LabeledSample(sample_id=sample_id or f"bf_{subject_id}", image=_finish(prototype, rng, cfg),
                         label=BONAFIDE, subject_ids=(subject_id,))


def blend(p_a: np.ndarray, p_b: np.ndarray, beta: float) -> np.ndarray:
    return beta * p_a + (1.0 - beta) * p_b


def ghost_band_rows(image_size: int) -> Tuple[int, int]:
    """重影带覆盖的行区间 [start, stop)，对应眼部所在行"""
    center = _EYE_ANCHORS[0][0] * image_size
    half = 0.12 * image_size
    return max(0, int(np.floor(center - half))), min(image_size, int(np.ceil(center + half)))


def apply_ghosting(plane: np.ndarray, opacity: float, shift: int) -> np.ndarray:
    """在眼部行带内叠加水平平移副本，形成双边缘重影"""
    start, stop = ghost_band_rows(plane.shape[0])
    shifted = ndimage.shift(plane, (0, shift), order=0, mode="nearest")
    out = plane.copy()
    out[start:stop] = (1.0 - opacity) * plane[start:stop] + opacity * shifted[start:stop]
    return out


def apply_generative(plane: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    """轻微低通平滑，再叠加中频纹理"""
    size = plane.shape[0]
    yy, xx = _grid(size)
    smooth = ndimage.gaussian_filter(plane, sigma=0.8, mode="nearest")
    phase = gen.uniform(0.0, 2.0 * np.pi, size=2)
    texture = np.sin(2.0 * np.pi * 6.0 * yy + phase[0]) * np.sin(2.0 * np.pi * 6.0 * xx + phase[1])
    return smooth + 0.04 * texture


def gen_morph(id_a: str, id_b: str, technique: str, rng: RngState, cfg: Optional[DataConfig] = None,
              sample_id: Optional[str] = None) -> LabeledSample:
    """融合样本：β 凸组合两个原型，加技术相关伪影，再做与真实样本相同的抖动和噪声"""
    cfg = cfg or DataConfig()
    if id_a == id_b:
        raise DataError(f"融合样本需要两个不同主体: {id_a}")
    if technique not in TECHNIQUES:
        raise DataError(f"未知融合技术: {technique}")
    subjects = _subjects_rng(cfg)
    gen = rng.generator
    beta = gen.uniform(*cfg.beta_range)
    plane = blend(gen_subject_prototype(id_a, subjects, cfg.image_size),
                  gen_subject_prototype(id_b, subjects, cfg.image_size), beta)[0].astype(np.float64)
    if technique == "landmark":
        plane = apply_ghosting(plane, cfg.ghost_opacity, cfg.ghost_shift)
    elif technique == "generative":
        plane = apply_generative(plane, gen)
    image = _finish(np.clip(plane, 0.0, 1.0)[None], rng, cfg)
    return LabeledSample(sample_id=sample_id or f"mo_{id_a}_{id_b}_{technique}", image=image, label=MORPH,
                         subject_ids=(id_a, id_b), technique=technique)


def augment(sample: LabeledSample, rng: RngState, op: Optional[str] = None) -> LabeledSample:
    """随机（或指定）执行一种增强操作，标签与主体编号保持不变"""
    gen = rng.generator
    if op is None:
        op = AUGMENT_OPS[int(gen.integers(0, len(AUGMENT_OPS)))]
    plane = sample.image[0].astype(np.float64)
    size = plane.shape[0]
    if op == "flip":
        plane = plane[:, ::-1]
    elif op == "rotate":
        plane = ndimage.rotate(plane, gen.uniform(-10.0, 10.0), reshape=False, order=1, mode="nearest")
    elif op == "brightness":
        plane = plane + gen.uniform(-0.1, 0.1)
    elif op == "contrast":
        mean = plane.mean()
        plane = (plane - mean) * gen.uniform(0.9, 1.1) + mean
    elif op == "crop":
        crop = int(round(0.9 * size))
        top, left = (int(v) for v in gen.integers(0, size - crop + 1, size=2))
        window = plane[top:top + crop, left:left + crop]
        plane = ndimage.zoom(window, size / crop, order=1, mode="nearest", grid_mode=True)[:size, :size]
    else:
        raise ConfigError(f"未知增强操作: {op}")
    image = np.clip(plane, 0.0, 1.0).astype(np.float32)[None]
    return replace(sample, image=np.ascontiguousarray(image))


def augmentation_plan(samples: Sequence[LabeledSample], rng: RngState, events_per_sample: float = 0.5,
                      bonafide_weight: float = 2.0) -> np.ndarray:
    """按权重（真实样本权重为 bonafide_weight）有放回抽取增强事件，返回样本下标序列"""
    if not samples:
        return np.zeros(0, dtype=np.int64)
    weights = np.array([bonafide_weight if s.label == BONAFIDE else 1.0 for s in samples])
    n_events = int(round(events_per_sample * len(samples)))
    return rng.generator.choice(len(samples), size=n_events, replace=True, p=weights / weights.sum())


def augment_epoch(samples: Sequence[LabeledSample], rng: RngState, events_per_sample: float = 0.5,
                  bonafide_weight: float = 2.0) -> List[LabeledSample]:
    """按增强计划对本轮训练样本施加增强，同一样本被抽中多次则依次叠加"""
    plan = augmentation_plan(samples, rng.spawn("plan"), events_per_sample, bonafide_weight)
    out = list(samples)
    for k, index in enumerate(plan):
        out[index] = augment(out[index], rng.spawn(f"event{k}"))
    return out


def augmentation_counts(samples: Sequence[LabeledSample], plan: np.ndarray) -> Dict[str, float]:
    """人均增强次数（按类别），用于核对 2 倍策略"""
    counts = np.bincount(plan, minlength=len(samples))
    labels = np.array([s.label for s in samples])
    per_capita = {}
    for label, name in LABEL_NAMES.items():
        members = labels == label
        per_capita[name] = float(counts[members].mean()) if members.any() else 0.0
    return per_capita


def _build_split(split: str, subject_offset: int, cfg: DataConfig, rng: RngState) -> List[LabeledSample]:
    n = cfg.subjects[split]
    subjects = [subject_name(subject_offset + i) for i in range(n)]
    all_pairs = list(itertools.combinations(subjects, 2))
    n_pairs = cfg.pairs[split]
    if n_pairs > len(all_pairs):
        raise ConfigError(f"划分 {split} 需要 {n_pairs} 对主体, 但 {n} 个主体最多 {len(all_pairs)} 对")
    chosen = sorted(rng.spawn("pairs").generator.choice(len(all_pairs), size=n_pairs, replace=False))

    samples: List[LabeledSample] = []
    for subject in subjects:
        for k in range(cfg.bonafide_per_subject):
            sid = f"{split}_bf_{subject}_{k}"
            samples.append(gen_bonafide(subject, rng.spawn(sid), cfg, sid))
    for index in chosen:
        id_a, id_b = all_pairs[index]
        for technique in cfg.techniques[split]:
            for k in range(cfg.morphs_per_pair):
                sid = f"{split}_mo_{id_a}_{id_b}_{technique}_{k}"
                samples.append(gen_morph(id_a, id_b, technique, rng.spawn(sid), cfg, sid))
    for s in samples:
        s.split = split

    if split == "c":
        for s in samples:
            s.partition = "test"
    else:
        order = rng.spawn("partition").generator.permutation(len(samples))
        n_train = int(round((1.0 - cfg.val_fraction) * len(samples)))
        for rank, index in enumerate(order):
            samples[index].partition = "train" if rank < n_train else "val"
    return samples


def build_protocol(cfg: DataConfig, rng: Optional[RngState] = None) -> ProtocolSplits:
    """生成主体互不相交的三段式协议划分"""
    cfg.validate()
    rng = rng or RngState(cfg.seed).spawn("data")
    offset = 0
    built = {}
    for split in SPLITS:
        built[split] = _build_split(split, offset, cfg, rng.spawn(f"split_{split}"))
        offset += cfg.subjects[split]
        n_bf = sum(1 for s in built[split] if s.label == BONAFIDE)
        logger.info(f"划分 {split} 生成完成: 真实样本 {n_bf}, 融合样本 {len(built[split]) - n_bf}")
    return ProtocolSplits(**built)


def stack_images(samples: Sequence[LabeledSample]) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float32)


def stack_labels(samples: Sequence[LabeledSample]) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=np.int64)


def save_pgm(image: np.ndarray) -> bytes:
    """[1,H,W] 或 [H,W] 图像 -> 8 位 P5 PGM 字节"""
    plane = image[0] if image.ndim == 3 else image
    if plane.ndim != 2:
        raise DataError(f"PGM 只支持单通道图像: {image.shape}")
    pixels = np.round(np.clip(plane, 0.0, 1.0) * 255.0).astype(np.uint8)
    height, width = pixels.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def _next_token(data: bytes, pos: int) -> Tuple[bytes, int]:
    while pos < len(data):
        ch = data[pos:pos + 1]
        if ch == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PgmParseError("PGM 文件头不完整", start)
    return data[start:pos], pos


def load_pgm(data: bytes) -> np.ndarray:
    """P5 PGM 字节 -> [1,H,W] float32 图像"""
    magic, pos = _next_token(data, 0)
    if magic != b"P5":
        raise PgmParseError(f"不支持的 PGM 魔数: {magic!r}", 0)
    values = []
    for field_name in ("width", "height", "maxval"):
        token, pos = _next_token(data, pos)
        try:
            values.append(int(token))
        except ValueError:
            raise PgmParseError(f"PGM {field_name} 不是整数: {token!r}", pos - len(token))
    width, height, maxval = values
    if width < 1 or height < 1 or not 0 < maxval < 256:
        raise PgmParseError(f"PGM 尺寸或 maxval 非法: {width}x{height}, {maxval}", pos)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PgmParseError("PGM 文件头后缺少空白分隔符", pos)
    pos += 1
    expected = width * height
    if len(data) - pos < expected:
        raise PgmParseError(f"PGM 像素数据被截断: 需要 {expected} 字节, 实际 {len(data) - pos}", pos)
    pixels = np.frombuffer(data, dtype=np.uint8, count=expected, offset=pos).reshape(height, width)
    return (pixels.astype(np.float32) / float(maxval))[None]


class DatasetStore:
    """数据集目录读写；记录所有读取过的图像路径以便协议审计"""

    def __init__(self, root: str):
        self.logger = logging.getLogger(__name__)
        self.root = root
        self.opened: List[str] = []

    @property
    def manifest_path(self) -> str:
        return os.path.join(self.root, "manifest.csv")

    @staticmethod
    def relative_path(sample: LabeledSample) -> str:
        return f"ds_{sample.split}/{sample.partition}/{sample.sample_id}.pgm"

    def write_protocol(self, splits: ProtocolSplits) -> pd.DataFrame:
        """写出全部 PGM 与清单 CSV"""
        rows = []
        for split in SPLITS:
            for sample in splits.split(split):
                rel = self.relative_path(sample)
                path = os.path.join(self.root, rel)
                os.makedirs(os.path.dirname(path), exist_ok=True)
                with open(path, "wb") as f:
                    f.write(save_pgm(sample.image))
                subject_b = sample.subject_ids[1] if len(sample.subject_ids) > 1 else ""
                rows.append([rel, LABEL_NAMES[sample.label], sample.subject_ids[0], subject_b,
                             sample.technique, split])
        manifest = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
        manifest.to_csv(self.manifest_path, index=False, lineterminator="\n")
        self.logger.info(f"数据集已写入 {self.root}: 共 {len(manifest)} 个样本")
        return manifest

    def read_manifest(self) -> pd.DataFrame:
        if not os.path.exists(self.manifest_path):
            raise DataError(f"数据清单不存在: {self.manifest_path}")
        return pd.read_csv(self.manifest_path, dtype=str, keep_default_na=False)

    def _sample_from_row(self, row: pd.Series) -> LabeledSample:
        path = os.path.join(self.root, row["path"])
        with open(path, "rb") as f:
            image = load_pgm(f.read())
        self.opened.append(row["path"])
        parts = row["path"].split("/")
        subjects = (row["subject_a"],) if row["label"] == "bonafide" else (row["subject_a"], row["subject_b"])
        return LabeledSample(sample_id=os.path.splitext(parts[-1])[0], image=image,
                             label=MORPH if row["label"] == "morph" else BONAFIDE, subject_ids=subjects,
                             technique=row["technique"], split=row["split"], partition=parts[-2])

    def load_split(self, split: str, partitions: Optional[Iterable[str]] = None,
                   allow_eval: bool = True) -> List[LabeledSample]:
        """读取一个划分；allow_eval=False 时拒绝读取 DS-C"""
        if split not in SPLITS:
            raise DataError(f"未知划分: {split}")
        if split == "c" and not allow_eval:
            raise ProtocolError("训练流程不允许读取评测划分 DS-C")
        manifest = self.read_manifest()
        rows = manifest[manifest["split"] == split]
        if partitions is not None:
            wanted = set(partitions)
            rows = rows[rows["path"].map(lambda p: p.split("/")[-2] in wanted)]
        if rows.empty:
            raise DataError(f"划分 {split} 在 {self.root} 中没有样本")
        return [self._sample_from_row(row) for _, row in rows.iterrows()]

    def load_image(self, path: str) -> np.ndarray:
        with open(path, "rb") as f:
            image = load_pgm(f.read())
        self.opened.append(os.path.relpath(path, self.root) if os.path.isabs(path) else path)
        return image

    def write_access_log(self, path: str) -> str:
        """写出本进程读取过的数据文件清单（files_read.txt）"""
        with open(path, "w", encoding="utf-8") as f:
            f.writelines(f"{p}\n" for p in self.opened)
        return path

    def audit(self, out_dir: Optional[str] = None) -> Dict[str, object]:
        """协议审计：主体编号不相交、样本字节不跨划分、训练未读取 DS-C"""
        manifest = self.read_manifest()
        pools = {}
        for split in SPLITS:
            rows = manifest[manifest["split"] == split]
            pools[split] = (set(rows["subject_a"]) | set(rows["subject_b"])) - {""}
        overlaps = {f"{x}&{y}": sorted(pools[x] & pools[y]) for x, y in itertools.combinations(SPLITS, 2)}

        owners: Dict[str, set] = {}
        for _, row in manifest.iterrows():
            with open(os.path.join(self.root, row["path"]), "rb") as f:
                digest = hashlib.sha256(f.read()).hexdigest()
            owners.setdefault(digest, set()).add(row["split"])
        shared_bytes = sum(1 for splits in owners.values() if len(splits) > 1)

        eval_reads = []
        if out_dir is not None:
            for directory, _, files in os.walk(out_dir):
                if "files_read.txt" not in files:
                    continue
                with open(os.path.join(directory, "files_read.txt"), encoding="utf-8") as f:
                    eval_reads += [line.strip() for line in f if line.startswith("ds_c/")]

        report = {
            "subject_overlaps": {k: v for k, v in overlaps.items() if v},
            "shared_sample_bytes": shared_bytes,
            "eval_reads_in_training": eval_reads,
        }
        report["passed"] = not report["subject_overlaps"] and shared_bytes == 0 and not eval_reads
        level = logging.INFO if report["passed"] else logging.ERROR
        self.logger.log(level, f"协议审计{'通过' if report['passed'] else '未通过'}: {report}")
        return report
