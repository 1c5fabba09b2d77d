"""
合成数据测试
主体原型、真实/融合样本、增强策略、协议划分与 PGM 读写
"""
import itertools

import numpy as np
import pytest

from data_synth import (AUGMENT_OPS, BONAFIDE, MORPH, TECHNIQUES, DataConfig, DatasetStore, augment,
                        augment_epoch, augmentation_counts, augmentation_plan, blend, build_protocol, gen_bonafide,
                        gen_morph, gen_subject_prototype, ghost_band_rows, load_pgm, save_pgm, subject_name)
from errors import ConfigError, DataError, PgmParseError, ProtocolError
from tensor_nn import RngState


@pytest.fixture
def subjects_rng():
    return RngState(7).spawn("subjects")


@pytest.fixture
def protocol_cfg():
    return DataConfig(image_size=16, subjects={"a": 10, "b": 10, "c": 10}, pairs={"a": 20, "b": 20, "c": 20},
                      bonafide_per_subject=2, seed=7)


class TestSubjectPrototype:
    """主体原型"""

    def test_deterministic(self, subjects_rng):
        assert np.array_equal(gen_subject_prototype("s0001", subjects_rng), gen_subject_prototype("s0001", subjects_rng))

    def test_normalized(self, subjects_rng):
        image = gen_subject_prototype("s0002", subjects_rng)
        assert image.shape == (1, 32, 32)
        assert image.min() >= 0.0 and image.max() <= 1.0

    def test_distinct_subjects_differ(self, subjects_rng):
        ids = [subject_name(i) for i in range(15)]
        pairs = list(itertools.combinations(ids, 2))[:100]
        diffs = [np.abs(gen_subject_prototype(a, subjects_rng) - gen_subject_prototype(b, subjects_rng)).mean()
                 for a, b in pairs]
        assert min(diffs) > 0.02


class TestGenBonafide:
    def test_contract(self):
        sample = gen_bonafide("s0003", RngState(7).spawn("x"), DataConfig(seed=7))
        assert sample.label == BONAFIDE
        assert sample.subject_ids == ("s0003",)
        assert sample.image.min() >= 0.0

    def test_same_subject_samples_correlate(self):
        cfg = DataConfig(seed=7)
        first = gen_bonafide("s0004", RngState(7).spawn("one"), cfg).image.ravel()
        second = gen_bonafide("s0004", RngState(7).spawn("two"), cfg).image.ravel()
        assert not np.array_equal(first, second)
        assert np.corrcoef(first, second)[0, 1] > 0.9


class TestGenMorph:
    """融合样本"""

    def test_contract(self):
        sample = gen_morph("s0001", "s0002", "landmark", RngState(7).spawn("m"), DataConfig(seed=7))
        assert sample.label == MORPH
        assert sample.subject_ids == ("s0001", "s0002")
        assert sample.technique == "landmark"

    def test_identical_subjects_rejected(self):
        with pytest.raises(DataError):
            gen_morph("s0001", "s0001", "landmark", RngState(7))

    def test_unknown_technique_rejected(self):
        with pytest.raises(DataError):
            gen_morph("s0001", "s0002", "warp", RngState(7))

    def test_half_blend_is_convex(self, subjects_rng):
        p_a = gen_subject_prototype("s0005", subjects_rng)
        p_b = gen_subject_prototype("s0006", subjects_rng)
        mixed = blend(p_a, p_b, 0.5)
        assert np.all(mixed >= np.minimum(p_a, p_b) - 1e-7)
        assert np.all(mixed <= np.maximum(p_a, p_b) + 1e-7)

    def test_ghosting_confined_to_eye_band(self):
        cfg = DataConfig(seed=7)
        ghosted = gen_morph("s0001", "s0002", "landmark", RngState(3), cfg).image[0]
        plain = gen_morph("s0001", "s0002", "blend-only", RngState(3), cfg).image[0]
        start, stop = ghost_band_rows(cfg.image_size)
        outside = np.r_[0:max(0, start - 3), min(cfg.image_size, stop + 3):cfg.image_size]
        assert np.abs(ghosted - plain)[outside].max() < 1e-6
        assert np.abs(ghosted - plain)[start:stop].max() > 0.0

    @staticmethod
    def _centroid_accuracy(bona, morph):
        """两折最近类中心分类精度：一半样本求类中心，另一半分类，再交换"""
        x = np.concatenate([bona, morph]).reshape(len(bona) + len(morph), -1)
        y = np.r_[np.zeros(len(bona)), np.ones(len(morph))]
        fold = np.arange(len(x)) % 2
        correct = 0
        for k in (0, 1):
            fit, held = fold != k, fold == k
            centers = np.stack([x[fit & (y == c)].mean(axis=0) for c in (0, 1)])
            distance = ((x[held][:, None, :] - centers[None]) ** 2).sum(axis=-1)
            correct += int((distance.argmin(axis=1) == y[held]).sum())
        return correct / len(x)

    def test_ghosting_separable_by_pixel_centroids(self):
        cfg = DataConfig(seed=7)
        rng = RngState(7).spawn("centroid")
        ids = [subject_name(i) for i in range(20)]
        pairs = list(itertools.combinations(ids, 2))[:100]
        bona = [gen_bonafide(ids[k % 20], rng.spawn(f"bf{k}"), cfg).image for k in range(100)]
        landmark = [gen_morph(a, b, "landmark", rng.spawn(f"m{k}"), cfg).image for k, (a, b) in enumerate(pairs)]
        plain = [gen_morph(a, b, "blend-only", rng.spawn(f"m{k}"), cfg).image for k, (a, b) in enumerate(pairs)]
        ghosted_accuracy = self._centroid_accuracy(bona, landmark)
        assert ghosted_accuracy >= 0.8
        assert self._centroid_accuracy(bona, plain) <= ghosted_accuracy


class TestAugment:
    """数据增强"""

    @pytest.fixture
    def sample(self):
        return gen_morph("s0001", "s0002", "generative", RngState(7).spawn("aug"), DataConfig(seed=7))

    @pytest.mark.parametrize("op", AUGMENT_OPS)
    def test_label_and_subjects_preserved(self, sample, op):
        out = augment(sample, RngState(1), op)
        assert out.label == sample.label
        assert out.subject_ids == sample.subject_ids
        assert out.image.shape == sample.image.shape
        assert 0.0 <= out.image.min() and out.image.max() <= 1.0

    def test_flip_is_involution(self, sample):
        twice = augment(augment(sample, RngState(1), "flip"), RngState(2), "flip")
        assert np.allclose(twice.image, sample.image, atol=1e-6)

    def test_brightness_shift_bounded(self, sample):
        out = augment(sample, RngState(4), "brightness")
        assert abs(out.image.mean() - sample.image.mean()) <= 0.1 + 1e-6

    def test_unknown_op(self, sample):
        with pytest.raises(ConfigError):
            augment(sample, RngState(1), "shear")


class TestAugmentationPlan:
    """真实样本两倍增强频率"""

    def test_bonafide_events_twice_morph_per_capita(self, protocol_cfg):
        samples = build_protocol(protocol_cfg).partition("a", "train")
        plan = augmentation_plan(samples, RngState(7), events_per_sample=100.0)
        counts = augmentation_counts(samples, plan)
        assert 1.8 <= counts["bonafide"] / counts["morph"] <= 2.2

    def test_empty_input(self):
        assert augmentation_plan([], RngState(7)).size == 0

    def test_epoch_keeps_order_and_labels(self, protocol_cfg):
        samples = build_protocol(protocol_cfg).partition("b", "train")
        out = augment_epoch(samples, RngState(7), 0.5)
        assert [s.sample_id for s in out] == [s.sample_id for s in samples]
        assert [s.label for s in out] == [s.label for s in samples]
        assert any(not np.array_equal(a.image, b.image) for a, b in zip(out, samples))


class TestBuildProtocol:
    """三段式协议划分"""

    def test_counts(self, protocol_cfg):
        splits = build_protocol(protocol_cfg)
        for name in ("a", "b", "c"):
            labels = [s.label for s in splits.split(name)]
            assert labels.count(BONAFIDE) == 20
            assert labels.count(MORPH) == 60

    def test_subject_pools_disjoint(self, protocol_cfg):
        pools = build_protocol(protocol_cfg).subject_pools()
        assert not pools["a"] & pools["b"] and not pools["a"] & pools["c"] and not pools["b"] & pools["c"]

    def test_partitions(self, protocol_cfg):
        splits = build_protocol(protocol_cfg)
        assert {s.partition for s in splits.c} == {"test"}
        train, val = splits.partition("a", "train"), splits.partition("a", "val")
        assert len(train) == 64 and len(val) == 16

    def test_every_technique_present(self, protocol_cfg):
        techniques = {s.technique for s in build_protocol(protocol_cfg).c if s.label == MORPH}
        assert techniques == set(TECHNIQUES)

    def test_deterministic(self, protocol_cfg):
        first, second = build_protocol(protocol_cfg), build_protocol(protocol_cfg)
        for a, b in zip(first.a + first.c, second.a + second.c):
            assert a.sample_id == b.sample_id
            assert save_pgm(a.image) == save_pgm(b.image)

    def test_too_many_pairs(self):
        cfg = DataConfig(image_size=16, subjects={"a": 3, "b": 3, "c": 3}, pairs={"a": 4, "b": 1, "c": 1})
        with pytest.raises(ConfigError):
            build_protocol(cfg)

    def test_too_few_subjects(self):
        with pytest.raises(ConfigError):
            DataConfig(subjects={"a": 1, "b": 5, "c": 5}).validate()


class TestPgm:
    """PGM 读写"""

    def test_zero_image_payload(self):
        data = save_pgm(np.zeros((1, 4, 3), dtype=np.float32))
        assert data.startswith(b"P5\n3 4\n255\n")
        assert data[-12:] == bytes(12)

    def test_round_trip_quantization(self):
        image = np.random.default_rng(0).random((1, 9, 7)).astype(np.float32)
        restored = load_pgm(save_pgm(image))
        assert restored.shape == (1, 9, 7)
        assert np.abs(restored - image).max() <= 1 / 255 + 1e-7

    def test_header_comments(self):
        data = b"P5\n# comment line\n2 1\n255\n" + bytes([0, 255])
        assert load_pgm(data)[0].tolist() == [[0.0, 1.0]]

    def test_truncated_payload(self):
        data = save_pgm(np.ones((1, 4, 4), dtype=np.float32))
        with pytest.raises(PgmParseError) as info:
            load_pgm(data[:-1])
        assert info.value.offset == len(b"P5\n4 4\n255\n")

    def test_bad_magic(self):
        with pytest.raises(PgmParseError) as info:
            load_pgm(b"P2\n1 1\n255\n0")
        assert info.value.offset == 0

    def test_non_integer_width(self):
        with pytest.raises(PgmParseError) as info:
            load_pgm(b"P5\nx 1\n255\n\x00")
        assert info.value.offset == 3


class TestDatasetStore:
    """数据集目录与协议审计"""

    @pytest.fixture
    def store(self, small_data_cfg, tmp_path):
        store = DatasetStore(str(tmp_path / "data"))
        store.write_protocol(build_protocol(small_data_cfg))
        return store

    def test_manifest_columns(self, store):
        manifest = store.read_manifest()
        assert list(manifest.columns) == ["path", "label", "subject_a", "subject_b", "technique", "split"]
        assert set(manifest["split"]) == {"a", "b", "c"}

    def test_load_partition(self, store):
        train = store.load_split("a", ["train"])
        assert train and all(s.partition == "train" and s.split == "a" for s in train)
        assert all(path.startswith("ds_a/train/") for path in store.opened)

    def test_training_may_not_read_eval_split(self, store):
        with pytest.raises(ProtocolError):
            store.load_split("c", allow_eval=False)

    def test_round_trip_matches_quantized_images(self, small_data_cfg, store):
        original = {s.sample_id: s for s in build_protocol(small_data_cfg).b}
        for sample in store.load_split("b"):
            expected = load_pgm(save_pgm(original[sample.sample_id].image))
            assert np.array_equal(sample.image, expected)
            assert sample.subject_ids == original[sample.sample_id].subject_ids

    def test_audit_passes_on_fresh_protocol(self, store):
        assert store.audit()["passed"]

    def test_audit_flags_eval_reads(self, store, tmp_path):
        run = tmp_path / "runs"
        run.mkdir()
        store.load_split("c")
        store.write_access_log(str(run / "files_read.txt"))
        report = store.audit(str(run))
        assert not report["passed"]
        assert report["eval_reads_in_training"]

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            DatasetStore(str(tmp_path)).read_manifest()
