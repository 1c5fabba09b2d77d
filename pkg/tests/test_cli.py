"""
命令行测试
小尺寸配置下跑通各子命令；默认配置的端到端与消融实验标记为 slow
"""
import glob
import json
import os

import pandas as pd
import pytest

from cli import EXIT_IO, EXIT_OK, EXIT_USAGE, main
from metrics import mad_metrics
from pipeline import MERGED_CKPT, STUDENT_CKPT, TEACHER_CKPT

SMALL_RUN = {
    'vit': {'image_size': 16, 'patch_size': 8, 'dim': 16, 'depth': 1, 'heads': 2},
    'lora': {'rank': 2, 'alpha': 4.0},
    'teacher': {'channels': [4, 8], 'blocks': [1, 1], 'embed_dim': 8},
    'distill': {'epochs': 2, 'batch_size': 16, 'teacher_lr': 1e-3, 'student_lr': 1e-3, 'min_lr': 1e-4},
    'data': {'image_size': 16, 'subjects': {'a': 10, 'b': 10, 'c': 10}, 'pairs': {'a': 10, 'b': 10, 'c': 10},
             'bonafide_per_subject': 2, 'seed': 7},
    'lime': {'grid': 4, 'num_samples': 100, 'top_k': 3}
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL_RUN), encoding='utf-8')
    return str(path)


@pytest.fixture
def dirs(tmp_path):
    return str(tmp_path / "data"), str(tmp_path / "runs")


def _common(config, data, out):
    return ["--config", config, "--data", data, "--out", out]


class TestGen:
    """数据集生成"""

    def test_deterministic_manifest(self, small_config, tmp_path):
        first, second = str(tmp_path / "one"), str(tmp_path / "two")
        assert main(["gen", "--config", small_config, "--data", first]) == EXIT_OK
        assert main(["gen", "--config", small_config, "--data", second]) == EXIT_OK
        with open(os.path.join(first, "manifest.csv"), "rb") as a, open(os.path.join(second, "manifest.csv"), "rb") as b:
            assert a.read() == b.read()

    def test_bonafide_rows_per_split(self, small_config, dirs, capsys):
        data, _ = dirs
        assert main(["gen", "--config", small_config, "--data", data]) == EXIT_OK
        manifest = pd.read_csv(os.path.join(data, "manifest.csv"))
        counts = manifest[manifest["label"] == "bonafide"].groupby("split").size()
        assert counts.to_dict() == {"a": 20, "b": 20, "c": 20}
        assert "DS-A: bonafide=20 morph=30" in capsys.readouterr().out


class TestExitCodes:
    """退出码约定"""

    def test_student_without_teacher(self, small_config, dirs):
        data, out = dirs
        assert main(["gen", "--config", small_config, "--data", data]) == EXIT_OK
        assert main(["train-student", *_common(small_config, data, out)]) == EXIT_IO

    def test_usage_error(self):
        with pytest.raises(SystemExit) as info:
            main(["no-such-command"])
        assert info.value.code == EXIT_USAGE

    def test_unknown_config_key(self, tmp_path, dirs):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({'distill': {'learning_rate': 0.1}}), encoding='utf-8')
        data, _ = dirs
        assert main(["gen", "--config", str(path), "--data", data]) == EXIT_USAGE

    def test_missing_dataset(self, small_config, dirs):
        data, out = dirs
        assert main(["train-teacher", *_common(small_config, data, out)]) == EXIT_USAGE

    def test_audit_fails_on_eval_reads(self, small_config, dirs):
        data, out = dirs
        assert main(["gen", "--config", small_config, "--data", data]) == EXIT_OK
        os.makedirs(out)
        with open(os.path.join(out, "files_read.txt"), "w", encoding="utf-8") as f:
            f.write("ds_c/test/x.pgm\n")
        assert main(["audit", "--data", data, "--out", out]) == EXIT_USAGE


class TestWorkflow:
    """gen → train-teacher → train-student → eval / explain / compare / audit"""

    @pytest.fixture
    def trained(self, small_config, dirs):
        data, out = dirs
        assert main(["gen", "--config", small_config, "--data", data]) == EXIT_OK
        assert main(["train-teacher", *_common(small_config, data, out)]) == EXIT_OK
        assert main(["train-student", *_common(small_config, data, out)]) == EXIT_OK
        return small_config, data, out

    def test_artifacts(self, trained):
        _, _, out = trained
        for name in (TEACHER_CKPT, STUDENT_CKPT, MERGED_CKPT, "teacher_report.csv", "student_report.csv",
                     "files_read.txt", "run_config.json"):
            assert os.path.exists(os.path.join(out, name)), name
        with open(os.path.join(out, "files_read.txt"), encoding="utf-8") as f:
            reads = [line.strip() for line in f]
        assert reads == sorted(reads)
        assert not any(p.startswith("ds_c/") for p in reads)

    def test_eval(self, trained, capsys):
        config, data, out = trained
        assert main(["eval", *_common(config, data, out)]) == EXIT_OK
        printed = capsys.readouterr().out
        assert "D-EER:" in printed and "BPCER@MACER=5%:" in printed
        scores = pd.read_csv(os.path.join(out, "scores.csv"))
        assert len(scores) == 20 + 30
        assert scores["score"].between(0.0, 1.0).all()
        for name in ("det.csv", "per_technique.csv"):
            assert os.path.exists(os.path.join(out, name))

    def test_eval_merged_checkpoint(self, trained):
        config, data, out = trained
        merged = os.path.join(out, MERGED_CKPT)
        assert main(["eval", *_common(config, data, out), "--checkpoint", merged]) == EXIT_OK

    def test_explain(self, trained):
        config, data, out = trained
        image = sorted(glob.glob(os.path.join(data, "ds_c", "test", "*.pgm")))[0]
        assert main(["explain", *_common(config, data, out), "--image", image]) == EXIT_OK
        attribution = pd.read_csv(os.path.join(out, "attribution.csv"))
        assert len(attribution) == 16
        with open(os.path.join(out, "overlay.pgm"), "rb") as f:
            assert f.read().startswith(b"P5\n16 16\n255\n")

    def test_compare(self, trained):
        config, data, out = trained
        assert main(["compare", *_common(config, data, out)]) == EXIT_OK
        table = pd.read_csv(os.path.join(out, "comparison.csv"))
        assert list(table["model"]) == ["teacher", "student"]

    def test_audit_passes(self, trained):
        _, data, out = trained
        assert main(["audit", "--data", data, "--out", out]) == EXIT_OK


@pytest.mark.slow
class TestDefaultConfiguration:
    """默认配置（每个划分 20 个主体）"""

    def test_end_to_end_d_eer(self, dirs):
        data, out = dirs
        for command in ("gen", "train-teacher", "train-student", "eval"):
            assert main([command, "--data", data, "--out", out, "--seed", "42"]) == EXIT_OK
        records = mad_metrics.load_scores(os.path.join(out, "scores.csv"))
        eer, _ = mad_metrics.d_eer(records)
        assert len(records) == 20 * 8 + 80 * 3
        assert eer <= 0.10
        for name in ("teacher_report.csv", "student_report.csv"):
            report = pd.read_csv(os.path.join(out, name), comment="#").set_index("epoch")
            best = report["val_loss"].idxmin()
            assert report.loc[best, "val_loss"] < report.loc[1, "val_loss"], name

    def test_ablation_table(self, dirs):
        data, out = dirs
        for command in ("gen", "train-teacher"):
            assert main([command, "--data", data, "--out", out, "--seed", "42"]) == EXIT_OK
        assert main(["ablate", "--data", data, "--out", out, "--seeds", "0", "1", "2",
                     "--limit-subjects", "8"]) == EXIT_OK
        table = pd.read_csv(os.path.join(out, "ablation.csv"))
        assert len(table) == 6
        assert set(table["lam"]) == {0.5, 0.0}
        assert table["d_eer"].between(0.0, 1.0).all()


class TestDeterminism:
    """同配置同种子重跑，检查点与归因字节一致"""

    def test_rerun_is_byte_identical(self, small_config, tmp_path):
        data = str(tmp_path / "data")
        assert main(["gen", "--config", small_config, "--data", data]) == EXIT_OK
        image = sorted(glob.glob(os.path.join(data, "ds_c", "test", "*.pgm")))[0]
        outputs = []
        for name in ("first", "second"):
            out = str(tmp_path / name)
            for command in ("train-teacher", "train-student"):
                assert main([command, *_common(small_config, data, out)]) == EXIT_OK
            assert main(["explain", *_common(small_config, data, out), "--image", image]) == EXIT_OK
            outputs.append(out)
        for artifact in (TEACHER_CKPT, STUDENT_CKPT, MERGED_CKPT, "attribution.csv", "overlay.pgm", "files_read.txt"):
            with open(os.path.join(outputs[0], artifact), "rb") as a, open(os.path.join(outputs[1], artifact), "rb") as b:
                assert a.read() == b.read(), artifact
