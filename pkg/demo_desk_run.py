"""
桌面规模完整流程演示
在临时目录中依次执行 生成 → 教师训练 → 学生蒸馏 → 评测 → 解释 → 审计
"""
import os
import sys
import tempfile

from config import build_run_config
from main import setup_logging
from pipeline import STUDENT_CKPT, pipeline_manager


def demo_config(epochs: int = 10):
    """缩小的演示配置"""
    return build_run_config({
        'distill': {'epochs': epochs},
        'data': {
            'subjects': {'a': 12, 'b': 12, 'c': 12},
            'pairs': {'a': 20, 'b': 20, 'c': 20},
            'bonafide_per_subject': 3
        },
        'lime': {'num_samples': 300}
    })


def run_demo(workdir: str) -> dict:
    """执行全流程，返回各阶段关键结果"""
    cfg = demo_config()
    data_dir = os.path.join(workdir, 'data')
    out_dir = os.path.join(workdir, 'runs')
    pipeline_manager.add_update_callback(lambda message: print(f"[进度] {message}"))

    counts = pipeline_manager.generate(cfg, data_dir)
    print("各划分样本数:")
    print(counts)

    teacher_report = pipeline_manager.train_teacher(cfg, data_dir, out_dir)
    student_report = pipeline_manager.train_student(cfg, data_dir, out_dir)
    summary, table = pipeline_manager.evaluate(cfg, data_dir, os.path.join(out_dir, STUDENT_CKPT), 'c', out_dir)
    print(f"DS-C D-EER: {summary['d_eer']:.4f}, BPCER@5%: {summary['bpcer@5']:.4f}")
    print(table.to_string(index=False))

    audit_report = pipeline_manager.audit(data_dir, out_dir)
    morph_path = os.path.join(data_dir, 'ds_c', 'test')
    first_morph = sorted(name for name in os.listdir(morph_path) if '_mo_' in name)[0]
    _, top = pipeline_manager.explain(cfg, os.path.join(out_dir, STUDENT_CKPT),
                                      os.path.join(morph_path, first_morph), out_dir)
    print(f"解释样本 {first_morph} 的前几个区域: {top[:3]}")

    return {
        'teacher_epochs': len(teacher_report.records),
        'student_epochs': len(student_report.records),
        'summary': summary,
        'audit_passed': audit_report['passed']
    }


def main():
    setup_logging()
    with tempfile.TemporaryDirectory() as workdir:
        result = run_demo(workdir)
    print(f"演示完成: {result}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
