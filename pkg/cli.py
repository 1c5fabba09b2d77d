"""
命令行接口模块
子命令: gen / train-teacher / train-student / eval / explain / compare / ablate / audit
退出码: 0 成功, 1 用法或配置/数据错误, 2 训练异常, 3 I/O 或缺少前置产物
"""
import argparse
import logging
import os
import sys
from typing import List, Optional

from config import DATA_DIR, load_run_config
from errors import DependencyError, DmadError, TrainingAnomaly
from pipeline import STUDENT_CKPT, pipeline_manager

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ANOMALY = 2
EXIT_IO = 3


class _Parser(argparse.ArgumentParser):
    """用法错误统一返回退出码 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: 错误: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON 运行配置文件")
    common.add_argument("--data", default=DATA_DIR, help="数据集目录")
    common.add_argument("--out", default=None, help="输出目录（缺省取配置中的 output_dir）")
    common.add_argument("--seed", type=int, default=None, help="覆盖 distill.seed 与 data.seed")
    common.add_argument("--verbose", action="store_true", help="输出 DEBUG 日志")

    parser = _Parser(prog="dmad", description="单图融合攻击检测：教师-适配器-LoRA 学生蒸馏流程")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen", parents=[common], help="生成三段式合成数据集")
    sub.add_parser("train-teacher", parents=[common], help="在 DS-A 上训练教师网络")
    sub.add_parser("train-student", parents=[common], help="在 DS-B 上蒸馏学生网络")

    evaluate = sub.add_parser("eval", parents=[common], help="评测检查点")
    evaluate.add_argument("--checkpoint", default=None, help="检查点路径（缺省为输出目录中的学生检查点）")
    evaluate.add_argument("--split", choices=["a", "b", "c"], default="c")

    explain = sub.add_parser("explain", parents=[common], help="生成区域归因与叠加图")
    explain.add_argument("--checkpoint", default=None)
    explain.add_argument("--image", required=True, help="待解释的 PGM 图像")
    explain.add_argument("--topk", type=int, default=None)

    sub.add_parser("compare", parents=[common], help="教师与学生在 DS-C 上的对比")

    ablate = sub.add_parser("ablate", parents=[common], help="蒸馏收益消融")
    ablate.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ablate.add_argument("--limit-subjects", type=int, default=8)

    sub.add_parser("audit", parents=[common], help="协议审计")
    return parser


def _print_frame(title: str, frame) -> None:
    print(title)
    print(frame.to_string(index=False))


def run(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args.seed)
    out_dir = args.out or cfg.output_dir
    command = args.command

    if command == "gen":
        counts = pipeline_manager.generate(cfg, args.data)
        for split, row in counts.iterrows():
            print(f"DS-{split.upper()}: bonafide={int(row.get('bonafide', 0))} morph={int(row.get('morph', 0))}")
        return EXIT_OK

    if command in ("train-teacher", "train-student"):
        train = pipeline_manager.train_teacher if command == "train-teacher" else pipeline_manager.train_student
        report = train(cfg, args.data, out_dir)
        print(f"epochs={len(report.records)} best_epoch={report.best_epoch} "
              f"best_val_loss={report.best_val_loss:.6f} stop={report.stop_reason}")
        if report.first_epoch_pathology:
            logging.getLogger(__name__).warning("早停且最优轮次为第 1 轮, 训练未取得进展")
            return EXIT_ANOMALY
        return EXIT_OK

    if command == "eval":
        checkpoint = args.checkpoint or os.path.join(out_dir, STUDENT_CKPT)
        summary, table = pipeline_manager.evaluate(cfg, args.data, checkpoint, args.split, out_dir)
        print(f"D-EER: {summary['d_eer']:.6f}")
        print(f"BPCER@MACER=5%: {summary['bpcer@5']:.6f}")
        print(f"BPCER@MACER=10%: {summary['bpcer@10']:.6f}")
        _print_frame("per-technique:", table)
        return EXIT_OK

    if command == "explain":
        checkpoint = args.checkpoint or os.path.join(out_dir, STUDENT_CKPT)
        _, top = pipeline_manager.explain(cfg, checkpoint, args.image, out_dir, args.topk)
        for row, col, weight in top:
            print(f"region ({row},{col}): {weight:.6f}")
        return EXIT_OK

    if command == "compare":
        _print_frame("comparison:", pipeline_manager.compare(cfg, args.data, out_dir))
        return EXIT_OK

    if command == "ablate":
        table = pipeline_manager.ablate(cfg, args.data, out_dir, args.seeds, args.limit_subjects)
        medians = table.groupby("lam")["d_eer"].median()
        for lam, value in medians.items():
            print(f"lambda={lam}: median D-EER {value:.6f}")
        return EXIT_OK

    report = pipeline_manager.audit(args.data, out_dir if os.path.isdir(out_dir) else None)
    print(f"audit passed={report['passed']} subject_overlaps={report['subject_overlaps']} "
          f"shared_sample_bytes={report['shared_sample_bytes']} "
          f"eval_reads_in_training={len(report['eval_reads_in_training'])}")
    return EXIT_OK if report["passed"] else EXIT_USAGE


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    try:
        return run(args)
    except TrainingAnomaly as e:
        print(f"训练异常: {e}", file=sys.stderr)
        return EXIT_ANOMALY
    except DependencyError as e:
        print(f"缺少前置产物: {e}", file=sys.stderr)
        return EXIT_IO
    except DmadError as e:
        print(f"错误: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"I/O 错误: {e}", file=sys.stderr)
        return EXIT_IO
