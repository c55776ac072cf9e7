"""Command-line interface: prepare, pretrain, distill, finetune, evaluate, compare."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment as X
from .checkpoint import CheckpointError
from .encoder import PRESETS, parse_kv
from .pretrain import VocabMismatchError
from .treebank import TreeParseError

log = logging.getLogger("sstbert")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes"):
        return True
    if s.lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--scale", choices=("tiny", "full"))
    p.add_argument("--data", dest="data_dir", help="directory with train.txt/dev.txt/test.txt")
    p.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--vocab-size", dest="vocab_max_size", type=int)
    p.add_argument("--min-freq", dest="min_freq", type=int)
    p.add_argument("--dropout", dest="dropout_p", type=float)
    p.add_argument("--granularity", type=int, choices=(2, 5))
    p.add_argument("--mode", choices=("root", "all"))


def _pretrain_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", help="one sentence per line, blank line between documents")
    p.add_argument("--steps", dest="pretrain_steps", type=int)
    p.add_argument("--batch-size", dest="pretrain_batch_size", type=int)
    p.add_argument("--lr", dest="pretrain_lr", type=float)
    p.add_argument("--mask-rate", dest="mask_rate", type=float)
    p.add_argument("--nsp", choices=("auto", "true", "false"))
    p.add_argument("--dynamic-masking", dest="dynamic_masking", choices=("auto", "true", "false"))
    p.add_argument("--doc-size", dest="doc_size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sstbert", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="parse SST trees and write a dataset manifest")
    _common(p)
    _model_flags(p)

    p = sub.add_parser("pretrain", help="masked-LM (+NSP) pretraining")
    _common(p)
    _model_flags(p)
    _pretrain_flags(p)

    p = sub.add_parser("distill", help="train a half-depth student against a teacher checkpoint")
    _common(p)
    _model_flags(p)
    _pretrain_flags(p)
    p.add_argument("--teacher", help="teacher checkpoint (.mbrt)")
    p.add_argument("--temperature", type=float)
    p.add_argument("--alpha", type=float)

    p = sub.add_parser("finetune", help="fine-tune a classifier on SST")
    _common(p)
    _model_flags(p)
    p.add_argument("--init", help="start from this checkpoint instead of random weights")
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", dest="early_stop_patience", type=int)
    p.add_argument("--metric", dest="early_stop_metric", choices=("dev_loss", "dev_accuracy"))
    p.add_argument("--early-stopping", dest="early_stopping", type=_bool)
    p.add_argument("--monitor", choices=("dev", "test"))
    p.add_argument("--lr-schedule", dest="lr_schedule", choices=("constant", "linear_decay"))
    p.add_argument("--grad-accum", dest="grad_accum", type=int)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)

    p = sub.add_parser("evaluate", help="evaluate a run's checkpoint on a split")
    _common(p)
    p.add_argument("--run", required=True, help="run directory produced by finetune")
    p.add_argument("--checkpoint", help="'best' or a checkpoint path")
    p.add_argument("--split", choices=("train", "dev", "test"))

    p = sub.add_parser("compare", help="tabulate several finetune runs")
    p.add_argument("run_dirs", nargs="+", help="run directories containing run.json")
    p.add_argument("--out", default=".", help="where to write comparison.csv/txt")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _experiment(args: argparse.Namespace) -> X.ExperimentConfig:
    file_values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise X.ConfigError(f"config file {path} not found")
        file_values = parse_kv(path.read_text(encoding="utf-8"))
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    return X.ExperimentConfig.from_sources(file_values, flags)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "compare":
            text, _ = X.run_compare(args.run_dirs, args.out)
            print(text, end="")
            return EXIT_OK
        cfg = _experiment(args)
        if args.command == "prepare":
            manifest = X.run_prepare(cfg)
            print(json.dumps(manifest["totals"], sort_keys=True))
        elif args.command == "pretrain":
            print(X.run_pretrain(cfg))
        elif args.command == "distill":
            print(X.run_distill(cfg))
        elif args.command == "finetune":
            record = X.run_finetune(cfg)
            best = record.best()
            print(f"best_epoch={record.best_epoch} dev_acc={best.dev_acc:.4f} test_acc={record.test_accuracy}")
        elif args.command == "evaluate":
            result = X.run_evaluate(cfg)
            print(json.dumps(result, sort_keys=True))
    except (X.ConfigError, TreeParseError, VocabMismatchError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (RuntimeError, FloatingPointError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK
