"""Experiment configuration and the pipelines behind each CLI subcommand."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import encoder as E
from . import pretrain as P
from .checkpoint import load_checkpoint, read_meta, save_checkpoint
from .finetune import FinetuneConfig, TrainRunRecord, build_classifier, finetune, write_config
from .report import ComparisonRow, adjacent_accuracy, confusion, evaluate, write_comparison
from .tokenizer import Vocab, build_vocab, encode
from .treebank import (
    SPLITS,
    class_distribution,
    extract_examples,
    load_splits,
    unique_phrases,
    write_jsonl,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration (exit code 2)."""


@dataclass
class ExperimentConfig:
    # data / io
    data_dir: str = ""
    corpus: str = ""
    out: str = "runs/run"
    granularity: int = 5
    mode: str = "root"
    # model
    preset: str = "bert_base"
    scale: str = "tiny"
    seed: int = 0
    max_len: int = 0
    vocab_max_size: int = 8000
    min_freq: int = 1
    lowercase: bool = True
    dropout_p: float = 0.1
    init: str = ""
    # fine-tuning
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    batch_size: int = 8
    max_epochs: int = 30
    early_stop_patience: int = 3
    early_stop_metric: str = "dev_loss"
    early_stopping: bool = True
    monitor: str = "dev"
    lr_schedule: str = "constant"
    grad_accum: int = 1
    # pretraining / distillation
    pretrain_steps: int = 200
    pretrain_batch_size: int = 0
    pretrain_lr: float = 1e-3
    mask_rate: float = 0.15
    nsp: str = "auto"
    dynamic_masking: str = "auto"
    doc_size: int = 5
    teacher: str = ""
    temperature: float = 2.0
    alpha: float = 0.5
    # evaluation
    run: str = ""
    checkpoint: str = "best"
    split: str = "test"

    @classmethod
    def from_sources(cls, file_values: dict[str, str], flag_values: dict) -> "ExperimentConfig":
        """Defaults, then the config file, then command-line flags (flags win)."""
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in file_values.items():
            if k not in kinds:
                raise ConfigError(f"unknown config key {k!r}")
            try:
                kw[k] = E._parse_value(v, kinds[k])
            except ValueError as e:
                raise ConfigError(f"bad value for {k}: {e}") from None
        kw.update({k: v for k, v in flag_values.items() if v is not None and k in kinds})
        return cls(**kw)

    def to_text(self) -> str:
        return "".join(f"{k}={E._fmt(v)}\n" for k, v in sorted(asdict(self).items()))

    def tristate(self, name: str, default: bool) -> bool:
        v = str(getattr(self, name)).lower()
        if v == "auto":
            return default
        if v in ("true", "1"):
            return True
        if v in ("false", "0"):
            return False
        raise ConfigError(f"{name} must be auto, true or false")

    def encoder_config(self, vocab_size: int) -> E.EncoderConfig:
        try:
            return E.preset(self.preset, self.scale, vocab_size=vocab_size, max_len=self.max_len or None,
                            dropout_p=self.dropout_p)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def finetune_config(self) -> FinetuneConfig:
        try:
            return FinetuneConfig(
                learning_rate=self.learning_rate, beta1=self.beta1, beta2=self.beta2,
                weight_decay=self.weight_decay, batch_size=self.batch_size, max_epochs=self.max_epochs,
                dropout_p=self.dropout_p, early_stop_patience=self.early_stop_patience,
                early_stop_metric=self.early_stop_metric, early_stopping=self.early_stopping,
                monitor=self.monitor, lr_schedule=self.lr_schedule, grad_accum=self.grad_accum, seed=self.seed,
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def pretrain_config(self, enc: E.EncoderConfig) -> P.PretrainConfig:
        try:
            return P.PretrainConfig.for_model(
                enc,
                nsp_enabled=self.tristate("nsp", enc.nsp_enabled),
                dynamic_masking=self.tristate("dynamic_masking", enc.dynamic_masking),
                batch_size=self.pretrain_batch_size or None,
                mask_rate=self.mask_rate, learning_rate=self.pretrain_lr, beta1=self.beta1, beta2=self.beta2,
                seed=self.seed, max_len=enc.max_len,
                max_steps=self.pretrain_steps * (2 if not enc.nsp_enabled and enc.dynamic_masking else 1),
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def validate(self, need_data: bool = False) -> None:
        if self.granularity not in (2, 5):
            raise ConfigError("granularity must be 2 or 5")
        if self.mode not in ("root", "all"):
            raise ConfigError("mode must be root or all")
        if self.preset not in E.PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.scale not in ("tiny", "full"):
            raise ConfigError("scale must be tiny or full")
        for name in ("init", "teacher", "corpus"):
            v = getattr(self, name)
            if v and not Path(v).is_file():
                raise ConfigError(f"{name} file {v} does not exist")
        if need_data:
            if not self.data_dir:
                raise ConfigError("--data is required")
            d = Path(self.data_dir)
            missing = [s for s in SPLITS if not (d / f"{s}.txt").is_file()]
            if missing:
                raise ConfigError(f"{d} lacks {', '.join(m + '.txt' for m in missing)}")


# ---------------------------------------------------------------------------
# shared helpers


def load_dataset(cfg: ExperimentConfig):
    trees = load_splits(cfg.data_dir)
    examples = {s: extract_examples(trees[s], cfg.mode, s, cfg.granularity) for s in SPLITS}
    return trees, examples


def corpus_vocab(cfg: ExperimentConfig, train_sentences) -> Vocab:
    return build_vocab(train_sentences, max_size=cfg.vocab_max_size, min_freq=cfg.min_freq, lowercase=cfg.lowercase)


def _train_sentences(trees) -> list[tuple[str, ...]]:
    return [t.span for t in trees["train"]]


def _encode_split(examples, vocab: Vocab, max_len: int):
    return [encode(ex.text, vocab, max_len, ex.label) for ex in examples]


def _documents(cfg: ExperimentConfig):
    if cfg.corpus:
        return P.read_corpus(cfg.corpus)
    trees = load_splits(cfg.data_dir)
    return P.chunk_documents(_train_sentences(trees), cfg.doc_size)


def _ckpt_vocab(path: str | Path) -> Vocab:
    vp = Path(path).parent / "vocab.txt"
    if not vp.is_file():
        raise ConfigError(f"no vocab.txt next to checkpoint {path}")
    return Vocab.load(vp)


def _prepare_out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def run_prepare(cfg: ExperimentConfig) -> dict:
    cfg.validate(need_data=True)
    out = _prepare_out(cfg)
    trees, examples = load_dataset(cfg)
    manifest = {"data_dir": str(cfg.data_dir), "granularity": cfg.granularity, "mode": cfg.mode,
                "seed": cfg.seed, "splits": {}}
    for s in SPLITS:
        roots = extract_examples(trees[s], "root", s, cfg.granularity)
        manifest["splits"][s] = {
            "sentences": len(trees[s]),
            "nodes": sum(t.num_nodes() for t in trees[s]),
            "examples": len(examples[s]),
            "class_distribution": class_distribution(roots, cfg.granularity) if roots else [0] * cfg.granularity,
        }
    all_trees = [t for s in SPLITS for t in trees[s]]
    manifest["totals"] = {
        "sentences": len(all_trees),
        "nodes": sum(t.num_nodes() for t in all_trees),
        "phrases": len(unique_phrases(all_trees)),
        "examples": sum(len(examples[s]) for s in SPLITS),
    }
    vocab = corpus_vocab(cfg, _train_sentences(trees))
    vocab.save(out / "vocab.txt")
    manifest["vocab_size"] = len(vocab)
    write_jsonl((ex for s in SPLITS for ex in examples[s]), out / "examples.jsonl")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def run_pretrain(cfg: ExperimentConfig) -> Path:
    cfg.validate(need_data=not cfg.corpus)
    out = _prepare_out(cfg)
    docs = _documents(cfg)
    vocab = corpus_vocab(cfg, [s for d in docs for s in d])
    enc = cfg.encoder_config(len(vocab))
    pcfg = cfg.pretrain_config(enc)
    model = E.init_model(enc, cfg.seed)
    write_config({k: v for k, v in asdict(cfg).items()}, out / "config.txt")
    result = P.pretrain(model, docs, vocab, pcfg)
    vocab.save(out / "vocab.txt")
    save_checkpoint(result.model, out / "checkpoint_final.mbrt", meta={"vocab": vocab.fingerprint()})
    _write_trace(result.trace, out / "metrics.csv", ("step", "epoch", "mlm_loss", "nsp_loss", "loss"))
    return out


def run_distill(cfg: ExperimentConfig) -> Path:
    cfg.validate(need_data=not cfg.corpus)
    if not cfg.teacher:
        raise ConfigError("--teacher is required")
    out = _prepare_out(cfg)
    docs = _documents(cfg)
    vocab = corpus_vocab(cfg, [s for d in docs for s in d])
    _, meta = read_meta(cfg.teacher)
    teacher_fp = meta.get("vocab")
    if teacher_fp is None:
        teacher_fp = _ckpt_vocab(cfg.teacher).fingerprint()
    if teacher_fp != vocab.fingerprint():
        raise P.VocabMismatchError(
            f"vocabulary mismatch: teacher {cfg.teacher} was trained with vocabulary {teacher_fp}, "
            f"this corpus yields {vocab.fingerprint()}")
    teacher, _ = load_checkpoint(cfg.teacher)
    pcfg = cfg.pretrain_config(teacher.config)
    write_config({k: v for k, v in asdict(cfg).items()}, out / "config.txt")
    result = P.distill(teacher, docs, vocab, pcfg, temperature=cfg.temperature, alpha=cfg.alpha, seed=cfg.seed)
    vocab.save(out / "vocab.txt")
    save_checkpoint(result.model, out / "checkpoint_final.mbrt", meta={"vocab": vocab.fingerprint()})
    _write_trace(result.trace, out / "metrics.csv", ("step", "epoch", "loss", "kl", "ce"))
    return out


def _write_trace(trace, path: Path, columns) -> None:
    lines = [",".join(columns)]
    for row in trace:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in columns))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_finetune(cfg: ExperimentConfig) -> TrainRunRecord:
    cfg.validate(need_data=True)
    out = _prepare_out(cfg)
    trees, examples = load_dataset(cfg)
    if cfg.init:
        model, _ = load_checkpoint(cfg.init)
        vocab = _ckpt_vocab(cfg.init)
        if model.config.vocab_size != len(vocab):
            raise P.VocabMismatchError("initial checkpoint disagrees with its vocabulary file")
        model.drop_pretraining_heads()
        model.config.dropout_p = cfg.dropout_p
    else:
        vocab = corpus_vocab(cfg, _train_sentences(trees))
        model = E.init_model(cfg.encoder_config(len(vocab)), cfg.seed)
    max_len = model.config.max_len
    data = {s: _encode_split(examples[s], vocab, max_len) for s in SPLITS}
    build_classifier(model, cfg.granularity, cfg.dropout_p)
    vocab.save(out / "vocab.txt")
    record = finetune(model, data["train"], data["dev"], cfg.finetune_config(), out,
                      test_examples=data["test"] or None, snapshot=asdict(cfg))
    record.name = cfg.preset
    if data["test"]:
        ev = evaluate(model, data["test"])
        cm = confusion(ev.predictions, ev.labels, cfg.granularity)
        (out / "confusion.csv").write_text(cm.to_csv(), encoding="utf-8")
        (out / "confusion_pct.csv").write_text(cm.to_csv(percent=True), encoding="utf-8")
    record.save(out / "run.json")
    return record


def run_evaluate(cfg: ExperimentConfig) -> dict:
    if not cfg.run:
        raise ConfigError("--run is required")
    run = Path(cfg.run)
    if not (run / "config.txt").is_file():
        raise ConfigError(f"{run} is not a run directory (no config.txt)")
    saved = ExperimentConfig.from_sources(E.parse_kv((run / "config.txt").read_text(encoding="utf-8")), {})
    if cfg.data_dir:
        saved.data_dir = cfg.data_dir
    saved.validate(need_data=True)
    if cfg.split not in SPLITS:
        raise ConfigError(f"split must be one of {', '.join(SPLITS)}")
    ckpt = run / "checkpoint_best.mbrt" if cfg.checkpoint == "best" else Path(cfg.checkpoint)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint {ckpt} not found")
    model, _ = load_checkpoint(ckpt)
    vocab = Vocab.load(run / "vocab.txt")
    _, examples = load_dataset(saved)
    data = _encode_split(examples[cfg.split], vocab, model.config.max_len)
    ev = evaluate(model, data)
    cm = confusion(ev.predictions, ev.labels, model.num_classes)
    out = Path(cfg.out) if cfg.out != ExperimentConfig.out else run
    out.mkdir(parents=True, exist_ok=True)
    (out / "confusion.csv").write_text(cm.to_csv(), encoding="utf-8")
    (out / "confusion_pct.csv").write_text(cm.to_csv(percent=True), encoding="utf-8")
    result = {"split": cfg.split, "accuracy": ev.accuracy, "loss": ev.loss,
              "adjacent_accuracy": adjacent_accuracy(cm), "examples": len(data), "checkpoint": str(ckpt)}
    (out / f"evaluation_{cfg.split}.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n",
                                                      encoding="utf-8")
    return result


def comparison_row(run_dir: str | Path) -> ComparisonRow:
    record = TrainRunRecord.load(Path(run_dir) / "run.json")
    acc = record.test_accuracy
    if acc is None:
        log.warning("%s has no test accuracy; using best dev accuracy", run_dir)
        acc = record.best().dev_acc
    return ComparisonRow(record.name or Path(run_dir).name, record.mean_epoch_seconds, acc,
                         record.best_epoch, record.num_parameters)


def run_compare(run_dirs, out: str | Path) -> tuple[str, int]:
    rows, skipped = [], 0
    for d in run_dirs:
        try:
            rows.append(comparison_row(d))
        except (OSError, ValueError, KeyError, TypeError) as e:
            log.warning("skipping %s: %s", d, e)
            skipped += 1
    if not rows:
        raise RuntimeError("no readable run.json in any of the given directories")
    return write_comparison(rows, out), skipped
