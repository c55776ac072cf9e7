"""Sentence classification fine-tuning: dropout + softmax head, ADAM, early stopping."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import encoder as E
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .report import evaluate
from .tokenizer import EncodedInput, collate

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "train_loss", "train_acc", "dev_loss", "dev_acc")


@dataclass
class FinetuneConfig:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 8
    max_epochs: int = 30
    dropout_p: float = 0.1
    early_stop_patience: int = 3
    early_stop_metric: str = "dev_loss"
    early_stopping: bool = True
    monitor: str = "dev"
    lr_schedule: str = "constant"
    grad_accum: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("learning_rate, batch_size and max_epochs must be positive")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.early_stop_metric not in ("dev_loss", "dev_accuracy"):
            raise ValueError("early_stop_metric must be dev_loss or dev_accuracy")
        if self.monitor not in ("dev", "test"):
            raise ValueError("monitor must be dev or test")
        if self.lr_schedule not in ("constant", "linear_decay"):
            raise ValueError("lr_schedule must be constant or linear_decay")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.grad_accum < 1:
            raise ValueError("grad_accum must be >= 1")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    dev_loss: float
    dev_acc: float
    epoch_seconds: float


@dataclass
class TrainRunRecord:
    epochs: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False
    config: dict = field(default_factory=dict)
    checkpoint_path: str | None = None
    name: str = ""
    num_parameters: int = 0
    optimizer_steps: int = 0
    test_accuracy: float | None = None
    test_loss: float | None = None

    @property
    def mean_epoch_seconds(self) -> float:
        return float(np.mean([e.epoch_seconds for e in self.epochs])) if self.epochs else 0.0

    def best(self) -> EpochMetrics:
        return self.epochs[self.best_epoch]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_epoch_seconds"] = self.mean_epoch_seconds
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRunRecord":
        d = dict(d)
        d.pop("mean_epoch_seconds", None)
        d["epochs"] = [EpochMetrics(**e) for e in d.get("epochs", [])]
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TrainRunRecord":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_classifier(encoder: E.Model, num_classes: int = 5, dropout_p: float | None = None) -> E.Model:
    """Attach dropout + linear + softmax over the pooled [CLS] state."""
    if num_classes < 2:
        raise ValueError("a classifier needs at least two classes")
    encoder.add_heads(num_classes=num_classes)
    if dropout_p is not None:
        encoder.head_dropout = dropout_p
    return encoder


def early_stop_check(history: Sequence[float], patience: int, mode: str = "min") -> tuple[bool, int]:
    """Stop once the last ``patience`` values all fail to beat the best earlier value.

    Ties do not count as improvements, so the best epoch is the first occurrence.
    """
    if not len(history):
        raise ValueError("empty metric history")
    values = np.asarray(history, dtype=np.float64)
    best = int(np.argmin(values) if mode == "min" else np.argmax(values))
    return len(values) - 1 - best >= patience, best


def lr_schedule_value(schedule: str, base_lr: float, epoch: int, max_epochs: int) -> float:
    if schedule == "constant":
        return base_lr
    if schedule == "linear_decay":
        return base_lr * (1.0 - epoch / max_epochs)
    raise ValueError(f"unknown schedule {schedule!r}")


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _fmt(x: float) -> str:
    return repr(float(x))


def write_metrics(record: TrainRunRecord, out_dir: Path) -> None:
    with open(out_dir / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for e in record.epochs:
            w.writerow([e.epoch, _fmt(e.train_loss), _fmt(e.train_acc), _fmt(e.dev_loss), _fmt(e.dev_acc)])
    with open(out_dir / "timing.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "epoch_seconds"])
        for e in record.epochs:
            w.writerow([e.epoch, f"{e.epoch_seconds:.6f}"])


def write_config(values: dict, path: Path) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in sorted(values.items())), encoding="utf-8")


def finetune(
    model: E.Model,
    train_examples: Sequence[EncodedInput],
    dev_examples: Sequence[EncodedInput],
    config: FinetuneConfig,
    out_dir: str | Path | None = None,
    test_examples: Sequence[EncodedInput] | None = None,
    eval_batch_size: int = 64,
    snapshot: dict | None = None,
) -> TrainRunRecord:
    """Train the classifier head and encoder jointly.

    Each epoch shuffles with a seed derived from (seed, epoch), evaluates the
    monitored split, and saves ``checkpoint_best.mbrt`` whenever the early-stop
    metric improves. On return the model holds the best epoch's weights.
    """
    if not train_examples:
        raise ValueError("no training examples")
    if not dev_examples:
        raise ValueError("empty dev set")
    if not model.num_classes:
        build_classifier(model, 5)
    model.head_dropout = config.dropout_p
    if max(ex.label for ex in train_examples) >= model.num_classes:
        raise IndexError("training label outside the classifier's classes")
    monitor_set = dev_examples
    if config.monitor == "test":
        if not test_examples:
            raise ValueError("monitor=test needs test examples")
        monitor_set = test_examples
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if snapshot is None:
            snapshot = {**asdict(config), **{f"model.{k}": v for k, v in asdict(model.config).items()}}
        write_config(snapshot, out / "config.txt")
    params = model.parameters()
    arrays = [p.data for p in params]
    state = T.AdamState(config.learning_rate, config.beta1, config.beta2, config.epsilon, config.weight_decay)
    record = TrainRunRecord(config=asdict(config), name=model.config.name,
                            num_parameters=model.num_parameters())
    ckpt = out / "checkpoint_best.mbrt" if out is not None else None
    mode = "min" if config.early_stop_metric == "dev_loss" else "max"
    history: list[float] = []
    best_state = None
    n = len(train_examples)
    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        lr = lr_schedule_value(config.lr_schedule, config.learning_rate, epoch, config.max_epochs)
        order = _rng(config.seed, epoch, 1).permutation(n)
        loss_sum, correct, pending = 0.0, 0, 0
        model.zero_grad()
        batches = range(0, n, config.batch_size)
        for bi, start in enumerate(batches):
            items = [train_examples[i] for i in order[start:start + config.batch_size]]
            batch = collate(items)
            rng = _rng(config.seed, epoch, bi, 2)
            with T.numeric_guard(f"epoch {epoch}, batch {bi}"):
                enc, cache = E.forward(model, batch, training=True, rng=rng)
                logits, hcache = E.classifier_forward(model, enc.pooled, training=True, rng=rng)
                loss, g = T.cross_entropy(logits, batch.labels)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss {loss} at epoch {epoch}, batch {bi}")
            loss_sum += loss * len(items)
            correct += int(np.sum(np.argmax(logits, axis=-1) == batch.labels))
            g = g / config.grad_accum
            d_pooled = E.classifier_backward(model, g.astype(model.dtype), hcache)
            E.backward(model, cache, np.zeros_like(enc.hidden), d_pooled)
            pending += 1
            if pending == config.grad_accum or bi == len(batches) - 1:
                grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
                T.adam_step(arrays, grads, state, learning_rate=lr)
                record.optimizer_steps += 1
                model.zero_grad()
                pending = 0
        ev = evaluate(model, monitor_set, eval_batch_size)
        seconds = time.perf_counter() - t0
        record.epochs.append(EpochMetrics(epoch, loss_sum / n, correct / n, ev.loss, ev.accuracy, seconds))
        history.append(ev.loss if mode == "min" else ev.accuracy)
        stop, best = early_stop_check(history, config.early_stop_patience, mode)
        if best == epoch:
            best_state = [a.copy() for a in arrays]
            record.best_epoch = epoch
            if ckpt is not None:
                save_checkpoint(model, ckpt, meta={"best_epoch": epoch})
        log.info("epoch %d train_loss %.4f dev_loss %.4f dev_acc %.4f (%.1fs)",
                 epoch, loss_sum / n, ev.loss, ev.accuracy, seconds)
        if out is not None:
            write_metrics(record, out)
        if config.early_stopping and stop:
            record.stopped_early = epoch < config.max_epochs - 1
            break
    for a, b in zip(arrays, best_state):
        a[...] = b
    record.checkpoint_path = str(ckpt) if ckpt is not None else None
    if test_examples:
        ev = evaluate(model, test_examples, eval_batch_size)
        record.test_accuracy, record.test_loss = ev.accuracy, ev.loss
    if out is not None:
        write_metrics(record, out)
        record.save(out / "run.json")
    return record


def reload_best(record: TrainRunRecord) -> E.Model:
    if not record.checkpoint_path:
        raise ValueError("run has no checkpoint on disk")
    model, _ = load_checkpoint(record.checkpoint_path)
    return model
