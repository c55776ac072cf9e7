"""Evaluation, confusion matrices, and the cross-model comparison table."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import encoder as E
from . import tensor as T
from .tokenizer import EncodedInput, collate
from .treebank import CLASS_NAMES


@dataclass
class Evaluation:
    accuracy: float
    loss: float
    predictions: np.ndarray
    labels: np.ndarray

    def __iter__(self):
        return iter((self.accuracy, self.loss, self.predictions))


def argmax_lowest(probs: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest class index."""
    return np.argmax(probs, axis=-1)


def evaluate(model: E.Model, examples: Sequence[EncodedInput], batch_size: int = 64) -> Evaluation:
    """Accuracy and mean cross-entropy in evaluation mode (no dropout)."""
    if not examples:
        raise ValueError("evaluate needs at least one example")
    if not model.num_classes:
        raise ValueError("model has no classification head")
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise IndexError(f"label outside 0..{model.num_classes - 1}")
    preds = np.empty(len(examples), dtype=np.int64)
    losses = np.empty(len(examples), dtype=np.float64)
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        batch = collate(chunk)
        out, _ = E.forward(model, batch, training=False)
        logits, _ = E.classifier_forward(model, out.pooled, training=False)
        logits = logits.astype(np.float64)
        logp = T.log_softmax(logits)
        sl = slice(start, start + len(chunk))
        preds[sl] = argmax_lowest(logp)
        losses[sl] = -logp[np.arange(len(chunk)), batch.labels]
    # per-example losses summed in example order keep the mean independent of batch size
    return Evaluation(float(np.mean(preds == labels)), float(np.sum(losses) / len(losses)), preds, labels)


# ---------------------------------------------------------------------------
# confusion matrices


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else 0.0

    def row_normalized(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape, dtype=float), where=rows > 0)

    def recall(self) -> np.ndarray:
        return np.diag(self.row_normalized())

    def to_csv(self, names: Sequence[str] | None = None, percent: bool = False) -> str:
        k = self.counts.shape[0]
        names = list(names or (CLASS_NAMES if k == len(CLASS_NAMES) else [str(i) for i in range(k)]))
        values = self.row_normalized() * 100 if percent else self.counts
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\predicted", *names])
        for name, row in zip(names, values):
            w.writerow([name, *(f"{v:.2f}" if percent else int(v) for v in row)])
        return buf.getvalue()


def confusion(predictions, labels, num_classes: int = 5) -> ConfusionMatrix:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ValueError(f"{len(predictions)} predictions but {len(labels)} labels")
    for arr in (predictions, labels):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"class index outside 0..{num_classes - 1}")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    return ConfusionMatrix(counts)


def adjacent_accuracy(cm: ConfusionMatrix) -> float:
    """Fraction of examples predicted within one class of the truth."""
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    t, p = np.indices(cm.counts.shape)
    return float(cm.counts[np.abs(t - p) <= 1].sum() / cm.total)


def recall_deltas(a: ConfusionMatrix, b: ConfusionMatrix) -> np.ndarray:
    """Per-class change in correctly classified share going from run ``a`` to run ``b``."""
    return b.recall() - a.recall()


# ---------------------------------------------------------------------------
# comparison


@dataclass
class ComparisonRow:
    name: str
    epoch_seconds: float | None
    best_test_accuracy: float
    best_epoch: int
    num_parameters: int

    def __post_init__(self):
        if not 0.0 <= self.best_test_accuracy <= 1.0:
            raise ValueError(f"accuracy {self.best_test_accuracy} outside [0, 1]")


def mmss(seconds: float | None) -> str:
    if seconds is None or not np.isfinite(seconds):
        return "N/A"
    total = int(round(seconds))
    return f"{total // 60}:{total % 60:02d}"


def compare_report(rows: Sequence[ComparisonRow]) -> tuple[str, str]:
    """Rows sorted by accuracy (descending, ties by name). Returns ``(text, csv)``."""
    ordered = sorted(rows, key=lambda r: (-r.best_test_accuracy, r.name))
    header = ["model", "epoch_time", "best_test_acc", "best_epoch", "parameters"]
    cells = [[r.name, mmss(r.epoch_seconds), f"{r.best_test_accuracy:.3f}", str(r.best_epoch), str(r.num_parameters)]
             for r in ordered]
    widths = [max(len(h), *(len(c[i]) for c in cells)) if cells else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    lines.append("  ".join("-" * w for w in widths))
    for c in cells:
        lines.append("  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(c, widths))))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "epoch_seconds", "epoch_time", "best_test_acc", "best_epoch", "parameters"])
    for r in ordered:
        secs = "" if mmss(r.epoch_seconds) == "N/A" else f"{r.epoch_seconds:.3f}"
        w.writerow([r.name, secs, mmss(r.epoch_seconds), f"{r.best_test_accuracy:.4f}",
                    r.best_epoch, r.num_parameters])
    return "\n".join(lines) + "\n", buf.getvalue()


def write_comparison(rows: Sequence[ComparisonRow], out_dir: str | Path) -> str:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text, table = compare_report(rows)
    (out_dir / "comparison.txt").write_text(text, encoding="utf-8")
    (out_dir / "comparison.csv").write_text(table, encoding="utf-8")
    return text
