"""Masked-LM corruption, next-sentence pairs, the pretraining loop, and distillation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Sequence

import numpy as np

from . import encoder as E
from . import tensor as T
from .tokenizer import MASK_ID, NUM_SPECIALS, EncodedInput, Vocab, collate, encode, encode_pair

log = logging.getLogger(__name__)

MASKED, RANDOM, KEPT = 0, 1, 2


class VocabMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class MlmBatch:
    """One corrupted sequence. ``targets`` is IGNORE_INDEX away from ``positions``."""

    ids: tuple[int, ...]
    targets: tuple[int, ...]
    positions: tuple[int, ...]
    kinds: tuple[int, ...]
    attention_mask: tuple[int, ...] = ()
    segment_ids: tuple[int, ...] = ()


@dataclass(frozen=True)
class NspPair:
    a: tuple[str, ...]
    b: tuple[str, ...]
    is_next: bool
    doc_a: int
    index_a: int
    doc_b: int
    index_b: int


@dataclass
class PretrainConfig:
    mask_rate: float = 0.15
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    nsp_enabled: bool = True
    dynamic_masking: bool = False
    batch_size: int = 16
    max_steps: int = 200
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    max_len: int = 64
    seed: int = 0

    def __post_init__(self):
        self.split = tuple(float(x) for x in self.split)
        if not 0.0 < self.mask_rate < 1.0:
            raise ValueError("mask_rate must lie in (0, 1)")
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("mask/random/keep split must be three non-negative numbers summing to 1")
        if self.batch_size < 1 or self.max_steps < 1:
            raise ValueError("batch_size and max_steps must be positive")

    @classmethod
    def for_model(cls, config: E.EncoderConfig, **overrides) -> "PretrainConfig":
        """Defaults implied by a preset. RoBERTa-style configs (no NSP) double batch size and steps."""
        kw = dict(nsp_enabled=config.nsp_enabled, dynamic_masking=config.dynamic_masking,
                  max_len=config.max_len)
        if not config.nsp_enabled and config.dynamic_masking:
            kw.update(batch_size=cls.batch_size * 2, max_steps=cls.max_steps * 2)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)


def selection_count(eligible: int, rate: float) -> int:
    """round-half-up(rate * eligible), at least 1 when anything is eligible."""
    if eligible <= 0:
        return 0
    k = int((Decimal(str(rate)) * eligible).quantize(Decimal(1), rounding=ROUND_HALF_UP))
    return min(eligible, max(1, k))


def eligible_positions(encoded: EncodedInput) -> list[int]:
    return [i for i, (t, m) in enumerate(zip(encoded.ids, encoded.attention_mask)) if m and t >= NUM_SPECIALS]


def mlm_corrupt(
    encoded: EncodedInput,
    vocab: Vocab | int,
    rate: float = 0.15,
    split: Sequence[float] = (0.8, 0.1, 0.1),
    rng: np.random.Generator | None = None,
) -> MlmBatch:
    """Select positions among attended non-special tokens and corrupt them.

    Each selected position independently becomes [MASK] (split[0]), a uniformly
    drawn non-special token (split[1]), or is left unchanged (split[2]).
    """
    vocab_size = vocab if isinstance(vocab, int) else len(vocab)
    rng = rng if rng is not None else np.random.default_rng()
    ids = list(encoded.ids)
    targets = [T.IGNORE_INDEX] * len(ids)
    elig = eligible_positions(encoded)
    k = selection_count(len(elig), rate)
    if k == 0:
        return MlmBatch(tuple(ids), tuple(targets), (), (), encoded.attention_mask, encoded.segment_ids)
    chosen = np.sort(rng.choice(np.asarray(elig), size=k, replace=False))
    p_mask, p_rand = split[0], split[0] + split[1]
    kinds = []
    for pos in chosen.tolist():
        targets[pos] = ids[pos]
        r = rng.random()
        if r < p_mask:
            ids[pos] = MASK_ID
            kinds.append(MASKED)
        elif r < p_rand:
            ids[pos] = int(rng.integers(NUM_SPECIALS, vocab_size))
            kinds.append(RANDOM)
        else:
            kinds.append(KEPT)
    return MlmBatch(tuple(ids), tuple(targets), tuple(chosen.tolist()), tuple(kinds),
                    encoded.attention_mask, encoded.segment_ids)


def sample_nsp_pair(documents: Sequence[Sequence[Sequence[str]]], rng: np.random.Generator) -> NspPair:
    """Half the time an adjacent (A, B) from one document, otherwise B from another document."""
    adjacent = [(d, i) for d, doc in enumerate(documents) for i in range(len(doc) - 1)]
    if not adjacent:
        raise ValueError("corpus needs at least one document with two or more sentences")
    if len(documents) < 2:
        raise ValueError("corpus needs at least two documents to draw negative pairs")
    if rng.random() < 0.5:
        d, i = adjacent[int(rng.integers(len(adjacent)))]
        return NspPair(tuple(documents[d][i]), tuple(documents[d][i + 1]), True, d, i, d, i + 1)
    d, i = adjacent[int(rng.integers(len(adjacent)))]
    other = int(rng.integers(len(documents) - 1))
    other += other >= d
    j = int(rng.integers(len(documents[other])))
    return NspPair(tuple(documents[d][i]), tuple(documents[other][j]), False, d, i, other, j)


def read_corpus(path: str | Path) -> list[list[list[str]]]:
    """One whitespace-tokenized sentence per line; blank lines separate documents."""
    docs, cur = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            cur.append(line.split())
        elif cur:
            docs.append(cur)
            cur = []
    if cur:
        docs.append(cur)
    return docs


def chunk_documents(sentences: Sequence[Sequence[str]], size: int = 5) -> list[list[list[str]]]:
    """Group consecutive sentences into pseudo-documents of ``size``."""
    sentences = [list(s) for s in sentences if s]
    return [sentences[i:i + size] for i in range(0, len(sentences), size)]


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def masking_rng(seed: int, epoch: int, index: int, dynamic: bool) -> np.random.Generator:
    """Static masking ignores the epoch, so every epoch replays epoch 0's corruption."""
    return _rng(seed, epoch if dynamic else 0, index, 11)


def build_examples(documents, vocab: Vocab, config: PretrainConfig) -> tuple[list[EncodedInput], list[NspPair]]:
    if config.nsp_enabled:
        rng = _rng(config.seed, 23)
        n = sum(len(d) for d in documents)
        pairs = [sample_nsp_pair(documents, rng) for _ in range(n)]
        enc = [encode_pair(p.a, p.b, vocab, config.max_len, label=0 if p.is_next else 1) for p in pairs]
        return enc, pairs
    return [encode(s, vocab, config.max_len) for d in documents for s in d], []


def corrupt_epoch(examples: Sequence[EncodedInput], vocab_size: int, config: PretrainConfig, epoch: int) -> list[MlmBatch]:
    return [
        mlm_corrupt(ex, vocab_size, config.mask_rate, config.split,
                    masking_rng(config.seed, epoch, i, config.dynamic_masking))
        for i, ex in enumerate(examples)
    ]


def _mlm_arrays(items: Sequence[MlmBatch]):
    batch = collate([EncodedInput(m.ids, m.attention_mask, m.segment_ids) for m in items])
    width = batch.ids.shape[1]
    targets = np.array([m.targets[:width] for m in items], dtype=np.int64)
    rows, cols = np.nonzero(targets != T.IGNORE_INDEX)
    return batch, rows, cols, targets[rows, cols]


def _check_finite(loss: float, epoch: int, step: int) -> None:
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss} at epoch {epoch}, step {step}")


@dataclass
class PretrainResult:
    model: E.Model
    trace: list[dict] = field(default_factory=list)


def _parameters(model: E.Model):
    params = model.parameters()
    return params, [p.data for p in params]


def pretrain(model: E.Model, documents, vocab: Vocab, config: PretrainConfig) -> PretrainResult:
    """Joint MLM (+ optional NSP) training. Loss = mean MLM cross-entropy + mean NSP cross-entropy."""
    if model.config.vocab_size != len(vocab):
        raise VocabMismatchError(f"model vocabulary {model.config.vocab_size} != tokenizer vocabulary {len(vocab)}")
    model.add_heads(mlm=True, nsp=config.nsp_enabled)
    examples, _ = build_examples(documents, vocab, config)
    if not examples:
        raise ValueError("empty pretraining corpus")
    params, arrays = _parameters(model)
    state = T.AdamState(config.learning_rate, config.beta1, config.beta2)
    trace, step, epoch = [], 0, 0
    while step < config.max_steps:
        corrupted = corrupt_epoch(examples, len(vocab), config, epoch)
        order = _rng(config.seed, epoch, 31).permutation(len(examples))
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            if step >= config.max_steps:
                break
            idx = order[start:start + config.batch_size]
            batch, rows, cols, tgt = _mlm_arrays([corrupted[i] for i in idx])
            model.zero_grad()
            rng = _rng(config.seed, epoch, bi, 41)
            with T.numeric_guard(f"epoch {epoch}, step {step}"):
                out, cache = E.forward(model, batch, training=True, rng=rng)
                d_pooled = None
                mlm_loss = 0.0
                dh = np.zeros_like(out.hidden)
                if len(rows):
                    logits, mcache = E.mlm_forward(model, out.hidden, rows, cols)
                    mlm_loss, g = T.cross_entropy(logits, tgt)
                    dh = E.mlm_backward(model, g, mcache)
                nsp_loss = 0.0
                if config.nsp_enabled:
                    nl, pc = E.nsp_forward(model, out.pooled)
                    nsp_loss, g = T.cross_entropy(nl, np.array([examples[i].label for i in idx]))
                    d_pooled = E.nsp_backward(model, g, pc)
            loss = mlm_loss + nsp_loss
            _check_finite(loss, epoch, step)
            E.backward(model, cache, dh, d_pooled)
            T.adam_step(arrays, [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params], state)
            trace.append(dict(step=step, epoch=epoch, mlm_loss=mlm_loss, nsp_loss=nsp_loss, loss=loss))
            step += 1
        epoch += 1
    model.zero_grad()
    return PretrainResult(model, trace)


# ---------------------------------------------------------------------------
# distillation


def distillation_loss(student_logits, teacher_logits, targets, temperature: float = 2.0, alpha: float = 0.5):
    """alpha * T^2 * KL(teacher_T || student_T) + (1 - alpha) * CE(student, targets).

    Returns ``(loss, kl, ce, dstudent_logits)``.
    """
    t2 = temperature * temperature
    kl, gkl = T.kl_divergence(teacher_logits, student_logits, temperature)
    ce, gce = T.cross_entropy(student_logits, targets)
    loss = alpha * t2 * kl + (1.0 - alpha) * ce
    return loss, kl, ce, alpha * t2 * gkl + (1.0 - alpha) * gce


def student_config(teacher: E.EncoderConfig, **overrides) -> E.EncoderConfig:
    """Teacher architecture at half depth (at least one layer)."""
    kw = dict(num_layers=max(1, teacher.num_layers // 2), share_layer_parameters=False,
              name=f"{teacher.name}_student")
    kw.update(overrides)
    return replace(teacher, **kw)


def distill(
    teacher: E.Model,
    documents,
    vocab: Vocab,
    config: PretrainConfig,
    student_cfg: E.EncoderConfig | None = None,
    temperature: float = 2.0,
    alpha: float = 0.5,
    seed: int | None = None,
) -> PretrainResult:
    """Train a fresh student on masked-LM positions against the teacher's softened outputs."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if teacher.config.vocab_size != len(vocab):
        raise VocabMismatchError(f"teacher vocabulary {teacher.config.vocab_size} != tokenizer vocabulary {len(vocab)}")
    if not teacher.mlm:
        raise ValueError("teacher has no MLM head")
    student_cfg = student_cfg or student_config(teacher.config)
    if student_cfg.vocab_size != teacher.config.vocab_size:
        raise VocabMismatchError("teacher and student vocabularies differ")
    seed = config.seed if seed is None else seed
    student = E.init_model(student_cfg, seed).add_heads(mlm=True)
    mlm_cfg = replace(config, nsp_enabled=False)
    examples, _ = build_examples(documents, vocab, mlm_cfg)
    params, arrays = _parameters(student)
    state = T.AdamState(config.learning_rate, config.beta1, config.beta2)
    trace, step, epoch = [], 0, 0
    while step < config.max_steps:
        corrupted = corrupt_epoch(examples, len(vocab), mlm_cfg, epoch)
        order = _rng(config.seed, epoch, 31).permutation(len(examples))
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            if step >= config.max_steps:
                break
            batch, rows, cols, tgt = _mlm_arrays([corrupted[i] for i in order[start:start + config.batch_size]])
            if not len(rows):
                continue
            t_out, _ = E.forward(teacher, batch, training=False)
            t_logits, _ = E.mlm_forward(teacher, t_out.hidden, rows, cols)
            student.zero_grad()
            with T.numeric_guard(f"epoch {epoch}, step {step}"):
                out, cache = E.forward(student, batch, training=True, rng=_rng(seed, epoch, bi, 43))
                s_logits, mcache = E.mlm_forward(student, out.hidden, rows, cols)
                loss, kl, ce, g = distillation_loss(s_logits, t_logits, tgt, temperature, alpha)
            _check_finite(loss, epoch, step)
            E.backward(student, cache, E.mlm_backward(student, g.astype(student.dtype), mcache))
            T.adam_step(arrays, [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params], state)
            trace.append(dict(step=step, epoch=epoch, loss=loss, kl=kl, ce=ce))
            step += 1
        epoch += 1
    student.zero_grad()
    return PretrainResult(student, trace)


def mean_kl_to_teacher(teacher: E.Model, student: E.Model, documents, vocab: Vocab, config: PretrainConfig,
                       epoch: int = 10_000, batch_size: int = 32) -> float:
    """Mean KL(teacher || student) at temperature 1 over MLM positions of a fresh corruption draw."""
    mlm_cfg = replace(config, nsp_enabled=False, dynamic_masking=True)
    examples, _ = build_examples(documents, vocab, mlm_cfg)
    corrupted = corrupt_epoch(examples, len(vocab), mlm_cfg, epoch)
    total, count = 0.0, 0
    for start in range(0, len(corrupted), batch_size):
        batch, rows, cols, _ = _mlm_arrays(corrupted[start:start + batch_size])
        if not len(rows):
            continue
        t_out, _ = E.forward(teacher, batch)
        s_out, _ = E.forward(student, batch)
        t_logits, _ = E.mlm_forward(teacher, t_out.hidden, rows, cols)
        s_logits, _ = E.mlm_forward(student, s_out.hidden, rows, cols)
        kl, _ = T.kl_divergence(t_logits.astype(np.float64), s_logits.astype(np.float64))
        total += kl * len(rows)
        count += len(rows)
    return total / max(count, 1)
