"""Word-level vocabulary and BERT-style input encoding."""
from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
NUM_SPECIALS = len(SPECIALS)


class Vocab:
    def __init__(self, tokens: Sequence[str], lowercase: bool = True):
        if tuple(tokens[:NUM_SPECIALS]) != SPECIALS:
            raise ValueError("vocabulary must start with the five special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        self.lowercase = lowercase

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return self.normalize(token) in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos and self.lowercase == other.lowercase

    def normalize(self, token: str) -> str:
        return token.lower() if self.lowercase and token not in SPECIALS else token

    def id_of(self, token: str) -> int:
        return self.stoi.get(self.normalize(token), UNK_ID)

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, lowercase: bool = True) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines, lowercase=lowercase)


def build_vocab(
    corpus: Iterable[Sequence[str]],
    max_size: int = 30000,
    min_freq: int = 1,
    lowercase: bool = True,
) -> Vocab:
    """Rank tokens by descending frequency, ties lexicographic; ``max_size`` counts the specials."""
    if max_size <= NUM_SPECIALS:
        raise ValueError(f"max_size must exceed {NUM_SPECIALS}")
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts: Counter[str] = Counter()
    seen_any = False
    for sent in corpus:
        seen_any = True
        counts.update(t.lower() if lowercase else t for t in sent)
    if not seen_any or not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    for s in SPECIALS:
        counts.pop(s, None)
    ranked = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocab(list(SPECIALS) + ranked[: max_size - NUM_SPECIALS], lowercase=lowercase)


@dataclass(frozen=True)
class EncodedInput:
    ids: tuple[int, ...]
    attention_mask: tuple[int, ...]
    segment_ids: tuple[int, ...]
    label: int | None = None


def encode(tokens: Sequence[str], vocab: Vocab, max_len: int = 64, label: int | None = None) -> EncodedInput:
    """``[CLS] t1..tk [SEP] [PAD]...``, keeping the first ``max_len - 2`` tokens."""
    if max_len < 3:
        raise ValueError("max_len must be at least 3")
    body = [vocab.id_of(t) for t in tokens[: max_len - 2]]
    ids = [CLS_ID, *body, SEP_ID]
    n = len(ids)
    pad = max_len - n
    return EncodedInput(tuple(ids + [PAD_ID] * pad), tuple([1] * n + [0] * pad), tuple([0] * max_len), label)


def truncate_pair(a: list, b: list, budget: int) -> tuple[list, list]:
    """Longest-first truncation; on equal length, trim ``a`` first so lengths alternate."""
    a, b = list(a), list(b)
    while len(a) + len(b) > budget:
        if len(a) >= len(b):
            a.pop()
        else:
            b.pop()
    return a, b


def encode_pair(
    a_tokens: Sequence[str],
    b_tokens: Sequence[str],
    vocab: Vocab,
    max_len: int = 64,
    label: int | None = None,
) -> EncodedInput:
    """``[CLS] A [SEP] B [SEP]`` with segment 0 through the first ``[SEP]`` and 1 after."""
    if max_len < 5:
        raise ValueError("max_len must be at least 5 for a sentence pair")
    if not a_tokens or not b_tokens:
        raise ValueError("sentence pairs need two non-empty sentences")
    a, b = truncate_pair([vocab.id_of(t) for t in a_tokens], [vocab.id_of(t) for t in b_tokens], max_len - 3)
    ids = [CLS_ID, *a, SEP_ID, *b, SEP_ID]
    seg = [0] * (len(a) + 2) + [1] * (len(b) + 1)
    pad = max_len - len(ids)
    return EncodedInput(
        tuple(ids + [PAD_ID] * pad),
        tuple([1] * len(ids) + [0] * pad),
        tuple(seg + [0] * pad),
        label,
    )


def decode(encoded: EncodedInput, vocab: Vocab) -> list[str]:
    return [vocab.itos[i] for i in encoded.ids if i >= NUM_SPECIALS]


@dataclass
class Batch:
    """Stacked encodings trimmed to the longest attended length in the batch."""

    ids: np.ndarray
    attention_mask: np.ndarray
    segment_ids: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.ids.shape[0]


def collate(items: Sequence[EncodedInput], trim: bool = True) -> Batch:
    ids = np.array([e.ids for e in items], dtype=np.int64)
    mask = np.array([e.attention_mask for e in items], dtype=np.int64)
    seg = np.array([e.segment_ids for e in items], dtype=np.int64)
    if trim:
        width = int(mask.sum(axis=1).max())
        ids, mask, seg = ids[:, :width], mask[:, :width], seg[:, :width]
    labels = None
    if all(e.label is not None for e in items):
        labels = np.array([e.label for e in items], dtype=np.int64)
    return Batch(ids, mask, seg, labels)
