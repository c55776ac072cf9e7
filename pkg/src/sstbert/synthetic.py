"""Synthetic SST-format treebanks for smoke tests and demos.

Each word carries a valence in 0..4 (most words are neutral 2); a node's label
is the rounded mean valence of the polar words it spans. Optional label noise
on roots makes small training sets easy to overfit.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .treebank import SentimentTree

LEXICON = {
    0: ("awful", "dreadful", "horrible", "unwatchable", "atrocious", "abysmal"),
    1: ("dull", "tedious", "weak", "bland", "clumsy", "forgettable"),
    3: ("nice", "pleasant", "likable", "decent", "charming", "solid"),
    4: ("brilliant", "stunning", "masterful", "superb", "wonderful", "dazzling"),
}
FILLER = ("the", "film", "movie", "a", "is", "was", "story", "and", "of", "plot", "it", "its",
          "acting", "director", "script", "this", "with", "scenes", "cast", "ending")


def _valence() -> dict[str, int]:
    return {w: k for k, words in LEXICON.items() for w in words}


def _label(tokens, valence) -> int:
    polar = [valence[t] for t in tokens if t in valence]
    if not polar:
        return 2
    return int(np.clip(np.floor(np.mean(polar) + 0.5), 0, 4))


def _build(tokens, valence, rng) -> SentimentTree:
    if len(tokens) == 1:
        return SentimentTree(_label(tokens, valence), token=tokens[0])
    cut = int(rng.integers(1, len(tokens)))
    return SentimentTree(_label(tokens, valence), (_build(tokens[:cut], valence, rng), _build(tokens[cut:], valence, rng)))


def random_sentence(rng: np.random.Generator, min_len: int = 4, max_len: int = 14) -> list[str]:
    n = int(rng.integers(min_len, max_len + 1))
    words = [FILLER[int(rng.integers(len(FILLER)))] for _ in range(n)]
    for _ in range(int(rng.integers(1, 3))):
        cls = int(rng.choice([0, 1, 3, 4]))
        words[int(rng.integers(n))] = LEXICON[cls][int(rng.integers(len(LEXICON[cls])))]
    return words


def make_treebank(n: int, seed: int = 0, noise: float = 0.0, min_len: int = 4, max_len: int = 14) -> list[SentimentTree]:
    rng = np.random.default_rng(seed)
    valence = _valence()
    trees = []
    for _ in range(n):
        tree = _build(random_sentence(rng, min_len, max_len), valence, rng)
        if noise and rng.random() < noise:
            tree = SentimentTree(int(rng.integers(5)), tree.children, tree.token)
        trees.append(tree)
    return trees


def write_treebank(out_dir: str | Path, sizes=(400, 100, 100), seed: int = 0, noise: float = 0.0) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, (split, n) in enumerate(zip(("train", "dev", "test"), sizes)):
        trees = make_treebank(n, seed * 1000 + i, noise)
        (out_dir / f"{split}.txt").write_text("".join(t.to_sexpr() + "\n" for t in trees), encoding="utf-8")
    return out_dir
