"""Stanford Sentiment Treebank ingestion.

Trees come one per line in PTB s-expression form, e.g.
``(3 (2 It) (3 (2 's) (4 good)))``. Tokens are kept verbatim (``-LRB-`` etc.).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

NUM_CLASSES = 5
SPLITS = ("train", "dev", "test")
CLASS_NAMES = (
    "Strongly Negative",
    "Weakly Negative",
    "Neutral",
    "Weakly Positive",
    "Strongly Positive",
)


class TreeParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.reason = message
        self.line = line
        self.column = column
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


@dataclass(frozen=True)
class SentimentTree:
    label: int
    children: tuple["SentimentTree", ...] = ()
    token: str | None = None

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def span(self) -> tuple[str, ...]:
        if self.is_leaf:
            return (self.token,)
        return self.children[0].span + self.children[1].span

    def nodes(self) -> Iterator["SentimentTree"]:
        """Pre-order traversal."""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def num_nodes(self) -> int:
        return sum(1 for _ in self.nodes())

    def num_leaves(self) -> int:
        return sum(1 for n in self.nodes() if n.is_leaf)

    def to_sexpr(self) -> str:
        if self.is_leaf:
            return f"({self.label} {self.token})"
        return f"({self.label} {self.children[0].to_sexpr()} {self.children[1].to_sexpr()})"

    def __str__(self) -> str:
        return self.to_sexpr()


@dataclass(frozen=True)
class LabeledExample:
    text: tuple[str, ...]
    label: int
    is_root: bool
    split: str = "train"

    def to_json(self) -> str:
        return json.dumps({"text": list(self.text), "label": self.label, "is_root": self.is_root, "split": self.split})


def _tokenize_sexpr(line: str, lineno: int | None):
    i, n = 0, len(line)
    while i < n:
        c = line[i]
        if c.isspace():
            i += 1
        elif c in "()":
            yield c, i
            i += 1
        else:
            j = i
            while j < n and not line[j].isspace() and line[j] not in "()":
                j += 1
            yield line[i:j], i
            i = j


def parse_tree(line: str, lineno: int | None = None, num_classes: int = NUM_CLASSES) -> SentimentTree:
    """Parse one s-expression line. Errors carry 1-based line/column."""
    toks = list(_tokenize_sexpr(line, lineno))
    if not toks:
        raise TreeParseError("empty line", lineno, 1)
    pos = 0

    def err(msg, at):
        col = toks[at][1] + 1 if at < len(toks) else len(line) + 1
        return TreeParseError(msg, lineno, col)

    def node() -> SentimentTree:
        nonlocal pos
        if pos >= len(toks):
            raise err("unbalanced parentheses: unexpected end of input", pos)
        if toks[pos][0] != "(":
            raise err(f"expected '(' but found {toks[pos][0]!r}", pos)
        pos += 1
        if pos >= len(toks) or toks[pos][0] in "()":
            raise err("missing node label", pos)
        raw = toks[pos][0]
        try:
            label = int(raw)
        except ValueError:
            raise err(f"non-integer label {raw!r}", pos) from None
        if not 0 <= label < num_classes:
            raise err(f"label {label} outside 0..{num_classes - 1}", pos)
        label_at = pos
        pos += 1
        if pos >= len(toks):
            raise err("unbalanced parentheses: unexpected end of input", pos)
        if toks[pos][0] == "(":
            kids = []
            while pos < len(toks) and toks[pos][0] == "(":
                kids.append(node())
            if pos >= len(toks):
                raise err("unbalanced parentheses: unexpected end of input", pos)
            if toks[pos][0] != ")":
                raise err(f"unexpected token {toks[pos][0]!r} after subtrees", pos)
            if len(kids) != 2:
                raise err(f"internal node has {len(kids)} children, expected 2", label_at)
            pos += 1
            return SentimentTree(label, tuple(kids))
        if toks[pos][0] == ")":
            raise err("leaf without a token", pos)
        token = toks[pos][0]
        pos += 1
        if pos >= len(toks):
            raise err("unbalanced parentheses: unexpected end of input", pos)
        if toks[pos][0] != ")":
            raise err(f"leaf has more than one token ({toks[pos][0]!r})", pos)
        pos += 1
        return SentimentTree(label, token=token)

    tree = node()
    if pos != len(toks):
        raise err("unbalanced parentheses: trailing input after tree", pos)
    return tree


def read_trees(path: str | Path, num_classes: int = NUM_CLASSES) -> list[SentimentTree]:
    trees = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                trees.append(parse_tree(line, lineno, num_classes))
    return trees


def load_splits(data_dir: str | Path) -> dict[str, list[SentimentTree]]:
    data_dir = Path(data_dir)
    missing = [s for s in SPLITS if not (data_dir / f"{s}.txt").is_file()]
    if missing:
        raise FileNotFoundError(f"{data_dir} lacks {', '.join(s + '.txt' for s in missing)}")
    out = {}
    for s in SPLITS:
        try:
            out[s] = read_trees(data_dir / f"{s}.txt")
        except TreeParseError as e:
            raise TreeParseError(f"{s}.txt: {e.reason}", e.line, e.column) from None
    return out


def bin_score_to_class(p: float, granularity: int = 5) -> int | None:
    """Map a [0, 1] sentiment score to a class.

    Five classes use upper-closed bins [0, .2], (.2, .4], (.4, .6], (.6, .8], (.8, 1].
    Two classes: p <= .4 is negative, p > .6 positive, anything between returns
    None (the neutral sample is excluded).
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"sentiment score {p} outside [0, 1]")
    if granularity == 5:
        for k, upper in enumerate((0.2, 0.4, 0.6, 0.8)):
            if p <= upper:
                return k
        return 4
    if granularity == 2:
        if p <= 0.4:
            return 0
        if p > 0.6:
            return 1
        return None
    raise ValueError(f"granularity must be 2 or 5, got {granularity}")


def five_to_binary(label: int) -> int | None:
    if label < 2:
        return 0
    if label > 2:
        return 1
    return None


def extract_examples(
    trees: Iterable[SentimentTree],
    mode: str = "root",
    split: str = "train",
    granularity: int = 5,
) -> list[LabeledExample]:
    if mode not in ("root", "all"):
        raise ValueError(f"mode must be 'root' or 'all', got {mode!r}")
    out = []
    for tree in trees:
        nodes = (tree,) if mode == "root" else tree.nodes()
        for n in nodes:
            label = n.label if granularity == 5 else five_to_binary(n.label)
            if label is None:
                continue
            out.append(LabeledExample(n.span, label, n is tree, split))
    return out


def unique_phrases(trees: Iterable[SentimentTree]) -> set[tuple[str, ...]]:
    return {n.span for t in trees for n in t.nodes()}


def class_distribution(examples, num_classes: int = NUM_CLASSES) -> list[int]:
    examples = list(examples)
    if not examples:
        raise ValueError("class_distribution needs at least one example")
    counts = [0] * num_classes
    for ex in examples:
        counts[ex.label if hasattr(ex, "label") else int(ex)] += 1
    return counts


def write_jsonl(examples: Iterable[LabeledExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")


# ---------------------------------------------------------------------------
# raw five-file distribution (datasetSentences / dictionary / sentiment_labels / datasetSplit)


@dataclass
class RawSST:
    sentences: dict[int, str] = field(default_factory=dict)
    phrase_ids: dict[str, int] = field(default_factory=dict)
    scores: dict[int, float] = field(default_factory=dict)
    split_of: dict[int, str] = field(default_factory=dict)


def load_raw_sst(data_dir: str | Path) -> RawSST:
    data_dir = Path(data_dir)
    raw = RawSST()
    with open(data_dir / "datasetSentences.txt", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            idx, text = line.rstrip("\n").split("\t", 1)
            raw.sentences[int(idx)] = text
    with open(data_dir / "dictionary.txt", encoding="utf-8") as fh:
        for line in fh:
            phrase, pid = line.rstrip("\n").rsplit("|", 1)
            raw.phrase_ids[phrase] = int(pid)
    with open(data_dir / "sentiment_labels.txt", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            pid, score = line.strip().split("|")
            raw.scores[int(pid)] = float(score)
    names = {1: "train", 2: "test", 3: "dev"}
    with open(data_dir / "datasetSplit.txt", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            idx, s = line.strip().split(",")
            raw.split_of[int(idx)] = names[int(s)]
    return raw


def raw_sentence_examples(raw: RawSST, granularity: int = 5) -> list[LabeledExample]:
    out = []
    for idx, text in raw.sentences.items():
        pid = raw.phrase_ids.get(text)
        if pid is None:
            continue
        label = bin_score_to_class(raw.scores[pid], granularity)
        if label is None:
            continue
        out.append(LabeledExample(tuple(text.split()), label, True, raw.split_of.get(idx, "train")))
    return out
