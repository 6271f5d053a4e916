"""Corpora, vocabularies and file readers for tagging and classification data.

Tagging files are a two-column CoNLL subset: ``token<TAB>label`` per line,
blank line between sequences.  Classification files hold one example per
line as ``label<TAB>space separated tokens``.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD = "<pad>"
UNK = "<unk>"
PAD_ID = 0
UNK_ID = 1

TASKS = ("tagging", "classification")
DEFAULT_MAX_LEN = 256


class DataFormatError(ValueError):
    """Malformed corpus file; message carries ``path:line``."""


class Vocab:
    """Dense token<->id map with reserved PAD and UNK ids.

    Once frozen, unknown tokens map to UNK instead of growing the table.
    """

    def __init__(self, tokens: Iterable[str] = (), specials: bool = True):
        self.itos: list[str] = []
        self.stoi: dict[str, int] = {}
        self.frozen = False
        self.has_specials = specials
        if specials:
            self.add(PAD)
            self.add(UNK)
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        idx = self.stoi.get(token)
        if idx is not None:
            return idx
        if self.frozen:
            return self.lookup(token)
        self.stoi[token] = len(self.itos)
        self.itos.append(token)
        return self.stoi[token]

    def freeze(self) -> "Vocab":
        self.frozen = True
        return self

    def lookup(self, token: str) -> int:
        idx = self.stoi.get(token)
        if idx is not None:
            return idx
        if not self.has_specials:
            raise KeyError(f"unknown symbol {token!r}")
        return UNK_ID

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.lookup(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, items: Sequence[str], specials: bool = True) -> "Vocab":
        v = cls(specials=False)
        v.has_specials = specials
        for tok in items:
            v.add(tok)
        if specials and (v.itos[:2] != [PAD, UNK]):
            raise ValueError("vocabulary list must start with PAD and UNK")
        return v.freeze()


@dataclass
class Example:
    tokens: list[str]
    labels: list[str] | str

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("empty sequence")
        if isinstance(self.labels, list) and len(self.labels) != len(self.tokens):
            raise ValueError(
                f"tagging example has {len(self.tokens)} tokens but {len(self.labels)} labels"
            )


@dataclass
class Corpus:
    task: str
    examples: list[Example] = field(default_factory=list)
    split: str | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def label_set(self) -> list[str]:
        seen: dict[str, None] = {}
        for ex in self.examples:
            labels = ex.labels if isinstance(ex.labels, list) else [ex.labels]
            for lab in labels:
                seen.setdefault(lab, None)
        return list(seen)

    def filter_length(self, max_len: int) -> "Corpus":
        kept = [ex for ex in self.examples if len(ex.tokens) <= max_len]
        return Corpus(self.task, kept, self.split)


def read_conll(path, lowercase: bool = False) -> Corpus:
    path = Path(path)
    examples: list[Example] = []
    tokens: list[str] = []
    labels: list[str] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                if tokens:
                    examples.append(Example(tokens, labels))
                    tokens, labels = [], []
                continue
            cols = line.split("\t")
            if len(cols) != 2 or not cols[0] or not cols[1]:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 'token<TAB>label', got {len(cols)} column(s)"
                )
            tok, lab = cols
            tokens.append(tok.lower() if lowercase else tok)
            labels.append(lab)
    if tokens:
        examples.append(Example(tokens, labels))
    return Corpus("tagging", examples)


def write_conll(corpus: Corpus, path) -> None:
    if corpus.task != "tagging":
        raise ValueError("write_conll needs a tagging corpus")
    with Path(path).open("w", encoding="utf-8") as fh:
        for i, ex in enumerate(corpus.examples):
            if i:
                fh.write("\n")
            for tok, lab in zip(ex.tokens, ex.labels):
                fh.write(f"{tok}\t{lab}\n")


def read_classification(path, lowercase: bool = False) -> Corpus:
    path = Path(path)
    examples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 2 or not cols[0] or not cols[1].split():
                raise DataFormatError(f"{path}:{lineno}: expected 'label<TAB>text'")
            text = cols[1].lower() if lowercase else cols[1]
            examples.append(Example(text.split(), cols[0]))
    return Corpus("classification", examples)


def write_classification(corpus: Corpus, path) -> None:
    if corpus.task != "classification":
        raise ValueError("write_classification needs a classification corpus")
    with Path(path).open("w", encoding="utf-8") as fh:
        for ex in corpus.examples:
            fh.write(f"{ex.labels}\t{' '.join(ex.tokens)}\n")


def split_counts(n: int, fractions: Sequence[float] = (0.7, 0.1, 0.2)) -> list[int]:
    """Largest-remainder apportionment; ties go to the earlier split."""
    quotas = [n * f for f in fractions]
    counts = [int(q) for q in quotas]
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_random(corpus: Corpus, fractions=(0.7, 0.1, 0.2), seed: int = 0):
    """Shuffle and cut into train/valid/test corpora."""
    n_train, n_valid, _ = split_counts(len(corpus), fractions)
    idx = list(range(len(corpus)))
    random.Random(seed).shuffle(idx)
    parts = (idx[:n_train], idx[n_train:n_train + n_valid], idx[n_train + n_valid:])
    names = ("train", "valid", "test")
    return tuple(
        Corpus(corpus.task, [corpus.examples[i] for i in part], name)
        for part, name in zip(parts, names)
    )


def build_vocabs(train: Corpus, lowercase: bool = False) -> tuple[Vocab, Vocab]:
    """Token vocab (with PAD/UNK) and label vocab, both from the training split only."""
    tokens = Vocab()
    for ex in train:
        for tok in ex.tokens:
            tokens.add(tok.lower() if lowercase else tok)
    labels = Vocab(specials=False)
    for lab in sorted(train.label_set()):
        labels.add(lab)
    return tokens.freeze(), labels.freeze()


def load_text_embeddings(path, vocab: Vocab, dim: int | None = None,
                         rng: np.random.Generator | None = None) -> np.ndarray:
    """Read whitespace-separated ``word v1 v2 ...`` vectors (GloVe layout).

    Rows for words missing from the file keep a small random init; the PAD
    row is zero.
    """
    rng = rng or np.random.default_rng(0)
    found: dict[int, np.ndarray] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                continue
            word, vec = parts[0], parts[1:]
            if dim is None:
                dim = len(vec)
            if len(vec) != dim:
                raise DataFormatError(f"{path}:{lineno}: expected {dim} values, got {len(vec)}")
            if word in vocab:
                found[vocab.stoi[word]] = np.asarray(vec, dtype=np.float64)
    if dim is None:
        raise DataFormatError(f"{path}: no vectors found")
    table = rng.normal(0.0, 0.1, size=(len(vocab), dim))
    for i, vec in found.items():
        table[i] = vec
    if vocab.has_specials:
        table[PAD_ID] = 0.0
    return table
