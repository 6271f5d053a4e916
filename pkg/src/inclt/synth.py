"""Synthetic corpora with known label functions.

copy        label = class of the token itself (solvable left to right)
bracket     tokens are ``(`` / ``)``; label = nesting depth after the token, mod K
acausal     label = class of the *next* token; the last token gets ``END``
majority    classification; label = most frequent token class (ties -> lowest class)

Words are ``w0 .. w{V-1}``; word ``wi`` belongs to class ``C{i mod K}``.
"""

from __future__ import annotations

import random
from collections import Counter

from .data import Corpus, Example

SYNTH_TASKS = ("copy", "bracket", "acausal", "majority")
END_LABEL = "END"


def word_class(word: str, n_classes: int) -> str:
    return f"C{int(word[1:]) % n_classes}"


def copy_labels(tokens, n_classes: int) -> list[str]:
    return [word_class(w, n_classes) for w in tokens]


def bracket_depths(tokens, n_classes: int | None = None) -> list[str]:
    """Depth after each bracket, e.g. ``"(()"`` -> ``["1", "2", "1"]`` for K > 2."""
    tokens = list(tokens)
    if not tokens:
        raise ValueError("empty sequence")
    depth, out = 0, []
    for tok in tokens:
        if tok == "(":
            depth += 1
        elif tok == ")":
            depth -= 1
        else:
            raise ValueError(f"unexpected token {tok!r} in bracket sequence")
        if depth < 0:
            raise ValueError("closing bracket without a matching opening one")
        out.append(str(depth % n_classes if n_classes else depth))
    return out


def next_class_labels(tokens, n_classes: int) -> list[str]:
    tokens = list(tokens)
    return [word_class(w, n_classes) for w in tokens[1:]] + [END_LABEL]


def majority_label(tokens, n_classes: int) -> str:
    counts = Counter(int(w[1:]) % n_classes for w in tokens)
    best = max(counts.values())
    return f"C{min(c for c, n in counts.items() if n == best)}"


def _words(rng: random.Random, length: int, vocab: int) -> list[str]:
    return [f"w{rng.randrange(vocab)}" for _ in range(length)]


def _brackets(rng: random.Random, length: int, max_depth: int) -> list[str]:
    depth, out = 0, []
    for _ in range(length):
        if depth == 0 or (depth < max_depth and rng.random() < 0.5):
            out.append("(")
            depth += 1
        else:
            out.append(")")
            depth -= 1
    return out


def synth_generate(task: str, n: int, seed: int = 0, *, min_len: int = 4, max_len: int = 12,
                   vocab: int = 20, n_classes: int | None = None,
                   max_depth: int = 6) -> Corpus:
    """Generate ``n`` examples of a synthetic task, deterministically per seed."""
    if task not in SYNTH_TASKS:
        raise ValueError(f"unknown synthetic task {task!r}; choose from {SYNTH_TASKS}")
    if min_len < 1 or max_len < min_len:
        raise ValueError("need 1 <= min_len <= max_len")
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = random.Random(f"{task}:{seed}")
    examples = []
    for _ in range(n):
        length = rng.randint(min_len, max_len)
        if task == "copy":
            k = n_classes or 4
            toks = _words(rng, length, vocab)
            examples.append(Example(toks, copy_labels(toks, k)))
        elif task == "bracket":
            toks = _brackets(rng, length, max_depth)
            examples.append(Example(toks, bracket_depths(toks, n_classes or 3)))
        elif task == "acausal":
            k = n_classes or 4
            toks = _words(rng, length, vocab)
            examples.append(Example(toks, next_class_labels(toks, k)))
        else:
            k = n_classes or 2
            toks = _words(rng, length, vocab)
            examples.append(Example(toks, majority_label(toks, k)))
    return Corpus("classification" if task == "majority" else "tagging", examples)
