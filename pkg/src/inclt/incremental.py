"""Deployment drivers that turn an encoder into an incremental processor.

Both drivers produce an :class:`IncrementalLog`: for every timestep, the
output the system has committed to so far.  Timestep ``t`` means "the
first ``t`` input tokens have arrived" (or, past the end of the input,
``t - T`` more ticks of waiting).

Delay
-----
A log with delay ``D`` has ``T + D`` rows.  For tagging, row ``t`` holds
labels for tokens ``1 .. min(t - D, T)`` (empty while ``t <= D``).  For
classification, row ``t`` is ``None`` while ``t <= D`` and otherwise the
label for the input read up to ``min(t, T)``.

A model trained with alignment ``a`` (``cfg.delay``) reads its label for
token ``i`` at position ``i + a``, so it consumes ``a`` trailing PAD ids.
Any delay beyond ``a`` is plain output withholding.

JSONL schema (one object per line)
----------------------------------
``id``        sequence identifier (string or int)
``task``      ``"tagging"`` or ``"classification"``
``T``         number of input tokens
``delay``     effective delay D of the log
``rows``      list of T + D entries: label lists (tagging) or label/null
``final``     equal to ``rows[-1]``
optional: ``mode``, ``tokens``, ``forward_tokens``, ``dists``
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import PAD_ID
from .model import Model, UnsupportedModeError

REQUIRED_FIELDS = ("id", "task", "T", "delay", "rows", "final")
OPTIONAL_FIELDS = ("mode", "tokens", "forward_tokens", "dists")


class LogFormatError(ValueError):
    """Malformed or internally inconsistent incremental log."""


@dataclass
class IncrementalLog:
    task: str
    T: int
    rows: list
    delay: int = 0
    id: str | int | None = None
    mode: str | None = None
    tokens: list | None = None
    forward_tokens: int | None = None
    dists: list | None = None

    def __post_init__(self):
        self.validate()

    @property
    def final(self):
        return self.rows[-1]

    def committed_length(self, t: int) -> int:
        """Tagging row length at 1-based timestep ``t``."""
        return max(0, min(t - self.delay, self.T))

    def validate(self) -> None:
        if self.task not in ("tagging", "classification"):
            raise LogFormatError(f"unknown task {self.task!r}")
        if self.T < 1:
            raise LogFormatError("T must be >= 1")
        if self.delay < 0:
            raise LogFormatError("delay must be >= 0")
        if len(self.rows) != self.T + self.delay:
            raise LogFormatError(
                f"expected T + delay = {self.T + self.delay} rows, got {len(self.rows)}")
        for t, row in enumerate(self.rows, start=1):
            if self.task == "tagging":
                if not isinstance(row, list):
                    raise LogFormatError(f"row {t}: tagging rows must be lists")
                if len(row) != self.committed_length(t):
                    raise LogFormatError(
                        f"row {t}: expected {self.committed_length(t)} labels, got {len(row)}")
            else:
                if isinstance(row, list):
                    raise LogFormatError(f"row {t}: classification rows hold one label")
                if (row is None) != (t <= self.delay):
                    raise LogFormatError(
                        f"row {t}: label must be null exactly while t <= delay")

    def to_dict(self) -> dict:
        d = {"id": self.id, "task": self.task, "T": self.T, "delay": self.delay,
             "rows": self.rows, "final": self.final}
        for key in OPTIONAL_FIELDS:
            val = getattr(self, key)
            if val is not None:
                d[key] = val
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "IncrementalLog":
        for key in REQUIRED_FIELDS:
            if key not in d:
                raise LogFormatError(f"missing field {key!r}")
        log = cls(task=d["task"], T=d["T"], rows=d["rows"], delay=d["delay"], id=d["id"],
                  **{k: d[k] for k in OPTIONAL_FIELDS if k in d})
        if d["final"] != log.final:
            raise LogFormatError("field 'final' differs from the last row")
        return log


# ---------------------------------------------------------------- drivers


def _resolve_delay(model: Model, delay: int | None) -> tuple[int, int]:
    align = model.cfg.delay
    delay = align if delay is None else delay
    if delay < 0:
        raise ValueError("delay must be >= 0")
    if delay < align:
        raise ValueError(f"model is trained to emit {align} step(s) late; delay must be >= {align}")
    return delay, align


def _label(model: Model, idx) -> str:
    return model.label_name(int(idx))


def _round(a: np.ndarray, digits: int | None) -> list:
    return (np.round(a, digits) if digits is not None else a).tolist()


def run_restart_incremental(model: Model, tokens: Sequence[int], delay: int | None = None,
                            *, record_dists: bool = False, digits: int | None = 6,
                            seq_id=None) -> IncrementalLog:
    """Recompute the full encoder on every prefix and log the committed outputs."""
    tokens = list(tokens)
    T = len(tokens)
    if T < 1:
        raise ValueError("empty input")
    D, a = _resolve_delay(model, delay)
    cfg = model.cfg
    tagging = cfg.head_kind == "tagging"
    stream = tokens + [PAD_ID] * a if tagging else tokens
    rows, dists = [], []
    forward_tokens = 0
    cache_len, cache = None, None
    for t in range(1, T + D + 1):
        n_in = min(t, len(stream))
        if n_in != cache_len:
            cache = model.forward_full(stream[:n_in])[1]
            cache_len = n_in
            forward_tokens += n_in
        if tagging:
            n = max(0, min(t - D, T))
            probs = cache[a:a + n]
            rows.append([_label(model, i) for i in np.argmax(probs, axis=-1)] if n else [])
            if record_dists:
                dists.append(_round(probs, digits))
        elif t <= D:
            rows.append(None)
            if record_dists:
                dists.append(None)
        else:
            rows.append(_label(model, np.argmax(cache)))
            if record_dists:
                dists.append(_round(cache, digits))
    return IncrementalLog(cfg.head_kind, T, rows, D, seq_id, "restart", None,
                          forward_tokens, dists if record_dists else None)


def run_recurrent(model: Model, tokens: Sequence[int], delay: int | None = None,
                  *, record_dists: bool = False, digits: int | None = 6,
                  seq_id=None) -> IncrementalLog:
    """Feed tokens one at a time through the recurrent state and log the outputs.

    Tagging labels, once emitted, are never revised.
    """
    cfg = model.cfg
    if cfg.attention_kind != "linear":
        raise UnsupportedModeError("the recurrent driver needs a linear-attention model")
    tokens = list(tokens)
    T = len(tokens)
    if T < 1:
        raise ValueError("empty input")
    D, a = _resolve_delay(model, delay)
    tagging = cfg.head_kind == "tagging"
    stream = tokens + [PAD_ID] * a if tagging else tokens
    state = model.init_state()
    emitted, emitted_probs = [], []
    latest = None
    rows, dists = [], []
    for t in range(1, T + D + 1):
        if t <= len(stream):
            state, out = model.step(state, stream[t - 1])
            if tagging:
                if t > a:
                    emitted.append(_label(model, np.argmax(out)))
                    emitted_probs.append(out)
            else:
                latest = out
        if tagging:
            n = max(0, min(t - D, T))
            rows.append(emitted[:n])
            if record_dists:
                dists.append(_round(np.asarray(emitted_probs[:n]).reshape(n, -1), digits))
        elif t <= D:
            rows.append(None)
            if record_dists:
                dists.append(None)
        else:
            rows.append(_label(model, np.argmax(latest)))
            if record_dists:
                dists.append(_round(latest, digits))
    return IncrementalLog(cfg.head_kind, T, rows, D, seq_id, "recurrent", None,
                          state.t, dists if record_dists else None)


DRIVERS = {"restart": run_restart_incremental, "recurrent": run_recurrent}


def run_corpus(model: Model, sequences: Iterable[Sequence[int]], mode: str,
               delay: int | None = None, *, workers: int = 1, **kw) -> list[IncrementalLog]:
    """Run a driver over many sequences; logs come back in input order."""
    if mode not in DRIVERS:
        raise ValueError(f"mode must be one of {sorted(DRIVERS)}")
    driver = DRIVERS[mode]
    seqs = list(sequences)

    def one(item):
        i, seq = item
        return driver(model, seq, delay, seq_id=i, **kw)

    if workers <= 1:
        return [one(item) for item in enumerate(seqs)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, enumerate(seqs)))


# ---------------------------------------------------------------- JSONL


def log_to_jsonl(logs: Iterable[IncrementalLog], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for log in logs:
            fh.write(json.dumps(log.to_dict(), ensure_ascii=False) + "\n")


def log_from_jsonl(path) -> list[IncrementalLog]:
    logs = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LogFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise LogFormatError(f"{path}:{lineno}: expected a JSON object")
            try:
                logs.append(IncrementalLog.from_dict(obj))
            except (LogFormatError, TypeError) as exc:
                raise LogFormatError(f"{path}:{lineno}: {exc}") from None
    return logs
