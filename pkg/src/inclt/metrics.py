"""Diachronic incremental metrics over :class:`IncrementalLog` records.

All three metrics compare a log against its own final row, never against
gold labels.

Edit overhead (EO)
    Consecutive rows are diffed.  A label appearing at a new position is a
    necessary edit; a label that changes at an existing position is an
    unnecessary one.  EO = unnecessary / all edits.  For classification the
    first emitted label is necessary and every later change unnecessary.

Correction time (CT)
    For each output unit (token position, or the single classification
    decision) let F0 be the first timestep with any label for it and FD the
    first timestep from which its label equals the final one for good.  The
    unit scores (FD - F0) / (N - F0) with N the last timestep, or 0 when
    F0 == N.  CT is the mean over units.

Relative correctness (RC)
    Fraction of timesteps whose row is a prefix of the final row (tagging)
    or equals the final label (classification).  Timesteps with no
    committed output yet are left out of the denominator.

Delay variants (EOΔd, RCΔd) score :func:`delayed_view` of a log: the ``d``
most recent commitments at every timestep are withheld and ``d`` closing
timesteps release them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

from .incremental import IncrementalLog


class UndefinedMetricError(ValueError):
    """The metric has no value for this log (for instance, no rows)."""


def _rows(log: IncrementalLog) -> list:
    if log is None or not log.rows:
        raise UndefinedMetricError("empty log")
    return log.rows


def _as_units(log: IncrementalLog) -> list[list]:
    """Rows as label lists: classification rows become ``[]`` or ``[label]``."""
    if log.task == "tagging":
        return log.rows
    return [[] if r is None else [r] for r in log.rows]


def count_edits(log: IncrementalLog) -> tuple[int, int]:
    """Return ``(necessary, unnecessary)`` edit counts."""
    _rows(log)
    necessary = unnecessary = 0
    prev: list = []
    for row in _as_units(log):
        if len(row) < len(prev):
            raise UndefinedMetricError("row shrinks; revocations are not part of this edit model")
        for i, lab in enumerate(row):
            if i >= len(prev):
                necessary += 1
            elif lab != prev[i]:
                unnecessary += 1
        prev = row
    return necessary, unnecessary


def edit_overhead(log: IncrementalLog) -> float:
    necessary, unnecessary = count_edits(log)
    total = necessary + unnecessary
    if total == 0:
        raise UndefinedMetricError("log contains no edits")
    return unnecessary / total


def correction_time(log: IncrementalLog) -> float:
    _rows(log)
    rows = _as_units(log)
    n_steps = len(rows)
    final = rows[-1]
    if not final:
        raise UndefinedMetricError("final row is empty")
    scores = []
    for unit, target in enumerate(final):
        first_seen = None
        decided = None
        for t, row in enumerate(rows, start=1):
            if unit >= len(row):
                continue
            if first_seen is None:
                first_seen = t
            if row[unit] == target:
                if decided is None:
                    decided = t
            else:
                decided = None
        span = n_steps - first_seen
        scores.append((decided - first_seen) / span if span > 0 else 0.0)
    return sum(scores) / len(scores)


def relative_correctness(log: IncrementalLog, delay: int = 0) -> float:
    """RC of ``log``, or of its ``delay``-step delayed view (RCΔd)."""
    if delay:
        log = delayed_view(log, delay)
    _rows(log)
    rows = _as_units(log)
    final = rows[-1]
    counted = correct = 0
    for row in rows:
        if not row:
            continue
        counted += 1
        correct += row == final[: len(row)]
    if counted == 0:
        raise UndefinedMetricError("no timestep carries an output")
    return correct / counted


def delayed_view(log: IncrementalLog, d: int) -> IncrementalLog:
    """The log an output-withholding delay of ``d`` extra steps would produce.

    Tagging: row ``t`` loses its ``d`` most recent labels; ``d`` closing
    rows reveal them one at a time.  Classification: the first ``d`` rows
    are withheld, and ``d`` closing rows repeat the final label.
    """
    if d < 0:
        raise ValueError("delay must be >= 0")
    if d == 0:
        return log
    rows = _rows(log)
    n = len(rows)
    new_rows = []
    if log.task == "tagging":
        for t in range(1, n + d + 1):
            src = rows[min(t, n) - 1]
            drop = max(0, d - max(0, t - n))
            new_rows.append(list(src[: max(0, len(src) - drop)]))
    else:
        hidden = log.delay + d
        for t in range(1, n + d + 1):
            new_rows.append(None if t <= hidden else rows[min(t, n) - 1])
    return IncrementalLog(log.task, log.T, new_rows, log.delay + d, log.id, log.mode,
                          log.tokens)


def edit_overhead_delayed(log: IncrementalLog, d: int) -> float:
    return edit_overhead(delayed_view(log, d))


# ---------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    id: str | int | None
    EO: float
    CT: float
    RC: float
    EO_d1: float
    EO_d2: float
    RC_d1: float
    RC_d2: float
    sequences: int = 1
    tokens: int = 0
    edits: int = 0
    unnecessary_edits: int = 0

    METRIC_FIELDS = ("EO", "CT", "RC", "EO_d1", "EO_d2", "RC_d1", "RC_d2")

    def as_row(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def score_log(log: IncrementalLog) -> MetricsReport:
    necessary, unnecessary = count_edits(log)
    return MetricsReport(
        id=log.id,
        EO=edit_overhead(log),
        CT=correction_time(log),
        RC=relative_correctness(log),
        EO_d1=edit_overhead_delayed(log, 1),
        EO_d2=edit_overhead_delayed(log, 2),
        RC_d1=relative_correctness(log, 1),
        RC_d2=relative_correctness(log, 2),
        tokens=log.T,
        edits=necessary + unnecessary,
        unnecessary_edits=unnecessary,
    )


def aggregate(reports: Sequence[MetricsReport], id="mean") -> MetricsReport:
    """Unweighted mean over sequences; counts are summed."""
    reports = list(reports)
    if not reports:
        raise UndefinedMetricError("no reports to aggregate")
    means = {k: math.fsum(getattr(r, k) for r in reports) / len(reports)
             for k in MetricsReport.METRIC_FIELDS}
    return MetricsReport(
        id=id,
        **means,
        sequences=sum(r.sequences for r in reports),
        tokens=sum(r.tokens for r in reports),
        edits=sum(r.edits for r in reports),
        unnecessary_edits=sum(r.unnecessary_edits for r in reports),
    )


def score_logs(logs: Iterable[IncrementalLog]) -> tuple[list[MetricsReport], MetricsReport]:
    logs = list(logs)
    tasks = {log.task for log in logs}
    if len(tasks) > 1:
        raise ValueError(f"logs mix tasks {sorted(tasks)}; score them separately")
    per_seq = [score_log(log) for log in logs]
    return per_seq, aggregate(per_seq)


CSV_COLUMNS = [f.name for f in fields(MetricsReport)]


def write_csv(per_seq: Sequence[MetricsReport], mean: MetricsReport | None, path,
              extra: dict | None = None) -> None:
    extra = extra or {}
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS + list(extra))
        writer.writeheader()
        for r in list(per_seq) + ([mean] if mean is not None else []):
            writer.writerow({**r.as_row(), **extra})


def format_table(mean: MetricsReport, title: str = "") -> str:
    head = "  ".join(f"{k:>6}" for k in MetricsReport.METRIC_FIELDS)
    vals = "  ".join(f"{getattr(mean, k):6.3f}" for k in MetricsReport.METRIC_FIELDS)
    lines = [title] if title else []
    lines += [head, vals,
              f"sequences={mean.sequences} tokens={mean.tokens} "
              f"edits={mean.edits} unnecessary={mean.unnecessary_edits}"]
    return "\n".join(lines)


@dataclass
class GateResult:
    name: str
    passed: bool
    detail: str = ""


def monotone_gate(mean: MetricsReport) -> GateResult:
    ok = mean.EO == 0.0 and mean.CT == 0.0 and mean.RC == 1.0
    return GateResult("monotone", ok, f"EO={mean.EO:.3f} CT={mean.CT:.3f} RC={mean.RC:.3f}")


def delay_monotone_gate(per_seq: Sequence[MetricsReport]) -> GateResult:
    bad = [r.id for r in per_seq if not (r.RC <= r.RC_d1 <= r.RC_d2)]
    return GateResult("rc-delay-monotone", not bad, f"violations={bad[:5]}")


GATES = {"monotone": lambda per, mean: monotone_gate(mean),
         "rc-delay-monotone": lambda per, mean: delay_monotone_gate(per)}
