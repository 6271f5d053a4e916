"""Incremental inference speed: restart-incremental vs. recurrent deployment.

A benchmark run times the complete incremental processing of one sequence
(every timestep, including the per-step output head) at batch size 1.
Sequences are random token ids.  Each length is run ``warmup`` times
untimed, then ``reps`` times timed; the median is reported.  Timed regions
run on a single BLAS thread with finite-value checks off.
"""

from __future__ import annotations

import csv
import json
import statistics
import time
import warnings
from contextlib import nullcontext
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .incremental import run_recurrent, run_restart_incremental
from .model import Model, ModelConfig, init_weights

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - optional
    threadpool_limits = None

MODES = ("restart", "recurrent")


@dataclass
class BenchResult:
    mode: str
    model: str
    n_layers: int
    d_model: int
    d_ff: int
    n_heads: int
    length: int
    reps: int
    seq_per_sec: float
    time_median_s: float
    step_mean_ms: float
    step_p50_ms: float
    step_p95_ms: float
    forward_tokens: int


CSV_COLUMNS = [f.name for f in fields(BenchResult)]


def expected_forward_tokens(mode: str, T: int, align: int = 0) -> int:
    """Token-passes one incremental run costs: ``T`` recurrent, ``T(T+1)/2`` restart."""
    n = T + align
    if mode == "recurrent":
        return n
    if mode == "restart":
        return n * (n + 1) // 2
    raise ValueError(f"mode must be one of {MODES}")


class _TimedModel(Model):
    """Model wrapper recording the duration of each forward/step call."""

    def __init__(self, model: Model):
        super().__init__(model.cfg, model.weights, model.kind, model.tokens, model.labels)
        self.durations: list[float] = []

    def forward_full(self, ids, causal=None):
        t0 = time.perf_counter()
        out = super().forward_full(ids, causal)
        self.durations.append(time.perf_counter() - t0)
        return out

    def step(self, state, token):
        t0 = time.perf_counter()
        out = super().step(state, token)
        self.durations.append(time.perf_counter() - t0)
        return out


def bench_model(kind: str = "lt_r_cm", n_layers: int = 4, d_model: int = 512, d_ff: int = 2048,
                n_heads: int = 8, vocab_size: int = 1000, n_labels: int = 20,
                max_len: int = 512, seed: int = 0, head_kind: str = "tagging") -> Model:
    """Randomly initialised model at benchmark size (defaults: 4 x 512, FFN 2048)."""
    cfg = ModelConfig.for_kind(kind, n_layers=n_layers, d_model=d_model, d_ff=d_ff,
                               n_heads=n_heads, vocab_size=vocab_size, n_labels=n_labels,
                               max_len=max_len, dropout=0.0, head_kind=head_kind)
    return Model(cfg, init_weights(cfg, seed), kind)


def bench_mode(model: Model, mode: str, lengths: Sequence[int], reps: int = 5,
               warmup: int = 2, seed: int = 0, include_serialization: bool = False,
               single_thread: bool = True) -> list[BenchResult]:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if reps < 5 or warmup < 2:
        raise ValueError("need reps >= 5 and warmup >= 2")
    if any(T < 1 for T in lengths):
        raise ValueError("sequence lengths must be >= 1")
    driver = run_recurrent if mode == "recurrent" else run_restart_incremental
    for T in lengths:
        if T + model.cfg.delay > model.cfg.max_len:
            raise ValueError(f"length {T} exceeds the model's max_len")
    rng = np.random.default_rng(seed)
    timed = _TimedModel(model)
    times = {T: [] for T in lengths}
    steps = {T: [] for T in lengths}
    fwd = {}

    def once(T: int, keep: bool) -> None:
        ids = rng.integers(2, model.cfg.vocab_size, size=T).tolist()
        timed.durations = []
        t0 = time.perf_counter()
        log = driver(timed, ids)
        if include_serialization:
            json.dumps(log.to_dict())
        elapsed = time.perf_counter() - t0
        if keep:
            times[T].append(elapsed)
            steps[T].extend(timed.durations)
            fwd[T] = log.forward_tokens

    if single_thread and threadpool_limits is None:
        warnings.warn("threadpoolctl not installed; BLAS may use several threads", stacklevel=2)
    limit = threadpool_limits(1) if (single_thread and threadpool_limits) else nullcontext()
    with limit, nx.finite_checks(False):
        for T in lengths:
            for _ in range(warmup):
                once(T, False)
        # reps are interleaved across lengths so slow drift hits every length alike
        for _ in range(reps):
            for T in lengths:
                once(T, True)
    cfg = model.cfg
    results = []
    for T in lengths:
        med = statistics.median(times[T])
        step_ms = np.asarray(steps[T]) * 1e3
        results.append(BenchResult(
            mode=mode, model=model.kind, n_layers=cfg.n_layers, d_model=cfg.d_model,
            d_ff=cfg.d_ff, n_heads=cfg.n_heads, length=T, reps=reps,
            seq_per_sec=1.0 / med, time_median_s=med,
            step_mean_ms=float(step_ms.mean()),
            step_p50_ms=float(np.percentile(step_ms, 50)),
            step_p95_ms=float(np.percentile(step_ms, 95)),
            forward_tokens=int(fwd[T])))
    return results


def bench_report(results: Sequence[BenchResult], path, plot_path=None,
                 extra: dict | None = None) -> None:
    """CSV with a fixed column order; optionally a length x mode pivot for plotting."""
    extra = extra or {}
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS + list(extra))
        writer.writeheader()
        for r in results:
            row = {**asdict(r), **extra}
            for key in ("seq_per_sec", "time_median_s", "step_mean_ms", "step_p50_ms",
                        "step_p95_ms"):
                row[key] = f"{row[key]:.6g}"
            writer.writerow(row)
    if plot_path is not None:
        series = sorted({f"{r.model}:{r.mode}" for r in results})
        lengths = sorted({r.length for r in results})
        table = {(f"{r.model}:{r.mode}", r.length): r.seq_per_sec for r in results}
        with Path(plot_path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["length", *series])
            for T in lengths:
                writer.writerow([T, *(f"{table[(s, T)]:.6g}" if (s, T) in table else ""
                                     for s in series)])


def speedup(fast: Sequence[BenchResult], slow: Sequence[BenchResult], length: int) -> float:
    f = next(r for r in fast if r.length == length)
    s = next(r for r in slow if r.length == length)
    return s.time_median_s / f.time_median_s


def scaling_ratio(results: Sequence[BenchResult], long: int, short: int) -> float:
    by_len = {r.length: r.time_median_s for r in results}
    return by_len[long] / by_len[short]
