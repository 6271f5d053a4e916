import csv
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inclt.incremental import IncrementalLog, log_from_jsonl, log_to_jsonl, run_recurrent
from inclt.metrics import (CSV_COLUMNS, MetricsReport, UndefinedMetricError, aggregate,
                           correction_time, count_edits, delay_monotone_gate, delayed_view,
                           edit_overhead, format_table, monotone_gate, relative_correctness,
                           score_log, score_logs, write_csv)
from inclt.model import Model, ModelConfig, init_weights
from metric_fixtures import FIELDS, FIXTURES, random_log


@pytest.mark.parametrize("fixture", FIXTURES, ids=[f[0] for f in FIXTURES])
def test_hand_enumerated_fixture(fixture):
    _, log, *expected = fixture
    report = score_log(log)
    for field, want in zip(FIELDS, expected):
        assert getattr(report, field) == float(want), field


def test_fixture_set_covers_tasks_and_delays():
    assert {f[1].task for f in FIXTURES} == {"tagging", "classification"}
    assert {f[1].delay for f in FIXTURES} == {0, 1, 2}
    assert len(FIXTURES) >= 6


def test_edit_counts_of_the_substitution_example():
    log = FIXTURES[0][1]
    assert count_edits(log) == (3, 1)
    assert edit_overhead(log) == 0.25


def test_label_correct_from_the_start_has_zero_correction_time():
    log = IncrementalLog("classification", 3, ["k", "k", "k"])
    assert correction_time(log) == 0.0


def test_delayed_view_shapes():
    log = IncrementalLog("tagging", 3, [["A"], ["B", "C"], ["B", "C", "D"]])
    view = delayed_view(log, 2)
    assert view.delay == 2 and len(view.rows) == 5
    assert view.rows == [[], [], ["B"], ["B", "C"], ["B", "C", "D"]]
    assert delayed_view(log, 0) is log
    with pytest.raises(ValueError):
        delayed_view(log, -1)


def test_undefined_metrics():
    with pytest.raises(UndefinedMetricError):
        edit_overhead(None)
    with pytest.raises(UndefinedMetricError):
        aggregate([])


# ---------------------------------------------------------------- properties


def test_rc_is_monotone_in_delay_on_1000_random_logs():
    rng = random.Random(20240611)
    for _ in range(1000):
        log = random_log(rng)
        rc0, rc1, rc2 = (relative_correctness(log, d) for d in (0, 1, 2))
        assert rc0 <= rc1 <= rc2, log


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metrics_lie_in_unit_interval(seed):
    report = score_log(random_log(random.Random(seed)))
    for field in FIELDS:
        assert 0.0 <= getattr(report, field) <= 1.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 6))
def test_rc_with_d_equal_T_dominates(seed, d):
    log = random_log(random.Random(seed))
    assert relative_correctness(log, log.T + 2) >= relative_correctness(log, min(d, log.T + 2))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_constant_rows_score_as_monotone(seed):
    rng = random.Random(seed)
    log = random_log(rng)
    final = log.final
    if log.task == "tagging":
        rows = [final[: len(r)] for r in log.rows]
    else:
        rows = [None if r is None else final for r in log.rows]
    clean = IncrementalLog(log.task, log.T, rows, log.delay)
    assert (edit_overhead(clean), correction_time(clean), relative_correctness(clean)) == (0, 0, 1)


def test_recurrent_logs_hit_the_monotone_fixed_point():
    rng = np.random.default_rng(0)
    for i in range(10):
        cfg = ModelConfig.for_kind("lt_r_cm", n_layers=2, n_heads=2, d_model=8, d_ff=16,
                                   dropout=0.0, vocab_size=15, n_labels=5, max_len=64)
        m = Model(cfg, init_weights(cfg, rng))
        log = run_recurrent(m, rng.integers(2, 15, size=int(rng.integers(1, 30))).tolist(),
                            delay=i % 3)
        r = score_log(log)
        assert (r.EO, r.CT, r.RC) == (0.0, 0.0, 1.0)


def test_scores_depend_only_on_the_log(tmp_path):
    logs = [random_log(random.Random(s)) for s in range(20)]
    logs = [log for log in logs if log.task == "tagging"]
    path = tmp_path / "third_party.jsonl"
    log_to_jsonl(logs, path)
    again = log_from_jsonl(path)
    assert [score_log(a) for a in logs] == [score_log(b) for b in again]


# ---------------------------------------------------------------- reports


def test_aggregate_is_unweighted_mean_and_sums_counts():
    a = score_log(FIXTURES[0][1])
    b = score_log(FIXTURES[7][1])
    mean = aggregate([a, b])
    assert mean.EO == (a.EO + b.EO) / 2 and mean.RC == (a.RC + b.RC) / 2
    assert mean.sequences == 2 and mean.tokens == 4 and mean.edits == a.edits + b.edits


def test_score_logs_rejects_mixed_tasks():
    with pytest.raises(ValueError, match="mix"):
        score_logs([FIXTURES[0][1], FIXTURES[1][1]])


def test_csv_and_table(tmp_path):
    per, mean = score_logs([FIXTURES[0][1], FIXTURES[2][1]])
    path = tmp_path / "m.csv"
    write_csv(per, mean, path, extra={"seed": 7})
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == CSV_COLUMNS + ["seed"]
    assert [r["id"] for r in rows][-1] == "mean" and rows[0]["seed"] == "7"
    text = format_table(mean)
    assert "EO" in text and "0.250" in text


def test_gates():
    per, mean = score_logs([FIXTURES[7][1]])
    assert monotone_gate(mean).passed
    per, mean = score_logs([FIXTURES[0][1]])
    assert not monotone_gate(mean).passed
    assert delay_monotone_gate(per).passed
    fake = MetricsReport("x", 0, 0, 1.0, 0, 0, 0.5, 1.0)
    assert not delay_monotone_gate([fake]).passed
