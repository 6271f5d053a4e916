import csv

import mpmath
import numpy as np
import pytest

from inclt import numerics as nx
from inclt.data import PAD_ID, UNK_ID, Corpus, Example, build_vocabs
from inclt.model import ModelConfig, load_checkpoint, save_checkpoint
from inclt.numerics import Tensor
from inclt.synth import synth_generate
from inclt.training import (IGNORE, REPORT_COLUMNS, AdamState, Encoded, TrainConfig,
                            TrainingError, adamw_step, clip_grad_norm, encode_corpus, evaluate,
                            label_smoothed_loss, length_batches, macro_f1, make_batch,
                            smoothed_cross_entropy, smoothed_targets, train, write_report)

TINY = dict(n_layers=1, n_heads=2, d_model=16, d_ff=32)


def tiny_cfg(**kw):
    base = dict(epochs=4, warmup_epochs=1, lr=3e-3, batch_size=16)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def copy_splits():
    corpus = synth_generate("copy", 120, seed=0, min_len=3, max_len=6)
    return (Corpus("tagging", corpus.examples[:90]), Corpus("tagging", corpus.examples[90:]))


# ---------------------------------------------------------------- optimiser


def test_adamw_first_step_hand_value():
    w = {"p": np.array([0.5])}
    state = AdamState()
    adamw_step(w, {"p": np.array([1.0])}, state, lr=0.1, betas=(0.9, 0.98), eps=1e-8,
               weight_decay=0.01)
    np.testing.assert_allclose(state.m["p"], [0.1], rtol=1e-15)
    np.testing.assert_allclose(state.v["p"], [0.02], rtol=1e-14)
    expected = 0.5 * (1 - 0.1 * 0.01) - 0.1 * 1.0 / (1.0 + 1e-8)
    np.testing.assert_allclose(w["p"], [expected], rtol=1e-15)


def test_adamw_rejects_non_finite_gradients():
    with pytest.raises(TrainingError):
        adamw_step({"p": np.zeros(2)}, {"p": np.array([np.nan, 1.0])}, AdamState(), 0.1)


def test_adamw_decay_is_decoupled_from_the_gradient():
    w = {"p": np.array([2.0])}
    adamw_step(w, {"p": np.array([0.0])}, AdamState(), lr=0.5, weight_decay=0.1)
    np.testing.assert_allclose(w["p"], [2.0 * (1 - 0.05)])


def test_clip_grad_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose([grads["a"][0], grads["b"][0]], [0.6, 0.8], rtol=1e-9)


def test_learning_rate_schedule():
    cfg = TrainConfig(lr=1.0, warmup_epochs=5, epochs=50)
    assert [cfg.lr_at(e) for e in range(5)] == [0.2, 0.4, 0.6, 0.8, 1.0]
    assert cfg.lr_at(29) == 1.0 and cfg.lr_at(30) == 0.5
    assert cfg.lr_at(40) == 0.25 and cfg.lr_at(45) == 0.125 and cfg.lr_at(49) == 0.125


@pytest.mark.parametrize("kw", [dict(warmup_epochs=-1), dict(dropout=1.5),
                                dict(betas=(0.9, 1.0)), dict(grad_clip=0.0),
                                dict(batch_size=0)])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# ---------------------------------------------------------------- losses


def test_smoothed_targets():
    q = smoothed_targets(np.array([0, 2]), 3, 0.1)
    np.testing.assert_allclose(q, [[0.9, 0.05, 0.05], [0.05, 0.05, 0.9]])
    np.testing.assert_array_equal(smoothed_targets(np.array([1]), 3, 0.0), [[0, 1, 0]])


def test_smoothed_cross_entropy_hand_value():
    mpmath.mp.dps = 50
    dist = ["0.7", "0.2", "0.1"]
    q = [mpmath.mpf("0.9"), mpmath.mpf("0.05"), mpmath.mpf("0.05")]
    oracle = float(-mpmath.fsum(qi * mpmath.log(mpmath.mpf(p)) for qi, p in zip(q, dist)))
    got = smoothed_cross_entropy([0.7, 0.2, 0.1], 0, 0.1)
    assert got == pytest.approx(oracle, rel=1e-14)
    assert got == pytest.approx(0.5166086, abs=1e-7)


def test_label_smoothed_loss_ignores_masked_positions():
    logits = Tensor(np.log(np.array([[[0.7, 0.2, 0.1], [0.3, 0.3, 0.4]]])))
    loss = label_smoothed_loss(logits, np.array([[0, IGNORE]]), 0.1)
    assert loss.item() == pytest.approx(smoothed_cross_entropy([0.7, 0.2, 0.1], 0, 0.1))
    with pytest.raises(TrainingError):
        label_smoothed_loss(logits, np.array([[IGNORE, IGNORE]]), 0.1)


def test_label_smoothed_loss_gradient():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 3))
    targets = np.array([0, 2, IGNORE, 1])
    leaf = Tensor(x, requires_grad=True)
    nx.backward(label_smoothed_loss(leaf, targets, 0.1))
    q = smoothed_targets(np.array([0, 2, 1]), 3, 0.1)
    p = np.exp(x) / np.exp(x).sum(axis=1, keepdims=True)
    expected = np.zeros_like(x)
    expected[[0, 1, 3]] = (p[[0, 1, 3]] - q) / 3
    np.testing.assert_allclose(leaf.grad, expected, atol=1e-12)


# ---------------------------------------------------------------- data plumbing


def test_length_batches_group_equal_lengths():
    data = [Encoded([2] * n, [0] * n) for n in (3, 5, 3, 3, 5)]
    batches = length_batches(data, 2, np.random.default_rng(0))
    assert sorted(i for b in batches for i in b) == list(range(5))
    for b in batches:
        assert len({len(data[i].ids) for i in b}) == 1 and len(b) <= 2


def test_make_batch_pads_and_shifts_for_delay():
    cfg = ModelConfig.for_kind("lt_r_cm_d2", vocab_size=10, n_labels=3)
    data = [Encoded([4, 5, 6], [0, 1, 2])]
    ids, labels = make_batch(cfg, data, [0])
    np.testing.assert_array_equal(ids, [[4, 5, 6, PAD_ID, PAD_ID]])
    np.testing.assert_array_equal(labels, [[IGNORE, IGNORE, 0, 1, 2]])


def test_unk_replacement_rate():
    cfg = ModelConfig(vocab_size=10, n_labels=2)
    data = [Encoded([5] * 1000, [0] * 1000)]
    ids, _ = make_batch(cfg, data, [0], unk_prob=0.02, rng=np.random.default_rng(0))
    rate = float((ids == UNK_ID).mean())
    assert 0.01 < rate < 0.03


def test_encode_corpus_maps_unseen_labels_to_ignore():
    train_set = Corpus("tagging", [Example(["a"], ["X"])])
    tokens, labels = build_vocabs(train_set)
    enc = encode_corpus(Corpus("tagging", [Example(["a", "b"], ["X", "Y"])]), tokens, labels)
    assert enc[0].ids == [2, UNK_ID] and enc[0].labels == [0, IGNORE]


def test_macro_f1():
    assert macro_f1(np.array([0, 0, 1, 1]), np.array([0, 0, 1, 1])) == 1.0
    # class 0: tp 1, fp 0, fn 1 -> 2/3; class 1: tp 2, fp 1, fn 0 -> 4/5
    assert macro_f1(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1])) == pytest.approx(
        (2 / 3 + 4 / 5) / 2)


# ---------------------------------------------------------------- training loop


def test_loss_decreases_and_report_echoes_seed(copy_splits):
    train_set, valid_set = copy_splits
    result = train("lt_r_cm", train_set, valid_set, tiny_cfg(epochs=5, seed=11), **TINY)
    losses = [r["loss"] for r in result.report]
    assert losses[-1] < losses[0]
    assert all(r["seed"] == 11 for r in result.report)
    assert [r["epoch"] for r in result.report] == [1, 2, 3, 4, 5]


def test_training_is_deterministic(copy_splits):
    train_set, valid_set = copy_splits
    a = train("lt_r_cm", train_set, valid_set, tiny_cfg(epochs=2), **TINY)
    b = train("lt_r_cm", train_set, valid_set, tiny_cfg(epochs=2), **TINY)
    assert a.report == b.report
    assert all(np.array_equal(a.model.weights[k], b.model.weights[k]) for k in a.model.weights)


def test_returned_model_is_the_best_epoch(copy_splits):
    train_set, valid_set = copy_splits
    result = train("lt", train_set, valid_set, tiny_cfg(epochs=4), **TINY)
    best_row = max(result.report, key=lambda r: r["valid_metric"])
    assert result.best_epoch == best_row["epoch"]
    enc = encode_corpus(valid_set, result.model.tokens, result.model.labels)
    assert evaluate(result.model, enc)["macro_f1"] == pytest.approx(result.best_metric)


def test_early_stopping_stops_after_patience(copy_splits):
    train_set, valid_set = copy_splits
    result = train("lt_r_cm", train_set, valid_set,
                   tiny_cfg(epochs=30, patience=1, lr=1e-9, warmup_epochs=0), **TINY)
    assert result.epochs_run < 30
    assert result.bad_epochs >= 1


def test_resume_continues_epoch_numbering_and_matches_uninterrupted(copy_splits, tmp_path):
    train_set, valid_set = copy_splits
    full = train("lt_r_cm", train_set, valid_set, tiny_cfg(epochs=4), **TINY)
    first = train("lt_r_cm", train_set, valid_set, tiny_cfg(epochs=2), **TINY)
    path = tmp_path / "ck.npz"
    save_checkpoint(path, first.model, first.checkpoint_meta(tiny_cfg(epochs=2)),
                    first.checkpoint_extra())
    resumed = train("lt_r_cm", train_set, valid_set, tiny_cfg(epochs=4),
                    resume=load_checkpoint(path))
    assert [r["epoch"] for r in resumed.report] == [3, 4]
    assert [r["loss"] for r in resumed.report] == [r["loss"] for r in full.report[2:]]
    assert resumed.best_epoch == full.best_epoch


def test_classification_training_runs():
    corpus = synth_generate("majority", 60, seed=0, min_len=3, max_len=5)
    result = train("lt_r_cm", Corpus("classification", corpus.examples[:45]),
                   Corpus("classification", corpus.examples[45:]), tiny_cfg(epochs=2), **TINY)
    assert result.model.cfg.head_kind == "classification"
    assert 0.0 <= result.best_metric <= 1.0


def test_training_errors():
    empty = Corpus("tagging", [])
    some = Corpus("tagging", [Example(["a"], ["X"])])
    with pytest.raises(TrainingError):
        train("lt", empty, some)
    with pytest.raises(TrainingError):
        train("lt", some, Corpus("classification", [Example(["a"], "X")]))
    with pytest.raises(ValueError, match="valid kinds"):
        train("rnn", some, some)


def test_write_report(tmp_path):
    rows = [{"epoch": 1, "loss": 0.5, "valid_metric": 0.7, "valid_accuracy": 0.8, "lr": 1e-3,
             "seed": 3}]
    path = tmp_path / "r.csv"
    write_report(rows, path)
    write_report([{**rows[0], "epoch": 2}], path, append=True)
    with path.open() as fh:
        got = list(csv.DictReader(fh))
    assert list(got[0]) == REPORT_COLUMNS and [r["epoch"] for r in got] == ["1", "2"]
