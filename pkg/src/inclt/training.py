"""Training loop for the Table-1 model kinds.

Recipe: AdamW (betas 0.9/0.98), learning rate warmed up linearly over the
first epochs and halved at fixed milestones, dropout, random UNK
replacement of training tokens, label smoothing for classification, early
stopping on the validation metric with the best checkpoint restored.

Batches hold sequences of a single length, so no padding mask is needed;
the only PAD ids a model sees are the trailing ones a delayed model reads.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .data import PAD_ID, UNK_ID, Corpus, Vocab, build_vocabs
from .model import (
    Model,
    ModelConfig,
    encode,
    head_logits,
    init_weights,
    resolve_kind,
)
from .numerics import Tensor

IGNORE = -1


class TrainingError(RuntimeError):
    """Training cannot continue (empty data, divergence, bad config)."""


@dataclass
class TrainConfig:
    epochs: int = 50
    patience: int = 10
    lr: float = 3e-3  # desk scale, embeddings trained from scratch
    betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_epochs: int = 5
    decay_epochs: tuple[int, ...] = (30, 40, 45)
    decay_factor: float = 0.5
    dropout: float = 0.1
    label_smoothing: float = 0.1
    unk_prob: float = 0.02
    batch_size: int = 32
    seed: int = 42119392
    grad_clip: float | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.decay_epochs = tuple(self.decay_epochs)
        for name in ("dropout", "label_smoothing", "unk_prob", "decay_factor"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("betas must be in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive or None")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch."""
        lr = self.lr
        if self.warmup_epochs and epoch < self.warmup_epochs:
            lr *= (epoch + 1) / self.warmup_epochs
        lr *= self.decay_factor ** sum(epoch >= m for m in self.decay_epochs)
        return lr


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(weights: dict, grads: dict, state: AdamState, lr: float,
               betas=(0.9, 0.98), eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One AdamW update in place, with bias correction and decoupled decay."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingError(f"non-finite gradients in {bad[:5]}")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        w = weights[name]
        if w.shape != g.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != weight shape {w.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            w *= 1.0 - lr * weight_decay
        w -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------- losses


def smoothed_targets(targets: np.ndarray, n_classes: int, eps: float) -> np.ndarray:
    """(1 - eps) on the gold class, eps / (C - 1) spread over the rest."""
    targets = np.asarray(targets)
    if n_classes == 1 or eps == 0.0:
        dist = np.zeros((targets.size, n_classes))
    else:
        dist = np.full((targets.size, n_classes), eps / (n_classes - 1))
    gold = 1.0 if n_classes == 1 else 1.0 - eps
    dist[np.arange(targets.size), targets.reshape(-1)] = gold
    return dist


def smoothed_cross_entropy(dist, target: int, eps: float) -> float:
    """Cross-entropy of a predicted distribution against a label-smoothed target."""
    dist = np.asarray(dist, dtype=np.float64)
    q = smoothed_targets(np.array([target]), dist.shape[-1], eps)[0]
    return float(-(q * np.log(dist)).sum())


def label_smoothed_loss(logits: Tensor, targets, eps: float) -> Tensor:
    """Mean smoothed cross-entropy over rows whose target is not ``IGNORE``."""
    targets = np.asarray(targets).reshape(-1)
    C = logits.shape[-1]
    logp = nx.reshape(nx.log_softmax(logits, axis=-1), (-1, C))
    keep = targets != IGNORE
    n = int(keep.sum())
    if n == 0:
        raise TrainingError("batch has no scored positions")
    q = np.zeros((targets.size, C))
    q[keep] = smoothed_targets(targets[keep], C, eps)
    return -nx.sum(logp * q) * (1.0 / n)


# ---------------------------------------------------------------- data plumbing


@dataclass
class Encoded:
    ids: list[int]
    labels: list[int] | int


def encode_corpus(corpus: Corpus, tokens: Vocab, labels: Vocab) -> list[Encoded]:
    out = []
    for ex in corpus:
        ids = tokens.encode(ex.tokens)
        if isinstance(ex.labels, list):
            out.append(Encoded(ids, [labels.lookup(l) if l in labels else IGNORE
                                     for l in ex.labels]))
        else:
            out.append(Encoded(ids, labels.lookup(ex.labels) if ex.labels in labels else IGNORE))
    return out


def length_batches(data: Sequence[Encoded], batch_size: int,
                   rng: np.random.Generator | None = None) -> list[list[int]]:
    """Index batches in which every sequence has the same length."""
    by_len: dict[int, list[int]] = {}
    for i, ex in enumerate(data):
        by_len.setdefault(len(ex.ids), []).append(i)
    batches = []
    for length in sorted(by_len):
        idx = by_len[length]
        if rng is not None:
            idx = [idx[j] for j in rng.permutation(len(idx))]
        batches += [idx[k:k + batch_size] for k in range(0, len(idx), batch_size)]
    if rng is not None:
        batches = [batches[j] for j in rng.permutation(len(batches))]
    return batches


def make_batch(cfg: ModelConfig, data: Sequence[Encoded], idx: Sequence[int],
               unk_prob: float = 0.0, rng: np.random.Generator | None = None):
    ids = np.array([data[i].ids for i in idx], dtype=np.int64)
    if unk_prob > 0:
        drop = (rng.random(ids.shape) < unk_prob) & (ids != PAD_ID)
        ids = np.where(drop, UNK_ID, ids)
    d = cfg.delay
    if cfg.head_kind == "tagging":
        labels = np.array([data[i].labels for i in idx], dtype=np.int64)
        if d:
            ids = np.concatenate([ids, np.full((len(idx), d), PAD_ID)], axis=1)
            labels = np.concatenate([np.full((len(idx), d), IGNORE), labels], axis=1)
    else:
        labels = np.array([data[i].labels for i in idx], dtype=np.int64)
    return ids, labels


def predict_batch(model: Model, ids: np.ndarray) -> np.ndarray:
    """Argmax predictions for a same-length batch (delay-aligned for tagging)."""
    cfg = model.cfg
    with nx.no_grad():
        hidden = encode(cfg, model.weights, ids)
        logits = head_logits(cfg, model.weights, hidden, ids).data
    pred = logits.argmax(axis=-1)
    if cfg.head_kind == "tagging":
        return pred[:, cfg.delay:]
    return pred


def evaluate(model: Model, data: Sequence[Encoded], batch_size: int = 128) -> dict:
    """Accuracy and macro F1 (tagging: over tokens; classification: over sequences)."""
    gold_all, pred_all = [], []
    for idx in length_batches(data, batch_size):
        ids, _ = make_batch(model.cfg, data, idx)
        pred = predict_batch(model, ids)
        for row, i in zip(pred, idx):
            gold = data[i].labels
            gold_all += gold if isinstance(gold, list) else [gold]
            pred_all += list(np.atleast_1d(row))
    gold_arr, pred_arr = np.array(gold_all), np.array(pred_all)
    keep = gold_arr != IGNORE
    gold_arr, pred_arr = gold_arr[keep], pred_arr[keep]
    if gold_arr.size == 0:
        return {"accuracy": float("nan"), "macro_f1": float("nan"), "n": 0}
    return {"accuracy": float((gold_arr == pred_arr).mean()),
            "macro_f1": macro_f1(gold_arr, pred_arr), "n": int(gold_arr.size)}


def macro_f1(gold: np.ndarray, pred: np.ndarray) -> float:
    scores = []
    for c in np.union1d(gold, pred):
        tp = float(((pred == c) & (gold == c)).sum())
        fp = float(((pred == c) & (gold != c)).sum())
        fn = float(((pred != c) & (gold == c)).sum())
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    model: Model
    report: list[dict]
    best_epoch: int
    best_metric: float
    epochs_run: int
    adam: AdamState
    bad_epochs: int = 0
    last_weights: dict | None = None

    def checkpoint_meta(self, tcfg: TrainConfig) -> dict:
        return {"epoch": self.epochs_run, "best_epoch": self.best_epoch,
                "best_metric": self.best_metric, "bad_epochs": self.bad_epochs,
                "adam_t": self.adam.t, "train_config": asdict(tcfg)}

    def checkpoint_extra(self) -> dict:
        extra = {}
        for name in self.adam.m:
            extra[f"adam.m/{name}"] = self.adam.m[name]
            extra[f"adam.v/{name}"] = self.adam.v[name]
        # weights of the last epoch, so a resumed run continues from where it stopped
        for name, arr in (self.last_weights or {}).items():
            extra[f"last/{name}"] = arr
        return extra


def model_config_for(kind: str, tokens: Vocab, labels: Vocab, task: str,
                     tcfg: TrainConfig, delay: int | None = None, **overrides) -> ModelConfig:
    kind, d = resolve_kind(kind, delay)
    params = dict(n_layers=2, n_heads=8, d_model=64, d_ff=256, max_len=256)
    params.update(overrides)
    return ModelConfig.for_kind(kind, d, vocab_size=len(tokens), n_labels=len(labels),
                                head_kind=task, dropout=tcfg.dropout, **params)


def train(kind: str, train_set: Corpus, valid_set: Corpus, tcfg: TrainConfig | None = None,
          *, delay: int | None = None, resume=None, log: Callable[[dict], None] | None = None,
          init_embeddings: np.ndarray | None = None, **model_overrides) -> TrainResult:
    """Train one model kind; returns the best-validation model and a per-epoch report.

    ``resume`` takes a :class:`~inclt.model.Checkpoint` written from a
    previous :class:`TrainResult`; epoch numbering continues from it.
    """
    tcfg = tcfg or TrainConfig()
    if len(train_set) == 0:
        raise TrainingError("empty training set")
    if len(valid_set) == 0:
        raise TrainingError("empty validation set")
    if train_set.task != valid_set.task:
        raise TrainingError("train and valid corpora are different tasks")
    base_kind, d = resolve_kind(kind, delay)

    if resume is not None:
        model = resume.model
        cfg = model.cfg
        tokens, labels = model.tokens, model.labels
        meta = resume.meta
        start_epoch = int(meta["epoch"])
        best_epoch, best_metric = int(meta["best_epoch"]), float(meta["best_metric"])
        bad_epochs = int(meta.get("bad_epochs", 0))
        adam = AdamState(t=int(meta["adam_t"]))
        for key, arr in resume.extra.items():
            if key.startswith("adam.m/"):
                adam.m[key[7:]] = arr.copy()
            elif key.startswith("adam.v/"):
                adam.v[key[7:]] = arr.copy()
        best_weights = copy.deepcopy(model.weights)
        last = {k[5:]: v.copy() for k, v in resume.extra.items() if k.startswith("last/")}
        weights = last or copy.deepcopy(model.weights)
    else:
        tokens, labels = build_vocabs(train_set)
        cfg = model_config_for(base_kind, tokens, labels, train_set.task, tcfg, d,
                               **model_overrides)
        weights = init_weights(cfg, np.random.default_rng([tcfg.seed, 0]))
        if init_embeddings is not None:
            if init_embeddings.shape != weights["tok_emb"].shape:
                raise TrainingError(
                    f"embedding table {init_embeddings.shape} does not match "
                    f"{weights['tok_emb'].shape}")
            weights["tok_emb"] = np.array(init_embeddings, dtype=np.float64)
        start_epoch, best_epoch, best_metric, bad_epochs = 0, -1, -math.inf, 0
        adam = AdamState()
        best_weights = None

    train_data = encode_corpus(train_set, tokens, labels)
    valid_data = encode_corpus(valid_set, tokens, labels)
    too_long = max(len(ex.ids) for ex in train_data + valid_data) + cfg.delay
    if too_long > cfg.max_len:
        raise TrainingError(f"sequence of length {too_long} exceeds max_len {cfg.max_len}")
    live = Model(cfg, weights, base_kind, tokens, labels)
    eps = tcfg.label_smoothing if cfg.head_kind == "classification" else 0.0
    metric_key = "macro_f1" if cfg.head_kind == "tagging" else "accuracy"
    report: list[dict] = []

    for epoch in range(start_epoch, tcfg.epochs):
        if bad_epochs >= tcfg.patience:
            break
        rng = np.random.default_rng([tcfg.seed, epoch + 1])
        lr = tcfg.lr_at(epoch)
        losses = []
        for idx in length_batches(train_data, tcfg.batch_size, rng):
            ids, targets = make_batch(cfg, train_data, idx, tcfg.unk_prob, rng)
            if np.all(targets == IGNORE):
                continue
            params = {k: Tensor(v, requires_grad=True) for k, v in weights.items()}
            hidden = encode(cfg, params, ids, training=True, rng=rng)
            loss = label_smoothed_loss(head_logits(cfg, params, hidden, ids), targets, eps)
            if not math.isfinite(loss.item()):
                raise TrainingError(f"loss diverged at epoch {epoch + 1}")
            nx.backward(loss)
            grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data)
                     for k, p in params.items()}
            if tcfg.grad_clip is not None:
                clip_grad_norm(grads, tcfg.grad_clip)
            adamw_step(weights, grads, adam, lr, tcfg.betas, tcfg.adam_eps, tcfg.weight_decay)
            losses.append(loss.item())

        scores = evaluate(live, valid_data)
        metric = scores[metric_key]
        improved = metric > best_metric
        if improved:
            best_metric, best_epoch, bad_epochs = metric, epoch + 1, 0
            best_weights = copy.deepcopy(weights)
        else:
            bad_epochs += 1
        row = {"epoch": epoch + 1, "loss": float(np.mean(losses)) if losses else float("nan"),
               "valid_metric": metric, "valid_accuracy": scores["accuracy"], "lr": lr,
               "seed": tcfg.seed}
        report.append(row)
        if log is not None:
            log(row)

    best = best_weights if best_weights is not None else weights
    model = Model(cfg, copy.deepcopy(best), base_kind, tokens, labels)
    return TrainResult(model, report, best_epoch, best_metric, start_epoch + len(report),
                       adam, bad_epochs, weights)


REPORT_COLUMNS = ["epoch", "loss", "valid_metric", "valid_accuracy", "lr", "seed"]


def write_report(rows: Sequence[dict], path, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with path.open("a" if append else "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in REPORT_COLUMNS})
