"""Transformer encoders with softmax or linear attention.

Linear attention uses the feature map ``phi(x) = elu(x) + 1``.  Causal
linear attention is computed from running sums

    S_i = sum_{j<=i} phi(K_j) V_j^T        Z_i = sum_{j<=i} phi(K_j)
    out_i = phi(Q_i)^T S_i / phi(Q_i)^T Z_i

per head.  The same sums can be carried forward one token at a time, which
is what :func:`step` does; :func:`forward_full` evaluates a whole sequence
with cumulative sums (causal) or totals (bidirectional).

Layers are post-norm: ``x = LN(x + attn(x)); x = LN(x + ffn(x))``.
Positional embeddings are a learned lookup table.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import PAD_ID, Vocab
from .numerics import Tensor

ATTENTION_KINDS = ("softmax", "linear")
HEAD_KINDS = ("tagging", "classification")
CHECKPOINT_FORMAT = "inclt-checkpoint-v1"
LN_EPS = 1e-5
_MASK_VALUE = -1e30

# Table-1 model kinds: attention, training-time causal mask, deployment mode.
MODEL_KINDS = {
    "baseline": ("softmax", False, "restart"),
    "lt": ("linear", False, "restart"),
    "lt_r": ("linear", False, "recurrent"),
    "lt_r_cm": ("linear", True, "recurrent"),
    "lt_r_cm_d": ("linear", True, "recurrent"),
}
KIND_ALIASES = {"lt_r_cm_d1": ("lt_r_cm_d", 1), "lt_r_cm_d2": ("lt_r_cm_d", 2)}

# Test hook used by ``inclt verify --inject-fault``: scales the S update of the
# recurrent step so the equivalence gate has something to catch.
_state_update_scale = 1.0


class UnsupportedModeError(RuntimeError):
    """The requested deployment mode does not exist for this attention kind."""


class InputError(ValueError):
    """Token ids or sequence length outside what the model accepts."""


def resolve_kind(kind: str, delay: int | None = None) -> tuple[str, int]:
    """Normalise a model-kind name, returning ``(kind, delay)``."""
    if kind in KIND_ALIASES:
        base, d = KIND_ALIASES[kind]
        if delay not in (None, d):
            raise ValueError(f"{kind} implies delay {d}, got {delay}")
        return base, d
    if kind not in MODEL_KINDS:
        valid = ", ".join(sorted([*MODEL_KINDS, *KIND_ALIASES]))
        raise ValueError(f"unknown model kind {kind!r}; valid kinds: {valid}")
    if kind == "lt_r_cm_d":
        return kind, 1 if delay is None else delay
    if delay:
        raise ValueError(f"model kind {kind} is trained without delay")
    return kind, 0


@dataclass(frozen=True)
class ModelConfig:
    attention_kind: str = "linear"
    n_layers: int = 2
    n_heads: int = 8
    d_model: int = 64
    d_ff: int = 256
    dropout: float = 0.1
    vocab_size: int = 32
    n_labels: int = 2
    head_kind: str = "tagging"
    use_positional: bool = True
    causal: bool = False
    delay: int = 0
    max_len: int = 256

    def __post_init__(self):
        if self.attention_kind not in ATTENTION_KINDS:
            raise ValueError(f"attention_kind must be one of {ATTENTION_KINDS}")
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"head_kind must be one of {HEAD_KINDS}")
        if self.n_layers < 1 or self.n_heads < 1:
            raise ValueError("n_layers and n_heads must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.delay < 0:
            raise ValueError("delay must be >= 0")
        if self.delay and not self.causal:
            raise ValueError("delay > 0 needs a causal model")
        if self.vocab_size < 1 or self.n_labels < 1 or self.max_len < 1:
            raise ValueError("vocab_size, n_labels and max_len must be >= 1")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def for_kind(cls, kind: str, delay: int | None = None, **kw) -> "ModelConfig":
        kind, d = resolve_kind(kind, delay)
        attention, causal, _ = MODEL_KINDS[kind]
        return cls(attention_kind=attention, causal=causal, delay=d, **kw)


ModelWeights = dict  # name -> float64 ndarray


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


def init_weights(cfg: ModelConfig, rng: np.random.Generator | int = 0) -> ModelWeights:
    """Xavier-uniform for every matrix, zeros for biases, ones for LN scales."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    D, F = cfg.d_model, cfg.d_ff
    w: ModelWeights = {"tok_emb": _xavier(rng, cfg.vocab_size, D)}
    if cfg.use_positional:
        w["pos_emb"] = _xavier(rng, cfg.max_len, D)
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        # Q, K, V blocks are initialised as three D x D matrices, stored fused.
        w[p + "attn.w_qkv"] = np.concatenate([_xavier(rng, D, D) for _ in range(3)], axis=1)
        w[p + "attn.b_qkv"] = np.zeros(3 * D)
        w[p + "attn.w_o"] = _xavier(rng, D, D)
        w[p + "attn.b_o"] = np.zeros(D)
        w[p + "ln1.g"] = np.ones(D)
        w[p + "ln1.b"] = np.zeros(D)
        w[p + "ff.w1"] = _xavier(rng, D, F)
        w[p + "ff.b1"] = np.zeros(F)
        w[p + "ff.w2"] = _xavier(rng, F, D)
        w[p + "ff.b2"] = np.zeros(D)
        w[p + "ln2.g"] = np.ones(D)
        w[p + "ln2.b"] = np.zeros(D)
    w["out.w"] = _xavier(rng, D, cfg.n_labels)
    w["out.b"] = np.zeros(cfg.n_labels)
    return w


def check_weights(cfg: ModelConfig, w: ModelWeights) -> None:
    expected = init_weights(cfg, 0)
    if set(expected) != set(w):
        missing = sorted(set(expected) - set(w))
        extra = sorted(set(w) - set(expected))
        raise ValueError(f"weights do not match config (missing={missing}, extra={extra})")
    for name, arr in expected.items():
        if w[name].shape != arr.shape:
            raise ValueError(f"{name}: shape {w[name].shape}, config expects {arr.shape}")
        if not np.all(np.isfinite(w[name])):
            raise ValueError(f"{name}: non-finite values")


# ---------------------------------------------------------------- full-sequence forward


def _check_ids(cfg: ModelConfig, ids: np.ndarray) -> None:
    T = ids.shape[-1]
    if T < 1:
        raise InputError("empty sequence")
    if T > cfg.max_len:
        raise InputError(f"sequence length {T} exceeds max_len {cfg.max_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise InputError(f"token id outside [0, {cfg.vocab_size})")


def linear_attention(q: Tensor, k: Tensor, v: Tensor, causal: bool) -> Tensor:
    """Kernelised attention over ``(B, H, T, dh)`` inputs."""
    fq, fk = nx.elu_plus_one(q), nx.elu_plus_one(k)
    if causal:
        S = nx.cumsum(nx.einsum("bhtd,bhte->bhtde", fk, v), axis=2)
        Z = nx.cumsum(fk, axis=2)
        num = nx.einsum("bhtd,bhtde->bhte", fq, S)
        den = nx.einsum("bhtd,bhtd->bht", fq, Z)
    else:
        S = nx.einsum("bhtd,bhte->bhde", fk, v)
        Z = nx.sum(fk, axis=2)
        num = nx.einsum("bhtd,bhde->bhte", fq, S)
        den = nx.einsum("bhtd,bhd->bht", fq, Z)
    B, H, T = den.shape
    return num / nx.reshape(den, (B, H, T, 1))


def softmax_attention(q: Tensor, k: Tensor, v: Tensor, causal: bool) -> Tensor:
    dh = q.shape[-1]
    scores = nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    if causal:
        T = q.shape[2]
        scores = nx.masked_fill(scores, np.triu(np.ones((T, T), dtype=bool), k=1), _MASK_VALUE)
    return nx.matmul(nx.softmax(scores, axis=-1), v)


def encode(cfg: ModelConfig, params: dict, ids, *, causal: bool | None = None,
           training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Final-layer hidden states ``(B, T, d_model)`` for a batch of equal-length id rows."""
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    _check_ids(cfg, ids)
    causal = cfg.causal if causal is None else causal
    B, T = ids.shape
    H, dh, D = cfg.n_heads, cfg.d_head, cfg.d_model
    p = dict(params)

    x = nx.embedding(p["tok_emb"], ids)
    if cfg.use_positional:
        x = x + nx.embedding(p["pos_emb"], np.arange(T))
    x = nx.dropout(x, cfg.dropout, rng, training)
    attend = linear_attention if cfg.attention_kind == "linear" else softmax_attention

    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        qkv = nx.matmul(x, p[pre + "attn.w_qkv"]) + p[pre + "attn.b_qkv"]
        qkv = nx.transpose(nx.reshape(qkv, (B, T, 3, H, dh)), (2, 0, 3, 1, 4))
        q, k, v = (_select(qkv, i) for i in range(3))
        att = attend(q, k, v, causal)
        att = nx.reshape(nx.transpose(att, (0, 2, 1, 3)), (B, T, D))
        att = nx.matmul(att, p[pre + "attn.w_o"]) + p[pre + "attn.b_o"]
        x = nx.layer_norm(x + nx.dropout(att, cfg.dropout, rng, training),
                          p[pre + "ln1.g"], p[pre + "ln1.b"], LN_EPS)
        ff = nx.relu(nx.matmul(x, p[pre + "ff.w1"]) + p[pre + "ff.b1"])
        ff = nx.matmul(nx.dropout(ff, cfg.dropout, rng, training), p[pre + "ff.w2"]) + p[pre + "ff.b2"]
        x = nx.layer_norm(x + nx.dropout(ff, cfg.dropout, rng, training),
                          p[pre + "ln2.g"], p[pre + "ln2.b"], LN_EPS)
    return x


def _select(t: Tensor, i: int) -> Tensor:
    # t[i] for a leading axis, as a differentiable op
    parts = t.shape[0]
    onehot = np.zeros(parts)
    onehot[i] = 1.0
    return nx.einsum("p,pbhtd->bhtd", onehot, t)


def head_logits(cfg: ModelConfig, params: dict, hidden: Tensor, ids) -> Tensor:
    """Tagging: ``(B, T, C)`` logits.  Classification: ``(B, C)`` from the non-PAD mean."""
    if cfg.head_kind == "tagging":
        return nx.matmul(hidden, params["out.w"]) + params["out.b"]
    ids = np.atleast_2d(np.asarray(ids))
    mask = (ids != PAD_ID).astype(np.float64)
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise InputError("classification input has no non-PAD token")
    pooled = nx.sum(hidden * mask[:, :, None], axis=1) / counts[:, None]
    return nx.matmul(pooled, params["out.w"]) + params["out.b"]


def forward_full(cfg: ModelConfig, w: ModelWeights, tokens, causal: bool | None = None):
    """Run one sequence through the encoder in evaluation mode.

    Returns ``(hidden, outputs)``: hidden is ``(T, d_model)``; outputs are
    per-token label distributions ``(T, C)`` for tagging or a single
    distribution ``(C,)`` for classification.
    """
    ids = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
    with nx.no_grad():
        hidden = encode(cfg, w, ids, causal=causal)
        logits = head_logits(cfg, w, hidden, ids)
        probs = nx.softmax(logits, axis=-1)
    return hidden.data[0], probs.data[0]


# ---------------------------------------------------------------- recurrent step


@dataclass
class RecurrentState:
    """Per-layer, per-head running sums plus the classification running sum."""

    S: np.ndarray  # (L, H, dh, dh)
    Z: np.ndarray  # (L, H, dh)
    t: int = 0
    hidden_sum: np.ndarray = field(default=None)
    n_real: int = 0  # non-PAD tokens folded into hidden_sum

    def copy(self) -> "RecurrentState":
        return RecurrentState(self.S.copy(), self.Z.copy(), self.t,
                              self.hidden_sum.copy(), self.n_real)


def init_state(cfg: ModelConfig) -> RecurrentState:
    L, H, dh = cfg.n_layers, cfg.n_heads, cfg.d_head
    return RecurrentState(np.zeros((L, H, dh, dh)), np.zeros((L, H, dh)), 0,
                          np.zeros(cfg.d_model), 0)


def _ln(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    xc = x - x.mean()
    return xc / np.sqrt((xc * xc).mean() + LN_EPS) * g + b


def _phi(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def step(cfg: ModelConfig, w: ModelWeights, state: RecurrentState, token: int):
    """Consume one token, updating ``state`` in place.

    Returns ``(state, output)`` where output is the label distribution for
    this position (tagging) or for the prefix read so far (classification).
    Cost does not depend on how many tokens were consumed before.
    """
    if cfg.attention_kind != "linear":
        raise UnsupportedModeError("recurrent stepping needs linear attention")
    if state.t >= cfg.max_len:
        raise InputError(f"state already holds max_len={cfg.max_len} tokens")
    if not 0 <= token < cfg.vocab_size:
        raise InputError(f"token id {token} outside [0, {cfg.vocab_size})")
    H, dh, D = cfg.n_heads, cfg.d_head, cfg.d_model

    x = w["tok_emb"][token]
    if cfg.use_positional:
        x = x + w["pos_emb"][state.t]
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        qkv = x @ w[pre + "attn.w_qkv"] + w[pre + "attn.b_qkv"]
        q, k, v = qkv.reshape(3, H, dh)
        fq, fk = _phi(q), _phi(k)
        state.S[l] += _state_update_scale * (fk[:, :, None] * v[:, None, :])
        state.Z[l] += fk
        num = np.einsum("hd,hde->he", fq, state.S[l])
        den = np.einsum("hd,hd->h", fq, state.Z[l])
        att = (num / den[:, None]).reshape(D) @ w[pre + "attn.w_o"] + w[pre + "attn.b_o"]
        x = _ln(x + att, w[pre + "ln1.g"], w[pre + "ln1.b"])
        ff = np.maximum(x @ w[pre + "ff.w1"] + w[pre + "ff.b1"], 0.0) @ w[pre + "ff.w2"] + w[pre + "ff.b2"]
        x = _ln(x + ff, w[pre + "ln2.g"], w[pre + "ln2.b"])
    state.t += 1

    if cfg.head_kind == "tagging":
        return state, _softmax(x @ w["out.w"] + w["out.b"])
    if token != PAD_ID:
        state.hidden_sum += x
        state.n_real += 1
    if state.n_real == 0:
        raise InputError("classification state has consumed only PAD tokens")
    return state, _softmax((state.hidden_sum / state.n_real) @ w["out.w"] + w["out.b"])


# ---------------------------------------------------------------- delay alignment


def delay_inputs(ids, d: int) -> list[int]:
    """Append ``d`` PAD ids so the last tokens get ``d`` steps of lookahead."""
    if d < 0:
        raise ValueError("delay must be >= 0")
    return list(ids) + [PAD_ID] * d


def delay_targets(labels, d: int, ignore: int = -1) -> list[int]:
    """Shift label targets right by ``d``; the first ``d`` positions are ignored."""
    if d < 0:
        raise ValueError("delay must be >= 0")
    return [ignore] * d + list(labels)


def apply_delay_head(cfg: ModelConfig, outputs, d: int | None = None):
    """Align per-position outputs to input tokens: token ``t`` reads position ``t + d``.

    ``outputs`` covers the ``T + d`` positions of a delay-padded input; the
    result has one row per original token.
    """
    d = cfg.delay if d is None else d
    if d < 0:
        raise ValueError("delay must be >= 0")
    if d and not cfg.causal:
        raise ValueError("delayed outputs need a causal model")
    outputs = np.asarray(outputs)
    if len(outputs) <= d:
        raise ValueError(f"need more than {d} output positions, got {len(outputs)}")
    return outputs[d:]


# ---------------------------------------------------------------- model bundle & checkpoints


@dataclass
class Model:
    """Config, weights and the vocabularies needed to decode outputs."""

    cfg: ModelConfig
    weights: ModelWeights
    kind: str = "lt_r_cm"
    tokens: Vocab | None = None
    labels: Vocab | None = None

    @property
    def deploy_mode(self) -> str:
        return MODEL_KINDS[self.kind][2]

    def forward_full(self, ids, causal: bool | None = None):
        return forward_full(self.cfg, self.weights, ids, causal)

    def init_state(self) -> RecurrentState:
        return init_state(self.cfg)

    def step(self, state: RecurrentState, token: int):
        return step(self.cfg, self.weights, state, token)

    def label_name(self, idx: int) -> str:
        return self.labels.itos[idx] if self.labels is not None else str(idx)

    def predict(self, ids) -> list[int] | int:
        """Non-incremental prediction on a full input (delay-aligned for tagging)."""
        ids = list(ids)
        if self.cfg.head_kind == "classification":
            return int(np.argmax(self.forward_full(ids)[1]))
        _, probs = self.forward_full(delay_inputs(ids, self.cfg.delay))
        return [int(i) for i in np.argmax(apply_delay_head(self.cfg, probs), axis=-1)]


def save_checkpoint(path, model: Model, meta: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    """Write an ``.npz`` archive; see the README for the layout."""
    header = {
        "kind": model.kind,
        "config": model.cfg.to_dict(),
        "tokens": model.tokens.to_list() if model.tokens is not None else None,
        "labels": model.labels.to_list() if model.labels is not None else None,
        "meta": meta or {},
    }
    arrays = {"__format__": np.array(CHECKPOINT_FORMAT),
              "__header__": np.array(json.dumps(header, sort_keys=True))}
    for name, arr in model.weights.items():
        arrays[f"w/{name}"] = np.asarray(arr, dtype=np.float64)
    for name, arr in (extra or {}).items():
        arrays[f"x/{name}"] = np.asarray(arr)
    path = Path(path)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)


@dataclass
class Checkpoint:
    model: Model
    meta: dict
    extra: dict


def load_checkpoint(path) -> Checkpoint:
    with np.load(Path(path), allow_pickle=False) as z:
        fmt = str(z["__format__"]) if "__format__" in z.files else None
        if fmt != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not an {CHECKPOINT_FORMAT} file (format={fmt!r})")
        header = json.loads(str(z["__header__"]))
        weights = {k[2:]: z[k].copy() for k in z.files if k.startswith("w/")}
        extra = {k[2:]: z[k].copy() for k in z.files if k.startswith("x/")}
    cfg = ModelConfig.from_dict(header["config"])
    check_weights(cfg, weights)
    tokens = Vocab.from_list(header["tokens"]) if header["tokens"] is not None else None
    labels = (Vocab.from_list(header["labels"], specials=False)
              if header["labels"] is not None else None)
    model = Model(cfg, weights, header["kind"], tokens, labels)
    return Checkpoint(model, header["meta"], extra)


def with_config(model: Model, **changes) -> Model:
    return Model(replace(model.cfg, **changes), model.weights, model.kind, model.tokens, model.labels)
