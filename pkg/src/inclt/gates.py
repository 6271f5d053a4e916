"""Invariant checks shared by ``inclt verify`` and the test-suite.

Each gate returns a :class:`GateResult`; none of them raise on failure.
"""

from __future__ import annotations

import contextlib
from typing import Callable

import numpy as np

from . import model as model_mod
from . import numerics as nx
from .incremental import run_recurrent
from .metrics import GateResult, correction_time, edit_overhead, relative_correctness
from .model import Model, ModelConfig, encode, forward_full, head_logits, init_state, init_weights, step
from .numerics import Tensor
from .training import label_smoothed_loss

RECURRENCE_TOL = 1e-8
ATTENTION_TOL = 1e-10
GRAD_REL_TOL = 1e-4
FD_STEP = 1e-6


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``max|a - b| / max(max|a|, max|b|)``; 0 when both are identically zero."""
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - b).max() / scale)


def central_difference(f: Callable[[], float], arr: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Numerical gradient of ``f`` w.r.t. ``arr``, perturbing it in place."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def random_config(rng: np.random.Generator, *, layers=(1, 2, 4), heads=(1, 2, 8),
                  head_kind: str | None = None, max_len: int = 64) -> ModelConfig:
    n_heads = int(rng.choice(heads))
    d_head = int(rng.choice([2, 4]))
    return ModelConfig(
        attention_kind="linear", n_layers=int(rng.choice(layers)), n_heads=n_heads,
        d_model=n_heads * d_head, d_ff=int(rng.choice([8, 16])), dropout=0.0,
        vocab_size=int(rng.integers(5, 20)), n_labels=int(rng.integers(2, 6)),
        head_kind=head_kind or str(rng.choice(["tagging", "classification"])),
        use_positional=bool(rng.integers(0, 2)), causal=True, max_len=max_len)


def recurrence_gap(cfg: ModelConfig, w: dict, tokens) -> float:
    """Max |step output - causal full-forward prefix output| over all prefixes."""
    state = init_state(cfg)
    worst = 0.0
    for t, tok in enumerate(tokens, start=1):
        state, out = step(cfg, w, state, tok)
        _, ref = forward_full(cfg, w, tokens[:t], causal=True)
        ref = ref[t - 1] if cfg.head_kind == "tagging" else ref
        worst = max(worst, float(np.abs(out - ref).max()))
    return worst


def gate_recurrence(n_pairs: int = 50, seed: int = 0, max_T: int = 64) -> GateResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_pairs):
        cfg = random_config(rng, max_len=max_T)
        w = init_weights(cfg, rng)
        T = int(rng.integers(1, max_T + 1))
        tokens = rng.integers(2, cfg.vocab_size, size=T).tolist()
        worst = max(worst, recurrence_gap(cfg, w, tokens))
    return GateResult("recurrence-equivalence", worst <= RECURRENCE_TOL,
                      f"max abs diff {worst:.2e} over {n_pairs} pairs (tol {RECURRENCE_TOL:g})")


def double_loop_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Causal linear attention for one head, summing over j <= i explicitly."""
    phi = lambda x: np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))  # noqa: E731
    T = q.shape[0]
    out = np.zeros_like(v)
    for i in range(T):
        num = np.zeros(v.shape[1])
        den = 0.0
        for j in range(i + 1):
            s = float(phi(q[i]) @ phi(k[j]))
            num += s * v[j]
            den += s
        out[i] = num / den
    return out


def gate_attention_oracle(n: int = 20, seed: int = 0) -> GateResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        B, H, T, dh = 1, int(rng.integers(1, 4)), int(rng.integers(1, 12)), int(rng.integers(1, 6))
        q, k, v = (rng.uniform(-2, 2, size=(B, H, T, dh)) for _ in range(3))
        with nx.no_grad():
            fast = model_mod.linear_attention(Tensor(q), Tensor(k), Tensor(v), causal=True).data
        for h in range(H):
            ref = double_loop_attention(q[0, h], k[0, h], v[0, h])
            worst = max(worst, float(np.abs(fast[0, h] - ref).max()))
    return GateResult("attention-oracle", worst <= ATTENTION_TOL,
                      f"max abs diff {worst:.2e} over {n} instances (tol {ATTENTION_TOL:g})")


def _tiny_config(attention: str, causal: bool = False, head_kind: str = "tagging") -> ModelConfig:
    return ModelConfig(attention_kind=attention, n_layers=2, n_heads=2, d_model=4, d_ff=6,
                       dropout=0.0, vocab_size=5, n_labels=3, head_kind=head_kind,
                       use_positional=True, causal=causal, max_len=5)


def model_grad_errors(cfg: ModelConfig, seed: int = 0, T: int = 4) -> dict[str, float]:
    """Relative error of autodiff vs central differences for every parameter tensor."""
    rng = np.random.default_rng(seed)
    w = init_weights(cfg, rng)
    for name in w:  # move biases / LN params off their trivial init values
        w[name] = w[name] + rng.normal(0.0, 0.1, size=w[name].shape)
    ids = rng.integers(0, cfg.vocab_size, size=(2, T))
    if cfg.head_kind == "tagging":
        targets = rng.integers(0, cfg.n_labels, size=(2, T))
    else:
        targets = rng.integers(0, cfg.n_labels, size=2)

    def loss_value() -> float:
        with nx.no_grad():
            return label_smoothed_loss(head_logits(cfg, w, encode(cfg, w, ids), ids),
                                       targets, 0.1).item()

    params = {k: Tensor(v, requires_grad=True) for k, v in w.items()}
    loss = label_smoothed_loss(head_logits(cfg, params, encode(cfg, params, ids), ids), targets, 0.1)
    nx.backward(loss)
    errors = {}
    for name, p in params.items():
        numeric = central_difference(loss_value, w[name])
        analytic = p.grad if p.grad is not None else np.zeros_like(w[name])
        errors[name] = relative_error(analytic, numeric)
    return errors


def gate_gradients(seed: int = 0) -> GateResult:
    worst, where = 0.0, ""
    for attention in ("softmax", "linear"):
        for causal in (False, True):
            errs = model_grad_errors(_tiny_config(attention, causal), seed)
            name = max(errs, key=errs.get)
            if errs[name] >= worst:
                worst, where = errs[name], f"{attention}/causal={causal}/{name}"
    return GateResult("gradient-check", worst <= GRAD_REL_TOL,
                      f"max relative error {worst:.2e} at {where} (tol {GRAD_REL_TOL:g})")


def gate_causality(seed: int = 0, n: int = 10) -> GateResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for attention in ("softmax", "linear"):
        for _ in range(n):
            cfg = ModelConfig(attention_kind=attention, n_layers=2, n_heads=2, d_model=8, d_ff=16,
                              dropout=0.0, vocab_size=12, n_labels=3, causal=True, max_len=16)
            w = init_weights(cfg, rng)
            T = int(rng.integers(2, 12))
            tokens = rng.integers(0, cfg.vocab_size, size=T)
            j = int(rng.integers(1, T))
            other = tokens.copy()
            other[j] = (other[j] + 1 + rng.integers(0, cfg.vocab_size - 1)) % cfg.vocab_size
            h1, _ = forward_full(cfg, w, tokens)
            h2, _ = forward_full(cfg, w, other)
            bad += not np.array_equal(h1[:j], h2[:j])
    return GateResult("causal-isolation", bad == 0, f"{bad} perturbation(s) leaked backwards")


def gate_monotone_metrics(seed: int = 0, n: int = 10) -> GateResult:
    rng = np.random.default_rng(seed)
    worst = (0.0, 0.0, 1.0)
    for _ in range(n):
        cfg = random_config(rng, layers=(1, 2), head_kind="tagging", max_len=32)
        m = Model(cfg, init_weights(cfg, rng), "lt_r_cm")
        T = int(rng.integers(1, 20))
        log = run_recurrent(m, rng.integers(2, cfg.vocab_size, size=T).tolist(),
                            delay=int(rng.integers(0, 3)))
        eo, ct, rc = edit_overhead(log), correction_time(log), relative_correctness(log)
        if (eo, ct, rc) != (0.0, 0.0, 1.0):
            worst = (eo, ct, rc)
    ok = worst == (0.0, 0.0, 1.0)
    return GateResult("monotone-metrics", ok, "EO={:.3f} CT={:.3f} RC={:.3f}".format(*worst))


GATES = {
    "recurrence-equivalence": gate_recurrence,
    "attention-oracle": gate_attention_oracle,
    "gradient-check": gate_gradients,
    "causal-isolation": gate_causality,
    "monotone-metrics": gate_monotone_metrics,
}


@contextlib.contextmanager
def injected_fault(kind: str | None):
    """Break the recurrent S update (``"state-update"``) for the duration."""
    if kind is None:
        yield
        return
    if kind != "state-update":
        raise ValueError(f"unknown fault {kind!r}")
    prev = model_mod._state_update_scale
    model_mod._state_update_scale = 0.5
    try:
        yield
    finally:
        model_mod._state_update_scale = prev


def run_gates(names=None, seed: int = 0, fault: str | None = None) -> list[GateResult]:
    names = list(GATES) if names is None else list(names)
    results = []
    with injected_fault(fault):
        for name in names:
            results.append(GATES[name](seed=seed))
    return results
