"""``inclt`` command line: train / run / score / bench / verify.

Settings come from three layers, later ones winning: a flat ``key = value``
config file (``--config``), positional ``key=value`` overrides, and the
explicit flags (``--seed``, ``--model``, ...).

    inclt train task=synth-bracket model=lt_r_cm --out-dir runs/bracket
    inclt run --checkpoint runs/bracket/checkpoint.npz --mode recurrent
    inclt score runs/bracket/logs.jsonl --gates monotone
    inclt bench --lengths 50,100,200
    inclt verify
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .data import (Corpus, DataFormatError, build_vocabs, load_text_embeddings,
                   read_classification, read_conll, split_random, write_classification,
                   write_conll)
from .model import (KIND_ALIASES, MODEL_KINDS, UnsupportedModeError, load_checkpoint,
                    save_checkpoint)

SYNTH_PREFIX = "synth-"
VALID_KINDS = sorted(MODEL_KINDS) + sorted(KIND_ALIASES)

TRAIN_DEFAULTS = {
    "task": "synth-copy",
    "model": "lt_r_cm",
    "n": 1500,
    "min_len": 4,
    "max_len": 12,
    "split_seed": 1,
    "n_layers": 2,
    "n_heads": 8,
    "d_model": 64,
    "d_ff": 256,
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config


def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _coerce(value, like):
    if isinstance(value, str) and like is not None and not isinstance(like, str):
        if isinstance(like, bool):
            return value.lower() in ("1", "true", "yes", "on")
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
        if isinstance(like, tuple):
            return tuple(type(like[0])(v) for v in value.split(","))
    return value


def settings(args, defaults: dict, flag_keys=("seed", "model", "mode", "delay", "out_dir",
                                               "checkpoint")) -> dict:
    conf = dict(defaults)
    if getattr(args, "config", None):
        conf.update(read_config(args.config))
    conf.update(parse_overrides(getattr(args, "overrides", None)))
    for key in flag_keys:
        val = getattr(args, key, None)
        if val is not None:
            conf[key] = val
    return conf


def _int_or_none(v):
    if v is None or v == "" or str(v).lower() == "none":
        return None
    return int(v)


def _lengths(v) -> list[int]:
    if isinstance(v, (list, tuple)):
        return [int(x) for x in v]
    return [int(x) for x in str(v).split(",") if x.strip()]


# ---------------------------------------------------------------- data


def load_task(conf: dict) -> tuple[Corpus, Corpus, Corpus]:
    """``synth-<name>`` generates a corpus; ``conll`` / ``classification`` read ``data``."""
    task = conf["task"]
    seed = int(conf.get("split_seed", 1))
    if task.startswith(SYNTH_PREFIX):
        from .synth import SYNTH_TASKS, synth_generate
        name = task[len(SYNTH_PREFIX):]
        if name not in SYNTH_TASKS:
            raise UsageError(f"unknown synthetic task {name!r}; choose from "
                             + ", ".join(SYNTH_PREFIX + t for t in SYNTH_TASKS))
        kw = {}
        if conf.get("n_classes") not in (None, ""):
            kw["n_classes"] = int(conf["n_classes"])
        corpus = synth_generate(name, int(conf["n"]), int(conf.get("data_seed", 0)),
                                min_len=int(conf["min_len"]), max_len=int(conf["max_len"]), **kw)
    elif task in ("conll", "classification"):
        if not conf.get("data"):
            raise UsageError(f"task={task} needs data=<path>")
        reader = read_conll if task == "conll" else read_classification
        corpus = reader(conf["data"])
    else:
        raise UsageError(f"unknown task {task!r}; use synth-<name>, conll or classification")
    return split_random(corpus, (0.7, 0.1, 0.2), seed)


def _write_corpus(corpus: Corpus, path: Path) -> None:
    (write_conll if corpus.task == "tagging" else write_classification)(corpus, path)


def _read_corpus(path: Path, task: str) -> Corpus:
    return (read_conll if task == "tagging" else read_classification)(path)


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    from .model import resolve_kind
    from .training import TrainConfig, train, write_report

    conf = settings(args, TRAIN_DEFAULTS)
    kind = conf["model"]
    try:
        resolve_kind(kind, _int_or_none(conf.get("delay")))
    except ValueError:
        raise UsageError(f"unknown model kind {kind!r}; valid kinds: {', '.join(VALID_KINDS)}")

    tc_fields = {f.name: f for f in fields(TrainConfig)}
    proto = TrainConfig()
    tkw = {}
    for key, value in conf.items():
        if key in tc_fields:
            if key == "grad_clip":
                tkw[key] = None if str(value).lower() in ("", "none") else float(value)
            else:
                tkw[key] = _coerce(value, getattr(proto, key))
    tcfg = TrainConfig(**tkw)

    out = Path(conf.get("out_dir") or "out")
    out.mkdir(parents=True, exist_ok=True)
    train_set, valid_set, test_set = load_task(conf)
    resume = load_checkpoint(conf["resume"]) if conf.get("resume") else None
    init = None
    if conf.get("embeddings") and resume is None:
        tokens, _ = build_vocabs(train_set)
        init = load_text_embeddings(conf["embeddings"], tokens, dim=int(conf["d_model"]))

    def echo(row):
        print(f"epoch {row['epoch']:3d}  loss {row['loss']:.4f}  valid {row['valid_metric']:.4f}"
              f"  lr {row['lr']:.2e}", flush=True)

    model_kw = {k: int(conf[k]) for k in ("n_layers", "n_heads", "d_model", "d_ff")}
    result = train(kind, train_set, valid_set, tcfg, delay=_int_or_none(conf.get("delay")),
                   resume=resume, log=echo, init_embeddings=init, **({} if resume else model_kw))
    ckpt = out / "checkpoint.npz"
    meta = result.checkpoint_meta(tcfg)
    meta.update(task=conf["task"], seed=tcfg.seed)
    save_checkpoint(ckpt, result.model, meta, result.checkpoint_extra())
    write_report(result.report, out / "report.csv", append=resume is not None)
    ext = "conll" if test_set.task == "tagging" else "tsv"
    for name, split in (("train", train_set), ("valid", valid_set), ("test", test_set)):
        _write_corpus(split, out / f"{name}.{ext}")
    print(f"best epoch {result.best_epoch} valid {result.best_metric:.4f}; wrote {ckpt}")
    return 0


def cmd_run(args) -> int:
    from .incremental import log_to_jsonl, run_corpus

    conf = settings(args, {"workers": 1, "digits": 6})
    out = Path(conf.get("out_dir") or "out")
    ckpt_path = Path(conf.get("checkpoint") or out / "checkpoint.npz")
    if not ckpt_path.exists():
        raise UsageError(f"checkpoint {ckpt_path} not found (use --checkpoint)")
    ckpt = load_checkpoint(ckpt_path)
    model = ckpt.model
    mode = conf.get("mode") or model.deploy_mode
    task = model.cfg.head_kind
    ext = "conll" if task == "tagging" else "tsv"
    corpus_path = Path(conf.get("corpus") or ckpt_path.parent / f"test.{ext}")
    corpus = _read_corpus(corpus_path, task)
    if conf.get("limit"):
        corpus = Corpus(corpus.task, corpus.examples[: int(conf["limit"])])
    seqs = [model.tokens.encode(ex.tokens) for ex in corpus]
    try:
        logs = run_corpus(model, seqs, mode, _int_or_none(conf.get("delay")),
                          workers=int(conf["workers"]), digits=int(conf["digits"]))
    except UnsupportedModeError as exc:
        raise UsageError(str(exc))
    for log, ex in zip(logs, corpus):
        log.tokens = list(ex.tokens)
    out.mkdir(parents=True, exist_ok=True)
    dest = out / "logs.jsonl"
    log_to_jsonl(logs, dest)
    summary = {"checkpoint": str(ckpt_path), "corpus": str(corpus_path), "mode": mode,
               "delay": logs[0].delay if logs else None, "sequences": len(logs),
               "forward_tokens": sum(log.forward_tokens or 0 for log in logs),
               "seed": _int_or_none(conf.get("seed", ckpt.meta.get("seed")))}
    (out / "run.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(f"{len(logs)} sequence(s), mode={mode}, delay={summary['delay']}; wrote {dest}")
    return 0


def cmd_score(args) -> int:
    from .incremental import log_from_jsonl
    from .metrics import GATES, format_table, score_logs, write_csv

    conf = settings(args, {})
    logs = []
    for path in args.logs:
        logs.extend(log_from_jsonl(path))
    if not logs:
        raise UsageError("no logs to score")
    if args.task and any(log.task != args.task for log in logs):
        raise UsageError(f"logs are not all {args.task!r}")
    try:
        per_seq, mean = score_logs(logs)
    except ValueError as exc:
        raise UsageError(str(exc))
    seed = _int_or_none(conf.get("seed"))
    print(format_table(mean, title=f"{len(logs)} log(s), task={logs[0].task}, seed={seed}"))
    out = Path(conf.get("out_dir") or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_csv(per_seq, mean, out / "metrics.csv", extra={"seed": seed})
    names = [g for g in (args.gates or "").split(",") if g]
    failed = 0
    for name in names:
        if name not in GATES:
            raise UsageError(f"unknown gate {name!r}; choose from {', '.join(GATES)}")
        res = GATES[name](per_seq, mean)
        print(f"{'PASS' if res.passed else 'FAIL'}  {res.name}  {res.detail}")
        failed += not res.passed
    return 1 if failed else 0


def cmd_bench(args) -> int:
    from .bench import bench_mode, bench_model, bench_report, scaling_ratio, speedup

    conf = settings(args, {"lengths": "50,100,200", "reps": 5, "warmup": 2, "n_layers": 4,
                           "d_model": 512, "d_ff": 2048, "n_heads": 8,
                           "mode": "restart,recurrent", "seed": 0})
    lengths = _lengths(conf["lengths"])
    modes = [m for m in str(conf["mode"]).split(",") if m]
    seed = int(conf["seed"])
    dims = {k: int(conf[k]) for k in ("n_layers", "d_model", "d_ff", "n_heads")}
    results = {}
    for mode in modes:
        if conf.get("checkpoint"):
            model = load_checkpoint(conf["checkpoint"]).model
        else:
            kind = conf.get("model") or ("lt_r_cm" if mode == "recurrent" else "lt")
            model = bench_model(kind, max_len=max(lengths) + 2, seed=seed, **dims)
        try:
            results[mode] = bench_mode(model, mode, lengths, reps=int(conf["reps"]),
                                       warmup=int(conf["warmup"]), seed=seed,
                                       include_serialization=bool(args.include_serialization))
        except (UnsupportedModeError, ValueError) as exc:
            raise UsageError(str(exc))
        for r in results[mode]:
            print(f"{mode:9s} T={r.length:4d}  {r.time_median_s:9.4f} s  "
                  f"{r.seq_per_sec:9.3f} seq/s  step p50 {r.step_p50_ms:.3f} ms", flush=True)
    out = Path(conf.get("out_dir") or "out")
    out.mkdir(parents=True, exist_ok=True)
    flat = [r for m in modes for r in results[m]]
    bench_report(flat, out / "bench.csv", out / "bench_plot.csv", extra={"seed": seed})
    failed = 0
    if "restart" in results and "recurrent" in results:
        common = sorted({r.length for r in results["restart"]} & {r.length for r in results["recurrent"]})
        for T in common:
            print(f"speedup recurrent vs restart at T={T}: "
                  f"{speedup(results['recurrent'], results['restart'], T):.2f}x")
    if args.gate:
        lo, mid, hi = min(lengths), sorted(lengths)[len(lengths) // 2], max(lengths)
        checks = []
        if "restart" in results and "recurrent" in results:
            s = speedup(results["recurrent"], results["restart"], mid)
            checks.append((f"speedup@T={mid} >= 5", s >= 5.0, s))
        if "recurrent" in results:
            r = scaling_ratio(results["recurrent"], hi, lo)
            expect = hi / lo
            checks.append((f"recurrent T{hi}/T{lo} = {expect:g} +- 25%",
                           abs(r - expect) <= 0.25 * expect, r))
        if "restart" in results:
            r = scaling_ratio(results["restart"], hi, lo)
            checks.append((f"restart T{hi}/T{lo} > {2 * hi / lo:g}", r > 2 * hi / lo, r))
        for name, ok, value in checks:
            print(f"{'PASS' if ok else 'FAIL'}  {name}  (got {value:.2f})")
            failed += not ok
    return 1 if failed else 0


def cmd_verify(args) -> int:
    from .gates import GATES, run_gates

    conf = settings(args, {"seed": 0})
    names = [g for g in (args.gates or "").split(",") if g] or list(GATES)
    for name in names:
        if name not in GATES:
            raise UsageError(f"unknown gate {name!r}; choose from {', '.join(GATES)}")
    results = run_gates(names, seed=int(conf["seed"]), fault=args.inject_fault)
    for res in results:
        print(f"{'PASS' if res.passed else 'FAIL'}  {res.name}  {res.detail}", flush=True)
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} gates passed (seed={conf['seed']})")
    return 1 if failed else 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("--model", help="model kind: " + ", ".join(VALID_KINDS))
    common.add_argument("--mode", help="restart or recurrent")
    common.add_argument("--delay", type=int)
    common.add_argument("--lengths", help="comma-separated sequence lengths")
    common.add_argument("--checkpoint")

    p = argparse.ArgumentParser(prog="inclt", description="Incremental linear-transformer toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model kind")
    t.add_argument("overrides", nargs="*", metavar="key=value")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("run", parents=[common], help="incremental run over a corpus")
    r.add_argument("overrides", nargs="*", metavar="key=value")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("score", parents=[common], help="score incremental logs")
    s.add_argument("logs", nargs="+", help="IncrementalLog JSONL file(s)")
    s.add_argument("--task", choices=["tagging", "classification"])
    s.add_argument("--gates", help="comma-separated: monotone, rc-delay-monotone")
    s.set_defaults(func=cmd_score, overrides=[])

    b = sub.add_parser("bench", parents=[common], help="restart vs recurrent timing")
    b.add_argument("overrides", nargs="*", metavar="key=value")
    b.add_argument("--reps", type=int)
    b.add_argument("--warmup", type=int)
    b.add_argument("--include-serialization", action="store_true")
    b.add_argument("--gate", action="store_true", help="exit nonzero if speed gates fail")
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("verify", parents=[common], help="run invariant gates")
    v.add_argument("--gates", help="comma-separated subset of gates")
    v.add_argument("--inject-fault", choices=["state-update"],
                   help="test hook: corrupt the recurrent state update")
    v.set_defaults(func=cmd_verify, overrides=[])
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for key in ("reps", "warmup", "lengths"):
        if getattr(args, key, None) is not None:
            args.overrides = list(args.overrides) + [f"{key}={getattr(args, key)}"]
    try:
        return args.func(args)
    except UsageError as exc:
        parser.exit(2, f"{parser.prog} {args.command}: error: {exc}\n")
    except (DataFormatError, FileNotFoundError, ValueError) as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
