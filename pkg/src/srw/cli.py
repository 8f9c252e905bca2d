"""Command-line entry points: generate-data, train, rewrite, evaluate.

Every command is deterministic given its seed and inputs. Configuration
precedence is flags > config file > defaults; config files are line-oriented
key=value text. SRW_LOG sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import numerics as nm
from .evaluation import RetrievalOracle, evaluate
from .model import ModelConfig, Rewriter, normalize_context_mode
from .sessions import Catalog, generate_corpus, load_sessions, save_sessions
from .text import Vocabulary
from .training import TrainConfig, train

logger = logging.getLogger("srw.cli")

_MODEL_KEYS = {
    "d": int, "n_heads": int, "ffn_dim": int, "n_layers": int, "max_len": int,
    "dropout": float, "gat_heads": int, "gat_rounds": int, "context_mode": str,
}
_TRAIN_KEYS = {
    "lr": float, "batch_size": int, "epochs": int, "warmup_steps": int,
    "grad_clip": float, "seed": int, "valid_fraction": float,
}


def read_kv_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def _merged_configs(args) -> tuple[ModelConfig, TrainConfig]:
    """flags > config file > defaults."""
    file_values = read_kv_file(args.config) if args.config else {}
    model_kwargs = {}
    train_kwargs = {}
    for key, cast in _MODEL_KEYS.items():
        if key in file_values:
            model_kwargs[key] = cast(file_values[key])
        flag = getattr(args, key, None)
        if flag is not None:
            model_kwargs[key] = flag
    for key, cast in _TRAIN_KEYS.items():
        if key in file_values:
            train_kwargs[key] = cast(file_values[key])
        flag = getattr(args, key, None)
        if flag is not None:
            train_kwargs[key] = flag
    unknown = set(file_values) - set(_MODEL_KEYS) - set(_TRAIN_KEYS)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)


def _load_model(checkpoint: str, config_path: str | None, vocab_path: str | None) -> Rewriter:
    base = os.path.dirname(os.path.abspath(checkpoint))
    config_path = config_path or os.path.join(base, "model.cfg")
    vocab_path = vocab_path or os.path.join(base, "vocab.txt")
    for path, kind in ((checkpoint, "checkpoint"), (config_path, "model config"),
                       (vocab_path, "vocabulary")):
        if not os.path.exists(path):
            raise FileNotFoundError(f"{kind} not found: {path}")
    cfg = ModelConfig.load(config_path)
    vocab = Vocabulary.load(vocab_path)
    params = nm.load_checkpoint(checkpoint)
    return Rewriter(params, cfg, vocab)


# ---------------------------------------------------------------------------
# commands


def cmd_generate_data(args) -> int:
    catalog, sessions = generate_corpus(args.seed, args.n_sessions)
    os.makedirs(args.out, exist_ok=True)
    catalog.save(os.path.join(args.out, "catalog.jsonl"))
    save_sessions(os.path.join(args.out, "sessions.jsonl"), sessions)
    mean_hist = sum(len(s.history) for s in sessions) / len(sessions)
    print(
        f"sessions={len(sessions)} products={len(catalog)} "
        f"mean_history_len={mean_hist:.3f}"
    )
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = _merged_configs(args)
    sessions = load_sessions(args.sessions)
    report = train(sessions, model_cfg, train_cfg, args.out, resume=args.resume)
    best = report.best_valid_ppl
    print(f"best_epoch={report.best_epoch} best_valid_ppl={best:.6f} "
          f"checkpoint={report.best_checkpoint}")
    return 0


def _fan_out(sessions, fn, workers: int) -> dict[str, object]:
    """Per-session results, computed concurrently but keyed for ordered output.

    Inference is read-only over the model parameters, so sessions are
    independent; results are identical for any worker count.
    """
    if workers <= 1:
        return {s.session_id: fn(s) for s in sessions}
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {s.session_id: pool.submit(fn, s) for s in sessions}
        return {sid: fut.result() for sid, fut in futures.items()}


def cmd_rewrite(args) -> int:
    rewriter = _load_model(args.checkpoint, args.model_config, args.vocab)
    if args.explain and rewriter.cfg.context_mode == "off":
        raise ValueError("--explain requires a context-aware checkpoint")
    beam = args.beam_size or args.candidates
    if args.candidates > beam:
        raise ValueError(f"candidates={args.candidates} exceeds beam size {beam}")
    sessions = load_sessions(args.sessions)
    results = _fan_out(
        sessions,
        lambda s: rewriter.rewrite(s, args.candidates, beam_size=beam,
                                   max_len=args.max_len),
        args.workers,
    )
    out = open(args.out, "w", encoding="utf-8", newline="\n") if args.out else sys.stdout
    try:
        for sess in sessions:
            cands = results[sess.session_id]
            row = {
                "session_id": sess.session_id,
                "candidates": [
                    {"query": c.query, "likelihood": round(c.likelihood, 6)}
                    for c in cands
                ],
            }
            if any(not c.finished for c in cands):
                row["unfinished"] = True
            if args.explain:
                weights = rewriter.explain(sess)
                row["alpha"] = {k: round(v, 6) for k, v in weights.items()}
            out.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
    finally:
        if args.out:
            out.close()
    return 0


def cmd_evaluate(args) -> int:
    rewriter = _load_model(args.checkpoint, args.model_config, args.vocab)
    sessions = load_sessions(args.sessions)
    catalog = Catalog.load(args.catalog)
    oracle = RetrievalOracle(catalog)
    beam = max(args.beam_size, 10)
    cache = _fan_out(
        sessions,
        lambda s: [c.query for c in rewriter.rewrite(s, 10, beam_size=beam,
                                                     max_len=args.max_len)],
        args.workers,
    )
    report = evaluate(lambda s, n: cache[s.session_id][:n], sessions, oracle)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(report.to_json())
    print(report.to_table(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="srw", description="Session-aware query rewriting toolkit."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic catalog + sessions corpus")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("-n", "--n-sessions", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a rewriter on a sessions file")
    p.add_argument("--sessions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--context", dest="context_mode", type=normalize_context_mode,
                   metavar="off|agg|agg+graph")
    for key, cast in _MODEL_KEYS.items():
        if key != "context_mode":
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=cast)
    for key, cast in _TRAIN_KEYS.items():
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=cast)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rewrite", help="emit top-N rewrite candidates as JSONL")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sessions", required=True)
    p.add_argument("-N", "--candidates", type=int, default=10)
    p.add_argument("--beam-size", type=int)
    p.add_argument("--max-len", type=int, default=12)
    p.add_argument("--vocab")
    p.add_argument("--model-config")
    p.add_argument("--explain", action="store_true",
                   help="include aggregation weights per context node")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel rewrite fan-out (results are identical)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_rewrite)

    p = sub.add_parser("evaluate", help="score a checkpoint against the retrieval oracle")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sessions", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--beam-size", type=int, default=10)
    p.add_argument("--max-len", type=int, default=12)
    p.add_argument("--vocab")
    p.add_argument("--model-config")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel candidate generation (results are identical)")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("SRW_LOG", "WARNING").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, nm.CheckpointFormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except RuntimeError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
