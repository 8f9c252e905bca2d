"""Training loop: teacher-forced cross-entropy, Adam with warmup, checkpoints.

Perplexity is exp of mean token cross-entropy. Sessions are the batch unit;
gradients accumulate per session and one optimizer step is taken per batch.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .decoder import decoder_forward
from .model import ModelConfig, forward_session, init_params
from .numerics import AdamState, Tape, Tensor
from .sessions import Session
from .text import BOQ_ID, EOS_ID, Vocabulary, build_vocab, tokenize

logger = logging.getLogger("srw.training")

LEARNING_RATE_GRID = (3e-4, 5e-4, 1e-3)


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 16
    epochs: int = 10
    warmup_steps: int = 400
    grad_clip: float = 1.0
    seed: int = 1
    valid_fraction: float = 0.1

    def validate_for(self, model_cfg: ModelConfig) -> None:
        # The reference grid is only binding for the full-size architecture.
        if model_cfg.d == 512 and model_cfg.n_layers == 6 and self.lr not in LEARNING_RATE_GRID:
            raise ValueError(
                f"lr={self.lr} outside the base-architecture grid {LEARNING_RATE_GRID}"
            )


def _bucket(session_id: str) -> int:
    digest = hashlib.blake2b(session_id.encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little") % 100


def split_sessions(sessions, fractions=(0.8, 0.1, 0.1)):
    """Deterministic disjoint splits keyed on a hash of session_id."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    bounds = np.cumsum([f * 100 for f in fractions])
    splits: list[list[Session]] = [[] for _ in fractions]
    for sess in sessions:
        b = _bucket(sess.session_id)
        for i, hi in enumerate(bounds):
            if b < hi:
                splits[i].append(sess)
                break
    return tuple(splits)


def session_cross_entropy(params, cfg: ModelConfig, vocab: Vocabulary, session: Session,
                          rng: np.random.Generator | None = None) -> tuple[Tensor, int]:
    """Summed token cross-entropy of the target under teacher forcing."""
    target_ids = vocab.encode(tokenize(session.target))
    dec_in = [BOQ_ID, *target_ids]
    labels = [*target_ids, EOS_ID]
    ctx = forward_session(params, cfg, vocab, session, rng)
    logits = decoder_forward(dec_in, ctx.states, ctx.mask, params, cfg.encoder_config(), rng)
    log_probs = nm.log_softmax_rows(logits)
    picked = nm.pick(log_probs, np.arange(len(labels)), labels)
    return nm.neg(picked.sum()), len(labels)


def loss(batch, params, cfg: ModelConfig, vocab: Vocabulary,
         rng: np.random.Generator | None = None) -> Tensor:
    """Mean token cross-entropy over a batch of sessions."""
    if not batch:
        raise ValueError("loss over an empty batch")
    totals = []
    n_tokens = 0
    for session in batch:
        ce, n = session_cross_entropy(params, cfg, vocab, session, rng)
        totals.append(ce)
        n_tokens += n
    total = totals[0]
    for t in totals[1:]:
        total = nm.add(total, t)
    return total / n_tokens


def perplexity(sessions, params, cfg: ModelConfig, vocab: Vocabulary) -> float:
    """exp of mean token cross-entropy; no dropout, no tape."""
    total = 0.0
    n_tokens = 0
    for session in sessions:
        ce, n = session_cross_entropy(params, cfg, vocab, session)
        total += ce.item()
        n_tokens += n
    return float(np.exp(total / n_tokens))


def learning_rate(base_lr: float, step: int, warmup_steps: int) -> float:
    """Linear warmup to base_lr, then inverse-square-root decay."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(step / warmup_steps, (warmup_steps / step) ** 0.5)


@dataclass
class TrainReport:
    context_mode: str
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_ppl: float = float("inf")
    best_checkpoint: str = ""

    def to_json(self) -> str:
        payload = {
            "context_mode": self.context_mode,
            "epochs": [
                {k: (round(v, 6) if isinstance(v, float) else v) for k, v in row.items()}
                for row in self.epochs
            ],
            "best_epoch": self.best_epoch,
            "best_valid_ppl": round(self.best_valid_ppl, 6),
            # relative to the report's own directory, so reruns into different
            # output roots stay byte-identical
            "best_checkpoint": os.path.basename(self.best_checkpoint),
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def train(sessions, model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir,
          vocab: Vocabulary | None = None, valid_sessions=None,
          resume: str | None = None) -> TrainReport:
    """Train on sessions, checkpointing every epoch, tracking validation ppl.

    When valid_sessions is not given, a deterministic session_id-hash split
    carves out the validation fraction. Deterministic end to end for a fixed
    seed: identical reruns produce byte-identical checkpoints and reports.
    """
    train_cfg.validate_for(model_cfg)
    os.makedirs(out_dir, exist_ok=True)
    if valid_sessions is None:
        valid_frac = train_cfg.valid_fraction
        train_sessions, valid_sessions, _ = split_sessions(
            sessions, (1.0 - valid_frac, valid_frac, 0.0)
        )
    else:
        train_sessions = list(sessions)
    if not train_sessions or not valid_sessions:
        raise ValueError("both train and validation splits must be non-empty")

    if vocab is None:
        corpus = []
        for s in train_sessions:
            corpus.extend(s.history)
            corpus.append(s.source)
            corpus.append(s.target)
        vocab = build_vocab(corpus)
    vocab.save(os.path.join(out_dir, "vocab.txt"))
    model_cfg.save(os.path.join(out_dir, "model.cfg"))

    if resume is not None:
        params = nm.load_checkpoint(resume)
        expected = set(init_params(model_cfg, len(vocab), train_cfg.seed))
        if set(params) != expected:
            raise ValueError("resume checkpoint parameters do not match the model config")
    else:
        params = init_params(model_cfg, len(vocab), train_cfg.seed)

    state = AdamState(lr=train_cfg.lr)
    dropout_rng = nm.generator(train_cfg.seed, "dropout")
    report = TrainReport(context_mode=model_cfg.context_mode)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    step = 0
    with open(metrics_path, "w", encoding="utf-8", newline="\n") as metrics:
        metrics.write("epoch,split,loss,ppl\n")
        for epoch in range(1, train_cfg.epochs + 1):
            order = nm.generator(train_cfg.seed, f"shuffle:{epoch}").permutation(
                len(train_sessions)
            )
            epoch_ce = 0.0
            epoch_tokens = 0
            for start in range(0, len(order), train_cfg.batch_size):
                batch = [train_sessions[i] for i in order[start : start + train_cfg.batch_size]]
                batch_tokens = 0
                for session in batch:
                    with Tape() as tape:
                        ce, n = session_cross_entropy(
                            params, model_cfg, vocab, session, dropout_rng
                        )
                    nm.backward(tape, ce)
                    value = ce.item()
                    if not np.isfinite(value):
                        raise RuntimeError(
                            f"non-finite loss at epoch {epoch}, session "
                            f"{session.session_id}: {value}"
                        )
                    epoch_ce += value
                    epoch_tokens += n
                    batch_tokens += n
                grads = {
                    name: p.grad / batch_tokens
                    for name, p in params.items()
                    if p.grad is not None
                }
                for p in params.values():
                    p.zero_grad()
                nm.clip_global_norm(grads, train_cfg.grad_clip)
                step += 1
                state.lr = learning_rate(train_cfg.lr, step, train_cfg.warmup_steps)
                nm.adam_step(params, grads, state)

            train_loss = epoch_ce / epoch_tokens
            train_ppl = float(np.exp(train_loss))
            valid_ppl = perplexity(valid_sessions, params, model_cfg, vocab)
            valid_loss = float(np.log(valid_ppl))
            ckpt = os.path.join(out_dir, f"checkpoint_ep{epoch:03d}.ckpt")
            nm.save_checkpoint(ckpt, params)
            metrics.write(f"{epoch},train,{train_loss:.6f},{train_ppl:.6f}\n")
            metrics.write(f"{epoch},valid,{valid_loss:.6f},{valid_ppl:.6f}\n")
            report.epochs.append(
                {
                    "epoch": epoch,
                    "train_loss": train_loss,
                    "train_ppl": train_ppl,
                    "valid_loss": valid_loss,
                    "valid_ppl": valid_ppl,
                }
            )
            if valid_ppl < report.best_valid_ppl:
                report.best_valid_ppl = valid_ppl
                report.best_epoch = epoch
                report.best_checkpoint = os.path.join(out_dir, "checkpoint_best.ckpt")
                nm.save_checkpoint(report.best_checkpoint, params)
            logger.info(
                "epoch %d: train ppl %.3f, valid ppl %.3f", epoch, train_ppl, valid_ppl
            )
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_json())
    return report
