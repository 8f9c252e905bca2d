"""Ablation experiment: train the three context arms on one synthetic corpus.

One run generates a seeded corpus, splits it 80/10/10 by session-id hash,
trains context-off, aggregation, and aggregation+graph models with identical
budgets, and evaluates rank-metric gains on the held-out test split.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field

from . import numerics as nm
from .evaluation import MetricReport, RetrievalOracle, evaluate
from .model import ModelConfig, Rewriter
from .sessions import generate_corpus
from .text import Vocabulary
from .training import TrainConfig, split_sessions, train

logger = logging.getLogger("srw.experiment")

ARMS = ("off", "aggregation", "aggregation+graph")


@dataclass
class ArmResult:
    mode: str
    best_valid_ppl: float
    best_epoch: int
    metrics: MetricReport
    train_seconds: float

    def gains(self, n: int) -> dict[str, float]:
        return self.metrics.blocks[n].gains_over(self.metrics.source)


@dataclass
class AblationResult:
    seed: int
    arms: dict[str, ArmResult] = field(default_factory=dict)

    def ordering_holds(self, n: int = 5, min_hit16_gap: float = 1.0) -> bool:
        """Strict off < aggregation < aggregation+graph on MRR and HIT@16 gains."""
        gains = [self.arms[a].gains(n) for a in ARMS]
        mrr_ok = gains[0]["mrr_gain"] < gains[1]["mrr_gain"] < gains[2]["mrr_gain"]
        hit_ok = (
            gains[1]["hit16_gain"] - gains[0]["hit16_gain"] >= min_hit16_gap
            and gains[2]["hit16_gain"] - gains[1]["hit16_gain"] >= min_hit16_gap
        )
        return mrr_ok and hit_ok

    def ppl_ordering_holds(self) -> bool:
        return (
            self.arms["aggregation+graph"].best_valid_ppl < self.arms["off"].best_valid_ppl
        )

    def summary(self) -> str:
        lines = [f"seed {self.seed}"]
        for arm in ARMS:
            r = self.arms[arm]
            g5, g10 = r.gains(5), r.gains(10)
            lines.append(
                f"  {arm:20s} ppl={r.best_valid_ppl:7.3f}"
                f"  mrr5={g5['mrr_gain']:+7.2f} hit16@5={g5['hit16_gain']:+7.2f}"
                f"  mrr10={g10['mrr_gain']:+7.2f} hit16@10={g10['hit16_gain']:+7.2f}"
                f"  bleu={r.metrics.bleu:6.2f}"
            )
        return "\n".join(lines)


def run_ablation(
    seed: int,
    out_dir,
    n_sessions: int = 5000,
    epochs: int = 15,
    lr: float = 1e-3,
    batch_size: int = 16,
    warmup_steps: int = 400,
    dropout: float = 0.05,
    d: int = 64,
    n_layers: int = 2,
    beam_size: int = 10,
    max_len: int = 8,
) -> AblationResult:
    """Train and evaluate all three arms on one seeded corpus."""
    os.makedirs(out_dir, exist_ok=True)
    catalog, sessions = generate_corpus(seed, n_sessions)
    train_split, valid_split, test_split = split_sessions(sessions)
    oracle = RetrievalOracle(catalog)
    logger.info(
        "seed %d: %d/%d/%d train/valid/test sessions",
        seed, len(train_split), len(valid_split), len(test_split),
    )

    result = AblationResult(seed=seed)
    for mode in ARMS:
        model_cfg = ModelConfig(d=d, n_layers=n_layers, context_mode=mode, dropout=dropout)
        train_cfg = TrainConfig(
            lr=lr, batch_size=batch_size, epochs=epochs,
            warmup_steps=warmup_steps, seed=seed,
        )
        arm_dir = os.path.join(out_dir, f"seed{seed}_{mode.replace('+', '_')}")
        started = time.time()
        report = train(train_split, model_cfg, train_cfg, arm_dir,
                       valid_sessions=valid_split)
        elapsed = time.time() - started
        params = nm.load_checkpoint(report.best_checkpoint)
        vocab = Vocabulary.load(os.path.join(arm_dir, "vocab.txt"))
        rewriter = Rewriter(params, model_cfg, vocab)
        metrics = evaluate(
            lambda sess, n: [
                c.query for c in rewriter.rewrite(sess, n, beam_size=beam_size,
                                                  max_len=max_len)
            ],
            test_split,
            oracle,
        )
        result.arms[mode] = ArmResult(
            mode=mode,
            best_valid_ppl=report.best_valid_ppl,
            best_epoch=report.best_epoch,
            metrics=metrics,
            train_seconds=elapsed,
        )
        logger.info("seed %d %s: %.0fs, best ppl %.3f", seed, mode, elapsed,
                    report.best_valid_ppl)
    with open(os.path.join(out_dir, f"seed{seed}_summary.json"), "w",
              encoding="utf-8", newline="\n") as fh:
        payload = {
            arm: {
                "best_valid_ppl": round(r.best_valid_ppl, 6),
                "best_epoch": r.best_epoch,
                "metrics": r.metrics.to_dict(),
            }
            for arm, r in result.arms.items()
        }
        json.dump({"seed": seed, "arms": payload}, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return result
