"""Retrieval oracle and metrics: corpus BLEU, MRR gain, HIT@1/HIT@16.

The oracle ranks catalog products by lexical overlap with the query and keeps
the top 32 (HIT@16 reads the first "page" of 16). Rank metrics are reported
as gains over running the raw source query through the same oracle.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

from .sessions import Catalog, Session
from .text import tokenize

PAGE_SIZE = 32
FIRST_PAGE = 16


class RetrievalOracle:
    """Deterministic lexical search over a catalog: overlap score, id tie-break."""

    def __init__(self, catalog: Catalog):
        self.catalog = catalog
        self._cache: dict[str, list[str]] = {}

    def search(self, query: str) -> list[str]:
        """Top-32 product ids by |query tokens ∩ product tokens| / |query tokens|."""
        cached = self._cache.get(query)
        if cached is not None:
            return cached
        q_tokens = set(tokenize(query))
        if not q_tokens:
            self._cache[query] = []
            return []
        candidates: set[str] = set()
        for tok in q_tokens:
            candidates.update(self.catalog.index.get(tok, ()))
        scored = []
        for pid in candidates:
            overlap = len(q_tokens & self.catalog.products[pid].tokens())
            if overlap:
                scored.append((-overlap / len(q_tokens), pid))
        scored.sort()
        page = [pid for _, pid in scored[:PAGE_SIZE]]
        self._cache[query] = page
        return page

    def rank_of(self, product_id: str, query: str) -> int | None:
        page = self.search(query)
        try:
            return page.index(product_id) + 1
        except ValueError:
            return None


def mrr_score(candidates: Sequence[str], purchased: str, oracle: RetrievalOracle) -> float:
    """Best reciprocal rank of the purchased product over the candidate queries."""
    if not candidates:
        raise ValueError("mrr_score needs at least one candidate query")
    best = 0.0
    for query in candidates:
        rank = oracle.rank_of(purchased, query)
        if rank is not None:
            best = max(best, 1.0 / rank)
    return best


def hit_at_k(candidates: Sequence[str], purchased: str, oracle: RetrievalOracle, k: int) -> int:
    """1 iff any candidate's result page ranks the product within the top k."""
    for query in candidates:
        rank = oracle.rank_of(purchased, query)
        if rank is not None and rank <= k:
            return 1
    return 0


# ---------------------------------------------------------------------------
# BLEU


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[str], references: Sequence[str]) -> float:
    """Corpus BLEU-4 on lowercase whitespace tokens, 0..100.

    Modified n-gram precisions are pooled over the corpus; orders with no
    hypothesis n-grams at all are excluded from the geometric mean (so
    identical short corpora still score 100), while an order with zero
    matches scores 0 overall. Brevity penalty is exp(1 - r/c) for c <= r.
    """
    if len(hypotheses) != len(references):
        raise ValueError(
            f"got {len(hypotheses)} hypotheses but {len(references)} references"
        )
    matches = [0] * 4
    totals = [0] * 4
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h_toks = tokenize(hyp)
        r_toks = tokenize(ref)
        hyp_len += len(h_toks)
        ref_len += len(r_toks)
        for n in range(1, 5):
            h_counts = _ngrams(h_toks, n)
            r_counts = _ngrams(r_toks, n)
            totals[n - 1] += sum(h_counts.values())
            matches[n - 1] += sum(min(c, r_counts[g]) for g, c in h_counts.items())
    if hyp_len == 0:
        return 0.0
    log_sum = 0.0
    orders = 0
    for m, t in zip(matches, totals):
        if t == 0:
            continue
        if m == 0:
            return 0.0
        log_sum += math.log(m / t)
        orders += 1
    if orders == 0:
        return 0.0
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_sum / orders)


# ---------------------------------------------------------------------------
# Full evaluation


@dataclass
class MetricBlock:
    mrr: float
    hit1: float
    hit16: float

    def gains_over(self, base: "MetricBlock") -> dict[str, float]:
        return {
            "mrr_gain": self.mrr - base.mrr,
            "hit1_gain": self.hit1 - base.hit1,
            "hit16_gain": self.hit16 - base.hit16,
        }


@dataclass
class MetricReport:
    """Rank metrics (in percentage points) per candidate count, plus BLEU."""

    n_sessions: int
    bleu: float
    source: MetricBlock
    target: MetricBlock
    blocks: dict[int, MetricBlock]

    def to_dict(self) -> dict:
        out = {
            "n_sessions": self.n_sessions,
            "bleu": round(self.bleu, 6),
            "source": {
                "mrr": round(self.source.mrr, 6),
                "hit1": round(self.source.hit1, 6),
                "hit16": round(self.source.hit16, 6),
            },
            "target": {k: round(v, 6) for k, v in self.target.gains_over(self.source).items()},
            "candidates": {},
        }
        for n in sorted(self.blocks):
            blk = self.blocks[n]
            entry = {
                "mrr": round(blk.mrr, 6),
                "hit1": round(blk.hit1, 6),
                "hit16": round(blk.hit16, 6),
            }
            entry.update({k: round(v, 6) for k, v in blk.gains_over(self.source).items()})
            out["candidates"][str(n)] = entry
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_table(self) -> str:
        counts = sorted(self.blocks)
        header1 = f"{'':24s}" + "".join(f"{'#Candidates=' + str(n):>27s}" for n in counts)
        header2 = f"{'':24s}" + "".join(f"{'MRR':>9s}{'HIT@1':>9s}{'HIT@16':>9s}" for _ in counts)
        header2 += f"{'BLEU':>9s}"

        def row(label: str, gains_by_count, bleu: str) -> str:
            cells = ""
            for n in counts:
                g = gains_by_count(n)
                cells += f"{g['mrr_gain']:>+9.2f}{g['hit1_gain']:>+9.2f}{g['hit16_gain']:>+9.2f}"
            return f"{label:24s}" + cells + f"{bleu:>9s}"

        zero = {"mrr_gain": 0.0, "hit1_gain": 0.0, "hit16_gain": 0.0}
        lines = [
            header1,
            header2,
            row("Source Query", lambda n: zero, "---"),
            row("Target Query", lambda n: self.target.gains_over(self.source), "---"),
            row("Model", lambda n: self.blocks[n].gains_over(self.source), f"{self.bleu:.2f}"),
        ]
        return "\n".join(lines) + "\n"


def _mean_block(rows: list[tuple[float, int, int]]) -> MetricBlock:
    n = len(rows)
    return MetricBlock(
        mrr=100.0 * sum(r[0] for r in rows) / n,
        hit1=100.0 * sum(r[1] for r in rows) / n,
        hit16=100.0 * sum(r[2] for r in rows) / n,
    )


def evaluate(
    rewrite_fn: Callable[[Session, int], list[str]],
    sessions: Sequence[Session],
    oracle: RetrievalOracle,
    candidate_counts: Sequence[int] = (5, 10),
) -> MetricReport:
    """Score a rewriter against the source-query baseline and target upper bound.

    `rewrite_fn(session, n)` returns up to n candidate queries, best first.
    Metrics for each candidate count N use the first N candidates of one run
    at max(candidate_counts).
    """
    if not sessions:
        raise ValueError("cannot evaluate on an empty session list")
    counts = sorted(candidate_counts)
    top = max(counts)
    per_count: dict[int, list[tuple[float, int, int]]] = {n: [] for n in counts}
    source_rows: list[tuple[float, int, int]] = []
    target_rows: list[tuple[float, int, int]] = []
    top1: list[str] = []
    for sess in sessions:
        cands = list(rewrite_fn(sess, top))[:top]
        if not cands:
            cands = [""]
        top1.append(cands[0])
        for n in counts:
            subset = cands[:n]
            per_count[n].append(
                (
                    mrr_score(subset, sess.purchased_product, oracle),
                    hit_at_k(subset, sess.purchased_product, oracle, 1),
                    hit_at_k(subset, sess.purchased_product, oracle, FIRST_PAGE),
                )
            )
        source_rows.append(
            (
                mrr_score([sess.source], sess.purchased_product, oracle),
                hit_at_k([sess.source], sess.purchased_product, oracle, 1),
                hit_at_k([sess.source], sess.purchased_product, oracle, FIRST_PAGE),
            )
        )
        target_rows.append(
            (
                mrr_score([sess.target], sess.purchased_product, oracle),
                hit_at_k([sess.target], sess.purchased_product, oracle, 1),
                hit_at_k([sess.target], sess.purchased_product, oracle, FIRST_PAGE),
            )
        )
    return MetricReport(
        n_sessions=len(sessions),
        bleu=corpus_bleu(top1, [s.target for s in sessions]),
        source=_mean_block(source_rows),
        target=_mean_block(target_rows),
        blocks={n: _mean_block(per_count[n]) for n in counts},
    )
