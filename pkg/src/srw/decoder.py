"""Autoregressive decoder over the session representation, plus beam search.

The decoder mirrors the encoder's width and depth, adding causal self-
attention and cross-attention into the session states. Beam search ranks
finished hypotheses by length-normalized log-likelihood; the reported
likelihood is exp of that score, so it lands in (0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .encoder import EncoderConfig, apply_dropout, attention_sublayer, embed, ffn
from .numerics import Tensor
from .text import BOQ_ID, EOS_ID, PAD_ID, Vocabulary


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def decoder_forward(dec_ids, session_states: Tensor, source_mask: np.ndarray,
                    params, cfg: EncoderConfig,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Teacher-forced pass: logits over the vocabulary at every position."""
    length = len(dec_ids)
    x = embed(dec_ids, params["embed.token"], cfg, rng)
    self_mask = causal_mask(length)
    cross = np.broadcast_to(np.asarray(source_mask, dtype=bool)[None, :],
                            (length, len(source_mask)))
    for i in range(cfg.n_layers):
        base = f"dec.{i}"
        a = attention_sublayer(params, f"{base}.attn", x, x, cfg, self_mask)
        x = nm.layer_norm(nm.add(x, apply_dropout(a, cfg.dropout, rng)),
                          params[f"{base}.ln1.gain"], params[f"{base}.ln1.bias"])
        c = attention_sublayer(params, f"{base}.cross", x, session_states, cfg, cross)
        x = nm.layer_norm(nm.add(x, apply_dropout(c, cfg.dropout, rng)),
                          params[f"{base}.ln2.gain"], params[f"{base}.ln2.bias"])
        f = ffn(params, f"{base}.ffn", x)
        x = nm.layer_norm(nm.add(x, apply_dropout(f, cfg.dropout, rng)),
                          params[f"{base}.ln3.gain"], params[f"{base}.ln3.bias"])
    return nm.matmul(x, params["out.proj"])


def decode_step(prefix_ids, session_states: Tensor, source_mask: np.ndarray,
                params, cfg: EncoderConfig) -> np.ndarray:
    """Next-token probability distribution given a <boq>-prefixed partial query."""
    if not prefix_ids or prefix_ids[0] != BOQ_ID:
        raise ValueError("decoder prefix must start with the <boq> token")
    if len(prefix_ids) > cfg.max_len:
        raise ValueError(f"prefix of length {len(prefix_ids)} exceeds max_len={cfg.max_len}")
    logits = decoder_forward(prefix_ids, session_states, source_mask, params, cfg)
    last = logits.data[-1]
    e = np.exp(last - last.max())
    return e / e.sum()


def _next_log_probs(prefix_ids, session_states, source_mask, params, cfg) -> np.ndarray:
    logits = decoder_forward(prefix_ids, session_states, source_mask, params, cfg)
    last = logits.data[-1].astype(np.float64)
    shifted = last - last.max()
    return shifted - np.log(np.exp(shifted).sum())


@dataclass
class RewriteCandidate:
    tokens: list[str]  # surface tokens, sentinels stripped
    score: float  # log-likelihood / generated length (<eos> included)
    likelihood: float  # exp(score), in (0, 1]
    finished: bool = True

    @property
    def query(self) -> str:
        return " ".join(self.tokens)


def beam_search(session_states: Tensor, source_mask: np.ndarray, params,
                cfg: EncoderConfig, vocab: Vocabulary, beam_size: int,
                n_best: int, max_len: int) -> list[RewriteCandidate]:
    """Length-normalized beam search returning up to n_best distinct candidates.

    A hypothesis finishes when it emits <eos>; <pad> and <boq> are never
    proposed. If nothing finishes within max_len, the best unfinished
    hypotheses are returned flagged.
    """
    if n_best > beam_size:
        raise ValueError(f"n_best={n_best} exceeds beam_size={beam_size}")
    suppress = np.zeros(len(vocab), dtype=bool)
    suppress[[PAD_ID, BOQ_ID]] = True

    live: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[tuple[tuple[int, ...], float]] = []
    for _ in range(max_len):
        expansions: list[tuple[float, tuple[int, ...]]] = []
        for seq, total in live:
            log_probs = _next_log_probs([BOQ_ID, *seq], session_states, source_mask,
                                        params, cfg)
            log_probs[suppress] = -np.inf
            for tok in range(len(vocab)):
                lp = log_probs[tok]
                if lp == -np.inf:
                    continue
                expansions.append((total + lp, seq + (tok,)))
        expansions.sort(key=lambda item: (-item[0], item[1]))
        live = []
        for total, seq in expansions:
            if seq[-1] == EOS_ID:
                finished.append((seq, total))
            elif len(live) < beam_size:
                live.append((seq, total))
        if not live:
            break

    def normalized(entry: tuple[tuple[int, ...], float]) -> float:
        seq, total = entry
        return total / len(seq)

    pool = finished if finished else live
    flag_finished = bool(finished)
    seen: set[tuple[int, ...]] = set()
    ranked = sorted(pool, key=lambda e: (-normalized(e), e[0]))
    out: list[RewriteCandidate] = []
    for seq, total in ranked:
        content = tuple(t for t in seq if t != EOS_ID)
        if content in seen:
            continue
        seen.add(content)
        score = total / len(seq)
        out.append(
            RewriteCandidate(
                tokens=vocab.decode(content),
                score=float(score),
                likelihood=float(np.exp(score)),
                finished=flag_finished,
            )
        )
        if len(out) == n_best:
            break
    return out


def log_likelihood(token_ids, session_states: Tensor, source_mask: np.ndarray,
                   params, cfg: EncoderConfig, normalize: bool = False) -> float:
    """Teacher-forced log-likelihood of a token sequence (with its <eos>)."""
    dec_in = [BOQ_ID, *token_ids]
    labels = [*token_ids, EOS_ID]
    logits = decoder_forward(dec_in, session_states, source_mask, params, cfg)
    z = logits.data.astype(np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    total = float(sum(log_probs[i, tok] for i, tok in enumerate(labels)))
    return total / len(labels) if normalize else total
