"""Token/position embedding and the stacked self-attention encoder.

One parameter set encodes both the source query and each history query
(history queries go through the stack independently). The first row of every
encoded query is the begin-of-query sentinel; that row doubles as the
whole-query representation.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .sessions import Session
from .text import PAD_ID, Vocabulary, pad_query, padded_length, tokenize


@dataclass
class EncoderConfig:
    d: int = 64
    n_heads: int = 4
    ffn_dim: int = 256
    n_layers: int = 2
    max_len: int = 32
    dropout: float = 0.1
    d_k: int | None = None  # per-head key dim; d // n_heads unless overridden
    d_v: int | None = None

    def __post_init__(self):
        if self.d_k is None:
            if self.d % self.n_heads:
                raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
            self.d_k = self.d // self.n_heads
        if self.d_v is None:
            self.d_v = self.d_k


@lru_cache(maxsize=64)
def sinusoid_table(length: int, d: int) -> np.ndarray:
    """Sinusoidal position embeddings: sin on even dims, cos on odd dims."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    dim = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, dim / d)
    table = np.zeros((length, d), dtype=nm.DTYPE)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : d // 2])
    return table


def apply_dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when no rng is supplied (inference)."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(nm.DTYPE) / (1.0 - rate)
    return nm.mul(x, nm.Tensor(keep))


def init_block_params(cfg: EncoderConfig, seed: int, prefix: str, cross_attention: bool = False):
    """Xavier-uniform weights and identity layer norms for one block stack."""
    params: dict[str, Tensor] = {}
    d, h = cfg.d, cfg.n_heads

    def add(name: str, arr) -> None:
        params[name] = nm.param(arr, name)

    for i in range(cfg.n_layers):
        base = f"{prefix}.{i}"
        sublayers = ["attn"] + (["cross"] if cross_attention else [])
        for sub in sublayers:
            add(f"{base}.{sub}.wq", nm.xavier_uniform(nm.generator(seed, f"{base}.{sub}.wq"), d, h * cfg.d_k))
            add(f"{base}.{sub}.wk", nm.xavier_uniform(nm.generator(seed, f"{base}.{sub}.wk"), d, h * cfg.d_k))
            add(f"{base}.{sub}.wv", nm.xavier_uniform(nm.generator(seed, f"{base}.{sub}.wv"), d, h * cfg.d_v))
            add(f"{base}.{sub}.wo", nm.xavier_uniform(nm.generator(seed, f"{base}.{sub}.wo"), h * cfg.d_v, d))
        add(f"{base}.ffn.w1", nm.xavier_uniform(nm.generator(seed, f"{base}.ffn.w1"), d, cfg.ffn_dim))
        add(f"{base}.ffn.b1", np.zeros(cfg.ffn_dim, dtype=nm.DTYPE))
        add(f"{base}.ffn.w2", nm.xavier_uniform(nm.generator(seed, f"{base}.ffn.w2"), cfg.ffn_dim, d))
        add(f"{base}.ffn.b2", np.zeros(d, dtype=nm.DTYPE))
        n_norms = 3 if cross_attention else 2
        for ln in range(1, n_norms + 1):
            add(f"{base}.ln{ln}.gain", np.ones(d, dtype=nm.DTYPE))
            add(f"{base}.ln{ln}.bias", np.zeros(d, dtype=nm.DTYPE))
    return params


def embed(ids, emb_table: Tensor, cfg: EncoderConfig,
          rng: np.random.Generator | None = None) -> Tensor:
    """Token embedding (scaled by sqrt(d)) plus sinusoidal position embedding."""
    if len(ids) > cfg.max_len:
        raise ValueError(f"sequence of length {len(ids)} exceeds max_len={cfg.max_len}")
    x = nm.gather_rows(emb_table, ids)
    x = nm.mul(x, nm.Tensor(np.asarray(np.sqrt(cfg.d), dtype=nm.DTYPE)))
    x = nm.add(x, nm.Tensor(sinusoid_table(len(ids), cfg.d)))
    return apply_dropout(x, cfg.dropout, rng)


def attention_sublayer(params, prefix: str, queries: Tensor, keys: Tensor,
                       cfg: EncoderConfig, attn_mask) -> Tensor:
    """Multi-head attention with learned projections and output aggregation."""
    q = nm.matmul(queries, params[f"{prefix}.wq"])
    k = nm.matmul(keys, params[f"{prefix}.wk"])
    v = nm.matmul(keys, params[f"{prefix}.wv"])
    ctx = nm.multi_head_attention(q, k, v, cfg.n_heads, attn_mask)
    return nm.matmul(ctx, params[f"{prefix}.wo"])


def self_attention(y: Tensor, key_mask: np.ndarray, params, cfg: EncoderConfig,
                   prefix: str = "enc.0.attn") -> Tensor:
    """Self-attention over y with padded key columns masked to zero weight."""
    length = y.shape[0]
    attn_mask = np.broadcast_to(np.asarray(key_mask, dtype=bool)[None, :], (length, length))
    return attention_sublayer(params, prefix, y, y, cfg, attn_mask)


def ffn(params, prefix: str, x: Tensor) -> Tensor:
    hidden = nm.relu(nm.add(nm.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return nm.add(nm.matmul(hidden, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def encoder_block(x: Tensor, key_mask: np.ndarray, params, cfg: EncoderConfig,
                  prefix: str, rng: np.random.Generator | None = None) -> Tensor:
    """Self-attention and feed-forward sublayers, each with residual + layer norm."""
    a = self_attention(x, key_mask, params, cfg, f"{prefix}.attn")
    x = nm.layer_norm(nm.add(x, apply_dropout(a, cfg.dropout, rng)),
                      params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
    f = ffn(params, f"{prefix}.ffn", x)
    x = nm.layer_norm(nm.add(x, apply_dropout(f, cfg.dropout, rng)),
                      params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
    return x


def encode_ids(ids, params, cfg: EncoderConfig, rng: np.random.Generator | None = None,
               prefix: str = "enc") -> tuple[Tensor, np.ndarray]:
    mask = np.asarray([i != PAD_ID for i in ids], dtype=bool)
    x = embed(ids, params["embed.token"], cfg, rng)
    for i in range(cfg.n_layers):
        x = encoder_block(x, mask, params, cfg, f"{prefix}.{i}", rng)
    return x, mask


@dataclass
class EncodedSource:
    states: Tensor  # [L_s, d]
    mask: np.ndarray  # [L_s] bool, False at pads
    boq: Tensor  # [1, d], row 0 of states


@dataclass
class EncodedHistory:
    states: list[Tensor]  # one [L_h, d] per history query
    masks: np.ndarray  # [N_h, L_h] bool
    padded_len: int

    def boq_rows(self) -> Tensor:
        """[N_h, d] matrix of whole-query representations."""
        return nm.concat([nm.slice_rows(s, 0, 1) for s in self.states], axis=0)


def encode_source(session: Session, params, cfg: EncoderConfig, vocab: Vocabulary,
                  rng: np.random.Generator | None = None) -> EncodedSource:
    tokens = tokenize(session.source)
    ids = pad_query(tokens, len(tokens) + 2, vocab)
    states, mask = encode_ids(ids, params, cfg, rng)
    return EncodedSource(states=states, mask=mask, boq=nm.slice_rows(states, 0, 1))


def encode_history(session: Session, params, cfg: EncoderConfig, vocab: Vocabulary,
                   rng: np.random.Generator | None = None) -> EncodedHistory:
    """Each history query encoded independently through the shared stack."""
    token_lists = [tokenize(q) for q in session.history]
    to_len = padded_length(token_lists)
    states = []
    masks = []
    for tokens in token_lists:
        ids = pad_query(tokens, to_len, vocab)
        s, m = encode_ids(ids, params, cfg, rng)
        states.append(s)
        masks.append(m)
    return EncodedHistory(states=states, masks=np.stack(masks), padded_len=to_len)
