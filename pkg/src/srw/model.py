"""Whole-model assembly: parameters, the session forward pass, and rewriting.

Context modes select the Table-style ablation arms: "off" is the plain
encoder-decoder, "aggregation" pools whole-query history representations,
"aggregation+graph" pools graph-refined token and query nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import numerics as nm
from .decoder import RewriteCandidate, beam_search
from .encoder import EncoderConfig, encode_history, encode_source, init_block_params
from .fusion import aggregate, init_aggregation_params
from .numerics import Tensor
from .session_graph import GatConfig, build_graph, refine
from .sessions import Session
from .text import Vocabulary, tokenize

CONTEXT_MODES = ("off", "aggregation", "aggregation+graph")
_MODE_ALIASES = {"off": "off", "agg": "aggregation", "aggregation": "aggregation",
                 "agg+graph": "aggregation+graph", "aggregation+graph": "aggregation+graph"}


def normalize_context_mode(mode: str) -> str:
    try:
        return _MODE_ALIASES[mode]
    except KeyError:
        raise ValueError(f"unknown context mode {mode!r}; expected off|agg|agg+graph") from None


@dataclass
class ModelConfig:
    d: int = 64
    n_heads: int = 4
    ffn_dim: int = 256
    n_layers: int = 2
    max_len: int = 32
    dropout: float = 0.1
    gat_heads: int = 4
    gat_rounds: int = 2
    context_mode: str = "aggregation+graph"

    def __post_init__(self):
        self.context_mode = normalize_context_mode(self.context_mode)
        if self.gat_rounds < 1:
            raise ValueError("gat_rounds must be >= 1")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(d=self.d, n_heads=self.n_heads, ffn_dim=self.ffn_dim,
                             n_layers=self.n_layers, max_len=self.max_len,
                             dropout=self.dropout)

    def gat_config(self) -> GatConfig:
        return GatConfig(d=self.d, n_heads=self.gat_heads)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for key, value in asdict(self).items():
                fh.write(f"{key}={value}\n")

    @classmethod
    def load(cls, path) -> "ModelConfig":
        fields = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, value = line.partition("=")
                fields[key.strip()] = value.strip()
        kwargs = {}
        for key, value in fields.items():
            if key in ("d", "n_heads", "ffn_dim", "n_layers", "max_len",
                       "gat_heads", "gat_rounds"):
                kwargs[key] = int(value)
            elif key == "dropout":
                kwargs[key] = float(value)
            elif key == "context_mode":
                kwargs[key] = value
        return cls(**kwargs)


def init_params(cfg: ModelConfig, vocab_size: int, seed: int) -> dict[str, Tensor]:
    """All learnable weights for the chosen context mode, addressable by name.

    The embedding table is shared by the encoder, the decoder input, and the
    graph's token nodes. The output projection is kept separate and starts
    small so an untrained model is near-uniform over the vocabulary.
    """
    params: dict[str, Tensor] = {}
    params["embed.token"] = nm.param(
        nm.generator(seed, "embed.token").normal(0.0, cfg.d**-0.5, size=(vocab_size, cfg.d)).astype(nm.DTYPE),
        "embed.token",
    )
    params["out.proj"] = nm.param(
        nm.generator(seed, "out.proj").normal(0.0, 0.25 * cfg.d**-0.5, size=(cfg.d, vocab_size)).astype(nm.DTYPE),
        "out.proj",
    )
    enc_cfg = cfg.encoder_config()
    params.update(init_block_params(enc_cfg, seed, "enc"))
    params.update(init_block_params(enc_cfg, seed, "dec", cross_attention=True))
    if cfg.context_mode != "off":
        params.update(init_aggregation_params(cfg.d, seed))
    if cfg.context_mode == "aggregation+graph":
        from .session_graph import init_gat_params

        gat_cfg = cfg.gat_config()
        params.update(init_gat_params(gat_cfg, seed, "gat.qt"))
        params.update(init_gat_params(gat_cfg, seed, "gat.tq"))
    return params


@dataclass
class SessionContext:
    states: Tensor  # [L_s, d] decoder memory
    mask: np.ndarray  # [L_s] source pad mask
    alpha: np.ndarray | None = None  # aggregation weights per context node
    labels: list[str] | None = None  # node label per alpha entry


def forward_session(params, cfg: ModelConfig, vocab: Vocabulary, session: Session,
                    rng: np.random.Generator | None = None) -> SessionContext:
    """Encode one session into the decoder memory for its context mode."""
    enc_cfg = cfg.encoder_config()
    src = encode_source(session, params, enc_cfg, vocab, rng)
    if cfg.context_mode == "off":
        return SessionContext(states=src.states, mask=src.mask)
    history = encode_history(session, params, enc_cfg, vocab, rng)
    boq_rows = history.boq_rows()
    if cfg.context_mode == "aggregation":
        context_reps = boq_rows
        labels = [f"Q:{' '.join(tokenize(q))}" for q in session.history]
    else:
        token_lists = [tokenize(q) for q in session.history]
        graph = build_graph(token_lists, boq_rows, params["embed.token"], vocab,
                            rep_scale=float(np.sqrt(cfg.d)))
        nodes = refine(graph, cfg.gat_rounds, params, cfg.gat_config())
        context_reps = nodes.reps
        labels = nodes.labels
    rep = aggregate(src.states, src.boq, context_reps, params)
    return SessionContext(states=rep.states, mask=src.mask, alpha=rep.alpha, labels=labels)


class Rewriter:
    """A trained model bundled with its vocabulary, ready to generate rewrites."""

    def __init__(self, params: dict[str, Tensor], cfg: ModelConfig, vocab: Vocabulary):
        embed_rows = params["embed.token"].shape[0]
        if embed_rows != len(vocab):
            raise ValueError(
                f"vocab/checkpoint mismatch: embedding has {embed_rows} rows, "
                f"vocabulary has {len(vocab)} entries"
            )
        self.params = params
        self.cfg = cfg
        self.vocab = vocab

    def rewrite(self, session: Session, n_best: int, beam_size: int | None = None,
                max_len: int | None = None) -> list[RewriteCandidate]:
        ctx = forward_session(self.params, self.cfg, self.vocab, session)
        return beam_search(
            ctx.states, ctx.mask, self.params, self.cfg.encoder_config(), self.vocab,
            beam_size=beam_size or n_best, n_best=n_best,
            max_len=max_len or self.cfg.max_len,
        )

    def explain(self, session: Session) -> dict[str, float]:
        """Aggregation weight per context node label; empty for context-off."""
        ctx = forward_session(self.params, self.cfg, self.vocab, session)
        if ctx.alpha is None:
            return {}
        return {label: float(a) for label, a in zip(ctx.labels, ctx.alpha)}
