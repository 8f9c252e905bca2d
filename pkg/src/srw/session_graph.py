"""Bipartite query-token session graph and its attention refinement.

Query nodes carry the begin-of-query row of each encoded history query; token
nodes carry static rows of the token embedding matrix, one node per distinct
surface token across the history. Refinement alternates: tokens update from
their queries, then queries update from the refreshed tokens, with two
independent parameter sets for the two directions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .text import Vocabulary


class EmptyGraphError(ValueError):
    """Session history contains no usable (non-special) tokens."""


@dataclass
class SessionGraph:
    query_texts: list[str]
    token_surfaces: list[str]
    adjacency: np.ndarray  # [N_q, N_t] bool; True iff token occurs in query
    reps_q: Tensor  # [N_q, d]
    reps_t: Tensor  # [N_t, d]

    @property
    def n_query(self) -> int:
        return len(self.query_texts)

    @property
    def n_token(self) -> int:
        return len(self.token_surfaces)

    @property
    def n_nodes(self) -> int:
        return self.n_query + self.n_token


@dataclass
class ContextNodes:
    """Final node representations: token rows first, then query rows."""

    reps: Tensor  # [N_g, d]
    labels: list[str]  # "T:<surface>" then "Q:<query text>"


def build_graph(history_token_lists: list[list[str]], boq_rows: Tensor,
                emb_table: Tensor, vocab: Vocabulary,
                rep_scale: float = 1.0) -> SessionGraph:
    """Construct the bipartite graph for one session.

    One token node per distinct surface token across the history queries, in
    first-occurrence order; an edge joins query i and token j iff the token
    occurs in that query. `rep_scale` lets token rows use the same embedding
    scale the encoder applies, keeping the two node types commensurate.
    """
    surfaces: list[str] = []
    seen: dict[str, int] = {}
    for tokens in history_token_lists:
        for tok in tokens:
            if tok not in seen:
                seen[tok] = len(surfaces)
                surfaces.append(tok)
    if not surfaces:
        raise EmptyGraphError("no non-special tokens in the session history")
    adjacency = np.zeros((len(history_token_lists), len(surfaces)), dtype=bool)
    for qi, tokens in enumerate(history_token_lists):
        for tok in tokens:
            adjacency[qi, seen[tok]] = True
    reps_t = nm.gather_rows(emb_table, vocab.encode(surfaces))
    if rep_scale != 1.0:
        reps_t = nm.mul(reps_t, nm.Tensor(np.asarray(rep_scale, dtype=nm.DTYPE)))
    return SessionGraph(
        query_texts=[" ".join(t) for t in history_token_lists],
        token_surfaces=surfaces,
        adjacency=adjacency,
        reps_q=boq_rows,
        reps_t=reps_t,
    )


@dataclass
class GatConfig:
    d: int = 64
    n_heads: int = 4
    leaky_slope: float = 0.2

    @property
    def d_head(self) -> int:
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} not divisible by gat heads={self.n_heads}")
        return self.d // self.n_heads


def init_gat_params(cfg: GatConfig, seed: int, prefix: str) -> dict[str, Tensor]:
    """One direction's attention weights: per-head scorer + value, shared merge."""
    params: dict[str, Tensor] = {}
    dh = cfg.d_head

    def add(name: str, arr) -> None:
        params[name] = nm.param(arr, name)

    for h in range(cfg.n_heads):
        base = f"{prefix}.h{h}"
        add(f"{base}.wq", nm.xavier_uniform(nm.generator(seed, f"{base}.wq"), cfg.d, dh))
        add(f"{base}.wk", nm.xavier_uniform(nm.generator(seed, f"{base}.wk"), cfg.d, dh))
        add(f"{base}.wv", nm.xavier_uniform(nm.generator(seed, f"{base}.wv"), cfg.d, dh))
        add(f"{base}.wa", nm.xavier_uniform(nm.generator(seed, f"{base}.wa"), 2 * dh, 1))
    add(f"{prefix}.merge",
        nm.xavier_uniform(nm.generator(seed, f"{prefix}.merge"), cfg.n_heads * dh, cfg.d))
    return params


def gat_step(src_reps: Tensor, dst_reps: Tensor, adjacency: np.ndarray,
             params, cfg: GatConfig, prefix: str) -> Tensor:
    """One directed attention update of destination nodes from their neighbors.

    Per head: scores z_ij = LeakyReLU(w_a . [W_q g_i ; W_k g_j]) over
    neighbors j of destination i, softmax-normalized; the aggregated value
    message goes through an exponential linear unit. Head outputs are
    concatenated, projected back to d, and added residually.
    """
    adjacency = np.asarray(adjacency, dtype=bool)
    if adjacency.shape != (dst_reps.shape[0], src_reps.shape[0]):
        raise nm.ShapeMismatchError(
            f"adjacency {adjacency.shape} does not match dst={dst_reps.shape[0]}, "
            f"src={src_reps.shape[0]}"
        )
    if not adjacency.any(axis=1).all():
        isolated = np.where(~adjacency.any(axis=1))[0].tolist()
        raise ValueError(f"isolated destination node(s) {isolated}")
    dh = cfg.d_head
    head_outputs = []
    for h in range(cfg.n_heads):
        base = f"{prefix}.h{h}"
        wa = params[f"{base}.wa"]
        proj_dst = nm.matmul(dst_reps, params[f"{base}.wq"])
        proj_src = nm.matmul(src_reps, params[f"{base}.wk"])
        score_dst = nm.matmul(proj_dst, nm.slice_rows(wa, 0, dh))  # [N_dst, 1]
        score_src = nm.matmul(proj_src, nm.slice_rows(wa, dh, 2 * dh))  # [N_src, 1]
        z = nm.leaky_relu(nm.add(score_dst, nm.transpose(score_src)), cfg.leaky_slope)
        alpha = nm.softmax_rows(z, mask=adjacency)
        message = nm.matmul(alpha, nm.matmul(src_reps, params[f"{base}.wv"]))
        head_outputs.append(nm.elu(message))
    merged = nm.matmul(nm.concat(head_outputs, axis=1), params[f"{prefix}.merge"])
    return nm.add(dst_reps, merged)


def refine(graph: SessionGraph, rounds: int, params, cfg: GatConfig) -> ContextNodes:
    """Alternate token<-query and query<-token updates for `rounds` rounds."""
    if rounds < 1:
        raise ValueError(f"refinement rounds must be >= 1, got {rounds}")
    reps_t, reps_q = graph.reps_t, graph.reps_q
    token_from_query = graph.adjacency.T  # [N_t, N_q]
    for _ in range(rounds):
        reps_t = gat_step(reps_q, reps_t, token_from_query, params, cfg, "gat.qt")
        reps_q = gat_step(reps_t, reps_q, graph.adjacency, params, cfg, "gat.tq")
    labels = [f"T:{s}" for s in graph.token_surfaces] + [f"Q:{q}" for q in graph.query_texts]
    return ContextNodes(reps=nm.concat([reps_t, reps_q], axis=0), labels=labels)


def to_dot(graph: SessionGraph) -> str:
    """Graphviz dump for eyeballing a session graph; not load-bearing."""
    lines = ["graph session {"]
    for i, q in enumerate(graph.query_texts):
        lines.append(f'  q{i} [shape=box, label="Q{i + 1}: {q}"];')
    for j, t in enumerate(graph.token_surfaces):
        lines.append(f'  t{j} [shape=ellipse, label="{t}"];')
    for i in range(graph.n_query):
        for j in range(graph.n_token):
            if graph.adjacency[i, j]:
                lines.append(f"  q{i} -- t{j};")
    lines.append("}")
    return "\n".join(lines) + "\n"
