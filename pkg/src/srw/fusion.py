"""Aggregation of contextual node representations into the session matrix.

Attention scores each context node against the whole-query vector of the
source; the weighted value sum is a single d-vector added to every row of the
encoded source. With the value projection zeroed this is the identity, which
is also what the context-off ablation produces by skipping the module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor


def init_aggregation_params(d: int, seed: int, prefix: str = "agg") -> dict[str, Tensor]:
    return {
        f"{prefix}.wk": nm.param(nm.xavier_uniform(nm.generator(seed, f"{prefix}.wk"), d, d), f"{prefix}.wk"),
        f"{prefix}.wv": nm.param(nm.xavier_uniform(nm.generator(seed, f"{prefix}.wv"), d, d), f"{prefix}.wv"),
    }


@dataclass
class SessionRepresentation:
    states: Tensor  # [L_s, d]; source states plus the broadcast context vector
    context_vector: Tensor  # [1, d]
    alpha: np.ndarray  # [N_g] attention weights, kept for inspection


def aggregate(source_states: Tensor, source_boq: Tensor, context_reps: Tensor,
              params, prefix: str = "agg") -> SessionRepresentation:
    """Session representation: source states + attention-pooled context vector.

    Scores are (W_k h_i) . h_boq over all context nodes jointly; the pooled
    value vector is added row-wise.
    """
    if context_reps.shape[0] == 0:
        raise ValueError("aggregation requires at least one context node")
    keys = nm.matmul(context_reps, params[f"{prefix}.wk"])  # [N_g, d]
    scores = nm.matmul(keys, nm.transpose(source_boq))  # [N_g, 1]
    alpha = nm.softmax_rows(nm.transpose(scores))  # [1, N_g]
    values = nm.matmul(context_reps, params[f"{prefix}.wv"])  # [N_g, d]
    pooled = nm.matmul(alpha, values)  # [1, d]
    return SessionRepresentation(
        states=nm.add(source_states, pooled),
        context_vector=pooled,
        alpha=alpha.data[0].copy(),
    )
