"""Independent scalar/loop reference implementations used as test oracles.

Everything here is deliberately written with plain Python loops over floats,
no shared code with the library's vectorized paths.
"""

from __future__ import annotations

import math

import numpy as np

import srw.numerics as nm


def finite_difference_grad(forward, tensor: nm.Tensor, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of forward() w.r.t. every element of tensor."""
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = forward()
        flat[i] = orig - h
        down = forward()
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2.0 * h)
    return grad.reshape(tensor.data.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = 1e-6) -> float:
    """Worst-case relative error, with an absolute floor for near-zero pairs."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def scalar_softmax(row):
    """Exp-normalize one row of floats, the long way."""
    m = max(row)
    exps = [math.exp(v - m) for v in row]
    total = sum(exps)
    return [e / total for e in exps]


def scalar_adam_step(param, grad, m, v, t, lr, beta1=0.9, beta2=0.98, eps=1e-9):
    """One Adam update on plain floats; returns (param, m, v)."""
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    return param - lr * m_hat / (math.sqrt(v_hat) + eps), m, v


def scalar_self_attention(y, wq, wk, wv, wo, n_heads, key_mask=None):
    """Loop-based multi-head self-attention matching the encoder sublayer."""
    y = np.asarray(y, dtype=np.float64)
    length, d = y.shape
    dk = wq.shape[1] // n_heads
    dv = wv.shape[1] // n_heads
    q_all = y @ wq
    k_all = y @ wk
    v_all = y @ wv
    heads = []
    for h in range(n_heads):
        q = q_all[:, h * dk : (h + 1) * dk]
        k = k_all[:, h * dk : (h + 1) * dk]
        v = v_all[:, h * dv : (h + 1) * dv]
        out = np.zeros((length, dv))
        for i in range(length):
            scores = []
            for j in range(length):
                if key_mask is not None and not key_mask[j]:
                    scores.append(None)
                else:
                    scores.append(float(q[i] @ k[j]) / math.sqrt(dk))
            alive = [s for s in scores if s is not None]
            weights = scalar_softmax(alive)
            wi = iter(weights)
            for j, s in enumerate(scores):
                if s is not None:
                    out[i] += next(wi) * v[j]
        heads.append(out)
    return np.concatenate(heads, axis=1) @ wo


def scalar_gat_step(src, dst, adjacency, head_params, merge, leaky_slope=0.2):
    """Loop-based graph attention update of destination nodes.

    head_params is a list of dicts with keys wq, wk, wv, wa (wa of length
    2 * d_head). Implements: score via LeakyReLU of the concatenated
    projections, neighborhood softmax, ELU of the value sum per head,
    concatenation across heads, merge projection, residual add.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n_dst = dst.shape[0]
    outs = np.zeros((n_dst, merge.shape[1]))
    for i in range(n_dst):
        neighbors = [j for j in range(src.shape[0]) if adjacency[i][j]]
        concat = []
        for hp in head_params:
            dh = hp["wq"].shape[1]
            gi = dst[i] @ hp["wq"]
            scores = []
            for j in neighbors:
                gj = src[j] @ hp["wk"]
                pair = np.concatenate([gi, gj])
                z = float(pair @ hp["wa"].reshape(-1))
                scores.append(z if z > 0 else leaky_slope * z)
            alpha = scalar_softmax(scores)
            msg = np.zeros(dh)
            for a, j in zip(alpha, neighbors):
                msg += a * (src[j] @ hp["wv"])
            concat.extend(x if x > 0 else math.exp(x) - 1.0 for x in msg)
        outs[i] = dst[i] + np.asarray(concat) @ merge
    return outs


def scalar_aggregate(source_states, boq, context, wk, wv):
    """Loop-based aggregation: scores, softmax, pooled value, row-wise add."""
    source_states = np.asarray(source_states, dtype=np.float64)
    boq = np.asarray(boq, dtype=np.float64).reshape(-1)
    context = np.asarray(context, dtype=np.float64)
    # z_i = (W_k h_i) . h_s, node by node (row-vector convention throughout)
    scores = [float((h @ wk) @ boq) for h in context]
    alpha = scalar_softmax(scores)
    v = np.zeros(source_states.shape[1])
    for a, h in zip(alpha, context):
        v += a * (h @ wv)
    return source_states + v[None, :], np.asarray(alpha), v


def enumerate_candidates(score_fn, vocab_ids, max_len):
    """Exhaustively score every finished sequence up to max_len tokens.

    score_fn(token_ids) must return the total log-likelihood of the sequence
    including its end token. Returns (tokens, normalized score) sorted best
    first with deterministic tie-breaks.
    """
    results = []

    def walk(prefix):
        if len(prefix) >= 1:
            total = score_fn(prefix)
            results.append((tuple(prefix), total / (len(prefix) + 1)))
        if len(prefix) + 1 < max_len:
            for tok in vocab_ids:
                walk(prefix + [tok])

    walk([])
    # include the empty rewrite (just <eos>)
    results.append(((), score_fn([]) / 1))
    results.sort(key=lambda r: (-r[1], r[0]))
    return results
