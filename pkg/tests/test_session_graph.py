import numpy as np
import pytest

import srw.numerics as nm
from helpers import max_relative_error, scalar_gat_step
from srw.session_graph import (
    EmptyGraphError,
    GatConfig,
    build_graph,
    gat_step,
    init_gat_params,
    refine,
    to_dot,
)
from srw.text import Vocabulary


@pytest.fixture
def vocab():
    return Vocabulary(["t1", "t2", "t3", "t4", "t5"])


@pytest.fixture
def emb(vocab):
    table = nm.generator(5, "emb").normal(size=(len(vocab), 8)).astype(np.float32)
    return nm.param(table, "embed.token")


# The worked session: three queries over five distinct tokens.
EXAMPLE_QUERIES = [["t1", "t3"], ["t1", "t2", "t3"], ["t1", "t2", "t4", "t5"]]


def example_graph(emb, vocab, d=8):
    boq = nm.Tensor(nm.generator(6, "boq").normal(size=(3, d)).astype(np.float32))
    return build_graph(EXAMPLE_QUERIES, boq, emb, vocab)


def test_example_graph_counts(emb, vocab):
    g = example_graph(emb, vocab)
    assert g.n_query == 3
    assert g.n_token == 5
    assert int(g.adjacency.sum()) == 2 + 3 + 4


def test_neighbors_of_t3_are_q1_q2(emb, vocab):
    g = example_graph(emb, vocab)
    t3 = g.token_surfaces.index("t3")
    neighbors = set(np.where(g.adjacency[:, t3])[0].tolist())
    assert neighbors == {0, 1}


def test_single_token_single_query(emb, vocab):
    boq = nm.Tensor(np.ones((1, 8), dtype=np.float32))
    g = build_graph([["t1"]], boq, emb, vocab)
    assert g.n_query == 1 and g.n_token == 1
    assert int(g.adjacency.sum()) == 1


def test_duplicate_token_across_queries_is_one_node(emb, vocab):
    boq = nm.Tensor(np.ones((2, 8), dtype=np.float32))
    g = build_graph([["t1", "t2"], ["t2", "t3"]], boq, emb, vocab)
    assert g.n_token == 3  # t2 shared


def test_empty_history_tokens_raises(emb, vocab):
    boq = nm.Tensor(np.ones((1, 8), dtype=np.float32))
    with pytest.raises(EmptyGraphError):
        build_graph([[]], boq, emb, vocab)


def test_token_reps_are_embedding_rows(emb, vocab):
    g = example_graph(emb, vocab)
    ids = vocab.encode(g.token_surfaces)
    assert np.array_equal(g.reps_t.data, emb.data[ids])


# ---------------------------------------------------------------------------
# gat_step


@pytest.fixture
def gat_cfg():
    return GatConfig(d=8, n_heads=2)


@pytest.fixture
def gat_params(gat_cfg):
    p = {}
    p.update(init_gat_params(gat_cfg, seed=9, prefix="gat.qt"))
    p.update(init_gat_params(gat_cfg, seed=9, prefix="gat.tq"))
    return p


def head_param_dicts(params, prefix, n_heads):
    return [
        {
            "wq": params[f"{prefix}.h{h}.wq"].data.astype(np.float64),
            "wk": params[f"{prefix}.h{h}.wk"].data.astype(np.float64),
            "wv": params[f"{prefix}.h{h}.wv"].data.astype(np.float64),
            "wa": params[f"{prefix}.h{h}.wa"].data.astype(np.float64),
        }
        for h in range(n_heads)
    ]


def test_gat_single_neighbor_gets_weight_one(gat_cfg, gat_params):
    gen = np.random.default_rng(2)
    src = nm.Tensor(gen.normal(size=(1, 8)).astype(np.float32))
    dst = nm.Tensor(gen.normal(size=(1, 8)).astype(np.float32))
    adj = np.array([[True]])
    out = gat_step(src, dst, adj, gat_params, gat_cfg, "gat.qt")
    # alpha = 1 over the singleton neighborhood: h = g + merge(concat ELU(W_v g_j))
    heads = []
    for h in range(gat_cfg.n_heads):
        msg = src.data @ gat_params[f"gat.qt.h{h}.wv"].data
        heads.append(np.where(msg > 0, msg, np.expm1(msg)))
    expected = dst.data + np.concatenate(heads, axis=1) @ gat_params["gat.qt.merge"].data
    assert np.allclose(out.data, expected, atol=1e-6)


def test_gat_zero_value_weights_is_residual_identity(gat_cfg, gat_params):
    gen = np.random.default_rng(3)
    src = nm.Tensor(gen.normal(size=(4, 8)).astype(np.float32))
    dst = nm.Tensor(gen.normal(size=(3, 8)).astype(np.float32))
    adj = np.ones((3, 4), dtype=bool)
    zeroed = dict(gat_params)
    for h in range(gat_cfg.n_heads):
        name = f"gat.qt.h{h}.wv"
        zeroed[name] = nm.param(np.zeros_like(gat_params[name].data), name)
    out = gat_step(src, dst, adj, zeroed, gat_cfg, "gat.qt")
    assert np.allclose(out.data, dst.data, atol=1e-7)


def test_gat_matches_scalar_oracle(gat_cfg, gat_params):
    gen = np.random.default_rng(4)
    src = gen.normal(size=(3, 8)).astype(np.float32)
    dst = gen.normal(size=(2, 8)).astype(np.float32)
    adj = np.array([[True, False, True], [True, True, False]])
    out = gat_step(nm.Tensor(src), nm.Tensor(dst), adj, gat_params, gat_cfg, "gat.qt")
    ref = scalar_gat_step(
        src, dst, adj,
        head_param_dicts(gat_params, "gat.qt", gat_cfg.n_heads),
        gat_params["gat.qt.merge"].data.astype(np.float64),
    )
    assert max_relative_error(out.data, ref) < 1e-5


def test_gat_isolated_destination_rejected(gat_cfg, gat_params):
    src = nm.Tensor(np.ones((2, 8), dtype=np.float32))
    dst = nm.Tensor(np.ones((2, 8), dtype=np.float32))
    adj = np.array([[True, True], [False, False]])
    with pytest.raises(ValueError, match="isolated"):
        gat_step(src, dst, adj, gat_params, gat_cfg, "gat.qt")


def test_attention_mass_sums_to_one_per_destination(gat_cfg, gat_params):
    # probe the alpha rows by replacing values with one-hot columns
    gen = np.random.default_rng(8)
    src = nm.Tensor(gen.normal(size=(4, 8)).astype(np.float32))
    dst = nm.Tensor(gen.normal(size=(3, 8)).astype(np.float32))
    adj = np.array([
        [True, True, False, False],
        [False, True, True, True],
        [True, False, False, True],
    ])
    probe = dict(gat_params)
    for h in range(gat_cfg.n_heads):
        vname = f"gat.qt.h{h}.wv"
        probe[vname] = gat_params[vname]
    out = gat_step(src, dst, adj, probe, gat_cfg, "gat.qt")
    ref = scalar_gat_step(
        src.data, dst.data, adj,
        head_param_dicts(gat_params, "gat.qt", gat_cfg.n_heads),
        gat_params["gat.qt.merge"].data.astype(np.float64),
    )
    assert max_relative_error(out.data, ref) < 1e-5


# ---------------------------------------------------------------------------
# refine


def test_refine_requires_positive_rounds(emb, vocab, gat_params, gat_cfg):
    g = example_graph(emb, vocab)
    with pytest.raises(ValueError, match=">= 1"):
        refine(g, 0, gat_params, gat_cfg)


def test_refine_all_zero_inputs_stay_zero(vocab, gat_params, gat_cfg):
    zero_emb = nm.param(np.zeros((len(vocab), 8), dtype=np.float32), "embed.token")
    boq = nm.Tensor(np.zeros((3, 8), dtype=np.float32))
    g = build_graph(EXAMPLE_QUERIES, boq, zero_emb, vocab)
    nodes = refine(g, 2, gat_params, gat_cfg)
    assert np.allclose(nodes.reps.data, 0.0)


def test_refine_label_order_tokens_then_queries(emb, vocab, gat_params, gat_cfg):
    g = example_graph(emb, vocab)
    nodes = refine(g, 1, gat_params, gat_cfg)
    assert nodes.reps.shape == (8, 8)  # 5 tokens + 3 queries
    assert nodes.labels[:5] == [f"T:{s}" for s in g.token_surfaces]
    assert nodes.labels[5:] == [f"Q:{q}" for q in g.query_texts]


def test_refine_locality_one_round(emb, vocab, gat_params, gat_cfg):
    """Perturbing t5 must not change t3 after the token update, and must not
    reach queries that do not contain t5."""
    boq = nm.Tensor(nm.generator(6, "boq").normal(size=(3, 8)).astype(np.float32))
    g1 = build_graph(EXAMPLE_QUERIES, boq, emb, vocab)
    bumped = emb.data.copy()
    bumped[vocab.id_of("t5")] += 1.5
    g2 = build_graph(EXAMPLE_QUERIES, boq, nm.param(bumped, "embed.token"), vocab)

    t_from_q = g1.adjacency.T
    t1_after = gat_step(g1.reps_q, g1.reps_t, t_from_q, gat_params, gat_cfg, "gat.qt")
    t2_after = gat_step(g2.reps_q, g2.reps_t, t_from_q, gat_params, gat_cfg, "gat.qt")
    i3 = g1.token_surfaces.index("t3")
    i5 = g1.token_surfaces.index("t5")
    assert np.array_equal(t1_after.data[i3], t2_after.data[i3])
    assert not np.array_equal(t1_after.data[i5], t2_after.data[i5])

    q1_after = gat_step(t1_after, g1.reps_q, g1.adjacency, gat_params, gat_cfg, "gat.tq")
    q2_after = gat_step(t2_after, g2.reps_q, g2.adjacency, gat_params, gat_cfg, "gat.tq")
    # only Q3 contains t5
    assert np.array_equal(q1_after.data[0], q2_after.data[0])
    assert np.array_equal(q1_after.data[1], q2_after.data[1])
    assert not np.array_equal(q1_after.data[2], q2_after.data[2])


def test_refine_permutation_equivariance(vocab, gat_params, gat_cfg):
    gen = np.random.default_rng(13)
    emb_table = nm.param(gen.normal(size=(len(vocab), 8)).astype(np.float32), "e")
    boq = nm.Tensor(gen.normal(size=(3, 8)).astype(np.float32))
    g = build_graph(EXAMPLE_QUERIES, boq, emb_table, vocab)
    nodes = refine(g, 2, gat_params, gat_cfg)

    perm_queries = [2, 0, 1]
    permuted_lists = [EXAMPLE_QUERIES[i] for i in perm_queries]
    boq_perm = nm.Tensor(boq.data[perm_queries])
    g2 = build_graph(permuted_lists, boq_perm, emb_table, vocab)
    nodes2 = refine(g2, 2, gat_params, gat_cfg)

    # query rows permute with the relabeling; token rows follow their surfaces
    for new_q, old_q in enumerate(perm_queries):
        assert np.allclose(
            nodes2.reps.data[g2.n_token + new_q],
            nodes.reps.data[g.n_token + old_q],
            atol=1e-6,
        )
    for surface in g.token_surfaces:
        i_old = g.token_surfaces.index(surface)
        i_new = g2.token_surfaces.index(surface)
        assert np.allclose(nodes2.reps.data[i_new], nodes.reps.data[i_old], atol=1e-6)


def test_two_gat_instances_have_disjoint_storage(emb, vocab, gat_cfg):
    params = {}
    params.update(init_gat_params(gat_cfg, seed=9, prefix="gat.qt"))
    params.update(init_gat_params(gat_cfg, seed=9, prefix="gat.tq"))
    gen = np.random.default_rng(1)
    src = nm.Tensor(gen.normal(size=(3, 8)).astype(np.float32))
    dst = nm.Tensor(gen.normal(size=(2, 8)).astype(np.float32))
    adj = np.ones((2, 3), dtype=bool)
    before = gat_step(src, dst, adj, params, gat_cfg, "gat.tq").data.copy()
    for name, p in params.items():
        if name.startswith("gat.qt."):
            p.data += 10.0  # vandalize the other instance
    after = gat_step(src, dst, adj, params, gat_cfg, "gat.tq").data
    assert np.array_equal(before, after)


def test_dot_dump_mentions_nodes_and_edges(emb, vocab):
    g = example_graph(emb, vocab)
    dot = to_dot(g)
    assert "q0 -- t0" in dot
    assert 'label="t5"' in dot
