import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cgfuse import tensor_core as tc
from cgfuse.code_graph import CodeGraph, Relation, build_code_graph
from cgfuse.frontend import SYNTAX_KINDS, CodeToken, TokenKind, parse_source
from cgfuse.gnn import (
    ARCHS, LABEL_INDEX, NODE_LABELS, NUM_RELATIONS, RELATIONS, DimensionMismatch, EmptyCorpus, GnnConfig,
    GraphExpert, gnn_forward, init_gnn_params, make_batch, node_init, pretrain_nodes, sample_mask,
)
from cgfuse.harness.programs import random_program

CONFIGS = [
    GnnConfig("RGCN", 2, 8),
    GnnConfig("SAGE", 2, 8),
    GnnConfig("SAGE", 2, 8, use_relational=True),
    GnnConfig("GIN", 2, 8),
    GnnConfig("GIN", 2, 8, epsilon=0.3),
]
IDS = ["rgcn", "sage", "sage-rel", "gin", "gin-eps"]


def random_graph(rng, n: int, p_edge: float = 0.25) -> CodeGraph:
    """Arbitrary typed graph; not necessarily a tree."""
    is_term = rng.random(n) < 0.5
    syn, term, edges = [], [], []
    for i in range(n):
        if is_term[i]:
            term.append((i, CodeToken(f"t{i}", TokenKind.IDENTIFIER, (i, i + 1))))
        else:
            syn.append((i, SYNTAX_KINDS[int(rng.integers(len(SYNTAX_KINDS)))]))
    for s in range(n):
        for d in range(n):
            if s != d:
                for r in RELATIONS:
                    if rng.random() < p_edge / 3:
                        edges.append((s, d, r))
    return CodeGraph(syn, term, edges)


def subtokens_for(g: CodeGraph, rng, vocab=20) -> list[list[int]]:
    return [list(rng.integers(5, vocab, size=int(rng.integers(1, 4)))) for _ in g.terminal_nodes]


def dense_oracle(g: CodeGraph, h0: np.ndarray, cfg: GnnConfig, params: dict, prefix="gnn.") -> np.ndarray:
    """Message passing written with dense adjacency matrices in float64."""
    n = g.num_nodes
    adj = np.zeros((NUM_RELATIONS, n, n))
    for s, d, r in g.edges:
        k = RELATIONS.index(r)
        adj[k, d, s] += 1
        adj[k + len(RELATIONS), s, d] += 1
    p = {k: v.data.astype(np.float64) for k, v in params.items()}
    act = (lambda x: 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))) \
        if cfg.activation == "gelu" else (lambda x: x)

    def mean_over(a, h):
        deg = a.sum(axis=1, keepdims=True)
        return np.divide(a @ h, deg, out=np.zeros_like(a @ h), where=deg > 0)

    h = h0.astype(np.float64)
    for layer in range(cfg.num_layers):
        b = f"{prefix}layer{layer}."
        if cfg.arch == "RGCN":
            out = h @ p[b + "self.W"] + p[b + "self.b"]
            for r in range(NUM_RELATIONS):
                out = out + mean_over(adj[r], h) @ p[f"{b}rel{r}.W"]
            h = act(out)
        elif cfg.arch == "SAGE":
            agg = sum(mean_over(adj[r], h) for r in range(NUM_RELATIONS)) if cfg.use_relational \
                else mean_over(adj.sum(axis=0), h)
            h = act(np.concatenate([h, agg], axis=1) @ p[b + "combine.W"] + p[b + "combine.b"])
        else:
            x = (1 + cfg.epsilon) * h + adj.sum(axis=0) @ h
            h = act(x @ p[b + "mlp1.W"] + p[b + "mlp1.b"]) @ p[b + "mlp2.W"] + p[b + "mlp2.b"]
    return h


def run(g, h0, cfg, params):
    batch = make_batch([g], [[[5]] * len(g.terminal_nodes)])
    return gnn_forward(batch, tc.tensor(h0), cfg, params).data


@pytest.mark.parametrize("cfg", CONFIGS, ids=IDS)
def test_matches_dense_oracle(cfg):
    rng = tc.rng_for(0, "dense", cfg.arch, cfg.use_relational, cfg.epsilon)
    for n in (1, 4, 9):
        g = random_graph(rng, n)
        params = init_gnn_params(cfg, rng)
        h0 = rng.standard_normal((n, cfg.hidden_dim)).astype(np.float32)
        assert np.allclose(run(g, h0, cfg, params), dense_oracle(g, h0, cfg, params), atol=1e-5)


def permuted(g: CodeGraph, perm: np.ndarray) -> CodeGraph:
    return CodeGraph(
        [(int(perm[i]), k) for i, k in g.syntax_nodes],
        [(int(perm[i]), t) for i, t in g.terminal_nodes],
        [(int(perm[s]), int(perm[d]), r) for s, d, r in g.edges],
    )


@pytest.mark.parametrize("cfg", CONFIGS, ids=IDS)
@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 12))
def test_permutation_equivariance(cfg, seed, n):
    rng = tc.rng_for(seed, "perm")
    g = random_graph(rng, n)
    subs = subtokens_for(g, rng)
    perm = rng.permutation(n)
    expert = GraphExpert(cfg, rng)
    emb = tc.tensor(rng.standard_normal((20, cfg.hidden_dim)))
    out = expert(make_batch([g], [subs]), emb).data
    out_p = expert(make_batch([permuted(g, perm)], [subs]), emb).data
    assert np.allclose(out_p[perm], out, atol=1e-5)


def hops_from(g: CodeGraph, v: int) -> dict[int, int]:
    nbrs: dict[int, set[int]] = {}
    for s, d, _ in g.edges:
        nbrs.setdefault(s, set()).add(d)
        nbrs.setdefault(d, set()).add(s)
    dist, frontier = {v: 0}, [v]
    while frontier:
        nxt = []
        for u in frontier:
            for w in nbrs.get(u, ()):
                if w not in dist:
                    dist[w] = dist[u] + 1
                    nxt.append(w)
        frontier = nxt
    return dist


@pytest.mark.parametrize("cfg", CONFIGS, ids=IDS)
@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 14))
def test_locality(cfg, seed, n):
    """Perturbing node v changes only nodes within num_layers hops of v."""
    rng = tc.rng_for(seed, "locality")
    g = random_graph(rng, n, p_edge=0.12)
    params = init_gnn_params(cfg, rng)
    h0 = rng.standard_normal((n, cfg.hidden_dim)).astype(np.float32)
    v = int(rng.integers(n))
    h1 = h0.copy()
    h1[v] += rng.standard_normal(cfg.hidden_dim).astype(np.float32)
    diff = np.abs(run(g, h1, cfg, params) - run(g, h0, cfg, params)).max(axis=1)
    dist = hops_from(g, v)
    for u in range(n):
        if dist.get(u, n + 1) > cfg.num_layers:
            assert diff[u] == 0.0


def test_disjoint_union_has_no_cross_talk():
    rng = tc.rng_for(0, "union")
    cfg = GnnConfig("RGCN", 2, 8)
    g1, g2 = random_graph(rng, 5), random_graph(rng, 6)
    s1, s2 = subtokens_for(g1, rng), subtokens_for(g2, rng)
    expert = GraphExpert(cfg, rng)
    emb = tc.tensor(rng.standard_normal((20, 8)))
    both = expert(make_batch([g1, g2], [s1, s2]), emb).data
    assert np.allclose(both[:5], expert(make_batch([g1], [s1]), emb).data, atol=1e-6)
    assert np.allclose(both[5:], expert(make_batch([g2], [s2]), emb).data, atol=1e-6)


@pytest.mark.parametrize("cfg", CONFIGS, ids=IDS)
def test_gradients_match_finite_differences(cfg):
    with tc.precision(np.float64):
        rng = tc.rng_for(0, "gnn-grad", cfg.arch)
        g = random_graph(rng, 6, p_edge=0.4)
        subs = subtokens_for(g, rng, vocab=10)
        expert = GraphExpert(cfg, rng)
        emb = tc.parameter(rng.standard_normal((10, cfg.hidden_dim)))
        batch = make_batch([g], [subs])
        masked = np.zeros(g.num_nodes, dtype=bool)
        masked[0] = True
        w = tc.tensor(rng.standard_normal((g.num_nodes, cfg.hidden_dim)))
        loss = lambda: tc.sum_(tc.mul(expert(batch, emb, masked), w))
        assert tc.gradcheck(loss, list(expert.params.values()) + [emb]) < 1e-3


def test_node_init_examples():
    g = build_code_graph(parse_source("x = y ;"))
    emb = tc.tensor(np.arange(40.0).reshape(10, 4))
    table = tc.tensor(np.full((len(SYNTAX_KINDS), 4), -1.0))
    mask = tc.tensor(np.full(4, 7.0))
    subs = [[5, 6], [7], [8], [9]]
    batch = make_batch([g], [subs])
    h = node_init(batch, emb, table, mask).data
    first = g.terminal_nodes[0][0]
    assert np.allclose(h[first], (emb.data[5] + emb.data[6]) / 2)
    for nid, _ in g.syntax_nodes:
        assert np.allclose(h[nid], -1.0)
    masked = np.zeros(g.num_nodes, dtype=bool)
    masked[first] = True
    assert np.allclose(node_init(batch, emb, table, mask, masked).data[first], 7.0)
    with pytest.raises(DimensionMismatch):
        node_init(batch, emb, tc.tensor(np.zeros((len(SYNTAX_KINDS), 3))))


def test_terminal_without_subtokens_uses_unk():
    g = build_code_graph(parse_source("x = y ;"))
    batch = make_batch([g], [[[], [1], [2], [4]]])
    assert batch.term_sub_ids[0] == 3


def test_labels_and_dimension_errors():
    g = build_code_graph(parse_source("return x ;"))
    batch = make_batch([g], [[[1], [2], [3]]])
    assert batch.labels[g.syntax_nodes[0][0]] == LABEL_INDEX[g.syntax_nodes[0][1]]
    assert NODE_LABELS[batch.labels[g.terminal_nodes[0][0]]] == "T-Keyword"
    with pytest.raises(DimensionMismatch):
        make_batch([g], [[[1]]])
    with pytest.raises(DimensionMismatch):
        gnn_forward(batch, tc.tensor(np.zeros((batch.num_nodes, 3))), GnnConfig(hidden_dim=4),
                    init_gnn_params(GnnConfig(hidden_dim=4), tc.rng_for(0, "x")))


def test_config_validation():
    with pytest.raises(ValueError):
        GnnConfig("GAT")
    with pytest.raises(ValueError):
        GnnConfig(num_layers=0)
    assert set(ARCHS) == {"RGCN", "SAGE", "GIN"}


def test_sample_mask_is_non_adjacent_and_per_graph():
    rng = tc.rng_for(0, "mask")
    graphs = [build_code_graph(parse_source(random_program(rng, method=True))) for _ in range(10)]
    batch = make_batch(graphs, [[[5]] * len(g.terminal_nodes) for g in graphs])
    masked = sample_mask(batch, 0.15, tc.rng_for(1, "m"))
    assert not (masked[batch.src] & masked[batch.dst]).any()
    bounds = batch.offsets + [batch.num_nodes]
    for a, b in zip(bounds, bounds[1:]):
        assert 1 <= masked[a:b].sum() <= max(1, round(0.15 * (b - a)))


def tiny_corpus(n=60):
    rng = tc.rng_for(3, "tiny-pretrain")
    graphs = [build_code_graph(parse_source(random_program(rng, method=True))) for _ in range(n)]
    subs = [[[5 + zlib.crc32(t.text.encode()) % 15] for _, t in g.terminal_nodes] for g in graphs]
    return graphs, subs


def test_pretrain_is_deterministic_and_learns():
    graphs, subs = tiny_corpus()
    emb = tc.rng_for(0, "emb").standard_normal((20, 16)).astype(np.float32)
    cfg = GnnConfig("GIN", 1, 16)
    e1, r1 = pretrain_nodes(graphs, subs, emb, cfg, epochs=3, seed=4, batch_size=8)
    e2, r2 = pretrain_nodes(graphs, subs, emb, cfg, epochs=3, seed=4, batch_size=8)
    assert r1.epochs == r2.epochs
    assert all(np.array_equal(e1.params[k].data, e2.params[k].data) for k in e1.params)
    assert r1.epochs[-1]["loss"] < r1.epochs[0]["loss"]
    assert "masked_accuracy" in r1.to_text()


def test_pretrain_errors():
    emb = np.zeros((20, 16), dtype=np.float32)
    with pytest.raises(EmptyCorpus):
        pretrain_nodes([], [], emb, GnnConfig(hidden_dim=16))
    graphs, subs = tiny_corpus(3)
    with pytest.raises(DimensionMismatch):
        pretrain_nodes(graphs, subs, emb, GnnConfig(hidden_dim=8))
    with pytest.raises(ValueError):
        pretrain_nodes(graphs, subs, emb, GnnConfig(hidden_dim=16), mask_ratio=0.0)


def test_relation_count():
    assert NUM_RELATIONS == 6 and RELATIONS == (Relation.P, Relation.CO, Relation.CA)
