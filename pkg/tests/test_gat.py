import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from medkgqa import tensor as T
from medkgqa.gat import (
    SLOTS,
    CandidateScorer,
    GatConfig,
    GeneralGate,
    GraphReasoner,
    QuestionGate,
    RelationalAttention,
    attention_coefficients,
    message_edges,
)
from medkgqa.graph import EdgeKind, GraphNode, NodeKind, ReasoningGraph, TypedEdge
from medkgqa.kb import drug, protein
from medkgqa.trainer import predict
from oracles import reader_gradient_errors

S, A, B = drug("S"), drug("A"), drug("B")
P1, P2 = protein("P1"), protein("P2")


def six_node_graph():
    nodes = [
        GraphNode(NodeKind.SUBJECT, S, 0, (0, 1)),
        GraphNode(NodeKind.REASONING, P1, 0, (2, 3)),
        GraphNode(NodeKind.REASONING, P2, 1, (0, 1)),
        GraphNode(NodeKind.MENTION, A, 1, (3, 4)),
        GraphNode(NodeKind.CANDIDATE, A),
        GraphNode(NodeKind.CANDIDATE, B),
    ]
    edges = [
        TypedEdge(EdgeKind.SUB2REA, 0, 1, True),
        TypedEdge(EdgeKind.REA2REA, 1, 2, False),
        TypedEdge(EdgeKind.REA2MEN, 2, 3, True),
        TypedEdge(EdgeKind.MEN2CAN, 3, 4, False),
    ]
    return ReasoningGraph(nodes, edges, [A, B])


def random_graph(rng, n=6, m=9):
    kinds = list(NodeKind)
    nodes = [GraphNode(kinds[i % 4], protein(f"P{i}") if kinds[i % 4] is NodeKind.REASONING else drug(f"D{i}"),
                       None if kinds[i % 4] is NodeKind.CANDIDATE else 0, None if kinds[i % 4] is NodeKind.CANDIDATE else (i, i + 1))
             for i in range(n)]
    edges = []
    for _ in range(m):
        kind = list(EdgeKind)[rng.integers(4)]
        a, b = rng.choice(n, 2, replace=False)
        edges.append(TypedEdge(kind, int(a), int(b), kind in (EdgeKind.SUB2REA, EdgeKind.REA2MEN)))
    return ReasoningGraph(nodes, edges, [])


def leaky(x, s=0.2):
    return np.where(x > 0, x, s * x)


# -- attention -----------------------------------------------------------------------


def test_single_neighbor_attention_is_one():
    rng = np.random.default_rng(0)
    Wu = T.tensor(rng.normal(size=(2, 3)))
    a = T.tensor(rng.normal(size=(3, 1)))
    alpha = attention_coefficients(Wu, np.array([1]), np.array([0]), a, a, 2)
    assert alpha.data[0, 0] == 1.0


def test_equal_scores_split_evenly():
    Wu = T.tensor(np.array([[1.0, 0], [2.0, 2.0], [2.0, 2.0]]))
    a = T.tensor(np.array([[0.3], [-0.1]]))
    alpha = attention_coefficients(Wu, np.array([1, 2]), np.array([0, 0]), a, a, 3)
    assert np.allclose(alpha.data[:, 0], [0.5, 0.5], atol=1e-15)


def test_star_attention_matches_handrolled_softmax():
    rng = np.random.default_rng(1)
    Wu = rng.normal(size=(5, 4))
    a_dst, a_src = rng.normal(size=(4, 1)), rng.normal(size=(4, 1))
    src, dst = np.array([1, 2, 3, 4]), np.zeros(4, dtype=int)
    got = attention_coefficients(T.tensor(Wu), src, dst, T.tensor(a_dst), T.tensor(a_src), 5).data[:, 0]
    e = np.array([leaky(float(Wu[0] @ a_dst[:, 0] + Wu[j] @ a_src[:, 0])) for j in src])
    want = np.exp(e) / np.exp(e).sum()
    assert np.allclose(got, want, atol=1e-10)


def test_message_edges_expand_undirected_kinds():
    msgs = {m.slot: m for m in message_edges(six_node_graph())}
    assert set(msgs) == set(SLOTS)
    assert (msgs["rea2rea_fwd"].src.tolist(), msgs["rea2rea_fwd"].dst.tolist()) == ([1], [2])
    assert (msgs["rea2rea_bwd"].src.tolist(), msgs["rea2rea_bwd"].dst.tolist()) == ([2], [1])
    assert msgs["sub2rea"].dst.tolist() == [1]
    merged = message_edges(six_node_graph(), merge=True)
    assert len(merged) == 1 and merged[0].src.size == 6


# -- relational aggregation -------------------------------------------------------------


def aggregate_oracle(layer, U, graph):
    """Adjacency loops over receivers, slots and heads."""
    n, d = U.shape
    msgs = message_edges(graph, layer.config.merge_edge_types)
    heads = []
    for k in range(layer.config.heads):
        g = np.zeros((n, d))
        for m in msgs:
            W = layer.W[(m.slot, k)].data
            a_dst, a_src = (v.data[:, 0] for v in layer.a[(m.slot, k)])
            for i in range(n):
                nbrs = [int(j) for j, t in zip(m.src, m.dst) if t == i]
                if not nbrs:
                    continue
                e = np.array([leaky(U[i] @ W @ a_dst + U[j] @ W @ a_src) for j in nbrs])
                alpha = np.exp(e - e.max()) / np.exp(e - e.max()).sum()
                for al, j in zip(alpha, nbrs):
                    g[i] += al / len(nbrs) * (U[j] @ W)
        heads.append(np.where(g > 0, g, np.expm1(np.minimum(g, 0))))
    return np.mean(heads, axis=0)


def test_aggregate_matches_loop_oracle():
    rng = np.random.default_rng(2)
    for trial in range(5):
        graph = random_graph(rng)
        layer = RelationalAttention(5, GatConfig(heads=3), rng)
        U = rng.normal(size=(6, 5))
        g, _ = layer(T.tensor(U), message_edges(graph))
        assert np.allclose(g.data, aggregate_oracle(layer, U, graph), atol=1e-9)


def test_isolated_node_gets_zero():
    rng = np.random.default_rng(3)
    layer = RelationalAttention(4, GatConfig(), rng)
    g, weights = layer(T.tensor(rng.normal(size=(1, 4))), message_edges(ReasoningGraph([], [], [])))
    assert np.array_equal(g.data, np.zeros((1, 4))) and weights == {}


def test_pass_through_configuration():
    rng = np.random.default_rng(4)
    layer = RelationalAttention(3, GatConfig(heads=1, activation="identity"), rng)
    for key in layer.W:
        layer.W[key].assign(np.eye(3))
    graph = ReasoningGraph([], [TypedEdge(EdgeKind.SUB2REA, 1, 0, True)], [])
    U = rng.normal(size=(2, 3))
    g, _ = layer(T.tensor(U), message_edges(graph))
    assert np.allclose(g.data[0], U[1], atol=1e-15)


def test_attention_normalised_per_receiver_slot_head():
    rng = np.random.default_rng(5)
    graph = random_graph(rng, n=8, m=20)
    layer = RelationalAttention(4, GatConfig(heads=2), rng)
    U = T.tensor(rng.normal(size=(8, 4)))
    for m in message_edges(graph):
        if m.src.size == 0:
            continue
        for k in range(2):
            Wu = T.matmul(U, layer.W[(m.slot, k)])
            alpha = attention_coefficients(Wu, m.src, m.dst, *layer.a[(m.slot, k)], 8).data[:, 0]
            sums = np.bincount(m.dst, weights=alpha, minlength=8)
            assert np.allclose(sums[np.unique(m.dst)], 1.0, atol=1e-12)


def test_removing_a_kind_equals_zeroing_its_slots():
    rng = np.random.default_rng(6)
    graph = random_graph(rng, n=7, m=14)
    layer = RelationalAttention(4, GatConfig(heads=2), rng)
    U = T.tensor(rng.normal(size=(7, 4)))
    kept = ReasoningGraph(graph.nodes, [e for e in graph.edges if e.kind is not EdgeKind.REA2REA], [])
    without, _ = layer(U, message_edges(kept))
    for (slot, k), W in layer.W.items():
        if slot.startswith("rea2rea"):
            W.assign(np.zeros_like(W.data))
    zeroed, _ = layer(U, message_edges(graph))
    assert np.allclose(without.data, zeroed.data, atol=1e-12)


# -- gates ------------------------------------------------------------------------------


def set_bias(linear, value):
    linear.bias.assign(np.full_like(linear.bias.data, value))
    linear.weight.assign(np.zeros_like(linear.weight.data))


def test_question_gate_limits():
    rng = np.random.default_rng(7)
    gate = QuestionGate(4, rng)
    U, Q = T.tensor(rng.normal(size=(3, 4))), T.tensor(rng.normal(size=(2, 4)))
    set_bias(gate.mix, -40.0)
    assert np.allclose(gate(U, Q).data, U.data, atol=1e-12)
    set_bias(gate.mix, 40.0)
    assert np.allclose(gate(U, Q).data, np.tanh(gate.attend(U, Q).data), atol=1e-12)


def test_question_attention_is_sigmoid_then_softmax():
    rng = np.random.default_rng(8)
    gate = QuestionGate(3, rng)
    U, Q = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
    got = gate.attend(T.tensor(U), T.tensor(Q)).data
    W, b = gate.score.weight.data[:, 0], gate.score.bias.data[0, 0]
    for i in range(2):
        w = np.array([1 / (1 + np.exp(-(np.concatenate([U[i], Q[j]]) @ W + b))) for j in range(4)])
        alpha = np.exp(w) / np.exp(w).sum()
        assert np.allclose(got[i], alpha @ Q, atol=1e-12)


def between(x, a, b, tol=1e-12):
    return np.all((x >= np.minimum(a, b) - tol) & (x <= np.maximum(a, b) + tol))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_gates_are_convex(seed):
    rng = np.random.default_rng(seed)
    qg, gg = QuestionGate(5, rng), GeneralGate(5, rng)
    U = T.tensor(rng.normal(size=(4, 5)) * 3)
    Q = T.tensor(rng.normal(size=(3, 5)))
    g = T.tensor(rng.normal(size=(4, 5)))
    Ut = qg(U, Q)
    assert between(Ut.data, U.data, np.tanh(qg.attend(U, Q).data))
    assert between(gg(Ut, g, U).data, U.data, np.tanh(Ut.data))


def test_general_gate_limits():
    rng = np.random.default_rng(9)
    gate = GeneralGate(3, rng)
    U, Ut, g = (T.tensor(rng.normal(size=(2, 3))) for _ in range(3))
    set_bias(gate.mix, -40.0)
    assert np.allclose(gate(Ut, g, U).data, U.data, atol=1e-12)
    set_bias(gate.mix, 40.0)
    assert np.allclose(gate(Ut, g, U).data, np.tanh(Ut.data), atol=1e-12)


# -- stacked reasoner --------------------------------------------------------------------


def reasoner(dim=6, word=3, layers=2, seed=10):
    rng = np.random.default_rng(seed)
    return GraphReasoner(dim, word, 4, GatConfig(layers=layers), rng), rng


def test_zero_layers_rejected():
    r, rng = reasoner()
    with pytest.raises(ValueError):
        r(T.tensor(np.zeros((6, 6))), T.tensor(np.zeros((2, 3))), six_node_graph(), layers=0)
    with pytest.raises(ValueError):
        GatConfig(layers=0)


def test_one_layer_is_manual_composition():
    r, rng = reasoner()
    U, E_q = T.tensor(rng.normal(size=(6, 6))), T.tensor(rng.normal(size=(2, 3)))
    graph = six_node_graph()
    out, _ = r(U, E_q, graph, layers=1)
    Q = r.encode_question(E_q)
    g, _ = r.relational(U, message_edges(graph))
    manual = r.ggate(r.qgate(U, Q), g, U)
    assert np.array_equal(out.data, manual.data)


def test_permutation_equivariance():
    r, rng = reasoner(layers=3)
    graph = random_graph(rng, n=9, m=16)
    U, E_q = rng.normal(size=(9, 6)), T.tensor(rng.normal(size=(3, 3)))
    perm = rng.permutation(9)
    inv = np.argsort(perm)  # new id of old node i is inv[i]
    permuted = ReasoningGraph([graph.nodes[p] for p in perm],
                              [TypedEdge(e.kind, int(inv[e.src]), int(inv[e.dst]), e.directed) for e in graph.edges], [])
    out, w = r(T.tensor(U), E_q, graph)
    out_p, w_p = r(T.tensor(U[perm]), E_q, permuted)
    assert np.max(np.abs(out_p.data - out.data[perm])) <= 1e-9
    assert all(abs(w[k] - w_p[k]) <= 1e-9 for k in w)


def test_edge_weights_cover_every_edge():
    r, rng = reasoner()
    graph = six_node_graph()
    _, weights = r(T.tensor(rng.normal(size=(6, 6))), T.tensor(rng.normal(size=(2, 3))), graph)
    assert set(weights) == set(range(len(graph.edges)))
    assert all(0.0 <= v <= 1.0 for v in weights.values())


# -- scorer -----------------------------------------------------------------------------


def scorer_graph(n_mentions):
    nodes = [GraphNode(NodeKind.MENTION, A, 0, (i, i + 1)) for i in range(n_mentions)]
    nodes += [GraphNode(NodeKind.CANDIDATE, A), GraphNode(NodeKind.CANDIDATE, B)]
    return ReasoningGraph(nodes, [], [A, B])


def test_scores_with_and_without_mentions():
    rng = np.random.default_rng(11)
    sc = CandidateScorer(4, 5, rng)
    for n_m in (0, 1, 3):
        g = scorer_graph(n_m)
        U = rng.normal(size=(len(g.nodes), 4))
        got = sc(T.tensor(U), g).data[0]
        f_can = lambda x: sc.f_can(T.tensor(x[None])).data[0, 0]
        f_men = lambda x: sc.f_men(T.tensor(x[None])).data[0, 0]
        best = -np.inf
        for i in range(n_m):
            best = max(best, f_men(U[i]))
        want_a = f_can(U[n_m]) + (best if n_m else 0.0)
        assert got[0] == pytest.approx(want_a, abs=1e-12)
        assert got[1] == pytest.approx(f_can(U[n_m + 1]), abs=1e-12)


def test_scorer_without_candidate_nodes():
    rng = np.random.default_rng(12)
    sc = CandidateScorer(4, 5, rng)
    g = ReasoningGraph([GraphNode(NodeKind.MENTION, A, 0, (0, 1))], [], [A, B])
    U = rng.normal(size=(1, 4))
    s = sc(T.tensor(U), g).data[0]
    assert s[1] == 0.0
    assert s[0] == pytest.approx(sc.f_men(T.tensor(U)).data[0, 0])
    with pytest.raises(ValueError):
        sc(T.tensor(U), ReasoningGraph())


def test_argmax_ties_and_scale():
    assert predict(np.array([0.2, 0.7, 0.7])) == 1
    s = np.array([0.1, -0.3, 0.25, 0.2])
    assert all(predict(c * s) == 2 for c in (0.5, 1.0, 7.0))


# -- end to end gradient ------------------------------------------------------------------


def test_reader_plus_two_hops_gradient():
    errors = reader_gradient_errors(layers=2)
    assert max(errors.values()) < 1e-3, errors
