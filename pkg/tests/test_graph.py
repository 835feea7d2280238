import json

import numpy as np
import pydot
import pytest
from hypothesis import given, settings, strategies as st

from medkgqa.corpus import Sample, SynthSpec, synth_generate, tokenize
from medkgqa.graph import (
    DEFAULT_CAPS,
    EdgeKind,
    GraphNode,
    NodeKind,
    ReasoningGraph,
    TypedEdge,
    build_graph,
    connect_edges,
    export_graph,
    extract_nodes,
    graph_from_json,
    graph_to_dot,
    graph_to_json,
    import_graph,
    select_protein_entities,
    select_proteins,
    truncate,
)
from medkgqa.kb import KnowledgeBase, PathwayPair, Triplet, drug, protein
from oracles import bfs_oracle, edge_keys, rule_oracle

S, A, B = drug("S"), drug("A"), drug("B")
P1, P2, P3 = protein("P1"), protein("P2"), protein("P3")


def chain_kb():
    return KnowledgeBase(
        triplets={Triplet(P1, "inhibitor", S), Triplet(P2, "agonist", A)},
        pathways={PathwayPair(P1, P2)},
    )


def chain_sample(doc="S targets P1 ; P1 activates P2 ; P2 binds A"):
    return Sample("q0", S, (A, B), (doc,), answer=A)


def test_extract_nodes_example():
    sample = chain_sample("S targets P1 ; P1 activates A")
    docs = [tokenize(sample.supports[0], {"S": S, "A": A, "B": B, "P1": P1})]
    ex = extract_nodes(sample, docs)
    assert len(ex.subjects) == 1
    assert [m.entity for m in ex.mentions] == [A]
    assert [p.entity for p in ex.proteins] == [P1, P1]
    assert [p.ordinal for p in ex.proteins] == [1, 2]
    assert [c.entity for c in ex.candidates] == [A, B]
    assert all(c.doc_index is None and c.span is None for c in ex.candidates)


def test_protein_in_three_docs_gives_three_spans():
    sample = Sample("q", S, (A, B), ("P1 x", "y P1", "P1"), answer=A)
    docs = [tokenize(d, {"P1": P1}) for d in sample.supports]
    ex = extract_nodes(sample, docs)
    assert [(p.doc_index, p.ordinal) for p in ex.proteins] == [(0, 1), (1, 2), (2, 3)]


def test_select_two_step_chain():
    assert set(select_protein_entities(S, {P1, P2}, chain_kb())) == {P1, P2}


def test_select_intersection_gate():
    assert select_protein_entities(S, {P2}, chain_kb()) == []


def test_select_keeps_every_occurrence():
    nodes = [GraphNode(NodeKind.REASONING, p, 0, (i, i + 1)) for i, p in enumerate([P1, P3, P2, P1])]
    picked = select_proteins(S, nodes, chain_kb())
    assert [n.entity for n in picked] == [P1, P2, P1]
    assert [n.ordinal for n in picked] == [1, 1, 2]


def test_selection_matches_bfs_on_500_random_kbs():
    rng = np.random.default_rng(7)
    for _ in range(500):
        n_p = int(rng.integers(2, 31))
        prots = [protein(f"P{i}") for i in range(n_p)]
        drugs_ = [drug(f"D{i}") for i in range(4)]
        trip = {(prots[rng.integers(n_p)], drugs_[rng.integers(4)]) for _ in range(rng.integers(0, 12))}
        pairs = {(prots[a], prots[b]) for a, b in rng.integers(0, n_p, size=(rng.integers(0, 3 * n_p), 2)) if a != b}
        p_ex = {p for p in prots if rng.random() < 0.6}
        kb = KnowledgeBase(triplets={Triplet(p, "inhibitor", d) for p, d in trip},
                           pathways={PathwayPair(a, b) for a, b in pairs})
        got = select_protein_entities(drugs_[0], p_ex, kb)
        assert len(got) == len(set(got))
        assert set(got) == bfs_oracle(drugs_[0], p_ex, trip, pairs)


def test_chain_edges():
    g = build_graph(chain_sample(), chain_kb())
    named = {(e.kind, g.nodes[e.src].entity, g.nodes[e.dst].entity) for e in g.edges}
    assert named == {
        (EdgeKind.SUB2REA, S, P1),
        (EdgeKind.REA2REA, P1, P2),
        (EdgeKind.REA2MEN, P2, A),
        (EdgeKind.MEN2CAN, A, A),
    }
    g.validate()


def test_mention_without_targets_only_links_to_candidate():
    g = build_graph(chain_sample("S targets P1 ; B here"), chain_kb())
    b_mentions = [i for i in g.of_kind(NodeKind.MENTION) if g.nodes[i].entity == B]
    assert len(b_mentions) == 1
    touching = [e for e in g.edges if b_mentions[0] in (e.src, e.dst)]
    assert [e.kind for e in touching] == [EdgeKind.MEN2CAN]


def test_rea2rea_records_stored_direction():
    kb = KnowledgeBase(triplets={Triplet(P2, "inhibitor", S)}, pathways={PathwayPair(P1, P2)})
    g = build_graph(chain_sample("S then P2 then P1"), kb)
    (e,) = [e for e in g.edges if e.kind is EdgeKind.REA2REA]
    assert (g.nodes[e.src].entity, g.nodes[e.dst].entity) == (P1, P2)
    assert not e.directed


def test_edges_match_exhaustive_rule_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        prots = [protein(f"P{i}") for i in range(8)]
        drugs_ = [drug(f"D{i}") for i in range(5)]
        trip = {(prots[rng.integers(8)], drugs_[rng.integers(5)]) for _ in range(10)}
        pairs = {(prots[a], prots[b]) for a, b in rng.integers(0, 8, size=(8, 2)) if a != b}
        kb = KnowledgeBase(triplets={Triplet(p, "x", d) for p, d in trip},
                           pathways={PathwayPair(a, b) for a, b in pairs})
        nodes = [GraphNode(NodeKind.SUBJECT, drugs_[0], 0, (k, k + 1)) for k in range(rng.integers(0, 3))]
        nodes += [GraphNode(NodeKind.REASONING, prots[rng.integers(8)], 1, (k, k + 1)) for k in range(rng.integers(0, 10))]
        nodes += [GraphNode(NodeKind.MENTION, drugs_[1 + rng.integers(4)], 2, (k, k + 1)) for k in range(rng.integers(0, 6))]
        nodes += [GraphNode(NodeKind.CANDIDATE, d) for d in drugs_[1:]]
        got = edge_keys(connect_edges(nodes, drugs_[0], kb))
        assert got == rule_oracle(nodes, drugs_[0], trip, pairs)


def many_reasoning_graph(n):
    nodes = [GraphNode(NodeKind.REASONING, protein(f"P{i}"), i // 50, (i % 50, i % 50 + 1)) for i in range(n)]
    edges = [TypedEdge(EdgeKind.REA2REA, i, i + 1, False) for i in range(n - 1)]
    return ReasoningGraph(nodes, edges, [])


def test_truncate_caps_reasoning_at_800():
    g = truncate(many_reasoning_graph(900))
    assert g.count(NodeKind.REASONING) == 800
    assert len(g.edges) == 799
    assert {n.entity for n in g.nodes} == {protein(f"P{i}") for i in range(800)}


def test_truncate_under_caps_is_identity():
    g = build_graph(chain_sample(), chain_kb())
    assert truncate(g) == g


def ten_candidate_graph():
    cands = tuple(drug(f"C{i}") for i in range(10))
    doc = " ".join(c.accession for c in cands)
    return Sample("q", S, cands, (doc,), answer=cands[9])


def test_swap_in_answer_during_training_only():
    sample = ten_candidate_graph()
    kb = KnowledgeBase()
    train = build_graph(sample, kb, training=True)
    assert train.candidates == list(sample.candidates[:8]) + [sample.candidates[9]]
    assert sample.candidates[8] not in {n.entity for n in train.nodes}
    assert train.count(NodeKind.CANDIDATE) == 9
    evaluation = build_graph(sample, kb)
    assert evaluation.candidates == list(sample.candidates[:9])
    for g in (train, evaluation):
        g.validate()


@st.composite
def graphs_and_caps(draw):
    sample = Sample(
        "q", S, tuple(drug(f"C{i}") for i in range(draw(st.integers(2, 14)))),
        tuple(" ".join(draw(st.lists(st.sampled_from(["S", "P1", "P2", "P3", "C0", "C1", "C5", "C9", "C12"]),
                                     max_size=12))) for _ in range(draw(st.integers(1, 4)))),
        answer=drug("C0"),
    )
    kb = KnowledgeBase(
        triplets={Triplet(P1, "x", S), Triplet(P3, "x", drug("C5")), Triplet(P2, "x", drug("C1"))},
        pathways={PathwayPair(P1, P2), PathwayPair(P3, P2)},
    )
    small = {k: draw(st.integers(1, 6)) for k in NodeKind}
    bigger = {k: v + draw(st.integers(0, 5)) for k, v in small.items()}
    return build_graph(sample, kb, caps={k: 100 for k in NodeKind}), small, bigger


def node_keys(g):
    return {(n.kind, n.entity, n.doc_index, n.span) for n in g.nodes}


@settings(max_examples=100, deadline=None)
@given(graphs_and_caps())
def test_truncation_idempotent_and_monotone(args):
    g, small, bigger = args
    once = truncate(g, small)
    assert truncate(once, small) == once
    assert node_keys(once) <= node_keys(truncate(g, bigger))
    for k in NodeKind:
        assert once.count(k) <= small[k]
    once.validate()


def test_truncate_rejects_nonpositive_caps():
    with pytest.raises(ValueError):
        truncate(ReasoningGraph(), {NodeKind.MENTION: 0})


def test_synthetic_graphs_valid_and_deterministic():
    spec = SynthSpec(n_samples=20, seed=4)
    kb, samples, _ = synth_generate(spec)
    for s in samples:
        g = build_graph(s, kb)
        g.validate()
        assert g == build_graph(s, kb)
        assert g.count(NodeKind.CANDIDATE) == min(len(s.candidates), DEFAULT_CAPS[NodeKind.CANDIDATE])


def test_dropped_kinds_are_absent():
    kb = chain_kb()
    g = build_graph(chain_sample(), kb, drop={NodeKind.REASONING})
    assert g.count(NodeKind.REASONING) == 0
    assert all(e.kind is EdgeKind.MEN2CAN for e in g.edges)


def test_json_roundtrip(tmp_path):
    g = build_graph(chain_sample(), chain_kb())
    export_graph(g, tmp_path / "g.json", "json", edge_weights={0: 0.5})
    assert import_graph(tmp_path / "g.json") == g
    obj = json.loads((tmp_path / "g.json").read_text())
    assert set(obj) == {"nodes", "edges", "candidates"}
    assert set(obj["nodes"][0]) == {"id", "kind", "entity", "doc", "span", "ordinal"}
    assert obj["edges"][0]["weight"] == 0.5
    assert graph_from_json(graph_to_json(g)) == g


def test_empty_graph_dot_parses():
    (parsed,) = pydot.graph_from_dot_data(graph_to_dot(ReasoningGraph()))
    assert parsed.get_nodes() == [] or all(n.get_name() in ("node", "edge") for n in parsed.get_nodes())
    assert parsed.get_edges() == []


def test_chain_dot_colors_and_weights():
    chain = ReasoningGraph(
        [GraphNode(NodeKind.SUBJECT, S, 0, (0, 1)), GraphNode(NodeKind.REASONING, P1, 0, (2, 3)),
         GraphNode(NodeKind.MENTION, A, 0, (4, 5)), GraphNode(NodeKind.CANDIDATE, A)],
        [TypedEdge(EdgeKind.SUB2REA, 0, 1, True), TypedEdge(EdgeKind.REA2MEN, 1, 2, True),
         TypedEdge(EdgeKind.MEN2CAN, 2, 3, False)],
        [A],
    )
    text = graph_to_dot(chain, edge_weights={0: 1.0, 1: 0.0}, node_scores={3: 0.5})
    (parsed,) = pydot.graph_from_dot_data(text)
    nodes = {n.get_name(): n for n in parsed.get_nodes() if n.get_name() not in ("node", "edge")}
    assert len(nodes) == 4 and len(parsed.get_edges()) == 3
    fill = {k: v.get("fillcolor").strip('"') for k, v in nodes.items()}
    assert fill["n0"] == "#2ca02c" and fill["n1"] == "#8a2be2" and fill["n2"] == "#8b4513"
    assert fill["n3"] == "#d6272880"
    widths = [float(e.get("penwidth").strip('"')) for e in parsed.get_edges()[:2]]
    assert widths[0] > widths[1]
    assert parsed.get_edges()[2].get("dir") == "none"


def test_unknown_export_format(tmp_path):
    with pytest.raises(ValueError):
        export_graph(ReasoningGraph(), tmp_path / "g.x", "svg")
