"""Reasoning-graph construction: four node kinds, iterative protein selection, typed edges."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import Sample, TokenizedDoc, sample_catalog, tokenize
from .kb import EntityId, EntityKind, KnowledgeBase, drug, protein


class NodeKind(str, Enum):
    SUBJECT = "subject"
    REASONING = "reasoning"
    MENTION = "mention"
    CANDIDATE = "candidate"


class EdgeKind(str, Enum):
    SUB2REA = "sub2rea"
    REA2REA = "rea2rea"
    REA2MEN = "rea2men"
    MEN2CAN = "men2can"


DIRECTED = {EdgeKind.SUB2REA: True, EdgeKind.REA2REA: False, EdgeKind.REA2MEN: True, EdgeKind.MEN2CAN: False}
ENDPOINTS = {
    EdgeKind.SUB2REA: (NodeKind.SUBJECT, NodeKind.REASONING),
    EdgeKind.REA2REA: (NodeKind.REASONING, NodeKind.REASONING),
    EdgeKind.REA2MEN: (NodeKind.REASONING, NodeKind.MENTION),
    EdgeKind.MEN2CAN: (NodeKind.MENTION, NodeKind.CANDIDATE),
}
KIND_ORDER = (NodeKind.SUBJECT, NodeKind.REASONING, NodeKind.MENTION, NodeKind.CANDIDATE)
DEFAULT_CAPS = {NodeKind.SUBJECT: 200, NodeKind.REASONING: 800, NodeKind.MENTION: 100, NodeKind.CANDIDATE: 9}


@dataclass(frozen=True)
class GraphNode:
    kind: NodeKind
    entity: EntityId
    doc_index: int | None = None
    span: tuple[int, int] | None = None
    ordinal: int = 1

    def position(self) -> tuple:
        return (self.doc_index if self.doc_index is not None else 1 << 30, self.span or (0, 0))


@dataclass(frozen=True)
class TypedEdge:
    kind: EdgeKind
    src: int
    dst: int
    directed: bool


@dataclass
class ReasoningGraph:
    nodes: list[GraphNode] = field(default_factory=list)
    edges: list[TypedEdge] = field(default_factory=list)
    candidates: list[EntityId] = field(default_factory=list)

    def of_kind(self, kind: NodeKind) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.kind is kind]

    def count(self, kind: NodeKind) -> int:
        return sum(1 for n in self.nodes if n.kind is kind)

    def validate(self) -> None:
        for e in self.edges:
            a, b = ENDPOINTS[e.kind]
            if self.nodes[e.src].kind is not a or self.nodes[e.dst].kind is not b:
                raise ValueError(f"edge {e} violates its endpoint kinds")
            if e.directed != DIRECTED[e.kind]:
                raise ValueError(f"edge {e} has the wrong directedness")
        cands = set(self.candidates)
        for n in self.nodes:
            if n.kind is NodeKind.MENTION and n.entity not in cands:
                raise ValueError(f"mention {n.entity} is not a candidate")
            want = EntityKind.PROTEIN if n.kind is NodeKind.REASONING else EntityKind.DRUG
            if n.entity.kind is not want:
                raise ValueError(f"{n.kind.value} node holds a {n.entity.kind.value}")
        keys = [(n.entity, n.doc_index, n.span) for n in self.nodes]
        if len(keys) != len(set(keys)):
            raise ValueError("duplicate (entity, doc, span) nodes")


@dataclass
class ExtractedNodes:
    subjects: list[GraphNode]
    mentions: list[GraphNode]
    proteins: list[GraphNode]  # P_ex: every protein span, as reasoning-node drafts
    candidates: list[GraphNode]


def _ordinals(nodes: list[GraphNode]) -> list[GraphNode]:
    counter: dict[EntityId, int] = {}
    out = []
    for n in nodes:
        counter[n.entity] = counter.get(n.entity, 0) + 1
        out.append(replace(n, ordinal=counter[n.entity]))
    return out


def extract_nodes(sample: Sample, docs: Sequence[TokenizedDoc]) -> ExtractedNodes:
    """Subject spans, candidate-drug spans, protein spans, and one slot per candidate."""
    cands = set(sample.candidates)
    subjects, mentions, proteins = [], [], []
    for di, doc in enumerate(docs):
        for start, end, ent in doc.entity_spans:
            if ent.kind is EntityKind.PROTEIN:
                proteins.append(GraphNode(NodeKind.REASONING, ent, di, (start, end)))
            elif ent == sample.subject:
                subjects.append(GraphNode(NodeKind.SUBJECT, ent, di, (start, end)))
            elif ent in cands:
                mentions.append(GraphNode(NodeKind.MENTION, ent, di, (start, end)))
    candidates = [GraphNode(NodeKind.CANDIDATE, c) for c in sample.candidates]
    return ExtractedNodes(_ordinals(subjects), _ordinals(mentions), _ordinals(proteins), candidates)


def select_protein_entities(subject: EntityId, extracted: Iterable[EntityId], kb: KnowledgeBase) -> list[EntityId]:
    """Iterative protein selection, returning proteins in the order they were selected.

    Starts from the subject's targets found in text and repeatedly adds in-text
    pathway interactors of already selected proteins.
    """
    p_ex = set(extracted)
    anchors = sorted(kb.targets_of(subject) & p_ex, reverse=True)
    selected: list[EntityId] = []
    seen: set[EntityId] = set()
    while anchors:
        p = anchors.pop()
        if p in seen:
            continue
        seen.add(p)
        selected.append(p)
        anchors.extend(sorted(kb.interactors_of(p) & p_ex - seen, reverse=True))
    return selected


def select_proteins(subject: EntityId, p_ex: Sequence[GraphNode], kb: KnowledgeBase) -> list[GraphNode]:
    """Every textual occurrence of a selected protein, in document order."""
    chosen = set(select_protein_entities(subject, (n.entity for n in p_ex), kb))
    return _ordinals([n for n in p_ex if n.entity in chosen])


def connect_edges(nodes: Sequence[GraphNode], subject: EntityId, kb: KnowledgeBase) -> list[TypedEdge]:
    subj = [i for i, n in enumerate(nodes) if n.kind is NodeKind.SUBJECT]
    rea = [i for i, n in enumerate(nodes) if n.kind is NodeKind.REASONING]
    men = [i for i, n in enumerate(nodes) if n.kind is NodeKind.MENTION]
    can = {n.entity: i for i, n in enumerate(nodes) if n.kind is NodeKind.CANDIDATE}
    edges: list[TypedEdge] = []
    subject_targets = kb.targets_of(subject)
    for s in subj:
        for r in rea:
            if nodes[r].entity in subject_targets:
                edges.append(TypedEdge(EdgeKind.SUB2REA, s, r, True))
    for a_pos, a in enumerate(rea):
        pa = nodes[a].entity
        for b in rea[a_pos + 1:]:
            pb = nodes[b].entity
            if kb.has_pathway(pa, pb):
                edges.append(TypedEdge(EdgeKind.REA2REA, a, b, False))
            elif kb.has_pathway(pb, pa):
                # keep the pathway's stored direction on the edge
                edges.append(TypedEdge(EdgeKind.REA2REA, b, a, False))
    for m in men:
        targets = kb.targets_of(nodes[m].entity)
        for r in rea:
            if nodes[r].entity in targets:
                edges.append(TypedEdge(EdgeKind.REA2MEN, r, m, True))
    for m in men:
        c = can.get(nodes[m].entity)
        if c is not None:
            edges.append(TypedEdge(EdgeKind.MEN2CAN, m, c, False))
    return edges


def _reindex(graph_nodes: Sequence[GraphNode], edges: Sequence[TypedEdge], keep: Sequence[int],
             candidates: Sequence[EntityId]) -> ReasoningGraph:
    remap = {old: new for new, old in enumerate(keep)}
    nodes = [graph_nodes[i] for i in keep]
    kept_edges = [replace(e, src=remap[e.src], dst=remap[e.dst]) for e in edges if e.src in remap and e.dst in remap]
    return ReasoningGraph(nodes, kept_edges, list(candidates))


def truncate(graph: ReasoningGraph, caps: Mapping[NodeKind, int] | None = None,
             answer: EntityId | None = None) -> ReasoningGraph:
    """Keep the first ``cap`` nodes of each kind in document order.

    Pass ``answer`` only when training: a gold candidate beyond the cap replaces
    the last kept candidate.  Mentions of dropped candidates go too.
    """
    caps = {**DEFAULT_CAPS, **(caps or {})}
    if any(v < 1 for v in caps.values()):
        raise ValueError("truncation caps must be positive")
    cands = list(graph.candidates)
    cap_c = caps[NodeKind.CANDIDATE]
    kept_cands = cands[:cap_c]
    if answer is not None and answer in cands and answer not in kept_cands:
        kept_cands = kept_cands[:-1] + [answer]
    kept_set = set(kept_cands)

    keep: list[int] = []
    for kind in KIND_ORDER:
        idx = sorted(graph.of_kind(kind), key=lambda i: graph.nodes[i].position())
        if kind is NodeKind.CANDIDATE:
            by_entity = {graph.nodes[i].entity: i for i in idx}
            keep.extend(by_entity[c] for c in kept_cands if c in by_entity)
            continue
        idx = idx[: caps[kind]]
        if kind is NodeKind.MENTION:
            idx = [i for i in idx if graph.nodes[i].entity in kept_set]
        keep.extend(idx)
    return _reindex(graph.nodes, graph.edges, keep, kept_cands)


def assemble(subject: EntityId, nodes: ExtractedNodes, reasoning: Sequence[GraphNode], kb: KnowledgeBase,
             candidates: Sequence[EntityId], drop: Iterable[NodeKind] = ()) -> ReasoningGraph:
    drop = set(drop)
    groups = {
        NodeKind.SUBJECT: nodes.subjects,
        NodeKind.REASONING: list(reasoning),
        NodeKind.MENTION: nodes.mentions,
        NodeKind.CANDIDATE: nodes.candidates,
    }
    ordered = [n for kind in KIND_ORDER if kind not in drop for n in groups[kind]]
    return ReasoningGraph(ordered, connect_edges(ordered, subject, kb), list(candidates))


def tokenize_supports(sample: Sample, kb: KnowledgeBase | None) -> list[TokenizedDoc]:
    catalog = sample_catalog(sample, kb)
    return [tokenize(doc, catalog) for doc in sample.supports]


def build_graph(sample: Sample, kb: KnowledgeBase, caps: Mapping[NodeKind, int] | None = None,
                training: bool = False, drop: Iterable[NodeKind] = (),
                docs: Sequence[TokenizedDoc] | None = None) -> ReasoningGraph:
    """Tokenize, extract, select, connect and truncate one sample's graph."""
    docs = tokenize_supports(sample, kb) if docs is None else docs
    extracted = extract_nodes(sample, docs)
    reasoning = select_proteins(sample.subject, extracted.proteins, kb)
    graph = assemble(sample.subject, extracted, reasoning, kb, sample.candidates, drop)
    return truncate(graph, caps, answer=sample.answer if training else None)


# -- export --------------------------------------------------------------------

COLORS = {
    NodeKind.SUBJECT: "#2ca02c",    # green
    NodeKind.REASONING: "#8a2be2",  # violet
    NodeKind.MENTION: "#8b4513",    # brown
    NodeKind.CANDIDATE: "#d62728",  # red
}


def graph_to_json(graph: ReasoningGraph, edge_weights: Mapping[int, float] | None = None,
                  node_scores: Mapping[int, float] | None = None) -> dict:
    nodes = []
    for i, n in enumerate(graph.nodes):
        row = {"id": i, "kind": n.kind.value, "entity": n.entity.accession, "doc": n.doc_index,
               "span": list(n.span) if n.span else None, "ordinal": n.ordinal}
        if node_scores and i in node_scores:
            row["score"] = node_scores[i]
        nodes.append(row)
    edges = []
    for k, e in enumerate(graph.edges):
        row = {"kind": e.kind.value, "src": e.src, "dst": e.dst, "directed": e.directed}
        if edge_weights and k in edge_weights:
            row["weight"] = edge_weights[k]
        edges.append(row)
    return {"nodes": nodes, "edges": edges, "candidates": [c.accession for c in graph.candidates]}


def graph_from_json(obj: Mapping) -> ReasoningGraph:
    nodes = []
    for row in obj["nodes"]:
        kind = NodeKind(row["kind"])
        ent = protein(row["entity"]) if kind is NodeKind.REASONING else drug(row["entity"])
        span = tuple(row["span"]) if row.get("span") is not None else None
        nodes.append(GraphNode(kind, ent, row.get("doc"), span, row.get("ordinal", 1)))
    edges = [TypedEdge(EdgeKind(r["kind"]), r["src"], r["dst"], r["directed"]) for r in obj["edges"]]
    return ReasoningGraph(nodes, edges, [drug(c) for c in obj["candidates"]])


def _dot_quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def graph_to_dot(graph: ReasoningGraph, edge_weights: Mapping[int, float] | None = None,
                 node_scores: Mapping[int, float] | None = None, name: str = "reasoning") -> str:
    """Graphviz source; pen width tracks attention, fill alpha tracks output scores."""
    lines = [f"digraph {name} {{", "  node [style=filled, fontcolor=white];"]
    for i, n in enumerate(graph.nodes):
        color = COLORS[n.kind]
        if node_scores and i in node_scores and n.kind in (NodeKind.MENTION, NodeKind.CANDIDATE):
            alpha = int(round(255 * min(max(node_scores[i], 0.0), 1.0)))
            color = f"{color}{alpha:02x}"
        label = n.entity.accession if n.kind is NodeKind.CANDIDATE else f"{n.entity.accession}@{n.ordinal}"
        lines.append(f"  n{i} [label={_dot_quote(label)}, kind={n.kind.value}, fillcolor={_dot_quote(color)}];")
    for k, e in enumerate(graph.edges):
        attrs = [f"label={e.kind.value}"]
        if not e.directed:
            attrs.append("dir=none")
        if edge_weights and k in edge_weights:
            w = edge_weights[k]
            attrs.append(f"weight={_dot_quote(f'{w:.6g}')}")
            attrs.append(f"penwidth={_dot_quote(f'{0.5 + 4.5 * w:.4g}')}")
        lines.append(f"  n{e.src} -> n{e.dst} [{', '.join(attrs)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_graph(graph: ReasoningGraph, path: str | Path, fmt: str = "json",
                 edge_weights: Mapping[int, float] | None = None,
                 node_scores: Mapping[int, float] | None = None) -> None:
    if fmt == "dot":
        text = graph_to_dot(graph, edge_weights, node_scores)
    elif fmt == "json":
        text = json.dumps(graph_to_json(graph, edge_weights, node_scores), indent=1) + "\n"
    else:
        raise ValueError(f"unknown graph format {fmt!r} (expected dot or json)")
    Path(path).write_text(text, encoding="utf-8")


def import_graph(path: str | Path) -> ReasoningGraph:
    return graph_from_json(json.loads(Path(path).read_text(encoding="utf-8")))
