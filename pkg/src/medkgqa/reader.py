"""Question, document and candidate encoding, co-attention and knowledge fusion.

Produces one fused vector per reasoning-graph node:
``[co-attention context | co-attended summary | TransE | TransH]``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .corpus import Sample, TokenizedDoc, Vocabulary, question_tokens
from .graph import NodeKind, ReasoningGraph, build_graph, tokenize_supports
from .kb import EntityId, KnowledgeBase
from .kg_embed import EmbeddingTable, knowledge_vector
from .layers import BiLSTM
from .tensor import Parameter, Tensor

log = logging.getLogger(__name__)


@dataclass
class ReaderConfig:
    hidden: int = 64
    word_dim: int = 64
    knowledge_dim: int = 32
    use_knowledge: bool = True
    finetune_knowledge: bool = False
    fallback_seed: int = 0

    def __post_init__(self):
        if self.hidden < 2 or self.hidden % 2:
            raise ValueError("hidden size must be an even number >= 2")
        if self.word_dim < 1 or self.knowledge_dim < 1:
            raise ValueError("word_dim and knowledge_dim must be positive")

    @property
    def node_dim(self) -> int:
        return 2 * self.hidden + (2 * self.knowledge_dim if self.use_knowledge else 0)


@dataclass
class PreparedSample:
    """Everything a forward pass needs, computed once per sample."""

    sample: Sample
    graph: ReasoningGraph
    docs: list[TokenizedDoc]
    doc_ids: list[np.ndarray]
    question_ids: np.ndarray
    candidate_ids: np.ndarray  # aligned with graph.candidates

    @property
    def gold(self) -> int | None:
        """Index of the answer in the truncated candidate list, if it survived."""
        a = self.sample.answer
        return self.graph.candidates.index(a) if a is not None and a in self.graph.candidates else None


def prepare(sample: Sample, kb: KnowledgeBase, vocab: Vocabulary, training: bool = False,
            caps: Mapping | None = None, drop: Iterable[NodeKind] = ()) -> PreparedSample:
    q = question_tokens(sample)
    if not q:
        raise ValueError(f"sample {sample.id}: empty question")
    docs = tokenize_supports(sample, kb)
    graph = build_graph(sample, kb, caps=caps, training=training, drop=drop, docs=docs)
    for i, d in enumerate(docs):
        if not d.tokens:
            log.warning("sample %s: support document %d is empty and is skipped", sample.id, i)
    return PreparedSample(
        sample=sample,
        graph=graph,
        docs=docs,
        doc_ids=[vocab.encode(d.tokens) for d in docs],
        question_ids=vocab.encode(q),
        candidate_ids=vocab.encode([c.accession for c in graph.candidates]),
    )


def span_pool_matrix(spans: Sequence[tuple[int, int, int]], doc_offsets: Mapping[int, int], total: int) -> np.ndarray:
    """Rows average the token states of (doc, start, end) spans in the stacked document states."""
    P = np.zeros((len(spans), total))
    for row, (doc, start, end) in enumerate(spans):
        if end <= start:
            raise IndexError(f"empty span {(start, end)} in document {doc}")
        base = doc_offsets[doc]
        P[row, base + start: base + end] = 1.0 / (end - start)
    return P


def coattend(H_node: Tensor, H_q: Tensor, f: BiLSTM) -> tuple[Tensor, Tensor]:
    """Co-attention of single-row node states against the question, batched over nodes.

    ``H_node`` is (n, h), one row per node; ``H_q`` is (l_q, h).  Returns the
    attention-aware context C and the co-attended summary D, both (n, h).
    """
    n, h = H_node.shape
    l_q, h_q = H_q.shape
    if h != h_q:
        raise T.ShapeError(f"node states have width {h} but question states {h_q}")
    A = T.matmul(H_node, T.transpose(H_q))  # (n, l_q)
    attn = T.softmax(A, axis=1)
    C = T.matmul(attn, H_q)
    # question-side attention normalises over the node's own (single) row
    w_q = T.softmax(T.reshape(A, (n * l_q, 1)), axis=1)
    node_rows = np.repeat(np.arange(n), l_q)
    ones = T.tensor(np.ones((1, h)))
    C_q = T.mul(T.matmul(w_q, ones), T.take(H_node, node_rows))  # n stacked (l_q, h) blocks
    mixed = T.segment_sum(T.mul(T.matmul(T.reshape(attn, (n * l_q, 1)), ones), C_q), node_rows, n)
    D = T.concat(f([T.take(mixed, np.array([i])) for i in range(n)]), axis=0)
    return C, D


def fuse(C: Tensor, D: Tensor, k_transe: Tensor | None = None, k_transh: Tensor | None = None) -> Tensor:
    parts = [C, D]
    if (k_transe is None) != (k_transh is None):
        raise T.ShapeError("pass both knowledge blocks or neither")
    if k_transe is not None:
        if k_transe.shape != k_transh.shape or k_transe.shape[0] != C.shape[0]:
            raise T.ShapeError(f"knowledge blocks {k_transe.shape}/{k_transh.shape} do not match {C.shape[0]} nodes")
        parts += [k_transe, k_transh]
    if C.shape != D.shape:
        raise T.ShapeError(f"context {C.shape} and summary {D.shape} differ")
    return T.concat(parts, axis=1)


class KnowledgeLookup:
    """Per-entity TransE/TransH rows; unknown entities get fixed-seed random vectors."""

    def __init__(self, transe: EmbeddingTable | None, transh: EmbeddingTable | None, dim: int,
                 seed: int = 0, trainable: bool = False):
        self.transe, self.transh, self.dim, self.seed = transe, transh, dim, seed
        self.trainable = trainable
        self.index: dict[EntityId, int] = {}
        self.matrix_e: Tensor | None = None
        self.matrix_h: Tensor | None = None

    def register(self, entities: Iterable[EntityId]) -> None:
        """Add rows for unseen entities; existing (possibly learned) rows are kept."""
        fresh = [e for e in sorted(set(entities)) if e not in self.index]
        if not fresh and self.matrix_e is not None:
            return
        for e in fresh:
            self.index[e] = len(self.index)
        new_e = np.array([knowledge_vector(self.transe, e, self.dim, self.seed) for e in fresh]).reshape(-1, self.dim)
        new_h = np.array([knowledge_vector(self.transh, e, self.dim, self.seed + 1) for e in fresh]).reshape(-1, self.dim)
        if self.matrix_e is not None:
            new_e = np.concatenate([self.matrix_e.data, new_e])
            new_h = np.concatenate([self.matrix_h.data, new_h])
        if self.trainable:
            self.matrix_e = Parameter(new_e, name="knowledge.transe")
            self.matrix_h = Parameter(new_h, name="knowledge.transh")
        else:
            self.matrix_e, self.matrix_h = T.tensor(new_e), T.tensor(new_h)

    def __call__(self, entities: Sequence[EntityId]) -> tuple[Tensor, Tensor]:
        missing = [e for e in entities if e not in self.index]
        if missing:
            if self.trainable:
                raise KeyError(f"entity {missing[0]} was not registered before training")
            self.register(missing)
        rows = np.array([self.index[e] for e in entities], dtype=np.int64)
        return T.take(self.matrix_e, rows), T.take(self.matrix_h, rows)

    def parameters(self) -> list[Parameter]:
        return [self.matrix_e, self.matrix_h] if self.trainable and self.matrix_e is not None else []


class Reader:
    """Word embeddings, three encoders (documents, question, candidates) and the co-attention encoder."""

    def __init__(self, config: ReaderConfig, embeddings: np.ndarray, rng: np.random.Generator,
                 knowledge: KnowledgeLookup | None = None):
        if embeddings.shape[1] != config.word_dim:
            raise T.ShapeError(f"embedding matrix width {embeddings.shape[1]} != word_dim {config.word_dim}")
        if config.use_knowledge and knowledge is None:
            knowledge = KnowledgeLookup(None, None, config.knowledge_dim, config.fallback_seed,
                                        config.finetune_knowledge)
        self.config = config
        self.words = Parameter(embeddings.copy(), name="words")
        h = config.hidden
        self.doc_encoder = BiLSTM(config.word_dim, h, rng, name="enc.doc")
        self.question_encoder = BiLSTM(config.word_dim, h, rng, name="enc.question")
        self.candidate_encoder = BiLSTM(config.word_dim, h, rng, name="enc.candidate")
        self.coattn_encoder = BiLSTM(h, h, rng, name="enc.coattn")
        self.knowledge = knowledge if config.use_knowledge else None

    def parameters(self) -> list[Parameter]:
        ps = [self.words]
        for enc in (self.doc_encoder, self.question_encoder, self.candidate_encoder, self.coattn_encoder):
            ps += enc.parameters()
        if self.knowledge is not None:
            ps += self.knowledge.parameters()
        return ps

    def embed(self, ids: np.ndarray) -> Tensor:
        return T.take(self.words, np.asarray(ids, dtype=np.int64))

    def encode(self, prep: PreparedSample) -> tuple[Tensor, dict[int, Tensor], Tensor]:
        """Question states (l_q, h), per-document states (len_i, h), candidate states (n_c, h)."""
        H_q = self.question_encoder([self.embed(prep.question_ids)])[0]
        kept = [i for i, ids in enumerate(prep.doc_ids) if len(ids)]
        H_s = dict(zip(kept, self.doc_encoder([self.embed(prep.doc_ids[i]) for i in kept]))) if kept else {}
        cands = [self.embed(prep.candidate_ids[j:j + 1]) for j in range(len(prep.candidate_ids))]
        H_c = T.concat(self.candidate_encoder(cands), axis=0) if cands else None
        return H_q, H_s, H_c

    def node_states(self, graph: ReasoningGraph, H_s: Mapping[int, Tensor], H_c: Tensor | None) -> Tensor:
        """One (1, h) row per graph node: span mean for text nodes, encoder state for candidates."""
        text = [i for i, n in enumerate(graph.nodes) if n.kind is not NodeKind.CANDIDATE]
        cand = [i for i, n in enumerate(graph.nodes) if n.kind is NodeKind.CANDIDATE]
        blocks, order = [], []
        if text:
            docs = sorted(H_s)
            offsets, total = {}, 0
            for d in docs:
                offsets[d] = total
                total += H_s[d].shape[0]
            spans = []
            for i in text:
                n = graph.nodes[i]
                if n.doc_index not in H_s or n.span[1] > H_s[n.doc_index].shape[0]:
                    raise IndexError(f"node {i} span {n.span} outside document {n.doc_index}")
                spans.append((n.doc_index, *n.span))
            P = T.tensor(span_pool_matrix(spans, offsets, total))
            blocks.append(T.matmul(P, T.concat([H_s[d] for d in docs], axis=0)))
            order += text
        if cand:
            col = {c: j for j, c in enumerate(graph.candidates)}
            blocks.append(T.take(H_c, np.array([col[graph.nodes[i].entity] for i in cand])))
            order += cand
        stacked = T.concat(blocks, axis=0)
        inverse = np.empty(len(order), dtype=np.int64)
        inverse[np.array(order)] = np.arange(len(order))
        return T.take(stacked, inverse)

    def __call__(self, prep: PreparedSample) -> tuple[Tensor, Tensor]:
        """Fused node representations (n, node_dim) and question states (l_q, h)."""
        H_q, H_s, H_c = self.encode(prep)
        if not prep.graph.nodes:
            raise ValueError(f"sample {prep.sample.id}: reasoning graph has no nodes")
        H_node = self.node_states(prep.graph, H_s, H_c)
        C, D = coattend(H_node, H_q, self.coattn_encoder)
        if self.knowledge is None:
            return fuse(C, D), H_q
        ke, kh = self.knowledge([n.entity for n in prep.graph.nodes])
        return fuse(C, D, ke, kh), H_q
