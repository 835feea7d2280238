"""Multi-relation graph attention with question-aware and general gating, plus the candidate scorer."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .graph import NodeKind, ReasoningGraph
from .layers import MLP, BiLSTM, Linear, glorot
from .tensor import Parameter, Tensor

# undirected kinds own a forward and a backward slot
SLOTS = ("sub2rea", "rea2rea_fwd", "rea2rea_bwd", "rea2men", "men2can_fwd", "men2can_bwd")
MERGED_SLOTS = ("any",)


@dataclass
class GatConfig:
    heads: int = 2
    layers: int = 5
    leaky_slope: float = 0.2
    activation: str = "elu"  # elu | identity
    merge_edge_types: bool = False
    scorer_hidden: int = 64

    def __post_init__(self):
        if self.heads < 1:
            raise ValueError("need at least one attention head")
        if self.layers < 1:
            raise ValueError("need at least one reasoning layer")
        if self.activation not in ("elu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class MessageEdges:
    """Directed message list for one relation slot: ``src[e]`` sends to ``dst[e]``."""

    slot: str
    src: np.ndarray
    dst: np.ndarray
    edge_ids: np.ndarray  # index of the originating TypedEdge


def message_edges(graph: ReasoningGraph, merge: bool = False) -> list[MessageEdges]:
    """Expand typed edges into per-slot directed message lists (undirected kinds in both directions)."""
    buckets: dict[str, list[tuple[int, int, int]]] = {s: [] for s in (MERGED_SLOTS if merge else SLOTS)}
    for k, e in enumerate(graph.edges):
        kind = e.kind.value
        if e.directed:
            pairs = [(kind, e.src, e.dst)]
        else:
            pairs = [(f"{kind}_fwd", e.src, e.dst), (f"{kind}_bwd", e.dst, e.src)]
        for slot, s, d in pairs:
            buckets["any" if merge else slot].append((s, d, k))
    out = []
    for slot, rows in buckets.items():
        arr = np.array(rows, dtype=np.int64).reshape(-1, 3)
        out.append(MessageEdges(slot, arr[:, 0], arr[:, 1], arr[:, 2]))
    return out


def attention_coefficients(Wu: Tensor, src: np.ndarray, dst: np.ndarray, a_dst: Tensor, a_src: Tensor,
                           n_nodes: int, slope: float = 0.2) -> Tensor:
    """Per-edge attention, normalised over each receiving node's incoming edges.

    ``Wu`` holds transformed node states.  Scores are
    LeakyReLU(a_dst . Wu_i + a_src . Wu_j) for receiver i and sender j.
    """
    e = T.add(T.matmul(T.take(Wu, dst), a_dst), T.matmul(T.take(Wu, src), a_src))
    return T.segment_softmax(T.leaky_relu(e, slope), dst, n_nodes)


class RelationalAttention:
    """Per-slot, per-head transforms and attention vectors, averaged over heads."""

    def __init__(self, dim: int, config: GatConfig, rng: np.random.Generator):
        self.dim, self.config = dim, config
        self.slots = MERGED_SLOTS if config.merge_edge_types else SLOTS
        self.W = {(s, k): Parameter(glorot(rng, dim, dim), name=f"gat.{s}.{k}.W")
                  for s in self.slots for k in range(config.heads)}
        self.a = {(s, k): (Parameter(glorot(rng, dim, 1), name=f"gat.{s}.{k}.a_dst"),
                           Parameter(glorot(rng, dim, 1), name=f"gat.{s}.{k}.a_src"))
                  for s in self.slots for k in range(config.heads)}

    def parameters(self) -> list[Parameter]:
        ps = list(self.W.values())
        for pair in self.a.values():
            ps += list(pair)
        return ps

    def _activate(self, x: Tensor) -> Tensor:
        return T.elu(x) if self.config.activation == "elu" else x

    def __call__(self, U: Tensor, messages: Sequence[MessageEdges]) -> tuple[Tensor, dict[int, np.ndarray]]:
        """Aggregated neighbourhood vectors g (n, dim) and per-edge attention weights.

        Each message is scaled by its attention weight and by 1/|N_i^r|, the
        receiver's neighbour count under that slot.  Isolated nodes get g = 0.
        """
        n, d = U.shape
        ones = T.tensor(np.ones((1, d)))
        heads = []
        weights: dict[int, list[float]] = {}
        for k in range(self.config.heads):
            total = None
            for m in messages:
                if m.src.size == 0:
                    continue
                Wu = T.matmul(U, self.W[(m.slot, k)])
                a_dst, a_src = self.a[(m.slot, k)]
                alpha = attention_coefficients(Wu, m.src, m.dst, a_dst, a_src, n, self.config.leaky_slope)
                counts = np.bincount(m.dst, minlength=n)[m.dst].astype(float)
                scaled = T.mul(alpha, T.tensor((1.0 / counts)[:, None]))
                msg = T.mul(T.matmul(scaled, ones), T.take(Wu, m.src))
                agg = T.segment_sum(msg, m.dst, n)
                total = agg if total is None else T.add(total, agg)
                for eid, w in zip(m.edge_ids, alpha.data[:, 0]):
                    weights.setdefault(int(eid), []).append(float(w))
            if total is None:
                total = T.tensor(np.zeros((n, d)))
            heads.append(self._activate(total))
        g = heads[0]
        for h in heads[1:]:
            g = T.add(g, h)
        if len(heads) > 1:
            g = T.mul(g, 1.0 / len(heads))
        return g, {k: np.array(v) for k, v in weights.items()}


def _blend(gate: Tensor, new: Tensor, old: Tensor) -> Tensor:
    return T.add(T.mul(gate, new), T.mul(T.sub(1.0, gate), old))


class QuestionGate:
    """Attends each node over the question and mixes the result into the node state."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.score = Linear(2 * dim, 1, rng, name="qgate.score")
        self.mix = Linear(2 * dim, dim, rng, name="qgate.mix")

    def parameters(self) -> list[Parameter]:
        return self.score.parameters() + self.mix.parameters()

    def attend(self, U: Tensor, Q: Tensor) -> Tensor:
        """Question summary q_i for every node: sigmoid pair scores, softmax over question positions."""
        n, l_q = U.shape[0], Q.shape[0]
        rows_u = np.repeat(np.arange(n), l_q)
        rows_q = np.tile(np.arange(l_q), n)
        pair = T.concat([T.take(U, rows_u), T.take(Q, rows_q)], axis=1)
        w = T.sigmoid(self.score(pair))
        alpha = T.softmax(T.reshape(w, (n, l_q)), axis=1)
        return T.matmul(alpha, Q)

    def __call__(self, U: Tensor, Q: Tensor) -> Tensor:
        q = self.attend(U, Q)
        beta = T.sigmoid(self.mix(T.concat([q, U], axis=1)))
        return _blend(beta, T.tanh(q), U)


class GeneralGate:
    def __init__(self, dim: int, rng: np.random.Generator):
        self.mix = Linear(2 * dim, dim, rng, name="ggate.mix")

    def parameters(self) -> list[Parameter]:
        return self.mix.parameters()

    def __call__(self, U_tilde: Tensor, g: Tensor, U: Tensor) -> Tensor:
        w = T.sigmoid(self.mix(T.concat([U_tilde, g], axis=1)))
        return _blend(w, T.tanh(U_tilde), U)


class CandidateScorer:
    """score(c) = f_can(candidate node) + max over c's mention nodes of f_men(mention)."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.f_can = MLP(dim, hidden, 1, rng, name="score.can")
        self.f_men = MLP(dim, hidden, 1, rng, name="score.men")

    def parameters(self) -> list[Parameter]:
        return self.f_can.parameters() + self.f_men.parameters()

    def __call__(self, U: Tensor, graph: ReasoningGraph, use_mentions: bool = True) -> Tensor:
        """Scores (1, n_candidates) aligned with ``graph.candidates``.

        A candidate without a candidate node scores by its mentions alone, and
        one with neither scores 0.  ``use_mentions=False`` leaves f_can only.
        """
        if not graph.candidates:
            raise ValueError("graph has no candidates to score")
        can_rows = {graph.nodes[i].entity: i for i in graph.of_kind(NodeKind.CANDIDATE)}
        men_rows: dict = {}
        for i in graph.of_kind(NodeKind.MENTION) if use_mentions else ():
            men_rows.setdefault(graph.nodes[i].entity, []).append(i)
        f_can = self.f_can(T.take(U, np.array(sorted(can_rows.values())))) if can_rows else None
        can_pos = {i: r for r, i in enumerate(sorted(can_rows.values()))}
        all_men = sorted(i for rows in men_rows.values() for i in rows)
        f_men = self.f_men(T.take(U, np.array(all_men))) if all_men else None
        men_pos = {i: r for r, i in enumerate(all_men)}
        scores = []
        for c in graph.candidates:
            parts = []
            if c in can_rows:
                parts.append(T.take(f_can, np.array([can_pos[can_rows[c]]])))
            if c in men_rows:
                parts.append(T.max(T.take(f_men, np.array([men_pos[i] for i in men_rows[c]])), axis=0))
            if not parts:
                scores.append(T.tensor(np.zeros((1, 1))))
            else:
                scores.append(parts[0] if len(parts) == 1 else T.add(parts[0], parts[1]))
        return T.reshape(T.concat(scores, axis=0), (1, len(scores)))


class GraphReasoner:
    """Shared-parameter hops of aggregate -> question gate -> general gate."""

    def __init__(self, dim: int, word_dim: int, question_hidden: int, config: GatConfig, rng: np.random.Generator):
        self.dim, self.config = dim, config
        self.relational = RelationalAttention(dim, config, rng)
        self.question_encoder = BiLSTM(word_dim, question_hidden, rng, name="gat.question")
        self.question_proj = Linear(question_hidden, dim, rng, name="gat.question_proj")
        self.qgate = QuestionGate(dim, rng)
        self.ggate = GeneralGate(dim, rng)

    def parameters(self) -> list[Parameter]:
        return (self.relational.parameters() + self.question_encoder.parameters()
                + self.question_proj.parameters() + self.qgate.parameters() + self.ggate.parameters())

    def encode_question(self, E_q: Tensor) -> Tensor:
        return self.question_proj(self.question_encoder([E_q])[0])

    def layer(self, U: Tensor, Q: Tensor, messages: Sequence[MessageEdges]) -> tuple[Tensor, dict]:
        g, weights = self.relational(U, messages)
        U_tilde = self.qgate(U, Q)
        return self.ggate(U_tilde, g, U), weights

    def __call__(self, U: Tensor, E_q: Tensor, graph: ReasoningGraph,
                 layers: int | None = None) -> tuple[Tensor, dict[int, float]]:
        """Final node states and per-edge attention (last layer, averaged over heads and directions)."""
        L = self.config.layers if layers is None else layers
        if L < 1:
            raise ValueError("need at least one reasoning layer")
        if U.shape[1] != self.dim:
            raise T.ShapeError(f"node width {U.shape[1]} != reasoner width {self.dim}")
        Q = self.encode_question(E_q)
        messages = message_edges(graph, self.config.merge_edge_types)
        weights: dict = {}
        for _ in range(L):
            U, weights = self.layer(U, Q, messages)
        return U, {k: float(v.mean()) for k, v in weights.items()}
