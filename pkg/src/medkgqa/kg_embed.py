"""TransE / TransH embeddings of the drug-protein triplet store and link prediction."""
from __future__ import annotations

import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .kb import EntityId, EntityKind, KnowledgeBase, Triplet
from .optim import OptimConfig, Optimizer
from .tensor import Parameter, Tape, Tensor

log = logging.getLogger(__name__)

FORMAT_TAG = "medkg-emb"
FORMAT_VERSION = "v1"


@dataclass
class TransConfig:
    model: str = "transe"
    dim: int = 200
    margin: float = 1.0
    epochs: int = 1000
    negatives: int = 1
    lr: float = 0.01
    batch_size: int = 128
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.model not in ("transe", "transh"):
            raise ValueError(f"model must be transe or transh, got {self.model!r}")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.epochs < 1 or self.dim < 1 or self.negatives < 1 or self.batch_size < 1:
            raise ValueError("epochs, dim, negatives and batch_size must be >= 1")


@dataclass
class EmbeddingTable:
    model: str
    entities: list[EntityId]
    entity_vectors: np.ndarray
    relations: list[str]
    relation_vectors: np.ndarray
    normals: np.ndarray | None = None
    _entity_index: dict[EntityId, int] = field(init=False, repr=False)
    _relation_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._entity_index = {e: i for i, e in enumerate(self.entities)}
        self._relation_index = {r: i for i, r in enumerate(self.relations)}
        dims = {self.entity_vectors.shape[1], self.relation_vectors.shape[1]}
        if self.normals is not None:
            dims.add(self.normals.shape[1])
        if len(dims) != 1:
            raise ValueError(f"inconsistent embedding dimensions {sorted(dims)}")

    @property
    def dim(self) -> int:
        return self.entity_vectors.shape[1]

    def __contains__(self, entity: EntityId) -> bool:
        return entity in self._entity_index

    def entity_index(self, entity: EntityId) -> int:
        return self._entity_index[entity]

    def relation_index(self, action: str) -> int:
        return self._relation_index[action]

    def vector(self, entity: EntityId) -> np.ndarray:
        return self.entity_vectors[self._entity_index[entity]]

    def relation(self, action: str) -> np.ndarray:
        return self.relation_vectors[self._relation_index[action]]

    def normal(self, action: str) -> np.ndarray:
        if self.normals is None:
            raise ValueError("TransE tables carry no hyperplane normals")
        return self.normals[self._relation_index[action]]

    def score(self, t: Triplet) -> float:
        p, l, d = self.vector(t.protein), self.relation(t.action), self.vector(t.drug)
        if self.model == "transh":
            return score_transh(p, l, d, self.normal(t.action))
        return score_transe(p, l, d)


@dataclass
class LinkPredictionReport:
    mrr: float
    mr: float
    hits_at_10: float
    hits_at_3: float
    hits_at_1: float
    filtered: bool
    n_queries: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


# -- scoring ---------------------------------------------------------------


def _check_dims(*vecs: np.ndarray) -> None:
    shapes = {np.shape(v) for v in vecs}
    if len(shapes) != 1:
        raise T.ShapeError(f"vector dimensions differ: {sorted(shapes)}")


def score_transe(p, l, d) -> float:
    """||p + l - d||_2; lower is more plausible."""
    p, l, d = (np.asarray(v, dtype=np.float64) for v in (p, l, d))
    _check_dims(p, l, d)
    return float(np.linalg.norm(p + l - d))


def score_transh(p, l, d, w, tol: float = 1e-6) -> float:
    """Distance between hyperplane projections of p and d, translated by l."""
    p, l, d, w = (np.asarray(v, dtype=np.float64) for v in (p, l, d, w))
    _check_dims(p, l, d, w)
    if abs(np.linalg.norm(w) - 1.0) > tol:
        raise ValueError(f"hyperplane normal must be unit length, |w| = {np.linalg.norm(w):.8f}")
    p_perp = p - (w @ p) * w
    d_perp = d - (w @ d) * w
    return float(np.linalg.norm(p_perp + l - d_perp))


# -- negatives -------------------------------------------------------------


class NegativeSamplingError(RuntimeError):
    pass


def negative_sample(triplet: Triplet, proteins: Sequence[EntityId], drugs: Sequence[EntityId],
                    true_set: set[Triplet] | frozenset, rng: np.random.Generator,
                    max_retries: int = 100) -> Triplet:
    """Replace the head (with a protein) or the tail (with a drug), coin flip, never the action."""
    if len(proteins) < 2 or len(drugs) < 2:
        raise ValueError("negative sampling needs at least 2 proteins and 2 drugs")
    for _ in range(max_retries):
        if rng.random() < 0.5:
            cand = Triplet(proteins[rng.integers(len(proteins))], triplet.action, triplet.drug)
        else:
            cand = Triplet(triplet.protein, triplet.action, drugs[rng.integers(len(drugs))])
        if cand not in true_set:
            return cand
    raise NegativeSamplingError(f"no negative found for {triplet} after {max_retries} draws (KB too dense)")


# -- training --------------------------------------------------------------


def _broadcast_cols(col: Tensor, k: int) -> Tensor:
    # B x 1 -> B x k, through a matmul so the gradient sums back
    return col @ Tensor(np.ones((1, k)))


def _project(e: Tensor, w: Tensor) -> Tensor:
    dots = T.sum(e * w, axis=1)
    return e - _broadcast_cols(dots, e.shape[1]) * w


def _batch_scores(model: str, E: Parameter, R: Parameter, W: Parameter | None,
                  heads: np.ndarray, rels: np.ndarray, tails: np.ndarray) -> Tensor:
    h, r, t = E[heads], R[rels], E[tails]
    if model == "transh":
        w = W[rels]
        h, t = _project(h, w), _project(t, w)
    return T.norm(h + r - t, axis=1)


def margin_loss(pos: Tensor, neg: Tensor, margin: float) -> Tensor:
    """Sum of [margin + pos - neg]_+ over the batch."""
    return T.sum(T.relu(pos - neg + margin))


def _unit_rows(a: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(a, axis=1, keepdims=True)
    return a / np.where(n > 0, n, 1.0)


def _init_table(kb: KnowledgeBase, config: TransConfig, rng: np.random.Generator) -> EmbeddingTable:
    entities = sorted(kb.proteins) + sorted(kb.drugs)
    relations = sorted(kb.actions)
    bound = 6.0 / np.sqrt(config.dim)
    ent = rng.uniform(-bound, bound, size=(len(entities), config.dim))
    rel = _unit_rows(rng.uniform(-bound, bound, size=(len(relations), config.dim)))
    normals = None
    if config.model == "transh":
        normals = _unit_rows(rng.normal(size=(len(relations), config.dim)))
    return EmbeddingTable(config.model, entities, ent, relations, rel, normals)


def train_embeddings(kb: KnowledgeBase, config: TransConfig,
                     rng: np.random.Generator) -> tuple[EmbeddingTable, list[float]]:
    """Minimise the margin ranking loss; returns the table and the mean per-pair loss per epoch."""
    if not kb.triplets:
        raise ValueError("cannot train embeddings on an empty knowledge base")
    table = _init_table(kb, config, rng)
    triplets = sorted(kb.triplets)
    proteins = sorted(kb.proteins)
    drugs = sorted(kb.drugs)
    true_set = frozenset(kb.triplets)
    eidx, ridx = table._entity_index, table._relation_index

    E = Parameter(table.entity_vectors, name="entities")
    R = Parameter(table.relation_vectors, name="relations")
    W = Parameter(table.normals, name="normals") if config.model == "transh" else None
    params = [p for p in (E, R, W) if p is not None]
    opt = Optimizer(params, OptimConfig(rule=config.optimizer, lr=config.lr))

    pos_idx = np.array([[eidx[t.protein], ridx[t.action], eidx[t.drug]] for t in triplets])
    curve: list[float] = []
    for _epoch in range(config.epochs):
        if config.model == "transe":
            E.assign(_unit_rows(E.data))
        order = rng.permutation(len(triplets))
        total, pairs = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            pos = np.repeat(pos_idx[batch], config.negatives, axis=0)
            neg = np.empty_like(pos)
            for i, row in enumerate(batch.repeat(config.negatives)):
                c = negative_sample(triplets[row], proteins, drugs, true_set, rng)
                neg[i] = (eidx[c.protein], ridx[c.action], eidx[c.drug])
            with Tape() as tape:
                sp = _batch_scores(config.model, E, R, W, pos[:, 0], pos[:, 1], pos[:, 2])
                sn = _batch_scores(config.model, E, R, W, neg[:, 0], neg[:, 1], neg[:, 2])
                loss = margin_loss(sp, sn, config.margin)
            grads = tape.backward(loss)
            opt.step({p: grads.get(p, np.zeros_like(p.data)) for p in params})
            if W is not None:
                W.assign(_unit_rows(W.data))
                # keep entities inside the unit ball, the TransH norm constraint
                n = np.linalg.norm(E.data, axis=1, keepdims=True)
                E.assign(E.data / np.maximum(n, 1.0))
            total += loss.item()
            pairs += len(pos)
        curve.append(total / pairs)
    if config.model == "transe":
        E.assign(_unit_rows(E.data))
    out = EmbeddingTable(config.model, table.entities, E.data.copy(), table.relations, R.data.copy(),
                         None if W is None else W.data.copy())
    return out, curve


# -- evaluation ------------------------------------------------------------


def _all_scores(table: EmbeddingTable, heads: np.ndarray, rel: int, tails: np.ndarray) -> np.ndarray:
    h = table.entity_vectors[heads]
    t = table.entity_vectors[tails]
    r = table.relation_vectors[rel]
    if table.model == "transh":
        w = table.normals[rel]
        h = h - np.outer(h @ w, w)
        t = t - np.outer(t @ w, w)
    return np.linalg.norm(h + r - t, axis=1)


def _rank(scores: np.ndarray, true_pos: int, keep: np.ndarray) -> int:
    # pessimistic ties: equal-scored competitors rank ahead of the true entity
    s = scores[true_pos]
    comp = keep.copy()
    comp[true_pos] = False
    return 1 + int(np.count_nonzero(scores[comp] <= s))


def link_prediction_ranks(table: EmbeddingTable, test: Iterable[Triplet], filtered: bool,
                          known: Iterable[Triplet] = ()) -> list[int]:
    """Head and tail ranks for every test triplet, in that order per triplet."""
    test = list(test)
    missing = sorted({e.accession for t in test for e in (t.protein, t.drug) if e not in table})
    missing += sorted({t.action for t in test if t.action not in table._relation_index})
    if missing:
        raise KeyError(f"entities/relations missing from the embedding table: {missing}")
    known_set = set(known) | set(test)
    protein_rows = np.array([i for i, e in enumerate(table.entities) if e.kind is EntityKind.PROTEIN])
    drug_rows = np.array([i for i, e in enumerate(table.entities) if e.kind is EntityKind.DRUG])
    ranks: list[int] = []
    for t in test:
        rel = table.relation_index(t.action)
        hi, ti = table.entity_index(t.protein), table.entity_index(t.drug)

        scores = _all_scores(table, protein_rows, rel, np.full(len(protein_rows), ti))
        keep = np.ones(len(protein_rows), dtype=bool)
        if filtered:
            for k, row in enumerate(protein_rows):
                if row != hi and Triplet(table.entities[row], t.action, t.drug) in known_set:
                    keep[k] = False
        ranks.append(_rank(scores, int(np.flatnonzero(protein_rows == hi)[0]), keep))

        scores = _all_scores(table, np.full(len(drug_rows), hi), rel, drug_rows)
        keep = np.ones(len(drug_rows), dtype=bool)
        if filtered:
            for k, row in enumerate(drug_rows):
                if row != ti and Triplet(t.protein, t.action, table.entities[row]) in known_set:
                    keep[k] = False
        ranks.append(_rank(scores, int(np.flatnonzero(drug_rows == ti)[0]), keep))
    return ranks


def report_from_ranks(ranks: Sequence[int], filtered: bool) -> LinkPredictionReport:
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        raise ValueError("no test triplets to evaluate")
    return LinkPredictionReport(
        mrr=float(np.mean(1.0 / r)),
        mr=float(np.mean(r)),
        hits_at_10=float(np.mean(r <= 10)),
        hits_at_3=float(np.mean(r <= 3)),
        hits_at_1=float(np.mean(r <= 1)),
        filtered=filtered,
        n_queries=int(r.size),
    )


def eval_link_prediction(table: EmbeddingTable, kb: KnowledgeBase, filtered: bool = True,
                         test: Iterable[Triplet] | None = None) -> LinkPredictionReport:
    """Rank true heads and tails among all same-kind entities; both directions averaged.

    With ``test=None`` the KB itself is the test set (shared train/test mode).
    """
    test = sorted(kb.triplets) if test is None else list(test)
    ranks = link_prediction_ranks(table, test, filtered, known=kb.triplets)
    return report_from_ranks(ranks, filtered)


def split_triplets(kb: KnowledgeBase, test_fraction: float,
                   rng: np.random.Generator) -> tuple[KnowledgeBase, list[Triplet]]:
    """Hold out a fraction of triplets for a proper split evaluation."""
    trips = sorted(kb.triplets)
    order = rng.permutation(len(trips))
    n_test = int(round(test_fraction * len(trips)))
    test = [trips[i] for i in order[:n_test]]
    train = {trips[i] for i in order[n_test:]}
    return KnowledgeBase(train, set(kb.pathways)), test


# -- knowledge vectors for graph nodes -------------------------------------


def fallback_vector(entity: EntityId, dim: int, seed: int = 0) -> np.ndarray:
    """Fixed-seed random vector for an entity the table does not cover."""
    key = zlib.crc32(f"{entity.kind.value}:{entity.accession}".encode())
    return np.random.default_rng([seed, key]).normal(0.0, 0.1, size=dim)


def knowledge_vector(table: EmbeddingTable | None, entity: EntityId, dim: int, seed: int = 0) -> np.ndarray:
    if table is not None:
        if table.dim != dim:
            raise T.ShapeError(f"embedding table dim {table.dim} != expected knowledge dim {dim}")
        if entity in table:
            return table.vector(entity)
    return fallback_vector(entity, dim, seed)


# -- files -----------------------------------------------------------------


class EmbeddingFormatError(ValueError):
    pass


def _fmt(vec: np.ndarray) -> str:
    return ",".join("%.17g" % x for x in vec)


def export_embeddings(table: EmbeddingTable, path: str | Path) -> None:
    n_rel = len(table.relations)
    lines = [f"{FORMAT_TAG} {FORMAT_VERSION} model={table.model} dim={table.dim} "
             f"entities={len(table.entities)} relations={n_rel}"]
    for e, v in zip(table.entities, table.entity_vectors):
        lines.append(f"{e.kind.value}:{e.accession}\t{_fmt(v)}")
    for r, v in zip(table.relations, table.relation_vectors):
        lines.append(f"relation:{r}\t{_fmt(v)}")
    if table.normals is not None:
        for r, v in zip(table.relations, table.normals):
            lines.append(f"normal:{r}\t{_fmt(v)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def import_embeddings(path: str | Path) -> EmbeddingTable:
    """Parse a whole embedding file; any inconsistency raises before a table exists."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise EmbeddingFormatError(f"{path}: empty file")
    head = lines[0].split()
    if len(head) < 2 or head[0] != FORMAT_TAG:
        raise EmbeddingFormatError(f"{path}: not an embedding file")
    if head[1] != FORMAT_VERSION:
        raise EmbeddingFormatError(f"{path}: unsupported version {head[1]} (expected {FORMAT_VERSION})")
    try:
        meta = dict(kv.split("=", 1) for kv in head[2:])
        model, dim = meta["model"], int(meta["dim"])
        n_ent, n_rel = int(meta["entities"]), int(meta["relations"])
    except (KeyError, ValueError) as exc:
        raise EmbeddingFormatError(f"{path}: bad header {lines[0]!r}") from exc
    expected = n_ent + n_rel * (2 if model == "transh" else 1)
    body = lines[1:]
    if len(body) != expected:
        raise EmbeddingFormatError(f"{path}: expected {expected} vector lines, found {len(body)} (truncated?)")

    def parse(line: str, lineno: int) -> tuple[str, str, np.ndarray]:
        try:
            ident, payload = line.split("\t")
            kind, name = ident.split(":", 1)
            vec = np.array([float(x) for x in payload.split(",")])
        except ValueError as exc:
            raise EmbeddingFormatError(f"{path}:{lineno}: malformed vector line") from exc
        if vec.shape != (dim,):
            raise EmbeddingFormatError(f"{path}:{lineno}: vector has {vec.size} values, header says dim={dim}")
        return kind, name, vec

    rows = [parse(line, i + 2) for i, line in enumerate(body)]
    entities, evecs = [], []
    for kind, name, vec in rows[:n_ent]:
        try:
            entities.append(EntityId(EntityKind(kind), name))
        except ValueError as exc:
            raise EmbeddingFormatError(f"{path}: unknown entity kind {kind!r}") from exc
        evecs.append(vec)
    rel_rows = rows[n_ent:n_ent + n_rel]
    if any(kind != "relation" for kind, _, _ in rel_rows):
        raise EmbeddingFormatError(f"{path}: relation block malformed")
    normals = None
    if model == "transh":
        norm_rows = rows[n_ent + n_rel:]
        if [n for _, n, _ in norm_rows] != [n for _, n, _ in rel_rows] or any(k != "normal" for k, _, _ in norm_rows):
            raise EmbeddingFormatError(f"{path}: normal block does not match relations")
        normals = np.array([v for _, _, v in norm_rows]).reshape(n_rel, dim)
    return EmbeddingTable(
        model=model,
        entities=entities,
        entity_vectors=np.array(evecs).reshape(n_ent, dim),
        relations=[n for _, n, _ in rel_rows],
        relation_vectors=np.array([v for _, _, v in rel_rows]).reshape(n_rel, dim),
        normals=normals,
    )
