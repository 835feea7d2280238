"""Reader training, evaluation, cross-validation, hop sweeps and ablations."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .corpus import Sample, Vocabulary, build_vocab
from .gat import CandidateScorer, GatConfig, GraphReasoner
from .graph import NodeKind
from .kb import EntityId, EntityKind, KnowledgeBase
from .kg_embed import EmbeddingTable
from .optim import OptimConfig, Optimizer
from .reader import KnowledgeLookup, PreparedSample, Reader, ReaderConfig, prepare
from .tensor import Parameter

log = logging.getLogger(__name__)

ABLATION_FLAGS = (
    "no_knowledge_fusion",
    "no_graph_reasoning",
    "merge_edge_types",
    "drop_subject_nodes",
    "drop_reasoning_nodes",
    "drop_mention_nodes",
    "drop_candidate_nodes",
)


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    optimizer: str = "adam"
    clip_norm: float | None = 5.0
    hops: int = 5
    heads: int = 2
    hidden: int = 64
    word_dim: int = 64
    knowledge_dim: int = 32
    finetune_knowledge: bool = False
    patience: int = 2
    seed: int = 0
    cv_folds: int | None = None
    no_knowledge_fusion: bool = False
    no_graph_reasoning: bool = False
    merge_edge_types: bool = False
    drop_subject_nodes: bool = False
    drop_reasoning_nodes: bool = False
    drop_mention_nodes: bool = False
    drop_candidate_nodes: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.hops < 1 or self.heads < 1 or self.patience < 1:
            raise ConfigError("epochs, batch_size, hops, heads and patience must all be >= 1")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.cv_folds is not None and self.cv_folds < 2:
            raise ConfigError("cv_folds must be >= 2 (or unset for plain mode)")
        if self.drop_candidate_nodes and self.no_graph_reasoning:
            raise ConfigError("drop_candidate_nodes with no_graph_reasoning leaves nothing to score")
        if self.drop_candidate_nodes and self.drop_mention_nodes:
            raise ConfigError("drop_candidate_nodes with drop_mention_nodes leaves nothing to score")

    @property
    def mode(self) -> str:
        return "cv" if self.cv_folds else "plain"

    def active_flags(self) -> list[str]:
        return [f for f in ABLATION_FLAGS if getattr(self, f)]

    def dropped_kinds(self) -> set[NodeKind]:
        return {k for k in NodeKind if getattr(self, f"drop_{k.value}_nodes")}

    def with_flags(self, **flags) -> "TrainConfig":
        return replace(self, **flags)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)


class QAModel:
    """Reader, graph reasoner and candidate scorer wired together."""

    def __init__(self, config: TrainConfig, vocab: Vocabulary, embeddings: np.ndarray,
                 knowledge: KnowledgeLookup | None = None):
        self.config, self.vocab = config, vocab
        rng = np.random.default_rng([config.seed, 0])
        self.reader_config = ReaderConfig(
            hidden=config.hidden, word_dim=config.word_dim, knowledge_dim=config.knowledge_dim,
            use_knowledge=not config.no_knowledge_fusion, finetune_knowledge=config.finetune_knowledge,
            fallback_seed=config.seed,
        )
        self.reader = Reader(self.reader_config, embeddings, rng, knowledge)
        dim = self.reader_config.node_dim
        self.gat_config = GatConfig(heads=config.heads, layers=config.hops,
                                    merge_edge_types=config.merge_edge_types, scorer_hidden=config.hidden)
        self.reasoner = None if config.no_graph_reasoning else GraphReasoner(
            dim, config.word_dim, config.hidden, self.gat_config, rng)
        self.scorer = CandidateScorer(dim, config.hidden, rng)
        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise RuntimeError("duplicate parameter names in model")

    def parameters(self) -> list[Parameter]:
        ps = self.reader.parameters() + self.scorer.parameters()
        if self.reasoner is not None:
            ps += self.reasoner.parameters()
        return ps

    def prepare(self, sample: Sample, kb: KnowledgeBase, training: bool = False) -> PreparedSample:
        return prepare(sample, kb, self.vocab, training=training, drop=self.config.dropped_kinds())

    def forward(self, prep: PreparedSample) -> tuple[T.Tensor, dict[int, float], T.Tensor]:
        """Candidate scores (1, n_c), per-edge attention weights, final node states."""
        U, _ = self.reader(prep)
        if self.reasoner is None:
            return self.scorer(U, prep.graph, use_mentions=False), {}, U
        E_q = self.reader.embed(prep.question_ids)
        U, weights = self.reasoner(U, E_q, prep.graph)
        return self.scorer(U, prep.graph), weights, U

    def scores(self, prep: PreparedSample) -> np.ndarray:
        return self.forward(prep)[0].data[0].copy()

    # -- state ------------------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        out = {p.name: p.data for p in self.parameters()}
        k = self.reader.knowledge
        if k is not None and not k.trainable and k.matrix_e is not None:
            out["knowledge.transe"] = k.matrix_e.data
            out["knowledge.transh"] = k.matrix_h.data
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = {p.name: p for p in self.parameters()}
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.data.shape:
                raise T.ShapeError(f"parameter {name}: checkpoint shape {state[name].shape} != model {p.data.shape}")
            p.assign(state[name])
        k = self.reader.knowledge
        if k is not None and not k.trainable and "knowledge.transe" in state:
            # rows registered after the state was captured are kept as they are
            saved = state["knowledge.transe"].shape[0]
            k.matrix_e = T.tensor(np.concatenate([state["knowledge.transe"], k.matrix_e.data[saved:]]))
            k.matrix_h = T.tensor(np.concatenate([state["knowledge.transh"], k.matrix_h.data[saved:]]))


# -- construction -------------------------------------------------------------------


def corpus_entities(samples: Iterable[Sample], kb: KnowledgeBase) -> set[EntityId]:
    ents = set(kb.drugs) | set(kb.proteins)
    for s in samples:
        ents.add(s.subject)
        ents.update(s.candidates)
    return ents


def build_model(config: TrainConfig, samples: Sequence[Sample], kb: KnowledgeBase,
                transe: EmbeddingTable | None = None, transh: EmbeddingTable | None = None) -> QAModel:
    """Vocabulary over all sample text (no labels), knowledge rows for every known entity."""
    vocab, matrix = build_vocab(samples, config.word_dim, np.random.default_rng([config.seed, 2]))
    knowledge = None
    if not config.no_knowledge_fusion:
        knowledge = KnowledgeLookup(transe, transh, config.knowledge_dim, config.seed, config.finetune_knowledge)
        knowledge.register(corpus_entities(samples, kb))
    return QAModel(config, vocab, matrix, knowledge)


# -- training -------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    loss: float
    train_accuracy: float
    dev_accuracy: float | None


@dataclass
class TrainResult:
    history: list[EpochLog]
    best_epoch: int
    best_dev_accuracy: float | None
    best_state: dict[str, np.ndarray]

    def to_json(self) -> dict:
        return {"history": [asdict(h) for h in self.history], "best_epoch": self.best_epoch,
                "best_dev_accuracy": self.best_dev_accuracy}


def sample_loss(model: QAModel, prep: PreparedSample) -> tuple[T.Tensor, int]:
    scores = model.forward(prep)[0]
    pred = int(np.argmax(scores.data[0]))
    return T.neg(T.take(T.log_softmax(scores, axis=1), (0, prep.gold))), pred


def train(model: QAModel, train_preps: Sequence[PreparedSample], dev_preps: Sequence[PreparedSample] = (),
          config: TrainConfig | None = None) -> TrainResult:
    """Cross-entropy training; keeps the state with the best dev accuracy.

    Without dev data the final epoch's state is kept.  Stops after ``patience``
    epochs without a dev improvement.
    """
    config = config or model.config
    usable = [p for p in train_preps if p.gold is not None]
    if len(usable) < len(train_preps):
        log.warning("%d training samples lost their answer to truncation and are skipped",
                    len(train_preps) - len(usable))
    params = model.parameters()
    opt = Optimizer(params, OptimConfig(rule=config.optimizer, lr=config.lr, clip_norm=config.clip_norm))
    rng = np.random.default_rng([config.seed, 1])
    history: list[EpochLog] = []
    best_state = {k: v.copy() for k, v in model.state().items()}
    best_acc, best_epoch, stale = None, 0, 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(usable))
        total_loss, correct = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [usable[i] for i in order[start:start + config.batch_size]]
            grads = {id(p): np.zeros_like(p.data) for p in params}
            for prep in batch:
                with T.Tape() as tape:
                    loss, pred = sample_loss(model, prep)
                    tape.backward(loss)
                total_loss += loss.item()
                correct += int(pred == prep.gold)
                for p in params:
                    grads[id(p)] += tape.gradient(p)
            opt.step({k: g / len(batch) for k, g in grads.items()})
        n = max(len(usable), 1)
        dev_acc = evaluate(model, dev_preps).accuracy if dev_preps else None
        history.append(EpochLog(epoch, total_loss / n, correct / n, dev_acc))
        log.info("epoch %d loss %.4f train %.3f dev %s", epoch, total_loss / n, correct / n, dev_acc)
        if dev_acc is None:
            best_state = {k: v.copy() for k, v in model.state().items()}
            best_epoch = epoch
            continue
        if best_acc is None or dev_acc > best_acc:
            best_acc, best_epoch, stale = dev_acc, epoch, 0
            best_state = {k: v.copy() for k, v in model.state().items()}
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.load_state(best_state)
    return TrainResult(history, best_epoch, best_acc, best_state)


# -- evaluation --------------------------------------------------------------------


def doc_bucket(n_docs: int, width: int = 10) -> str:
    lo = (n_docs // width) * width
    return f"{max(lo, 1)}-{lo + width - 1}"


@dataclass
class EvalReport:
    accuracy: float
    n: int
    correct: int
    predictions: list[dict] = field(default_factory=list)
    buckets: dict[str, dict] = field(default_factory=dict)
    gold_ranks: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def predict(scores: np.ndarray) -> int:
    """Argmax with ties going to the lowest candidate index."""
    return int(np.argmax(scores))


def evaluate(model: QAModel, preps: Sequence[PreparedSample]) -> EvalReport:
    preds, buckets, ranks = [], {}, {}
    correct = 0
    for prep in preps:
        s = model.scores(prep)
        k = predict(s)
        gold = prep.gold
        ok = gold is not None and k == gold
        correct += ok
        if gold is None:
            rank = "missing"
        else:
            rank = str(1 + int((s > s[gold]).sum()) + int((s[:gold] == s[gold]).sum()))
        ranks[rank] = ranks.get(rank, 0) + 1
        b = buckets.setdefault(doc_bucket(len(prep.sample.supports)), {"n": 0, "correct": 0})
        b["n"] += 1
        b["correct"] += int(ok)
        preds.append({"id": prep.sample.id, "predicted": prep.graph.candidates[k].accession,
                      "gold": prep.sample.answer.accession if prep.sample.answer else None,
                      "correct": bool(ok), "scores": [float(x) for x in s]})
    for b in buckets.values():
        b["accuracy"] = b["correct"] / b["n"]
    n = len(preps)
    ordered = dict(sorted(buckets.items(), key=lambda kv: int(kv[0].split("-")[0])))
    return EvalReport(correct / n if n else 0.0, n, correct, preds, ordered, dict(sorted(ranks.items())))


# -- experiments -----------------------------------------------------------------------


@dataclass
class FitResult:
    model: QAModel
    train: TrainResult
    report: EvalReport


def fit(config: TrainConfig, kb: KnowledgeBase, train_samples: Sequence[Sample], dev_samples: Sequence[Sample],
        transe: EmbeddingTable | None = None, transh: EmbeddingTable | None = None) -> FitResult:
    """Build, train with dev-based early stopping, and evaluate the kept state on dev."""
    model = build_model(config, list(train_samples) + list(dev_samples), kb, transe, transh)
    train_preps = [model.prepare(s, kb, training=True) for s in train_samples]
    dev_preps = [model.prepare(s, kb) for s in dev_samples]
    result = train(model, train_preps, dev_preps, config)
    return FitResult(model, result, evaluate(model, dev_preps))


def fold_assignment(n: int, folds: int, seed: int) -> list[np.ndarray]:
    if folds > n:
        raise ConfigError(f"{folds} folds need at least {folds} samples, got {n}")
    perm = np.random.default_rng([seed, 3]).permutation(n)
    return [np.sort(perm[k::folds]) for k in range(folds)]


@dataclass
class CVReport:
    folds: list[dict]
    mean_accuracy: float
    kept: list[int]  # fold indices whose checkpoints are preserved

    def to_json(self) -> dict:
        return asdict(self)


def cross_validate(pool: Sequence[Sample], kb: KnowledgeBase, config: TrainConfig,
                   transe: EmbeddingTable | None = None, transh: EmbeddingTable | None = None,
                   keep: int = 3, out_dir: str | Path | None = None) -> CVReport:
    """k-fold CV over the pooled data; each held-out fold drives early stopping and is scored."""
    folds = config.cv_folds or 9
    parts = fold_assignment(len(pool), folds, config.seed)
    rows, models = [], []
    for k, held in enumerate(parts):
        held_set = set(held.tolist())
        train_s = [s for i, s in enumerate(pool) if i not in held_set]
        dev_s = [pool[i] for i in held]
        res = fit(replace(config, cv_folds=None), kb, train_s, dev_s, transe, transh)
        rows.append({"fold": k, "n": res.report.n, "accuracy": res.report.accuracy,
                     "best_epoch": res.train.best_epoch})
        models.append(res.model)
    kept = sorted(range(folds), key=lambda k: (-rows[k]["accuracy"], k))[:keep]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for k in kept:
            save_checkpoint(models[k], out / f"fold{k}.ckpt")
    mean = float(np.mean([r["accuracy"] for r in rows]))
    return CVReport(rows, mean, kept)


def hop_sweep(config: TrainConfig, kb: KnowledgeBase, train_samples, dev_samples, hops: Sequence[int] = (3, 4, 5, 6),
              transe=None, transh=None) -> list[dict]:
    rows = []
    for L in hops:
        if L < 1:
            raise ConfigError(f"hop count must be >= 1, got {L}")
        res = fit(replace(config, hops=L), kb, train_samples, dev_samples, transe, transh)
        rows.append({"hops": L, "dev_accuracy": res.report.accuracy, "best_epoch": res.train.best_epoch})
    return rows


def ablate(config: TrainConfig, kb: KnowledgeBase, train_samples, dev_samples,
           flags: Sequence[str] = ABLATION_FLAGS, transe=None, transh=None) -> list[dict]:
    """Full model first, then one row per flag with its accuracy change."""
    for f in flags:
        if f not in ABLATION_FLAGS:
            raise ConfigError(f"unknown ablation flag {f!r}")
    full = fit(config, kb, train_samples, dev_samples, transe, transh).report.accuracy
    rows = [{"arm": "full", "dev_accuracy": full, "delta": 0.0}]
    for f in flags:
        acc = fit(config.with_flags(**{f: True}), kb, train_samples, dev_samples, transe, transh).report.accuracy
        rows.append({"arm": f, "dev_accuracy": acc, "delta": acc - full})
    return rows


def format_table(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    """Aligned plain-text table; floats get 4 decimals."""
    if not rows:
        return ""
    columns = list(columns or rows[0].keys())
    cell = lambda v: f"{v:.4f}" if isinstance(v, float) else str(v)
    body = [[cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(columns)]
    line = lambda vals: "  ".join(v.ljust(w) for v, w in zip(vals, widths)).rstrip()
    return "\n".join([line(columns), line(["-" * w for w in widths])] + [line(b) for b in body]) + "\n"


# -- checkpoints ---------------------------------------------------------------------

MAGIC = b"MEDKGCK1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: QAModel, path: str | Path) -> None:
    """Header (magic, JSON length, JSON) then raw little-endian float64 buffers, sorted by name."""
    state = model.state()
    names = sorted(state)
    knowledge = model.reader.knowledge
    meta = {
        "version": 1,
        "config": asdict(model.config),
        "vocab_digest": model.vocab.digest(),
        "vocab": model.vocab.tokens,
        "knowledge_entities": ([[e.kind.value, e.accession] for e in knowledge.index]
                               if knowledge is not None else []),
        "tensors": [{"name": n, "shape": list(state[n].shape)} for n in names],
    }
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for n in names:
            fh.write(np.ascontiguousarray(state[n], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path, vocab: Vocabulary | None = None,
                    expect: TrainConfig | None = None) -> QAModel:
    """Rebuild the model; refuses a vocabulary or dimension mismatch."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    meta = json.loads(raw[16:16 + hlen])
    if meta.get("version") != 1:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    config = TrainConfig.from_dict(meta["config"])
    if expect is not None:
        diffs = [f for f in ("hidden", "word_dim", "knowledge_dim", "heads", "no_knowledge_fusion",
                             "no_graph_reasoning", "merge_edge_types")
                 if getattr(expect, f) != getattr(config, f)]
        if diffs:
            raise CheckpointError(f"{path}: config mismatch in {diffs}")
    ckpt_vocab = Vocabulary(meta["vocab"], config.word_dim)
    if ckpt_vocab.digest() != meta["vocab_digest"]:
        raise CheckpointError(f"{path}: vocabulary hash does not match its own token list")
    if vocab is not None and vocab.digest() != meta["vocab_digest"]:
        raise CheckpointError(f"{path}: vocabulary hash mismatch")
    state, offset = {}, 16 + hlen
    for t in meta["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated at tensor {t['name']}")
        state[t["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(t["shape"]).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    knowledge = None
    if not config.no_knowledge_fusion:
        knowledge = KnowledgeLookup(None, None, config.knowledge_dim, config.seed, config.finetune_knowledge)
        for kind, acc in meta["knowledge_entities"]:
            knowledge.index[EntityId(EntityKind(kind), acc)] = len(knowledge.index)
        n_ent = len(knowledge.index)
        make = (lambda a, nm: Parameter(a, name=nm)) if config.finetune_knowledge else (lambda a, nm: T.tensor(a))
        knowledge.matrix_e = make(state.get("knowledge.transe", np.zeros((n_ent, config.knowledge_dim))),
                                  "knowledge.transe")
        knowledge.matrix_h = make(state.get("knowledge.transh", np.zeros((n_ent, config.knowledge_dim))),
                                  "knowledge.transh")
    model = QAModel(config, ckpt_vocab, state["words"], knowledge)
    model.load_state(state)
    return model
