"""Question instances: loading, tokenization, vocabularies and a synthetic generator.

Samples follow the QAngaroo layout: ``{"id", "query": "interacts_with <drug>",
"candidates": [...], "supports": [...], "answer"?}``.
"""
from __future__ import annotations

import hashlib
import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .kb import EntityId, KnowledgeBase, PathwayPair, Triplet, drug, protein

log = logging.getLogger(__name__)

RELATION = "interacts_with"
PAD, UNK = "<pad>", "<unk>"


class SampleValidationError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    id: str
    subject: EntityId
    candidates: tuple[EntityId, ...]
    supports: tuple[str, ...]
    answer: EntityId | None = None
    relation: str = RELATION

    def __post_init__(self):
        if self.relation != RELATION:
            raise SampleValidationError(f"sample {self.id}: unknown relation {self.relation!r}")
        if len(self.candidates) < 2:
            raise SampleValidationError(f"sample {self.id}: needs at least 2 candidates")
        if self.answer is not None and self.answer not in self.candidates:
            raise SampleValidationError(f"sample {self.id}: answer {self.answer} not among candidates")

    @property
    def query(self) -> str:
        return f"{self.relation} {self.subject.accession}"

    @property
    def answer_index(self) -> int | None:
        return None if self.answer is None else self.candidates.index(self.answer)

    def to_json(self) -> dict:
        out = {
            "id": self.id,
            "query": self.query,
            "candidates": [c.accession for c in self.candidates],
            "supports": list(self.supports),
        }
        if self.answer is not None:
            out["answer"] = self.answer.accession
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "Sample":
        sid = str(obj.get("id", "?"))
        try:
            query, candidates, supports = obj["query"], obj["candidates"], obj["supports"]
        except KeyError as exc:
            raise SampleValidationError(f"sample {sid}: missing field {exc.args[0]!r}") from None
        parts = query.split()
        if len(parts) != 2:
            raise SampleValidationError(f"sample {sid}: query must be '<relation> <drug>', got {query!r}")
        relation, subject = parts
        answer = obj.get("answer")
        return cls(
            id=sid,
            subject=drug(subject),
            candidates=tuple(drug(c) for c in candidates),
            supports=tuple(supports),
            answer=None if answer is None else drug(answer),
            relation=relation,
        )


def load_samples(path: str | Path) -> list[Sample]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, list):
        raise SampleValidationError(f"{path}: expected a JSON array of samples")
    return [Sample.from_json(obj) for obj in data]


def save_samples(samples: Iterable[Sample], path: str | Path) -> None:
    payload = [s.to_json() for s in samples]
    Path(path).write_text(json.dumps(payload, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")


# -- tokenization ------------------------------------------------------------

_EDGE_PUNCT = ".,;:!?)]}\"'"
_LEAD_PUNCT = "([{\"'"


@dataclass(frozen=True)
class TokenizedDoc:
    tokens: tuple[str, ...]
    entity_spans: tuple[tuple[int, int, EntityId], ...] = ()


def split_words(text: str) -> list[str]:
    """Whitespace split with leading brackets and trailing punctuation detached."""
    out: list[str] = []
    for chunk in text.split():
        lead = []
        while len(chunk) > 1 and chunk[0] in _LEAD_PUNCT:
            lead.append(chunk[0])
            chunk = chunk[1:]
        trail = []
        while len(chunk) > 1 and chunk[-1] in _EDGE_PUNCT:
            trail.append(chunk[-1])
            chunk = chunk[:-1]
        out.extend(lead)
        out.append(chunk)
        out.extend(reversed(trail))
    return out


def tokenize(doc: str, catalog: Mapping[str, EntityId]) -> TokenizedDoc:
    """Split ``doc`` and record every exact (case-sensitive) accession as a 1-token span."""
    tokens = split_words(doc)
    spans = tuple((i, i + 1, catalog[tok]) for i, tok in enumerate(tokens) if tok in catalog)
    return TokenizedDoc(tuple(tokens), spans)


def sample_catalog(sample: Sample, kb: KnowledgeBase | None = None) -> dict[str, EntityId]:
    """Entities recognisable in a sample's supports: the KB plus the sample's own drugs."""
    cat = dict(kb.catalog()) if kb is not None else {}
    for d in (sample.subject, *sample.candidates):
        cat.setdefault(d.accession, d)
    return cat


def question_tokens(sample: Sample) -> list[str]:
    return [sample.relation, sample.subject.accession]


# -- vocabulary --------------------------------------------------------------


@dataclass
class Vocabulary:
    tokens: list[str] = field(default_factory=lambda: [PAD, UNK])
    dim: int = 64

    def __post_init__(self):
        if self.tokens[:2] != [PAD, UNK]:
            raise ValueError("vocabulary must start with PAD, UNK")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def lookup(self, token: str) -> int:
        return self.index.get(token, 1)

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.lookup(t) for t in tokens], dtype=np.int64)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.dim).encode())
        for t in self.tokens:
            h.update(t.encode("utf-8") + b"\x00")
        return h.hexdigest()


def build_vocab(samples: Iterable[Sample], dim: int, rng: np.random.Generator,
                extra_tokens: Iterable[str] = ()) -> tuple[Vocabulary, np.ndarray]:
    """Index every corpus token (plus ``extra_tokens``) and draw N(0, 0.1^2) rows."""
    if dim < 1:
        raise ValueError("embedding dim must be >= 1")
    seen: set[str] = set(extra_tokens)
    for s in samples:
        seen.update(question_tokens(s))
        seen.update(c.accession for c in s.candidates)
        for doc in s.supports:
            seen.update(split_words(doc))
    seen -= {PAD, UNK}
    vocab = Vocabulary([PAD, UNK] + sorted(seen), dim)
    matrix = rng.normal(0.0, 0.1, size=(len(vocab), dim))
    matrix[0] = 0.0
    return vocab, matrix


# -- synthetic corpora -------------------------------------------------------

ACTIONS = (
    "inhibitor", "agonist", "antagonist", "blocker", "activator", "inducer", "substrate",
    "binder", "modulator", "cofactor", "ligand", "potentiator", "stimulator", "suppressor",
    "chaperone", "cleavage", "opener", "partial agonist", "inverse agonist", "antibody",
    "positive allosteric modulator", "negative modulator", "carrier", "transporter",
)

_DP_TEMPLATES = (
    "{d} is a {a} of {p} .",
    "{d} acts as {a} on {p} .",
    "studies show {d} is a {a} of the protein {p} .",
)
_PP_TEMPLATES = (
    "{p} interacts with {q} .",
    "{p} and {q} share a signalling pathway .",
    "the pathway links {p} to {q} .",
)


@dataclass
class SynthSpec:
    n_drugs: int = 80
    n_proteins: int = 160
    n_clusters: int = 8
    chain_length: tuple[int, int] = (2, 3)
    n_samples: int = 250
    docs_per_sample: tuple[int, int] = (3, 12)
    candidates: int = 9
    distractor_rate: float = 0.3
    targets_per_drug: tuple[int, int] = (1, 3)
    pathway_density: float = 1.5
    n_actions: int = 8
    seed: int = 0

    def __post_init__(self):
        self.chain_length = tuple(self.chain_length)
        self.docs_per_sample = tuple(self.docs_per_sample)
        self.targets_per_drug = tuple(self.targets_per_drug)

    def validate(self) -> None:
        lo, hi = self.chain_length
        if lo < 2 or hi < lo:
            raise ValueError(f"chain length range must satisfy 2 <= lo <= hi, got {self.chain_length}")
        if self.candidates < 2:
            raise ValueError("need at least 2 candidates per sample")
        if not 0.0 <= self.distractor_rate < 1.0:
            raise ValueError("distractor_rate must be in [0, 1)")
        if self.n_clusters < 2:
            raise ValueError("need at least 2 clusters so unreachable candidates exist")
        per_cluster_drugs = self.n_drugs // self.n_clusters
        if per_cluster_drugs < 2:
            raise ValueError("each cluster needs at least 2 drugs (subject and answer)")
        if self.n_drugs - (self.n_drugs + self.n_clusters - 1) // self.n_clusters < self.candidates - 1:
            raise ValueError(f"not enough drugs outside one cluster for {self.candidates} candidates")
        if self.n_proteins // self.n_clusters < hi - 1:
            raise ValueError("clusters too small for the requested chain length")
        if not 1 <= self.n_actions <= len(ACTIONS):
            raise ValueError(f"n_actions must be in 1..{len(ACTIONS)}")
        if self.docs_per_sample[0] < 1 or self.docs_per_sample[1] < self.docs_per_sample[0]:
            raise ValueError("docs_per_sample must be a positive range")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class GroundTruth:
    id: str
    subject: str
    answer: str
    chain: list[str]

    def to_json(self) -> dict:
        return asdict(self)


class InfeasibleSpecError(ValueError):
    pass


def _build_kb(spec: SynthSpec, rng: np.random.Generator):
    actions = ACTIONS[: spec.n_actions]
    drugs = [drug(f"DB{i:05d}") for i in range(spec.n_drugs)]
    proteins = [protein(f"P{i:05d}") for i in range(spec.n_proteins)]
    d_cluster = np.arange(spec.n_drugs) % spec.n_clusters
    p_cluster = np.arange(spec.n_proteins) % spec.n_clusters
    triplets: set[Triplet] = set()
    pathways: set[PathwayPair] = set()
    for c in range(spec.n_clusters):
        members = [proteins[i] for i in np.flatnonzero(p_cluster == c)]
        order = rng.permutation(len(members))
        # random spanning tree keeps every cluster connected
        for k in range(1, len(order)):
            a = members[order[k]]
            b = members[order[rng.integers(k)]]
            pathways.add(PathwayPair(a, b) if rng.random() < 0.5 else PathwayPair(b, a))
        extra = int(round((spec.pathway_density - 1.0) * max(len(members) - 1, 0)))
        for _ in range(max(extra, 0)):
            i, j = rng.choice(len(members), size=2, replace=False)
            if not (PathwayPair(members[j], members[i]) in pathways):
                pathways.add(PathwayPair(members[i], members[j]))
        for di in np.flatnonzero(d_cluster == c):
            n_t = int(rng.integers(spec.targets_per_drug[0], spec.targets_per_drug[1] + 1))
            for pi in rng.choice(len(members), size=min(n_t, len(members)), replace=False):
                triplets.add(Triplet(members[pi], actions[rng.integers(len(actions))], drugs[di]))
    return KnowledgeBase(triplets, pathways), drugs, d_cluster


def reachable_drugs(kb: KnowledgeBase, subject: EntityId) -> set[EntityId]:
    """Drugs whose targets connect to the subject's targets through undirected pathways (BFS)."""
    frontier = deque(kb.targets_of(subject))
    seen = set(frontier)
    while frontier:
        p = frontier.popleft()
        for q in kb.interactors_of(p):
            if q not in seen:
                seen.add(q)
                frontier.append(q)
    return {d for d in kb.drugs if d != subject and kb.targets_of(d) & seen}


def _sentence_dp(t: Triplet, rng) -> str:
    return _DP_TEMPLATES[rng.integers(len(_DP_TEMPLATES))].format(d=t.drug.accession, a=t.action, p=t.protein.accession)


def _sentence_pp(a: EntityId, b: EntityId, rng) -> str:
    return _PP_TEMPLATES[rng.integers(len(_PP_TEMPLATES))].format(p=a.accession, q=b.accession)


def synth_generate(spec: SynthSpec, rng: np.random.Generator | None = None
                   ) -> tuple[KnowledgeBase, list[Sample], list[GroundTruth]]:
    """Random clustered KB plus samples whose answers are reachable along a planted chain.

    Non-answer candidates come from other clusters, so no pathway connects them to
    the subject; every sample is re-checked by BFS before it is returned.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    kb, drugs, d_cluster = _build_kb(spec, rng)
    by_pair: dict[tuple[EntityId, EntityId], Triplet] = {}
    for t in sorted(kb.triplets):
        by_pair.setdefault((t.protein, t.drug), t)
    targeted_by: dict[EntityId, list[EntityId]] = {}
    for t in sorted(kb.triplets):
        targeted_by.setdefault(t.protein, [])
        if t.drug not in targeted_by[t.protein]:
            targeted_by[t.protein].append(t.drug)
    all_facts = sorted(kb.triplets)
    all_pathways = sorted(kb.pathways)

    samples: list[Sample] = []
    truths: list[GroundTruth] = []
    attempts = 0
    while len(samples) < spec.n_samples:
        attempts += 1
        if attempts > 50 * spec.n_samples + 1000:
            raise InfeasibleSpecError("could not plant enough chains; enlarge the KB or shorten chains")
        n_links = int(rng.integers(spec.chain_length[0], spec.chain_length[1] + 1))
        s_idx = int(rng.integers(len(drugs)))
        subject = drugs[s_idx]
        start = sorted(kb.targets_of(subject))
        if not start:
            continue
        path = [start[rng.integers(len(start))]]
        while len(path) < n_links - 1:
            nxt = sorted(kb.interactors_of(path[-1]) - set(path))
            if not nxt:
                break
            path.append(nxt[rng.integers(len(nxt))])
        if len(path) != n_links - 1:
            continue
        enders = [d for d in targeted_by.get(path[-1], []) if d != subject]
        if not enders:
            continue
        answer = enders[rng.integers(len(enders))]

        reach = reachable_drugs(kb, subject)
        pool = [d for i, d in enumerate(drugs) if d_cluster[i] != d_cluster[s_idx] and d not in reach]
        if len(pool) < spec.candidates - 1:
            raise InfeasibleSpecError("not enough unreachable drugs for the candidate set")
        others = [pool[i] for i in rng.choice(len(pool), size=spec.candidates - 1, replace=False)]
        candidates = others + [answer]
        candidates = [candidates[i] for i in rng.permutation(len(candidates))]

        chain_sentences = [_sentence_dp(by_pair[(path[0], subject)], rng)]
        for a, b in zip(path, path[1:]):
            pair = PathwayPair(a, b) if kb.has_pathway(a, b) else PathwayPair(b, a)
            chain_sentences.append(_sentence_pp(pair.source, pair.target, rng))
        last = by_pair[(path[-1], answer)]
        chain_sentences.append(_sentence_dp(last, rng))

        n_distract = int(round(spec.distractor_rate / (1.0 - spec.distractor_rate) * len(chain_sentences)))
        distract: list[str] = []
        on_chain = {(path[0], subject), (path[-1], answer)}
        other_facts = [t for o in others for t in all_facts if t.drug == o]
        for k in range(n_distract):
            if k % 2 == 0 and other_facts:
                t = other_facts[rng.integers(len(other_facts))]
                distract.append(_sentence_dp(t, rng))
            elif rng.random() < 0.5:
                t = all_facts[rng.integers(len(all_facts))]
                if (t.protein, t.drug) in on_chain:
                    continue
                distract.append(_sentence_dp(t, rng))
            else:
                pw = all_pathways[rng.integers(len(all_pathways))]
                if pw.source in path and pw.target in path:
                    continue
                distract.append(_sentence_pp(pw.source, pw.target, rng))

        sentences = chain_sentences + distract
        sentences = [sentences[i] for i in rng.permutation(len(sentences))]
        lo, hi = spec.docs_per_sample
        n_docs = int(min(max(rng.integers(lo, hi + 1), 1), len(sentences)))
        cuts = sorted(rng.choice(np.arange(1, len(sentences)), size=n_docs - 1, replace=False)) if n_docs > 1 else []
        docs = [" ".join(chunk) for chunk in np.split(np.array(sentences, dtype=object), cuts)]

        # oracle re-check: the answer is reachable, no other candidate is
        if answer not in reach or any(c in reach for c in others):
            continue
        sid = f"synth_{len(samples):05d}"
        samples.append(Sample(sid, subject, tuple(candidates), tuple(docs), answer))
        truths.append(GroundTruth(sid, subject.accession, answer.accession,
                                  [subject.accession] + [p.accession for p in path] + [answer.accession]))
    return kb, samples, truths


def write_synthetic(out_dir: str | Path, kb: KnowledgeBase, samples: Sequence[Sample],
                    truths: Sequence[GroundTruth]) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "samples": out / "samples.json",
        "triplets": out / "triplets.tsv",
        "pathways": out / "pathways.tsv",
        "ground_truth": out / "ground_truth.json",
    }
    save_samples(samples, paths["samples"])
    kb.save(paths["triplets"], paths["pathways"])
    paths["ground_truth"].write_text(json.dumps([t.to_json() for t in truths], indent=1) + "\n", encoding="utf-8")
    return paths
