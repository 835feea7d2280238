"""Drug-protein action triplets and protein-protein pathway pairs.

Two mapping functions drive graph construction: ``targets_of(drug)`` returns the
proteins a drug acts on, ``interactors_of(protein)`` the pathway neighbours of a
protein.  Accessions are opaque strings tagged with a kind.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

log = logging.getLogger(__name__)


class EntityKind(str, Enum):
    DRUG = "drug"
    PROTEIN = "protein"


@dataclass(frozen=True, order=True)
class EntityId:
    kind: EntityKind
    accession: str

    def __post_init__(self):
        if not self.accession:
            raise ValueError("accession must be non-empty")

    def __str__(self) -> str:
        return self.accession


def drug(accession: str) -> EntityId:
    return EntityId(EntityKind.DRUG, accession)


def protein(accession: str) -> EntityId:
    return EntityId(EntityKind.PROTEIN, accession)


@dataclass(frozen=True, order=True)
class Triplet:
    protein: EntityId
    action: str
    drug: EntityId

    def __post_init__(self):
        if self.protein.kind is not EntityKind.PROTEIN or self.drug.kind is not EntityKind.DRUG:
            raise KindError(f"triplet endpoints have the wrong kinds: {self}")


@dataclass(frozen=True, order=True)
class PathwayPair:
    source: EntityId
    target: EntityId

    def __post_init__(self):
        if self.source.kind is not EntityKind.PROTEIN or self.target.kind is not EntityKind.PROTEIN:
            raise KindError("pathway endpoints must be proteins")
        if self.source == self.target:
            raise ValueError(f"self-loop pathway {self.source}")


class KindError(TypeError):
    pass


class MalformedRowError(ValueError):
    def __init__(self, path, lineno: int, line: str, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}: {line!r}")
        self.lineno = lineno


@dataclass
class LoadReport:
    rows: int = 0
    kept: int = 0
    duplicates: int = 0
    skipped: int = 0


@dataclass
class KnowledgeBase:
    triplets: set[Triplet] = field(default_factory=set)
    pathways: set[PathwayPair] = field(default_factory=set)

    def __post_init__(self):
        self._reindex()

    def _reindex(self) -> None:
        targets: dict[EntityId, set[EntityId]] = defaultdict(set)
        for t in self.triplets:
            targets[t.drug].add(t.protein)
        succ: dict[EntityId, set[EntityId]] = defaultdict(set)
        nbrs: dict[EntityId, set[EntityId]] = defaultdict(set)
        for pw in self.pathways:
            succ[pw.source].add(pw.target)
            nbrs[pw.source].add(pw.target)
            nbrs[pw.target].add(pw.source)
        self._targets = dict(targets)
        self._succ = dict(succ)
        self._nbrs = dict(nbrs)

    def merge(self, other: "KnowledgeBase") -> "KnowledgeBase":
        return KnowledgeBase(self.triplets | other.triplets, self.pathways | other.pathways)

    # -- queries -----------------------------------------------------------

    def targets_of(self, d: EntityId) -> frozenset[EntityId]:
        """F(d): every protein appearing with ``d`` in some triplet."""
        if d.kind is not EntityKind.DRUG:
            raise KindError(f"targets_of expects a drug, got {d.kind.value} {d.accession}")
        return frozenset(self._targets.get(d, ()))

    def interactors_of(self, p: EntityId, directed: bool = False) -> frozenset[EntityId]:
        """G(p): pathway neighbours; ``directed`` keeps only successors of ``p``."""
        if p.kind is not EntityKind.PROTEIN:
            raise KindError(f"interactors_of expects a protein, got {p.kind.value} {p.accession}")
        table = self._succ if directed else self._nbrs
        return frozenset(table.get(p, ()))

    def has_pathway(self, a: EntityId, b: EntityId) -> bool:
        return b in self._succ.get(a, ())

    @property
    def drugs(self) -> set[EntityId]:
        return {t.drug for t in self.triplets}

    @property
    def proteins(self) -> set[EntityId]:
        out = {t.protein for t in self.triplets}
        for pw in self.pathways:
            out.add(pw.source)
            out.add(pw.target)
        return out

    @property
    def actions(self) -> set[str]:
        return {t.action for t in self.triplets}

    def catalog(self) -> dict[str, EntityId]:
        """Accession -> EntityId for every known entity."""
        return {e.accession: e for e in self.drugs | self.proteins}

    # -- files -------------------------------------------------------------

    @classmethod
    def load(cls, triplets_path: str | Path, pathways_path: str | Path | None = None) -> "KnowledgeBase":
        kb, _ = load_triplets(triplets_path)
        if pathways_path is not None:
            pw, _ = load_pathways(pathways_path)
            kb = kb.merge(pw)
        return kb

    def save(self, triplets_path: str | Path, pathways_path: str | Path | None = None) -> None:
        save_triplets(self.triplets, triplets_path)
        if pathways_path is not None:
            save_pathways(self.pathways, pathways_path)


def _rows(path: str | Path) -> Iterable[tuple[int, str]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield lineno, line


def load_triplets(path: str | Path) -> tuple[KnowledgeBase, LoadReport]:
    """Read ``protein<TAB>action<TAB>drug`` rows; duplicates are counted and dropped."""
    report = LoadReport()
    seen: set[Triplet] = set()
    for lineno, line in _rows(path):
        cols = line.split("\t")
        if len(cols) != 3 or not all(c.strip() for c in cols):
            raise MalformedRowError(path, lineno, line, "expected 3 tab-separated columns")
        report.rows += 1
        t = Triplet(protein(cols[0].strip()), cols[1].strip(), drug(cols[2].strip()))
        if t in seen:
            report.duplicates += 1
        seen.add(t)
    report.kept = len(seen)
    return KnowledgeBase(triplets=seen), report


def load_pathways(path: str | Path) -> tuple[KnowledgeBase, LoadReport]:
    """Read ``from<TAB>to`` rows as directed pairs; self-loops are skipped with a warning."""
    report = LoadReport()
    seen: set[PathwayPair] = set()
    for lineno, line in _rows(path):
        cols = line.split("\t")
        if len(cols) != 2 or not all(c.strip() for c in cols):
            raise MalformedRowError(path, lineno, line, "expected 2 tab-separated columns")
        report.rows += 1
        a, b = cols[0].strip(), cols[1].strip()
        if a == b:
            log.warning("%s:%d: skipping self-loop pathway %s", path, lineno, a)
            report.skipped += 1
            continue
        pair = PathwayPair(protein(a), protein(b))
        if pair in seen:
            report.duplicates += 1
        seen.add(pair)
    report.kept = len(seen)
    return KnowledgeBase(pathways=seen), report


def save_triplets(triplets: Iterable[Triplet], path: str | Path) -> None:
    rows = sorted({(t.protein.accession, t.action, t.drug.accession) for t in triplets})
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p, a, d in rows:
            fh.write(f"{p}\t{a}\t{d}\n")


def save_pathways(pathways: Iterable[PathwayPair], path: str | Path) -> None:
    rows = sorted({(pw.source.accession, pw.target.accession) for pw in pathways})
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for a, b in rows:
            fh.write(f"{a}\t{b}\n")
