"""ATOMIC-style commonsense knowledge graph: interned entities, relation registry, triples.

The on-disk format is a headerless UTF-8 TSV with one ``head<TAB>relation<TAB>tail``
triple per line.  Blank lines are skipped.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

from kgcg.text import normalize

SELF = "SELF"
SELF_ID = 0

# Sorted so registry ids are stable regardless of how ATOMIC lists them.
ATOMIC_RELATIONS = (
    "oEffect",
    "oReact",
    "oWant",
    "xAttr",
    "xEffect",
    "xIntent",
    "xNeed",
    "xReact",
    "xWant",
)


class KGFormatError(ValueError):
    """Raised for malformed knowledge-graph TSV input."""


class Relation(NamedTuple):
    id: int
    label: str


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


class RelationRegistry:
    """Dense relation ids with ``SELF`` pinned at id 0."""

    def __init__(self, labels: Iterable[str] = ATOMIC_RELATIONS):
        self._labels: list[str] = [SELF]
        self._ids: dict[str, int] = {SELF: SELF_ID}
        for label in labels:
            self.register(label)

    def register(self, label: str) -> int:
        label = label.strip()
        if not label:
            raise ValueError("relation label must be non-empty")
        rid = self._ids.get(label)
        if rid is None:
            rid = len(self._labels)
            self._labels.append(label)
            self._ids[label] = rid
        return rid

    def id(self, label: str) -> int:
        return self._ids[label]

    def get(self, label: str) -> int | None:
        return self._ids.get(label)

    def label(self, rid: int) -> str:
        return self._labels[rid]

    def __len__(self) -> int:
        return len(self._labels)

    def __contains__(self, label: str) -> bool:
        return label in self._ids

    def __iter__(self):
        return (Relation(i, lab) for i, lab in enumerate(self._labels))

    @property
    def labels(self) -> list[str]:
        return list(self._labels)


@dataclass(frozen=True)
class GraphStats:
    entity_count: int
    relation_count: int
    triple_count: int
    max_out_degree: int

    def as_dict(self) -> dict:
        return {
            "entity_count": self.entity_count,
            "relation_count": self.relation_count,
            "triple_count": self.triple_count,
            "max_out_degree": self.max_out_degree,
        }


class KnowledgeGraph:
    def __init__(self, relations: RelationRegistry | None = None):
        self.relations = relations if relations is not None else RelationRegistry()
        self.entities: list[str] = []
        self._entity_ids: dict[str, int] = {}
        self.triples: list[Triple] = []
        self._triple_ids: dict[Triple, int] = {}
        # entity id -> sorted list of (relation id, tail id)
        self.out_index: dict[int, list[tuple[int, int]]] = {}

    def intern(self, surface: str) -> int:
        key = normalize(surface)
        if not key:
            raise ValueError("entity string must be non-empty")
        eid = self._entity_ids.get(key)
        if eid is None:
            eid = len(self.entities)
            self.entities.append(key)
            self._entity_ids[key] = eid
        return eid

    def entity_id(self, surface: str) -> int | None:
        return self._entity_ids.get(normalize(surface))

    def add_triple(self, head: str, relation_label: str, tail: str) -> int:
        """Insert a triple, returning its id.  Re-adding an existing triple is a no-op."""
        for name, value in (("head", head), ("relation", relation_label), ("tail", tail)):
            if not value or not value.strip():
                raise ValueError(f"{name} must be a non-empty string")
        h = self.intern(head)
        r = self.relations.register(relation_label)
        t = self.intern(tail)
        triple = Triple(h, r, t)
        tid = self._triple_ids.get(triple)
        if tid is not None:
            return tid
        tid = len(self.triples)
        self.triples.append(triple)
        self._triple_ids[triple] = tid
        bisect.insort(self.out_index.setdefault(h, []), (r, t))
        return tid

    def neighbors(self, entity: str, max_fanout: int | None = None) -> list[tuple[int, int]]:
        if max_fanout is not None and max_fanout < 0:
            raise ValueError("max_fanout must be >= 0")
        eid = self.entity_id(entity)
        if eid is None:
            return []
        return self.neighbors_of_id(eid, max_fanout)

    def neighbors_of_id(self, eid: int, max_fanout: int | None = None) -> list[tuple[int, int]]:
        edges = self.out_index.get(eid, [])
        return list(edges if max_fanout is None else edges[:max_fanout])

    def stats(self) -> GraphStats:
        # SELF plus every relation that backs at least one triple
        used = {t.relation for t in self.triples} | {SELF_ID}
        degree = max((len(v) for v in self.out_index.values()), default=0)
        return GraphStats(len(self.entities), len(used), len(self.triples), degree)

    def labeled_index(self) -> dict[str, list[tuple[str, str]]]:
        """Id-free view of ``out_index``; stable across reloads that renumber entities."""
        return {
            self.entities[h]: [(self.relations.label(r), self.entities[t]) for r, t in edges]
            for h, edges in self.out_index.items()
        }

    def dump_tsv(self, path: str | Path) -> None:
        lines = [
            f"{self.entities[t.head]}\t{self.relations.label(t.relation)}\t{self.entities[t.tail]}\n"
            for t in sorted(self.triples)
        ]
        Path(path).write_text("".join(lines), encoding="utf-8")

    def __len__(self) -> int:
        return len(self.triples)


def load_tsv(path: str | Path, relations: RelationRegistry | None = None) -> KnowledgeGraph:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise KGFormatError(f"cannot read knowledge graph {path}: {exc}") from exc
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise KGFormatError(f"{path}: not valid UTF-8 ({exc})") from exc

    graph = KnowledgeGraph(relations)
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise KGFormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
        if any(not f.strip() for f in fields):
            raise KGFormatError(f"{path}:{lineno}: empty field")
        graph.add_triple(*fields)
    return graph
