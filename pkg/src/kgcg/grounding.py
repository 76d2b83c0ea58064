"""Concept-to-entity matching and extraction of the per-example concept subgraph."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from kgcg.kg_store import SELF_ID, KnowledgeGraph
from kgcg.text import normalize

__all__ = [
    "ConceptSet",
    "ConceptSubgraph",
    "Node",
    "Origin",
    "build_subgraph",
    "levenshtein",
    "match_entity",
    "normalize",
]


class Origin(str, Enum):
    CONCEPT = "CONCEPT"
    RETRIEVED = "RETRIEVED"


@dataclass(frozen=True)
class ConceptSet:
    concepts: tuple[str, ...]

    def __init__(self, concepts: Sequence[str]):
        normed = tuple(normalize(c) for c in concepts)
        if not normed:
            raise ValueError("concept set must be non-empty")
        if any(not c for c in normed):
            raise ValueError("concepts must be non-empty after normalization")
        if len(set(normed)) != len(normed):
            raise ValueError(f"duplicate concepts after normalization: {list(normed)}")
        object.__setattr__(self, "concepts", normed)

    def __len__(self) -> int:
        return len(self.concepts)

    def __iter__(self):
        return iter(self.concepts)

    def __getitem__(self, i):
        return self.concepts[i]


@dataclass(frozen=True)
class Node:
    surface: str
    origin: Origin
    concept_index: int | None = None


@dataclass
class ConceptSubgraph:
    nodes: list[Node]
    edges: list[tuple[int, int, int]]  # (src node, relation id, dst node)
    node_budget: int
    entity_ids: list[tuple[int, ...]] = field(default_factory=list)

    @property
    def concept_nodes(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.origin is Origin.CONCEPT]

    def strip_to_self_loops(self) -> "ConceptSubgraph":
        """Graph-blind copy: same nodes, only SELF edges."""
        edges = [e for e in self.edges if e[1] == SELF_ID and e[0] == e[2]]
        return ConceptSubgraph(list(self.nodes), edges, self.node_budget, list(self.entity_ids))

    def to_json(self, graph: KnowledgeGraph | None = None) -> str:
        def rel(r):
            return graph.relations.label(r) if graph is not None else r

        payload = {
            "node_budget": self.node_budget,
            "nodes": [
                {"surface": n.surface, "origin": n.origin.value, "concept_index": n.concept_index}
                for n in self.nodes
            ],
            "edges": [[s, rel(r), d] for s, r, d in self.edges],
        }
        return json.dumps(payload, ensure_ascii=False, indent=2)


def levenshtein(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def match_entity(concept: str, graph: KnowledgeGraph, max_candidates: int) -> list[int]:
    """Tiered lookup: exact, then substring, then edit distance <= 1.

    A later tier is consulted only when every earlier tier came back empty.
    """
    if max_candidates <= 0:
        return []
    exact = graph.entity_id(concept)
    if exact is not None:
        return [exact]
    hits = [i for i, e in enumerate(graph.entities) if concept in e]
    if not hits:
        n = len(concept)
        hits = [
            i
            for i, e in enumerate(graph.entities)
            if abs(len(e) - n) <= 1 and levenshtein(concept, e) <= 1
        ]
    return hits[:max_candidates]


def build_subgraph(
    cs: ConceptSet,
    graph: KnowledgeGraph,
    node_budget: int,
    fanout: int,
    max_candidates: int = 4,
) -> ConceptSubgraph:
    if node_budget < len(cs):
        raise ValueError(f"node_budget {node_budget} is smaller than the concept set ({len(cs)})")
    if fanout < 0:
        raise ValueError("fanout must be >= 0")

    matched = [tuple(match_entity(c, graph, max_candidates)) for c in cs]
    nodes = [Node(c, Origin.CONCEPT, i) for i, c in enumerate(cs)]
    entity_ids: list[tuple[int, ...]] = list(matched)
    edges: list[tuple[int, int, int]] = []

    # inter-concept: direct triples between matched entities of two different concepts
    owner: dict[int, list[int]] = {}
    for i, ents in enumerate(matched):
        for e in ents:
            owner.setdefault(e, []).append(i)
    for i, ents in enumerate(matched):
        found = set()
        for e in ents:
            for r, t in graph.neighbors_of_id(e):
                for j in owner.get(t, ()):
                    if j != i:
                        found.add((i, r, j))
        edges.extend(sorted(found))

    # intra-concept: round-robin expansion over concepts, one neighbor per concept per round
    concept_entities = set(owner)
    candidates = []
    for ents in matched:
        merged = sorted({nb for e in ents for nb in graph.neighbors_of_id(e)})
        candidates.append([(r, t) for r, t in merged if t not in concept_entities])
    retrieved: dict[int, int] = {}
    for rnd in range(fanout):
        for i, cands in enumerate(candidates):
            if rnd >= len(cands):
                continue
            r, t = cands[rnd]
            node = retrieved.get(t)
            if node is None:
                if len(nodes) >= node_budget:
                    continue
                node = len(nodes)
                nodes.append(Node(graph.entities[t], Origin.RETRIEVED, None))
                entity_ids.append((t,))
                retrieved[t] = node
            edges.append((i, r, node))

    edges.extend((k, SELF_ID, k) for k in range(len(nodes)))
    return ConceptSubgraph(nodes, edges, node_budget, entity_ids)
