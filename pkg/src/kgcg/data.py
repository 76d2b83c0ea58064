"""Corpus I/O, vocabulary, example encoding and the synthetic relation benchmark."""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

from kgcg.grounding import ConceptSet, ConceptSubgraph, Origin, build_subgraph
from kgcg.kg_store import KnowledgeGraph
from kgcg.text import detokenize, normalize, tokenize

__all__ = [
    "PAD", "BOS", "EOS", "UNK", "SEP", "SPECIALS",
    "CorpusFormatError", "EncodedExample", "Example", "Vocabulary",
    "build_vocab", "detokenize", "dump_jsonl", "encode_corpus", "encode_example", "load_jsonl",
    "synth_corpus", "tokenize",
]

PAD, BOS, EOS, UNK, SEP = 0, 1, 2, 3, 4
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>", "<sep>")

# position of the relation token inside a synthetic reference "e3 rel1 e7 ."
SYNTH_RELATION_POS = 1


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    concept_set: ConceptSet
    references: tuple[str, ...]

    def __post_init__(self):
        if not self.references:
            raise ValueError("an example needs at least one reference")
        if any(not isinstance(r, str) or not r.strip() for r in self.references):
            raise ValueError("references must be non-empty strings")

    @classmethod
    def of(cls, concepts: Sequence[str], references: Sequence[str]) -> "Example":
        return cls(ConceptSet(concepts), tuple(references))

    def to_json(self) -> str:
        return json.dumps(
            {"concept_set": list(self.concept_set.concepts), "references": list(self.references)},
            ensure_ascii=False,
        )


def load_jsonl(path: str | Path) -> list[Example]:
    corpus = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise CorpusFormatError(f"{path}:{lineno}: expected a JSON object")
            for key in ("concept_set", "references"):
                if key not in obj:
                    raise CorpusFormatError(f"{path}:{lineno}: missing key {key!r}")
                if not isinstance(obj[key], list) or not obj[key]:
                    raise CorpusFormatError(f"{path}:{lineno}: {key!r} must be a non-empty list")
            try:
                corpus.append(Example.of(obj["concept_set"], obj["references"]))
            except (ValueError, TypeError, AttributeError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: {exc}") from exc
    return corpus


def dump_jsonl(corpus: Iterable[Example], path: str | Path) -> None:
    Path(path).write_text("".join(ex.to_json() + "\n" for ex in corpus), encoding="utf-8")


class Vocabulary:
    """Token/id bijection with the five special ids fixed at 0..4."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(SPECIALS)}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Iterable[int], strip_specials: bool = True) -> list[str]:
        out = []
        for i in ids:
            if strip_specials and i in (PAD, BOS, EOS, SEP):
                continue
            out.append(self.itos[i])
        return out

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocabulary":
        if tuple(itos[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        return cls(itos[len(SPECIALS):])

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos


def build_vocab(corpus: Iterable[Example], min_freq: int = 1) -> Vocabulary:
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts: Counter[str] = Counter()
    for ex in corpus:
        for concept in ex.concept_set:
            counts.update(tokenize(concept))
        for ref in ex.references:
            counts.update(tokenize(ref))
    for special in SPECIALS:
        counts.pop(special, None)
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


@dataclass
class EncodedExample:
    input_ids: list[int]
    target_ids: list[int]
    concept_token_spans: dict[int, tuple[int, int]]  # node index -> inclusive token range
    subgraph: ConceptSubgraph
    node_token_ids: list[list[int]] = field(default_factory=list)
    references: tuple[str, ...] = ()
    concepts: tuple[str, ...] = ()


def encode_example(ex: Example, vocab: Vocabulary, subgraph: ConceptSubgraph, max_len: int) -> EncodedExample:
    """Lay out ``BOS c1 SEP c2 ... EOS`` and ``BOS reference EOS``, both capped at ``max_len``."""
    if max_len < 4:
        raise ValueError("max_len must be >= 4")
    ids = [BOS]
    raw_spans: list[tuple[int, int]] = []
    for k, concept in enumerate(ex.concept_set):
        if k:
            ids.append(SEP)
        toks = vocab.encode(tokenize(concept)) or [UNK]
        raw_spans.append((len(ids), len(ids) + len(toks) - 1))
        ids.extend(toks)
    ids.append(EOS)
    if len(ids) > max_len:
        ids = ids[:max_len]

    node_of_concept = {n.concept_index: i for i, n in enumerate(subgraph.nodes) if n.origin is Origin.CONCEPT}
    spans = {}
    for k, (s, e) in enumerate(raw_spans):
        if s >= len(ids):
            continue  # truncated away; node falls back to embedding lookup
        spans[node_of_concept[k]] = (s, min(e, len(ids) - 1))

    target = [BOS] + vocab.encode(tokenize(ex.references[0])) + [EOS]
    if len(target) > max_len:
        target = target[:max_len]

    node_tokens = [vocab.encode(tokenize(n.surface)) or [UNK] for n in subgraph.nodes]
    return EncodedExample(ids, target, spans, subgraph, node_tokens, ex.references, ex.concept_set.concepts)


def synth_corpus(n_entities: int, n_relations: int, n_examples: int, seed: int) -> tuple[list[Example], KnowledgeGraph]:
    """Two-concept examples whose reference relation token is recoverable only from the graph.

    Each example draws a fresh unordered entity pair (so no pair or its reverse repeats),
    a random orientation and a uniformly random relation ``relK``; the triple goes into the
    graph and the reference reads ``"eI relK eJ ."``.
    """
    if n_relations < 2:
        raise ValueError("n_relations must be >= 2")
    pairs = list(combinations(range(n_entities), 2))
    if n_examples > len(pairs):
        raise ValueError(f"{n_entities} entities support at most {len(pairs)} distinct pairs")
    rng = random.Random(seed)
    graph = KnowledgeGraph()
    for k in range(n_relations):
        graph.relations.register(f"rel{k}")
    corpus = []
    for idx in rng.sample(range(len(pairs)), n_examples):
        i, j = pairs[idx]
        if rng.random() < 0.5:
            i, j = j, i
        k = rng.randrange(n_relations)
        head, rel, tail = f"e{i}", f"rel{k}", f"e{j}"
        graph.add_triple(head, rel, tail)
        corpus.append(Example.of([head, tail], [f"{head} {rel} {tail} ."]))
    return corpus, graph


def relation_token(reference: str) -> str:
    return tokenize(reference)[SYNTH_RELATION_POS]


def graph_blind_bound(corpus: Sequence[Example]) -> float:
    """Best middle-token accuracy achievable without the graph: the top relation frequency."""
    counts = Counter(relation_token(ex.references[0]) for ex in corpus)
    return max(counts.values()) / len(corpus) if corpus else 0.0


def canonical(text: str) -> str:
    return detokenize(tokenize(normalize(text)))


def encode_corpus(corpus: Sequence[Example], graph: KnowledgeGraph, vocab: Vocabulary, max_len: int,
                  node_budget: int = 8, fanout: int = 2) -> list[EncodedExample]:
    return [
        encode_example(ex, vocab, build_subgraph(ex.concept_set, graph, max(node_budget, len(ex.concept_set)), fanout),
                       max_len)
        for ex in corpus
    ]
