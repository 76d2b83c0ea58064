"""Corpus BLEU, ROUGE-2, ROUGE-L, exact-match METEOR and an embedding-matching score.

All metrics take raw strings and tokenize them with :func:`kgcg.text.tokenize`; every
function returns a fraction in [0, 1].  :func:`evaluate` scales to percent for reports.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from kgcg.data import UNK, load_jsonl
from kgcg.decoding import concept_coverage
from kgcg.text import tokenize

METRIC_COLUMNS = ("BLEU-3", "BLEU-4", "ROUGE-2", "ROUGE-L", "METEOR")


class MetricInputError(ValueError):
    pass


def _check(candidates, reference_sets):
    if len(candidates) != len(reference_sets):
        raise MetricInputError(f"{len(candidates)} candidates but {len(reference_sets)} reference sets")
    if not candidates:
        raise MetricInputError("no candidates to score")
    for refs in reference_sets:
        if not refs:
            raise MetricInputError("every candidate needs at least one reference")


def _toks(text) -> list[str]:
    return list(text) if isinstance(text, (list, tuple)) else tokenize(text)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU


def bleu(candidates: Sequence[str], reference_sets: Sequence[Sequence[str]], max_n: int = 4) -> float:
    """Unsmoothed corpus BLEU with clipped counts and closest-length brevity penalty."""
    _check(candidates, reference_sets)
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    matched = [0] * max_n
    total = [0] * max_n
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, reference_sets):
        c = _toks(cand)
        rs = [_toks(r) for r in refs]
        cand_len += len(c)
        ref_len += min((len(r) for r in rs), key=lambda L: (abs(L - len(c)), L))
        for n in range(1, max_n + 1):
            counts = ngrams(c, n)
            ceiling: Counter = Counter()
            for r in rs:
                ceiling |= ngrams(r, n)
            matched[n - 1] += sum(min(k, ceiling[g]) for g, k in counts.items())
            total[n - 1] += sum(counts.values())
    if cand_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / max_n
    bp = 1.0 if cand_len >= ref_len else math.exp(1 - ref_len / cand_len)
    return bp * math.exp(log_p)


# ---------------------------------------------------------------------------
# ROUGE


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def rouge_n_pair(cand: Sequence[str], ref: Sequence[str], n: int = 2) -> float:
    c, r = ngrams(cand, n), ngrams(ref, n)
    if not c or not r:
        return 0.0
    overlap = sum((c & r).values())
    return _f1(overlap / sum(c.values()), overlap / sum(r.values()))


def rouge_2(candidates, reference_sets) -> float:
    _check(candidates, reference_sets)
    return float(np.mean([
        max(rouge_n_pair(_toks(c), _toks(r), 2) for r in refs)
        for c, refs in zip(candidates, reference_sets)
    ]))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(cand: Sequence[str], ref: Sequence[str]) -> float:
    if not cand or not ref:
        return 0.0
    lcs = lcs_length(cand, ref)
    return _f1(lcs / len(cand), lcs / len(ref))


def rouge_l(candidates, reference_sets) -> float:
    _check(candidates, reference_sets)
    return float(np.mean([
        max(rouge_l_pair(_toks(c), _toks(r)) for r in refs)
        for c, refs in zip(candidates, reference_sets)
    ]))


# ---------------------------------------------------------------------------
# METEOR (exact module only)


def meteor_alignment(cand: Sequence[str], ref: Sequence[str]) -> tuple[int, int]:
    """(matches, chunks) of the maximum exact alignment with the fewest chunks.

    Dynamic programming over candidate positions.  The match count of every word is fixed
    at min(count in cand, count in ref), so the search only chooses which reference
    occurrence each candidate token takes (and, for surplus candidate tokens, which to skip).
    """
    ref_pos: dict[str, list[int]] = {}
    for j, w in enumerate(ref):
        ref_pos.setdefault(w, []).append(j)
    cc, rc = Counter(cand), Counter(ref)
    surplus_words = sorted(w for w in cc if cc[w] > rc.get(w, 0) and w in rc)
    slot = {w: k for k, w in enumerate(surplus_words)}
    allowance = tuple(cc[w] - rc[w] for w in surplus_words)
    matches = sum(min(cc[w], rc[w]) for w in cc if w in rc)
    if matches == 0:
        return 0, 0
    INF = float("inf")

    @lru_cache(maxsize=None)
    def best(i: int, used: int, prev: int, skipped: tuple) -> float:
        if i == len(cand):
            return 0.0
        w = cand[i]
        if w not in ref_pos:
            return best(i + 1, used, -1, skipped)
        out = INF
        for j in ref_pos[w]:
            if not used >> j & 1:
                new_chunk = 0 if prev >= 0 and j == prev + 1 else 1
                out = min(out, new_chunk + best(i + 1, used | 1 << j, j, skipped))
        k = slot.get(w)
        if k is not None and skipped[k] < allowance[k]:
            bumped = skipped[:k] + (skipped[k] + 1,) + skipped[k + 1:]
            out = min(out, best(i + 1, used, -1, bumped))
        return out

    chunks = best(0, 0, -1, (0,) * len(surplus_words))
    best.cache_clear()
    return matches, int(chunks)


def meteor_from_counts(matches: int, chunks: int, cand_len: int, ref_len: int) -> float:
    if matches == 0:
        return 0.0
    p, r = matches / cand_len, matches / ref_len
    f_mean = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (chunks / matches) ** 3
    return f_mean * (1 - penalty)


def meteor_pair(cand: Sequence[str], ref: Sequence[str]) -> float:
    if not cand or not ref:
        return 0.0
    m, ch = meteor_alignment(cand, ref)
    return meteor_from_counts(m, ch, len(cand), len(ref))


def meteor(candidates, reference_sets) -> float:
    _check(candidates, reference_sets)
    return float(np.mean([
        max(meteor_pair(_toks(c), _toks(r)) for r in refs)
        for c, refs in zip(candidates, reference_sets)
    ]))


# ---------------------------------------------------------------------------
# embedding score


class EmbeddingProvider(Protocol):
    name: str

    def __call__(self, tokens: Sequence[str]) -> np.ndarray:
        """Return a [len(tokens), dim] array of unit-norm rows."""


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.where(norms == 0, 1.0, norms)


class TableProvider:
    """Rows of a token-embedding matrix, looked up through a vocabulary (UNK fallback)."""

    def __init__(self, vocab, matrix, name: str = "model-embeddings"):
        self.vocab = vocab
        self.table = _unit_rows(np.asarray(matrix, dtype=np.float64))
        self.name = name

    def __call__(self, tokens):
        return self.table[[self.vocab.stoi.get(t, UNK) for t in tokens]].reshape(len(tokens), -1)


class HashProvider:
    """Deterministic pseudo-random unit vectors keyed on the token string."""

    def __init__(self, dim: int = 32, seed: int = 0, name: str | None = None):
        self.dim, self.seed = dim, seed
        self.name = name or f"hash{dim}"

    def _vec(self, token: str) -> np.ndarray:
        digest = hashlib.blake2b(f"{self.seed}\0{token}".encode("utf-8"), digest_size=8).digest()
        v = np.random.default_rng(int.from_bytes(digest, "little")).standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def __call__(self, tokens):
        return np.array([self._vec(t) for t in tokens]).reshape(len(tokens), self.dim)


class ExactMatchProvider:
    """One-hot vectors: cosine 1 for identical tokens, 0 otherwise."""

    name = "exact"

    def __init__(self):
        self.index: dict[str, int] = {}

    def __call__(self, tokens):
        for t in tokens:
            self.index.setdefault(t, len(self.index))
        out = np.zeros((len(tokens), max(len(self.index), 1)))
        for i, t in enumerate(tokens):
            out[i, self.index[t]] = 1.0
        return out


def _embed(provider, tokens) -> np.ndarray:
    try:
        vecs = np.asarray(provider(tokens), dtype=np.float64)
    except Exception as exc:
        raise RuntimeError(f"embedding provider {getattr(provider, 'name', provider)!r} failed: {exc}") from exc
    if vecs.ndim != 2 or vecs.shape[0] != len(tokens):
        raise RuntimeError(f"embedding provider returned shape {vecs.shape} for {len(tokens)} tokens")
    return vecs


def embed_pair(cand: Sequence[str], ref: Sequence[str], provider) -> float:
    if not cand or not ref:
        return 0.0
    c, r = _embed(provider, cand), _embed(provider, ref)
    width = max(c.shape[1], r.shape[1])
    c = np.pad(c, ((0, 0), (0, width - c.shape[1])))
    r = np.pad(r, ((0, 0), (0, width - r.shape[1])))
    sim = c @ r.T
    p = float(sim.max(axis=1).mean())
    rec = float(sim.max(axis=0).mean())
    if p <= 0 or rec <= 0:
        return 0.0
    return min(1.0, 2 * p * rec / (p + rec))


def embed_score(candidates, reference_sets, provider) -> float:
    """Greedy cosine matching F1; non-positive precision or recall scores the pair 0."""
    _check(candidates, reference_sets)
    return float(np.mean([
        max(embed_pair(_toks(c), _toks(r), provider) for r in refs)
        for c, refs in zip(candidates, reference_sets)
    ]))


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    scores: dict[str, float]
    n_examples: int

    def as_dict(self) -> dict:
        return {**self.scores, "n_examples": self.n_examples}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), ensure_ascii=False, indent=2) + "\n"

    def table(self) -> str:
        cols = list(self.scores)
        widths = [max(len(c), 7) for c in cols]
        head = " | ".join(c.rjust(w) for c, w in zip(cols, widths))
        row = " | ".join(f"{self.scores[c]:.2f}".rjust(w) for c, w in zip(cols, widths))
        return f"{head}\n{'-' * len(head)}\n{row}"


def score_corpus(candidates: Sequence[str], reference_sets: Sequence[Sequence[str]],
                 concept_sets: Sequence[Sequence[str]], provider) -> EvalReport:
    raw = {
        "BLEU-3": bleu(candidates, reference_sets, 3),
        "BLEU-4": bleu(candidates, reference_sets, 4),
        "ROUGE-2": rouge_2(candidates, reference_sets),
        "ROUGE-L": rouge_l(candidates, reference_sets),
        "METEOR": meteor(candidates, reference_sets),
        f"EmbedScore({provider.name})": embed_score(candidates, reference_sets, provider),
        "ConceptCoverage": float(np.mean([concept_coverage(c, cs) for c, cs in zip(candidates, concept_sets)])),
    }
    return EvalReport({k: round(100 * v, 2) for k, v in raw.items()}, len(candidates))


def read_lines(path: str | Path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def evaluate(pred_path: str | Path, refs_path: str | Path, provider, out_path: str | Path | None = None) -> EvalReport:
    preds = read_lines(pred_path)
    corpus = load_jsonl(refs_path)
    if len(preds) != len(corpus):
        raise MetricInputError(f"{pred_path} has {len(preds)} predictions but {refs_path} has {len(corpus)} examples")
    report = score_corpus(preds, [ex.references for ex in corpus], [ex.concept_set.concepts for ex in corpus], provider)
    if out_path is not None:
        Path(out_path).write_text(report.to_json(), encoding="utf-8")
    return report
