"""Greedy and beam-search generation, and concept coverage of generated sentences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from kgcg.data import BOS, EOS, EncodedExample
from kgcg.grounding import ConceptSet
from kgcg.model import ModelConfig, Params, collate, decode, encode
from kgcg.text import normalize

# maps a list of prefixes (each starting with BOS) to a [len(prefixes), V] array of log-probs
StepFn = Callable[[Sequence[Sequence[int]]], np.ndarray]


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    logprob: float
    finished: bool

    @property
    def length(self) -> int:
        """Generated tokens, i.e. excluding the leading BOS."""
        return len(self.tokens) - 1

    def score(self, length_alpha: float) -> float:
        if length_alpha == 0 or self.length == 0:
            return self.logprob
        return self.logprob / (self.length ** length_alpha)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def model_step_fn(params: Params, cfg: ModelConfig, example: EncodedExample, graph_blind: bool = False) -> StepFn:
    """Encode once, then score arbitrary decoder prefixes against the cached memory."""
    with torch.no_grad():
        batch = collate([example], graph_blind=graph_blind, decoder_inputs=[[BOS]])
        memory, memory_mask, _ = encode(params, cfg, batch)

    def step(prefixes):
        ids = torch.tensor([list(p) for p in prefixes], dtype=torch.long)
        if ids.shape[1] > cfg.max_len:
            raise ValueError(f"decoder prefix longer than max_len={cfg.max_len}")
        k = ids.shape[0]
        with torch.no_grad():
            logits = decode(params, cfg, memory.expand(k, -1, -1), memory_mask.expand(k, -1), ids)
        return _log_softmax(logits[:, -1].double().numpy())

    return step


def greedy_search(step: StepFn, max_len: int, bos: int = BOS, eos: int = EOS) -> Hypothesis:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    tokens, total = [bos], 0.0
    while True:
        lp = step([tokens])[0]
        tok = int(np.argmax(lp))  # first maximum, so ties go to the lowest id
        tokens.append(tok)
        total += float(lp[tok])
        if tok == eos or len(tokens) - 1 >= max_len:
            return Hypothesis(tuple(tokens), total, True)


def beam_search_core(step: StepFn, beam: int, max_len: int, length_alpha: float = 0.0,
                     bos: int = BOS, eos: int = EOS) -> list[Hypothesis]:
    """Beam search with a completed pool; returns every kept hypothesis, best first.

    Ranking uses ``logprob / length**length_alpha``; ties fall back to the token sequence.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")

    def key(h: Hypothesis):
        return (-h.score(length_alpha), h.tokens)

    live = [Hypothesis((bos,), 0.0, False)]
    done: list[Hypothesis] = []
    while live:
        lp = step([h.tokens for h in live])
        cands = []
        for h, row in zip(live, lp):
            for tok in range(row.shape[0]):
                toks = h.tokens + (tok,)
                fin = tok == eos or len(toks) - 1 >= max_len
                cands.append(Hypothesis(toks, h.logprob + float(row[tok]), fin))
        cands.sort(key=key)
        live = []
        for h in cands[:beam]:
            (done if h.finished else live).append(h)
    return sorted(done, key=key)


def greedy_decode(params: Params, cfg: ModelConfig, example: EncodedExample, max_len: int,
                  graph_blind: bool = False) -> Hypothesis:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    max_len = min(max_len, cfg.max_len - 1)
    return greedy_search(model_step_fn(params, cfg, example, graph_blind), max_len)


def beam_search(params: Params, cfg: ModelConfig, example: EncodedExample, beam: int, max_len: int,
                length_alpha: float = 0.6, graph_blind: bool = False) -> list[Hypothesis]:
    if beam < 1:
        raise ValueError("beam must be >= 1")
    max_len = min(max_len, cfg.max_len - 1)
    return beam_search_core(model_step_fn(params, cfg, example, graph_blind), beam, max_len, length_alpha)


def concept_coverage(sentence: str, cs: ConceptSet | Sequence[str]) -> float:
    """Share of concepts occurring as substrings of the sentence (both normalized).

    Plain substring matching: conjugated Korean forms (놓이다 vs 놓여) do not count as hits.
    """
    concepts = [normalize(c) for c in cs]
    if not concepts:
        return 0.0
    text = normalize(sentence)
    if not text:
        return 0.0
    return sum(c in text for c in concepts) / len(concepts)
