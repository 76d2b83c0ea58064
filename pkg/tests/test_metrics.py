import json
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from kgcg.data import Vocabulary
from kgcg.metrics import (ExactMatchProvider, HashProvider, MetricInputError, TableProvider, bleu, embed_pair,
                          embed_score, evaluate, lcs_length, meteor, meteor_alignment, meteor_pair, rouge_2,
                          rouge_l, rouge_l_pair, rouge_n_pair, score_corpus)


def test_bleu_examples():
    assert bleu(["a b c"], [["a b c d"]], 3) == pytest.approx(math.exp(1 - 4 / 3), abs=1e-12)
    assert bleu(["a b c d"], [["a b c d"]], 4) == 1.0
    assert bleu(["x y z"], [["a b c"]], 3) == 0.0


def test_bleu_closest_length_tie_goes_shorter():
    # lengths 2 and 4 are both 1 away from 3; the shorter one means no brevity penalty
    assert bleu(["a b c"], [["a b", "a b c d"]], 1) == pytest.approx(1.0)
    assert oracles.bleu([["a", "b", "c"]], [[["a", "b"], ["a", "b", "c", "d"]]], 1) == pytest.approx(1.0)


def test_bleu_errors():
    with pytest.raises(MetricInputError):
        bleu(["a"], [["a"], ["b"]], 4)
    with pytest.raises(MetricInputError):
        bleu([], [], 4)


def test_rouge_examples():
    assert rouge_2(["a b c d"], [["a b d c"]]) == pytest.approx(1 / 3)
    assert rouge_2(["a"], [["a"]]) == 0.0
    assert rouge_l(["a b c d"], [["a c b d"]]) == pytest.approx(0.75)
    assert rouge_l(["a b"], [["c d"]]) == 0.0
    assert rouge_l([""], [["c d"]]) == 0.0
    assert lcs_length("abcbdab", "bdcaba") == 4


def test_meteor_examples():
    assert meteor(["a b c d"], [["a b c d"]]) == 0.9921875
    assert meteor(["a b"], [["c d"]]) == 0.0
    ident = meteor_pair(list("abcdef"), list("abcdef"))
    scrambled = meteor_pair(list("badcfe"), list("abcdef"))
    assert meteor_alignment(list("badcfe"), list("abcdef")) == (6, 6)
    assert scrambled < ident


def test_meteor_prefers_fewer_chunks_among_max_alignments():
    # "a" can align to either reference "a"; the second choice keeps "a b" contiguous
    assert meteor_alignment(["a", "b"], ["a", "x", "a", "b"]) == (2, 1)


def test_embed_examples():
    vocab = Vocabulary(["u", "v"])
    table = np.zeros((len(vocab), 2))
    table[vocab.id("u")] = [1, 0]
    table[vocab.id("v")] = [0, 1]
    prov = TableProvider(vocab, table, name="toy")
    assert embed_pair(["u"], ["u", "v"], prov) == pytest.approx(2 / 3)
    assert embed_pair(["u"], ["v"], prov) == 0.0
    assert embed_pair(["u", "v"], ["u", "v"], HashProvider()) == pytest.approx(1.0)
    assert embed_pair([], ["u"], prov) == 0.0


def test_provider_failure_is_an_error():
    def broken(tokens):
        raise OSError("no model")
    broken.name = "broken"
    with pytest.raises(RuntimeError, match="broken"):
        embed_score(["a"], [["a"]], broken)


VOCAB = list("abcde")


def random_case(rng):
    n = rng.randint(1, 4)
    cands = [[rng.choice(VOCAB) for _ in range(rng.randint(0, 8))] for _ in range(n)]
    refs = [[[rng.choice(VOCAB) for _ in range(rng.randint(1, 8))] for _ in range(rng.randint(1, 3))]
            for _ in range(n)]
    return cands, refs


@pytest.mark.parametrize("seed", range(100))
def test_metrics_match_brute_force_oracles(seed):
    rng = random.Random(seed)
    cands, refs = random_case(rng)
    vec = {w: np.random.default_rng(i).normal(size=3) for i, w in enumerate(VOCAB)}

    class Prov:
        name = "toy"

        def __call__(self, tokens):
            return np.array([vec[t] / np.linalg.norm(vec[t]) for t in tokens]).reshape(len(tokens), 3)

    for n in (3, 4):
        assert abs(bleu(cands, refs, n) - oracles.bleu(cands, refs, n)) <= 1e-9
    assert abs(rouge_2(cands, refs) - oracles.corpus_mean(oracles.rouge2_pair, cands, refs)) <= 1e-9
    assert abs(rouge_l(cands, refs) - oracles.corpus_mean(oracles.rougel_pair, cands, refs)) <= 1e-9
    assert abs(meteor(cands, refs) - oracles.corpus_mean(oracles.meteor_pair, cands, refs)) <= 1e-9
    want = oracles.corpus_mean(lambda c, r: oracles.embed_pair(c, r, vec), cands, refs)
    assert abs(embed_score(cands, refs, Prov()) - want) <= 1e-9


words = st.lists(st.sampled_from(VOCAB), min_size=0, max_size=8)


@settings(max_examples=200, deadline=None)
@given(words, words)
def test_pair_metrics_are_bounded_and_identity_is_max(c, r):
    for f in (lambda a, b: rouge_n_pair(a, b, 2), rouge_l_pair, meteor_pair):
        v = f(c, r)
        assert 0.0 <= v <= 1.0
        if c:
            assert f(c, c) >= v - 1e-12
    assert 0.0 <= embed_pair(c, r, ExactMatchProvider()) <= 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(words.filter(bool), words.filter(bool)), min_size=1, max_size=5), st.randoms())
def test_corpus_scores_are_permutation_invariant(pairs, rnd):
    cands = [" ".join(c) for c, _ in pairs]
    refs = [[" ".join(r)] for _, r in pairs]
    concepts = [["a"] for _ in pairs]
    order = list(range(len(pairs)))
    rnd.shuffle(order)
    a = score_corpus(cands, refs, concepts, ExactMatchProvider()).scores
    b = score_corpus([cands[i] for i in order], [refs[i] for i in order], concepts, ExactMatchProvider()).scores
    assert a == b
    assert all(0 <= v <= 100 for v in a.values())


def write_corpus(path, rows):
    path.write_text("".join(json.dumps({"concept_set": c, "references": r}, ensure_ascii=False) + "\n"
                            for c, r in rows), encoding="utf-8")


def test_evaluate_identity_corpus(tmp_path):
    rows = [(["a", "b"], ["w x y z", "q"]), (["c"], ["p q r s"])]
    write_corpus(tmp_path / "refs.jsonl", rows)
    (tmp_path / "preds.txt").write_text("w x y z\np q r s\n", encoding="utf-8")
    report = evaluate(tmp_path / "preds.txt", tmp_path / "refs.jsonl", ExactMatchProvider(), tmp_path / "r.json")
    d = report.as_dict()
    assert set(d) == {"BLEU-3", "BLEU-4", "ROUGE-2", "ROUGE-L", "METEOR", "EmbedScore(exact)",
                      "ConceptCoverage", "n_examples"}
    assert d["BLEU-3"] == d["BLEU-4"] == d["ROUGE-2"] == d["ROUGE-L"] == 100.0
    assert d["METEOR"] == 99.22 and d["n_examples"] == 2
    assert json.loads((tmp_path / "r.json").read_text()) == d
    assert "BLEU-3" in report.table().splitlines()[0]


def test_evaluate_count_mismatch(tmp_path):
    write_corpus(tmp_path / "refs.jsonl", [(["a"], ["a"]), (["b"], ["b"])])
    (tmp_path / "preds.txt").write_text("a\n", encoding="utf-8")
    with pytest.raises(MetricInputError, match="1 predictions.*2 examples"):
        evaluate(tmp_path / "preds.txt", tmp_path / "refs.jsonl", ExactMatchProvider())
