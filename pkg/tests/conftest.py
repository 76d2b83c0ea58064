import pytest
import torch

from kgcg.data import build_vocab, encode_corpus, synth_corpus
from kgcg.model import ModelConfig, init_params


@pytest.fixture
def write(tmp_path):
    def _write(name, text):
        p = tmp_path / name
        p.write_text(text, encoding="utf-8")
        return p
    return _write


@pytest.fixture(scope="session")
def tiny_setup():
    """A random-init tiny model plus encoded synthetic examples, in float64."""
    corpus, kg = synth_corpus(8, 3, 12, seed=1)
    vocab = build_vocab(corpus)
    cfg = ModelConfig(d_model=8, n_heads=2, d_ff=16, vocab_size=len(vocab), n_relations=len(kg.relations),
                      dropout_rate=0.0, max_len=16)
    params = init_params(cfg, seed=3, dtype=torch.float64)
    encoded = encode_corpus(corpus, kg, vocab, cfg.max_len, node_budget=6, fanout=2)
    return cfg, params, encoded, vocab, kg, corpus


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record():
    """Collect one PASS/FAIL line per acceptance criterion for the terminal summary."""
    def _record(number, name, ok, detail):
        ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name}: {detail}")
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
