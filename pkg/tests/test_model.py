import dataclasses

import numpy as np
import pytest
import torch

import oracles
from kgcg.data import BOS, Example, Vocabulary, encode_example
from kgcg.grounding import ConceptSubgraph, Node, Origin, ConceptSet
from kgcg.model import (ModelConfig, batch_loss, collate, cross_entropy, encode, forward, fuse, gate,
                        graph_attention, graph_attention_layer, init_params, multi_head_attention, param_kind,
                        xavier_bound)

D = torch.float64


def rand_params(shapes, seed=0):
    g = torch.Generator().manual_seed(seed)
    return {k: torch.randn(*s, generator=g, dtype=D) * 0.5 for k, s in shapes.items()}


def mha_params(d, seed=0):
    shapes = {f"m.W{c}": (d, d) for c in "qkvo"}
    shapes.update({f"m.b{c}": (d,) for c in "qkvo"})
    return rand_params(shapes, seed)


def np_params(p):
    return {k: v.numpy() for k, v in p.items()}


@pytest.mark.parametrize("seed", range(5))
def test_attention_matches_dense_loop_oracle(seed):
    d, H, Tq, Tk = 8, 2, 3, 5
    p = mha_params(d, seed)
    g = torch.Generator().manual_seed(100 + seed)
    xq, xkv = torch.randn(1, Tq, d, generator=g, dtype=D), torch.randn(1, Tk, d, generator=g, dtype=D)
    mask = torch.zeros(Tq, Tk, dtype=torch.bool)
    mask[:, -1] = True
    out, w = multi_head_attention(xq, xkv, p, "m", H, mask[None, None], return_weights=True)
    want_out, want_w = oracles.dense_mha(xq[0].numpy(), xkv[0].numpy(), np_params(p), "m", H, mask.numpy())
    np.testing.assert_allclose(out[0].numpy(), want_out, atol=1e-6)
    np.testing.assert_allclose(w[0].numpy(), want_w, atol=1e-6)
    np.testing.assert_allclose(w.sum(-1).numpy(), 1.0, atol=1e-12)
    assert float(w[..., -1].abs().max()) == 0.0


def test_attention_extreme_scores_stay_finite():
    d = 4
    p = mha_params(d)
    x = torch.full((1, 3, d), 1e4, dtype=D)
    out = multi_head_attention(x, x, p, "m", 2)
    assert torch.isfinite(out).all()


def graph_params(d, seed=0):
    shapes = {f"g.{w}": (d, d) for w in ("W_q", "W_k", "W_v", "W_r")}
    shapes["g.a"] = (1, 3 * d)
    shapes["g.ln.gamma"] = (d,)
    shapes["g.ln.beta"] = (d,)
    return rand_params(shapes, seed)


def random_edges(n, n_rel, rng):
    edges = [(i, 0, i) for i in range(n)]
    for _ in range(2 * n):
        edges.append((int(rng.integers(n)), int(rng.integers(1, n_rel)), int(rng.integers(n))))
    return edges


@pytest.mark.parametrize("seed", range(4))
def test_graph_layer_matches_scalar_oracle(seed):
    d, n, n_rel = 4, 5, 3
    rng = np.random.default_rng(seed)
    p = graph_params(d, seed)
    R = torch.randn(n_rel, d, generator=torch.Generator().manual_seed(seed), dtype=D)
    h = torch.tensor(rng.normal(size=(n, d)))
    edges = random_edges(n, n_rel, rng)
    src, rel, dst = (torch.tensor(c) for c in zip(*edges))
    out, alpha = graph_attention_layer(h, src, dst, rel, R, p, "g", return_weights=True)
    want = oracles.scalar_graph_layer(h.tolist(), edges, R.numpy(), np_params(p), "g")
    np.testing.assert_allclose(out.numpy(), np.array(want), atol=1e-6)
    sums = torch.zeros(n, dtype=D).index_add_(0, dst, alpha)
    np.testing.assert_allclose(sums.numpy(), 1.0, atol=1e-12)

    perm = rng.permutation(len(edges))
    src2, rel2, dst2 = src[perm], rel[perm], dst[perm]
    out2 = graph_attention_layer(h, src2, dst2, rel2, R, p, "g")
    np.testing.assert_allclose(out2.numpy(), out.numpy(), atol=1e-12)


def test_graph_attention_requires_incoming_edge():
    d = 4
    p = {k.replace("g.", "graph.0."): v for k, v in graph_params(d).items()}
    R = torch.zeros(2, d, dtype=D)
    with pytest.raises(ValueError, match="incoming"):
        graph_attention(torch.zeros(2, d, dtype=D), [(0, 0, 0)], R, p, 1)
    out = graph_attention(torch.ones(2, d, dtype=D), [(0, 0, 0), (1, 0, 1)], R, p, 1)
    assert out.shape == (2, d)


def test_fuse_matches_scalar_oracle():
    d, S, N = 4, 6, 3
    g = torch.Generator().manual_seed(0)
    tokens, nodes = torch.randn(S, d, generator=g, dtype=D), torch.randn(N, d, generator=g, dtype=D)
    p = {"fuse.W_g": torch.randn(d, 2 * d, generator=g, dtype=D), "fuse.b_g": torch.randn(d, generator=g, dtype=D)}
    spans = {0: (1, 2), 1: (4, 4)}
    out = fuse(tokens, nodes, spans, p)
    want = oracles.scalar_fuse(tokens.tolist(), nodes.tolist(), spans, p["fuse.W_g"].tolist(), p["fuse.b_g"].tolist())
    np.testing.assert_allclose(out.numpy(), np.array(want), atol=1e-9)
    # tokens outside every span, and node 2 which has no span, are untouched
    assert torch.equal(out[0], tokens[0]) and torch.equal(out[3], tokens[3]) and torch.equal(out[5], tokens[5])
    with pytest.raises(ValueError):
        fuse(tokens, nodes, {0: (1, 3), 1: (3, 4)}, p)


def test_gate_extremes():
    d = 3
    t, n = torch.ones(1, d, dtype=D), torch.zeros(1, d, dtype=D)
    W = torch.zeros(d, 2 * d, dtype=D)
    assert torch.allclose(gate(t, n, W, torch.full((d,), 50.0, dtype=D)), t)
    assert torch.allclose(gate(t, n, W, torch.full((d,), -50.0, dtype=D)), n)


def test_cross_entropy_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    logits = torch.tensor(rng.normal(size=(2, 5, 7)) * 3)
    targets = torch.tensor(rng.integers(1, 7, size=(2, 5)))
    targets[1, 3:] = 0
    for eps in (0.0, 0.1, 0.3):
        got = float(cross_entropy(logits, targets, label_smoothing=eps))
        want = oracles.scalar_cross_entropy(logits.reshape(-1, 7).tolist(), targets.reshape(-1).tolist(),
                                            smoothing=eps)
        assert abs(got - want) <= 1e-9


def test_cross_entropy_edge_cases():
    logits = torch.zeros(1, 2, 5, dtype=D)
    logits[0, :, 3] = 1e4
    assert float(cross_entropy(logits, torch.tensor([[3, 3]]))) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        cross_entropy(logits, torch.tensor([[0, 0]]))
    with pytest.raises(ValueError):
        cross_entropy(logits, torch.tensor([[3, 3]]), label_smoothing=0.5)


def test_param_kind_and_init(tiny_setup):
    cfg, params, *_ = tiny_setup
    assert param_kind("enc.0.attn.bq") == "bias"
    assert param_kind("enc.0.ln1.gamma") == "gain"
    assert param_kind("enc.0.attn.Wq") == "matrix"
    for name, p in params.items():
        kind = param_kind(name)
        if kind == "bias" or name.endswith(".beta"):
            assert float(p.abs().max()) == 0.0, name
        elif kind == "gain":
            assert torch.all(p == 1), name
        else:
            assert float(p.abs().max()) <= xavier_bound(p.shape), name
    again = init_params(cfg, seed=3, dtype=torch.float64)
    assert all(torch.equal(again[k], params[k]) for k in params)
    other = init_params(cfg, seed=4, dtype=torch.float64)
    assert not torch.equal(other["embed.E"], params["embed.E"])


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=4).validate()
    with pytest.raises(ValueError):
        ModelConfig(dropout_rate=1.0).validate()
    cfg = ModelConfig(d_model=8, n_heads=2)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_forward_shapes(tiny_setup):
    cfg, params, encoded, *_ = tiny_setup
    ex = encoded[0]
    out = forward(params, cfg, ex, [BOS, 5, 6])
    assert out["logits"].shape == (3, cfg.vocab_size)
    assert out["memory"].shape == (len(ex.input_ids) + len(ex.subgraph.nodes), cfg.d_model)


def test_decoder_is_causal(tiny_setup):
    cfg, params, encoded, *_ = tiny_setup
    ex = encoded[0]
    base = forward(params, cfg, ex, [BOS, 5, 6, 7])["logits"]
    for t in range(1, 4):
        ids = [BOS, 5, 6, 7]
        ids[t] = 8
        pert = forward(params, cfg, ex, ids)["logits"]
        assert float((pert[:t] - base[:t]).abs().max()) <= 1e-12
        assert float((pert[t:] - base[t:]).abs().max()) > 0


def test_batching_matches_single_examples(tiny_setup):
    cfg, params, encoded, *_ = tiny_setup
    batch = collate(encoded[:4])
    from kgcg.model import forward_batch
    logits = forward_batch(params, cfg, batch)["logits"]
    for b, ex in enumerate(encoded[:4]):
        ids = ex.target_ids[:-1]
        single = forward(params, cfg, ex, ids)["logits"]
        np.testing.assert_allclose(logits[b, : len(ids)].numpy(), single.numpy(), atol=1e-10)


def test_graph_blind_changes_memory(tiny_setup):
    cfg, params, encoded, *_ = tiny_setup
    ex = next(e for e in encoded if len(e.subgraph.edges) > len(e.subgraph.nodes))
    a = forward(params, cfg, ex, [BOS])["node_states"]
    b = forward(params, cfg, ex, [BOS], graph_blind=True)["node_states"]
    assert not torch.allclose(a, b)
    assert ex.subgraph.strip_to_self_loops().edges == [(i, 0, i) for i in range(len(ex.subgraph.nodes))]


def test_unused_relation_rows_get_zero_gradient(tiny_setup):
    cfg, params, encoded, *_ = tiny_setup
    ex = encoded[0]
    used = {r for _, r, _ in ex.subgraph.edges}
    big = dataclasses.replace(cfg, n_relations=cfg.n_relations + 2)
    p = init_params(big, seed=3, dtype=D)
    leaf = p["embed.R"].requires_grad_(True)
    loss = batch_loss(p, big, collate([ex]))
    (g,) = torch.autograd.grad(loss, [leaf])
    for r in range(big.n_relations):
        if r not in used:
            assert float(g[r].abs().max()) == 0.0
    assert any(float(g[r].abs().max()) > 0 for r in used)


def test_out_of_range_ids_rejected(tiny_setup):
    cfg, params, encoded, *_ = tiny_setup
    with pytest.raises(ValueError, match="vocabulary"):
        forward(params, cfg, encoded[0], [BOS, cfg.vocab_size])
    small = dataclasses.replace(cfg, n_relations=1)
    ex = next(e for e in encoded if any(r > 0 for _, r, _ in e.subgraph.edges))
    with pytest.raises(ValueError, match="relation"):
        forward(params, small, ex, [BOS])
    with pytest.raises(ValueError, match="max_len"):
        forward(params, cfg, encoded[0], [BOS] * (cfg.max_len + 1))


def test_retrieved_nodes_use_token_embeddings():
    vocab = Vocabulary(["a", "b", "t"])
    cs = ConceptSet(["a", "b"])
    sub = ConceptSubgraph([Node("a", Origin.CONCEPT, 0), Node("b", Origin.CONCEPT, 1), Node("t", Origin.RETRIEVED, None)],
                          [(0, 0, 0), (1, 0, 1), (2, 0, 2)], 8)
    ex = encode_example(Example(cs, ("a b",)), vocab, sub, 16)
    cfg = ModelConfig(d_model=8, n_heads=2, d_ff=8, vocab_size=len(vocab), n_relations=1, graph_layers=1)
    params = init_params(cfg, 0, D)
    batch = collate([ex])
    assert batch.tok_ids[0, 2, 0] == vocab.id("t")
    assert float(batch.span_w[0, 2].abs().sum()) == 0
    mem, mask, nodes = encode(params, cfg, batch)
    assert mem.shape[1] == batch.src.shape[1] + 3 and not mask.any()
