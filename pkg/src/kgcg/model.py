"""KG-augmented encoder-decoder transformer, written functionally over a dict of tensors.

Parameters live in a plain ``dict[str, torch.Tensor]`` so the optimizer, the
checkpoint writer and the gradient checker can all walk them by name.  Layout:

    embed.E, embed.R                       token / relation embeddings (E is tied to the output)
    enc.{l}.{ln1,attn,ln2,ffn}.*          pre-LN encoder blocks, then enc.ln
    graph.{l}.{W_q,W_k,W_v,W_r,a,ln}      relation-aware graph attention layers
    fuse.{W_g,b_g}                         token/node gate
    dec.{l}.{ln1,self,ln2,cross,ln3,ffn}.*  pre-LN decoder blocks, then dec.ln
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch

from kgcg.data import PAD, EncodedExample
from kgcg.grounding import Origin

Params = dict[str, torch.Tensor]

LEAKY_SLOPE = 0.2
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    graph_layers: int = 1
    vocab_size: int = 5
    n_relations: int = 1
    max_len: int = 32
    dropout_rate: float = 0.1

    def validate(self) -> None:
        for name in ("d_model", "n_heads", "d_ff", "enc_layers", "dec_layers", "graph_layers",
                     "n_relations", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size < 5:
            raise ValueError("vocab_size must be >= 5")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_kind(name: str) -> str:
    last = name.rsplit(".", 1)[-1]
    if last == "gamma":
        return "gain"
    if last.startswith("b"):
        return "bias"
    return "matrix"


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {"embed.E": (cfg.vocab_size, d), "embed.R": (cfg.n_relations, d)}

    def ln(prefix):
        shapes[f"{prefix}.gamma"] = (d,)
        shapes[f"{prefix}.beta"] = (d,)

    def attn(prefix):
        for p in "qkvo":
            shapes[f"{prefix}.W{p}"] = (d, d)
            shapes[f"{prefix}.b{p}"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.W1"] = (f, d)
        shapes[f"{prefix}.b1"] = (f,)
        shapes[f"{prefix}.W2"] = (d, f)
        shapes[f"{prefix}.b2"] = (d,)

    for l in range(cfg.enc_layers):
        ln(f"enc.{l}.ln1"); attn(f"enc.{l}.attn"); ln(f"enc.{l}.ln2"); ffn(f"enc.{l}.ffn")
    ln("enc.ln")
    for l in range(cfg.graph_layers):
        for w in ("W_q", "W_k", "W_v", "W_r"):
            shapes[f"graph.{l}.{w}"] = (d, d)
        shapes[f"graph.{l}.a"] = (1, 3 * d)
        ln(f"graph.{l}.ln")
    shapes["fuse.W_g"] = (d, 2 * d)
    shapes["fuse.b_g"] = (d,)
    for l in range(cfg.dec_layers):
        ln(f"dec.{l}.ln1"); attn(f"dec.{l}.self"); ln(f"dec.{l}.ln2"); attn(f"dec.{l}.cross")
        ln(f"dec.{l}.ln3"); ffn(f"dec.{l}.ffn")
    ln("dec.ln")
    return shapes


def init_params(cfg: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> Params:
    """Xavier-uniform matrices, zero biases, unit LayerNorm gains."""
    cfg.validate()
    gen = torch.Generator().manual_seed(seed)
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        kind = param_kind(name)
        if kind == "bias":
            t = torch.zeros(shape, dtype=torch.float64)
        elif kind == "gain":
            t = torch.ones(shape, dtype=torch.float64)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            t = (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound
        params[name] = t.to(dtype)
    return params


def xavier_bound(shape: Sequence[int]) -> float:
    return math.sqrt(6.0 / (shape[0] + shape[1]))


# ---------------------------------------------------------------------------
# building blocks


def layer_norm(x, gamma, beta):
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + LN_EPS) * gamma + beta


def linear(x, W, b=None):
    y = x @ W.transpose(-1, -2)
    return y if b is None else y + b


def dropout(x, rate: float, gen: torch.Generator | None):
    if rate <= 0.0 or gen is None:
        return x
    keep = torch.rand(x.shape, generator=gen, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


def sinusoidal_positions(length: int, d: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    pe = torch.zeros(length, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : d // 2]
    return pe.to(dtype)


def attention_weights(q, k, mask=None):
    """softmax(q kᵀ / sqrt(d_head)) with ``mask`` (True = disallowed) sent to -inf."""
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(mask, float("-inf"))
    scores = scores - scores.amax(-1, keepdim=True).detach()
    ex = torch.exp(scores)
    return ex / ex.sum(-1, keepdim=True)


def split_heads(x, n_heads):
    b, t, d = x.shape
    return x.view(b, t, n_heads, d // n_heads).transpose(1, 2)


def multi_head_attention(q_in, kv_in, p: Params, prefix: str, n_heads: int, mask=None,
                         rate: float = 0.0, gen=None, return_weights: bool = False):
    """Project, attend per head, concatenate and project out.

    ``q_in`` is [B, Tq, d], ``kv_in`` is [B, Tk, d]; ``mask`` broadcasts to [B, 1, Tq, Tk].
    """
    if q_in.dim() != 3 or kv_in.dim() != 3 or q_in.shape[0] != kv_in.shape[0] or q_in.shape[-1] != kv_in.shape[-1]:
        raise ValueError(f"incompatible attention inputs {tuple(q_in.shape)} and {tuple(kv_in.shape)}")
    q = split_heads(linear(q_in, p[f"{prefix}.Wq"], p[f"{prefix}.bq"]), n_heads)
    k = split_heads(linear(kv_in, p[f"{prefix}.Wk"], p[f"{prefix}.bk"]), n_heads)
    v = split_heads(linear(kv_in, p[f"{prefix}.Wv"], p[f"{prefix}.bv"]), n_heads)
    w = attention_weights(q, k, mask)
    ctx = dropout(w, rate, gen) @ v
    b, h, t, dh = ctx.shape
    out = linear(ctx.transpose(1, 2).reshape(b, t, h * dh), p[f"{prefix}.Wo"], p[f"{prefix}.bo"])
    return (out, w) if return_weights else out


def feed_forward(x, p: Params, prefix: str, rate: float = 0.0, gen=None):
    h = torch.relu(linear(x, p[f"{prefix}.W1"], p[f"{prefix}.b1"]))
    return linear(dropout(h, rate, gen), p[f"{prefix}.W2"], p[f"{prefix}.b2"])


def graph_attention_layer(h, src, dst, rel, R, p: Params, prefix: str, return_weights: bool = False):
    """One relation-aware GAT layer over a flat node set.

    ``h`` is [N, d]; ``src``/``dst``/``rel`` are [E] index tensors for edges src -> dst.
    Each node attends over its incoming edges with
    score = LeakyReLU(a · [W_q h_dst ‖ W_k h_src ‖ W_r R[rel]]).
    """
    n = h.shape[0]
    if src.numel():
        rel_feat = linear(R[rel], p[f"{prefix}.W_r"])
        q = linear(h, p[f"{prefix}.W_q"])[dst]
        k = linear(h, p[f"{prefix}.W_k"])[src]
        scores = torch.cat([q, k, rel_feat], dim=-1) @ p[f"{prefix}.a"][0]
        scores = torch.nn.functional.leaky_relu(scores, LEAKY_SLOPE)
        peak = torch.full((n,), float("-inf"), dtype=h.dtype).scatter_reduce(
            0, dst, scores.detach(), reduce="amax", include_self=True)
        ex = torch.exp(scores - peak[dst])
        denom = torch.zeros(n, dtype=h.dtype).index_add(0, dst, ex)
        alpha = ex / denom[dst]
        msg = linear(h, p[f"{prefix}.W_v"])[src] + rel_feat
        agg = torch.zeros_like(h).index_add(0, dst, alpha[:, None] * msg)
    else:
        alpha = h.new_zeros(0)
        agg = torch.zeros_like(h)
    out = layer_norm(h + torch.relu(agg), p[f"{prefix}.ln.gamma"], p[f"{prefix}.ln.beta"])
    return (out, alpha) if return_weights else out


def check_incoming(n_nodes: int, edges) -> None:
    has_in = [False] * n_nodes
    for _, _, d in edges:
        has_in[d] = True
    missing = [i for i, ok in enumerate(has_in) if not ok]
    if missing:
        raise ValueError(f"graph nodes without incoming edges: {missing}")


def graph_attention(node_states, edges, R, p: Params, n_layers: int):
    """Run the stacked graph-attention layers on one graph given as (src, rel, dst) triples."""
    check_incoming(node_states.shape[0], edges)
    src = torch.tensor([e[0] for e in edges], dtype=torch.long)
    rel = torch.tensor([e[1] for e in edges], dtype=torch.long)
    dst = torch.tensor([e[2] for e in edges], dtype=torch.long)
    h = node_states
    for l in range(n_layers):
        h = graph_attention_layer(h, src, dst, rel, R, p, f"graph.{l}")
    return h


def gate(token_states, node_states, W_g, b_g):
    g = torch.sigmoid(linear(torch.cat([token_states, node_states], -1), W_g, b_g))
    return g * token_states + (1 - g) * node_states


def fuse(token_states, node_states, concept_token_spans: dict[int, tuple[int, int]], p: Params):
    """Gate each concept node's state into the tokens of its span.  [S, d] x [N, d] -> [S, d]."""
    owner = [-1] * token_states.shape[0]
    for node, (s, e) in concept_token_spans.items():
        for pos in range(s, e + 1):
            if owner[pos] != -1:
                raise ValueError(f"overlapping concept spans at token {pos}")
            owner[pos] = node
    if all(o == -1 for o in owner):
        return token_states
    idx = torch.tensor([max(o, 0) for o in owner])
    inside = torch.tensor([o != -1 for o in owner])[:, None]
    fused = gate(token_states, node_states[idx], p["fuse.W_g"], p["fuse.b_g"])
    return torch.where(inside, fused, token_states)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    src: torch.Tensor          # [B, S]
    tgt_in: torch.Tensor       # [B, T]
    tgt_out: torch.Tensor      # [B, T] (PAD where ignored)
    node_mask: torch.Tensor    # [B, N] True for real nodes
    span_w: torch.Tensor       # [B, N, S] averaging weights over concept spans
    tok_ids: torch.Tensor      # [B, N, L] surface token ids for embedding-initialized nodes
    tok_w: torch.Tensor        # [B, N, L]
    tok_node: torch.Tensor     # [B, S] owning node index or -1
    edge_src: torch.Tensor     # [E] flat node index b*N + n
    edge_dst: torch.Tensor
    edge_rel: torch.Tensor

    @property
    def size(self) -> int:
        return self.src.shape[0]


def collate(examples: Sequence[EncodedExample], graph_blind: bool = False,
            decoder_inputs: Sequence[Sequence[int]] | None = None) -> Batch:
    """Pad a list of encoded examples to the longest member.

    With ``decoder_inputs`` the given id sequences feed the decoder unchanged (no
    shifted labels); otherwise teacher forcing uses ``target[:-1]`` -> ``target[1:]``.
    """
    B = len(examples)
    S = max(len(ex.input_ids) for ex in examples)
    if decoder_inputs is None:
        dec_in = [ex.target_ids[:-1] for ex in examples]
        dec_out = [ex.target_ids[1:] for ex in examples]
    else:
        dec_in = [list(d) for d in decoder_inputs]
        dec_out = [[PAD] * len(d) for d in dec_in]
    T = max(len(d) for d in dec_in)
    graphs = [ex.subgraph.strip_to_self_loops() if graph_blind else ex.subgraph for ex in examples]
    N = max(len(g.nodes) for g in graphs)
    L = max(len(t) for ex in examples for t in ex.node_token_ids)

    src = torch.full((B, S), PAD, dtype=torch.long)
    tgt_in = torch.full((B, T), PAD, dtype=torch.long)
    tgt_out = torch.full((B, T), PAD, dtype=torch.long)
    node_mask = torch.zeros(B, N, dtype=torch.bool)
    span_w = torch.zeros(B, N, S, dtype=torch.float64)
    tok_ids = torch.full((B, N, L), PAD, dtype=torch.long)
    tok_w = torch.zeros(B, N, L, dtype=torch.float64)
    tok_node = torch.full((B, S), -1, dtype=torch.long)
    es, ed, er = [], [], []
    for b, (ex, g) in enumerate(zip(examples, graphs)):
        src[b, : len(ex.input_ids)] = torch.tensor(ex.input_ids)
        tgt_in[b, : len(dec_in[b])] = torch.tensor(dec_in[b], dtype=torch.long)
        tgt_out[b, : len(dec_out[b])] = torch.tensor(dec_out[b], dtype=torch.long)
        node_mask[b, : len(g.nodes)] = True
        for n, node in enumerate(g.nodes):
            span = ex.concept_token_spans.get(n) if node.origin is Origin.CONCEPT else None
            if span is not None:
                s, e = span
                span_w[b, n, s : e + 1] = 1.0 / (e - s + 1)
                if (tok_node[b, s : e + 1] != -1).any():
                    raise ValueError("overlapping concept spans")
                tok_node[b, s : e + 1] = n
            else:
                toks = ex.node_token_ids[n]
                tok_ids[b, n, : len(toks)] = torch.tensor(toks)
                tok_w[b, n, : len(toks)] = 1.0 / len(toks)
        check_incoming(len(g.nodes), g.edges)
        for s_, r_, d_ in g.edges:
            es.append(b * N + s_); er.append(r_); ed.append(b * N + d_)
    return Batch(src, tgt_in, tgt_out, node_mask, span_w, tok_ids, tok_w, tok_node,
                 torch.tensor(es, dtype=torch.long), torch.tensor(ed, dtype=torch.long),
                 torch.tensor(er, dtype=torch.long))


# ---------------------------------------------------------------------------
# forward


def _check_ids(batch: Batch, cfg: ModelConfig) -> None:
    if batch.src.shape[1] > cfg.max_len or batch.tgt_in.shape[1] > cfg.max_len:
        raise ValueError(f"sequence longer than max_len={cfg.max_len}")
    for t in (batch.src, batch.tgt_in, batch.tok_ids):
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= cfg.vocab_size):
            raise ValueError("token id outside the vocabulary")
    if batch.edge_rel.numel() and int(batch.edge_rel.max()) >= cfg.n_relations:
        raise ValueError("relation id outside the relation embedding table")


def embed(params: Params, ids, cfg: ModelConfig):
    return params["embed.E"][ids] * math.sqrt(cfg.d_model)


def encode(params: Params, cfg: ModelConfig, batch: Batch, gen=None):
    """Encoder stack, node initialization, graph attention and gated fusion.

    Returns (memory [B, S+N, d], memory_mask [B, S+N] True = padding, node_states [B, N, d]).
    """
    dtype = params["embed.E"].dtype
    rate = cfg.dropout_rate if gen is not None else 0.0
    B, S = batch.src.shape
    N = batch.node_mask.shape[1]
    src_pad = batch.src == PAD
    x = embed(params, batch.src, cfg) + sinusoidal_positions(S, cfg.d_model, dtype)
    mask = src_pad[:, None, None, :]
    for l in range(cfg.enc_layers):
        pre = f"enc.{l}"
        h = layer_norm(x, params[f"{pre}.ln1.gamma"], params[f"{pre}.ln1.beta"])
        x = x + multi_head_attention(h, h, params, f"{pre}.attn", cfg.n_heads, mask, rate, gen)
        h = layer_norm(x, params[f"{pre}.ln2.gamma"], params[f"{pre}.ln2.beta"])
        x = x + feed_forward(h, params, f"{pre}.ffn", rate, gen)
    tokens = layer_norm(x, params["enc.ln.gamma"], params["enc.ln.beta"])

    nodes = batch.span_w.to(dtype) @ tokens
    nodes = nodes + (batch.tok_w.to(dtype)[..., None] * embed(params, batch.tok_ids, cfg)).sum(2)
    h = nodes.reshape(B * N, cfg.d_model)
    for l in range(cfg.graph_layers):
        h = graph_attention_layer(h, batch.edge_src, batch.edge_dst, batch.edge_rel,
                                  params["embed.R"], params, f"graph.{l}")
    nodes = h.reshape(B, N, cfg.d_model)

    owner = batch.tok_node.clamp(min=0)
    node_at_tok = torch.gather(nodes, 1, owner[..., None].expand(B, S, cfg.d_model))
    fused = gate(tokens, node_at_tok, params["fuse.W_g"], params["fuse.b_g"])
    tokens = torch.where((batch.tok_node >= 0)[..., None], fused, tokens)

    memory = torch.cat([tokens, nodes], dim=1)
    memory_mask = torch.cat([src_pad, ~batch.node_mask], dim=1)
    return memory, memory_mask, nodes


def decode(params: Params, cfg: ModelConfig, memory, memory_mask, tgt_in, gen=None):
    dtype = params["embed.E"].dtype
    rate = cfg.dropout_rate if gen is not None else 0.0
    T = tgt_in.shape[1]
    y = embed(params, tgt_in, cfg) + sinusoidal_positions(T, cfg.d_model, dtype)
    causal = torch.triu(torch.ones(T, T, dtype=torch.bool), diagonal=1)[None, None]
    cross_mask = memory_mask[:, None, None, :]
    for l in range(cfg.dec_layers):
        pre = f"dec.{l}"
        h = layer_norm(y, params[f"{pre}.ln1.gamma"], params[f"{pre}.ln1.beta"])
        y = y + multi_head_attention(h, h, params, f"{pre}.self", cfg.n_heads, causal, rate, gen)
        h = layer_norm(y, params[f"{pre}.ln2.gamma"], params[f"{pre}.ln2.beta"])
        y = y + multi_head_attention(h, memory, params, f"{pre}.cross", cfg.n_heads, cross_mask, rate, gen)
        h = layer_norm(y, params[f"{pre}.ln3.gamma"], params[f"{pre}.ln3.beta"])
        y = y + feed_forward(h, params, f"{pre}.ffn", rate, gen)
    y = layer_norm(y, params["dec.ln.gamma"], params["dec.ln.beta"])
    return y @ params["embed.E"].T


def forward_batch(params: Params, cfg: ModelConfig, batch: Batch, gen=None) -> dict:
    _check_ids(batch, cfg)
    memory, memory_mask, nodes = encode(params, cfg, batch, gen)
    logits = decode(params, cfg, memory, memory_mask, batch.tgt_in, gen)
    return {"logits": logits, "memory": memory, "memory_mask": memory_mask, "node_states": nodes}


def forward(params: Params, cfg: ModelConfig, example: EncodedExample, decoder_ids: Sequence[int],
            graph_blind: bool = False) -> dict:
    """Single-example forward; ``logits`` is [len(decoder_ids), vocab_size]."""
    batch = collate([example], graph_blind=graph_blind, decoder_inputs=[decoder_ids])
    out = forward_batch(params, cfg, batch)
    return {"logits": out["logits"][0], "memory": out["memory"][0], "node_states": out["node_states"][0]}


def cross_entropy(logits, targets, pad_mask=None, label_smoothing: float = 0.0):
    """Mean smoothed cross-entropy over positions where ``pad_mask`` is False.

    ``pad_mask`` defaults to ``targets == PAD``.
    """
    if not 0.0 <= label_smoothing <= 0.3:
        raise ValueError("label_smoothing must lie in [0, 0.3]")
    if pad_mask is None:
        pad_mask = targets == PAD
    keep = ~pad_mask
    n = int(keep.sum())
    if n == 0:
        raise ValueError("every target position is padding")
    V = logits.shape[-1]
    shifted = logits - logits.amax(-1, keepdim=True).detach()
    logp = shifted - torch.log(torch.exp(shifted).sum(-1, keepdim=True))
    nll = -logp.gather(-1, targets[..., None]).squeeze(-1)
    if label_smoothing:
        per_pos = (1 - label_smoothing) * nll - label_smoothing * logp.mean(-1)
    else:
        per_pos = nll
    return (per_pos * keep).sum() / n


def batch_loss(params: Params, cfg: ModelConfig, batch: Batch, label_smoothing: float = 0.0, gen=None):
    out = forward_batch(params, cfg, batch, gen)
    return cross_entropy(out["logits"], batch.tgt_out, label_smoothing=label_smoothing)
