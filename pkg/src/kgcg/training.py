"""Deterministic Adam training loop and finite-difference gradient checking."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch

from kgcg.data import EncodedExample, Example, Vocabulary, build_vocab, encode_corpus, synth_corpus
from kgcg.kg_store import KnowledgeGraph
from kgcg.model import ModelConfig, Params, batch_loss, collate, cross_entropy, forward_batch, init_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 8
    max_steps: int = 1000
    grad_clip_norm: float = 1.0
    label_smoothing: float = 0.0
    seed: int = 0
    eval_every: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: Params
    v: Params
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Params) -> "AdamState":
        return cls({k: torch.zeros_like(p) for k, p in params.items()},
                   {k: torch.zeros_like(p) for k, p in params.items()}, 0)


def clip_by_global_norm(grads: Params, max_norm: float) -> tuple[Params, float]:
    norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


@torch.no_grad()
def adam_step(params: Params, grads: Params, state: AdamState, t: int, cfg: TrainConfig) -> tuple[Params, AdamState]:
    """One bias-corrected Adam update, after global-norm gradient clipping.

    Parameters and moments are updated in place and also returned.
    """
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, parameter has {tuple(params[name].shape)}")
    grads, _ = clip_by_global_norm(grads, cfg.grad_clip_norm)
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, g in grads.items():
        m = state.m[name].mul_(b1).add_(g, alpha=1 - b1)
        v = state.v[name].mul_(b2).addcmul_(g, g, value=1 - b2)
        params[name].sub_(cfg.learning_rate * (m / c1) / (torch.sqrt(v / c2) + cfg.epsilon))
    state.step = t
    return params, state


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def step_generator(seed: int, step: int) -> torch.Generator:
    # dropout masks depend only on (seed, step), so a resumed run replays them exactly
    return torch.Generator().manual_seed(seed * 1_000_003 + step)


@dataclass
class TrainResult:
    params: Params
    loss_trace: list[float]
    model_cfg: ModelConfig
    vocab: Vocabulary
    adam: AdamState
    eval_trace: list[tuple[int, float]] = field(default_factory=list)


def train(
    corpus: Sequence[Example],
    kg: KnowledgeGraph,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    *,
    vocab: Vocabulary | None = None,
    node_budget: int = 8,
    fanout: int = 2,
    graph_blind: bool = False,
    resume: TrainResult | None = None,
    eval_fn: Callable[[Params, ModelConfig], float] | None = None,
    encoded: Sequence[EncodedExample] | None = None,
) -> TrainResult:
    """Train with teacher forcing.

    ``model_cfg.vocab_size`` and ``n_relations`` are resolved from the vocabulary and the
    graph's relation registry.  ``resume`` continues a previous result from its Adam step.
    """
    if not corpus:
        raise ValueError("cannot train on an empty corpus")
    train_cfg.validate()
    if vocab is None:
        vocab = resume.vocab if resume is not None else build_vocab(corpus)
    model_cfg = replace(model_cfg, vocab_size=len(vocab), n_relations=len(kg.relations))
    model_cfg.validate()
    if encoded is None:
        encoded = encode_corpus(corpus, kg, vocab, model_cfg.max_len, node_budget, fanout)

    if resume is not None:
        if resume.model_cfg != model_cfg:
            raise ValueError("resume checkpoint was trained with a different model config")
        params = {k: v.detach().clone() for k, v in resume.params.items()}
        adam = AdamState({k: v.clone() for k, v in resume.adam.m.items()},
                         {k: v.clone() for k, v in resume.adam.v.items()}, resume.adam.step)
        trace = list(resume.loss_trace)
    else:
        params = init_params(model_cfg, train_cfg.seed)
        adam = AdamState.zeros_like(params)
        trace = []
    evals: list[tuple[int, float]] = list(resume.eval_trace) if resume is not None else []

    n = len(encoded)
    bs = train_cfg.batch_size
    per_epoch = math.ceil(n / bs)
    names = list(params)
    for step in range(adam.step, train_cfg.max_steps):
        epoch, slot = divmod(step, per_epoch)
        idx = epoch_order(train_cfg.seed, epoch, n)[slot * bs:(slot + 1) * bs]
        batch = collate([encoded[i] for i in idx], graph_blind=graph_blind)
        leaves = {k: params[k].requires_grad_(True) for k in names}
        loss = batch_loss(leaves, model_cfg, batch, train_cfg.label_smoothing,
                          gen=step_generator(train_cfg.seed, step))
        grads = dict(zip(names, torch.autograd.grad(loss, [leaves[k] for k in names])))
        params = {k: v.detach() for k, v in leaves.items()}
        adam_step(params, grads, adam, step + 1, train_cfg)
        trace.append(float(loss.detach()))
        if train_cfg.eval_every and eval_fn is not None and (step + 1) % train_cfg.eval_every == 0:
            evals.append((step + 1, eval_fn(params, model_cfg)))
            log.info("step %d loss %.4f eval %.4f", step + 1, trace[-1], evals[-1][1])
        elif (step + 1) % 100 == 0:
            log.debug("step %d loss %.4f", step + 1, trace[-1])
    return TrainResult(params, trace, model_cfg, vocab, adam, evals)


@torch.no_grad()
def mean_token_loss(params: Params, cfg: ModelConfig, encoded: Sequence[EncodedExample],
                    graph_blind: bool = False, batch_size: int = 64) -> float:
    total, count = 0.0, 0
    for i in range(0, len(encoded), batch_size):
        batch = collate(encoded[i:i + batch_size], graph_blind=graph_blind)
        tokens = int((batch.tgt_out != 0).sum())
        total += float(batch_loss(params, cfg, batch)) * tokens
        count += tokens
    return total / count


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_param: dict[str, float]
    checked: int
    analytic: Params


# gradients below this magnitude are compared absolutely (exact zeros, e.g. key biases)
REL_ERR_FLOOR = 1e-6


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), REL_ERR_FLOOR)


def gradcheck_example(model_cfg: ModelConfig, seed: int):
    """A small random graph-grounded example touching every parameter group."""
    corpus, kg = synth_corpus(n_entities=8, n_relations=3, n_examples=16, seed=seed)
    vocab = build_vocab(corpus)
    cfg = replace(model_cfg, vocab_size=len(vocab), n_relations=len(kg.relations), dropout_rate=0.0)
    encoded = encode_corpus(corpus[:1], kg, vocab, cfg.max_len, node_budget=6, fanout=2)
    return cfg, encoded[0]


def grad_check(model_cfg: ModelConfig, seed: int = 0, step_size: float = 1e-5,
               max_per_tensor: int = 500, dtype: torch.dtype = torch.float64) -> GradCheckResult:
    """Compare autograd against central differences with dropout off.

    Meaningful tolerances need ``dtype=torch.float64``; float32 is a coarse smoke test.

    Tensors larger than ``max_per_tensor`` are checked on a seeded sample of that many entries.
    """
    cfg, example = gradcheck_example(model_cfg, seed)
    params = init_params(cfg, seed, dtype=dtype)
    batch = collate([example])

    def loss_of(p):
        return cross_entropy(forward_batch(p, cfg, batch)["logits"], batch.tgt_out)

    leaves = {k: v.clone().requires_grad_(True) for k, v in params.items()}
    grads = torch.autograd.grad(loss_of(leaves), list(leaves.values()))
    analytic = {k: g.detach() for k, g in zip(leaves, grads)}

    rng = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    checked = 0
    with torch.no_grad():
        for name, tensor in params.items():
            flat = tensor.view(-1)
            idx = np.arange(flat.numel())
            if flat.numel() > max_per_tensor:
                idx = np.sort(rng.choice(flat.numel(), size=max_per_tensor, replace=False))
            worst = 0.0
            for i in idx:
                old = float(flat[i])
                flat[i] = old + step_size
                up = float(loss_of(params))
                flat[i] = old - step_size
                down = float(loss_of(params))
                flat[i] = old
                numeric = (up - down) / (2 * step_size)
                worst = max(worst, relative_error(float(analytic[name].view(-1)[i]), numeric))
            per_param[name] = worst
            checked += len(idx)
    return GradCheckResult(max(per_param.values()), per_param, checked, analytic)
