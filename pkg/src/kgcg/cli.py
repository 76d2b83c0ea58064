"""Command-line entry point: ``kgcg <command> [flags]``.

Every command accepts ``--config run.json``; explicit flags override the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import torch

from kgcg.checkpoint import CheckpointError, read_checkpoint, save_checkpoint
from kgcg.data import CorpusFormatError, Vocabulary, dump_jsonl, load_jsonl
from kgcg.experiment import DecodeConfig, GroundingConfig, generate, run_ablation, split_synth
from kgcg.grounding import ConceptSet, build_subgraph
from kgcg.kg_store import KGFormatError, load_tsv
from kgcg.metrics import ExactMatchProvider, MetricInputError, TableProvider, evaluate
from kgcg.model import ModelConfig
from kgcg.training import AdamState, TrainConfig, TrainResult, grad_check, train

log = logging.getLogger("kgcg")

PATH_KEYS = ("kg", "train", "eval", "checkpoint", "output")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=lambda: {k: None for k in PATH_KEYS})
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    grounding: GroundingConfig = field(default_factory=GroundingConfig)
    graph_blind: bool = False

    def to_dict(self) -> dict:
        return {
            "model": asdict(self.model),
            "train": asdict(self.train),
            "paths": dict(self.paths),
            "decode": asdict(self.decode),
            "grounding": asdict(self.grounding),
            "graph_blind": self.graph_blind,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        def build(kind, key):
            section = d.get(key, {})
            known = {f.name for f in fields(kind)}
            unknown = set(section) - known
            if unknown:
                raise ValueError(f"unknown {key} config keys: {sorted(unknown)}")
            return kind(**section)

        paths = {k: None for k in PATH_KEYS}
        unknown = set(d.get("paths", {})) - set(PATH_KEYS)
        if unknown:
            raise ValueError(f"unknown path keys: {sorted(unknown)}")
        paths.update(d.get("paths", {}))
        return cls(build(ModelConfig, "model"), build(TrainConfig, "train"), paths,
                   build(DecodeConfig, "decode"), build(GroundingConfig, "grounding"),
                   bool(d.get("graph_blind", False)))


def resolve_config(args, data_key: str) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg = RunConfig.from_dict(json.load(fh))
        # relative paths in a config file are anchored at the file's directory
        base = Path(args.config).parent
        cfg.paths = {k: (str(base / v) if v and not os.path.isabs(v) else v) for k, v in cfg.paths.items()}
    overrides = {"kg": args.kg, data_key: args.data, "checkpoint": args.ckpt, "output": args.out}
    cfg.paths.update({k: v for k, v in overrides.items() if v is not None})
    if args.seed is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    if getattr(args, "steps", None) is not None:
        cfg.train = replace(cfg.train, max_steps=args.steps)
    if args.beam is not None:
        cfg.decode = replace(cfg.decode, beam=args.beam)
    if args.max_len is not None:
        cfg.decode = replace(cfg.decode, max_len=args.max_len)
    if getattr(args, "graph_blind", False):
        cfg.graph_blind = True
    cfg.train.validate()
    return cfg


def announce(cfg: RunConfig | dict) -> None:
    payload = cfg.to_dict() if isinstance(cfg, RunConfig) else cfg
    seed = payload.get("train", {}).get("seed", payload.get("seed"))
    print(f"config: {json.dumps(payload, ensure_ascii=False, sort_keys=True)}", file=sys.stderr)
    print(f"seed: {seed}", file=sys.stderr)


def need(cfg: RunConfig, *keys: str) -> list[str]:
    out = []
    for k in keys:
        p = cfg.paths.get(k)
        if not p:
            raise ValueError(f"missing path: {k} (pass a flag or set paths.{k} in --config)")
        out.append(p)
    return out


def require_exists(*paths: str) -> None:
    for p in paths:
        if not Path(p).exists():
            raise FileNotFoundError(f"input not found: {p}")


# ---------------------------------------------------------------------------
# commands


def cmd_kg_stats(args) -> int:
    cfg = resolve_config(args, "train")
    (kg_path,) = need(cfg, "kg")
    require_exists(kg_path)
    announce(cfg)
    stats = load_tsv(kg_path).stats().as_dict()
    print(json.dumps({"entities": stats["entity_count"], "relations": stats["relation_count"],
                      "triples": stats["triple_count"], "max_out_degree": stats["max_out_degree"]}))
    return 0


def cmd_ground(args) -> int:
    cfg = resolve_config(args, "eval")
    (kg_path,) = need(cfg, "kg")
    require_exists(kg_path)
    announce(cfg)
    kg = load_tsv(kg_path)
    if args.concepts:
        sets = [ConceptSet(args.concepts.split(","))]
    else:
        (data,) = need(cfg, "eval")
        require_exists(data)
        sets = [ex.concept_set for ex in load_jsonl(data)]
    g = cfg.grounding
    for cs in sets:
        sub = build_subgraph(cs, kg, max(g.node_budget, len(cs)), g.fanout)
        print(sub.to_json(kg))
    return 0


def _train_result_from_checkpoint(path: str) -> TrainResult:
    ck = read_checkpoint(path)
    if ck.adam_m is None or ck.vocab is None:
        raise CheckpointError(f"{path}: no optimizer state to resume from")
    adam = AdamState(ck.adam_m, ck.adam_v, int(ck.meta.get("step", 0)))
    return TrainResult(ck.params, list(ck.meta.get("loss_trace", [])), ck.model_cfg,
                       Vocabulary.from_list(ck.vocab), adam)


def cmd_train(args) -> int:
    cfg = resolve_config(args, "train")
    kg_path, data, ckpt = need(cfg, "kg", "train", "checkpoint")
    require_exists(kg_path, data)
    announce(cfg)
    kg = load_tsv(kg_path)
    corpus = load_jsonl(data)
    resume = _train_result_from_checkpoint(args.resume) if args.resume else None
    res = train(corpus, kg, cfg.model, cfg.train, node_budget=cfg.grounding.node_budget,
                fanout=cfg.grounding.fanout, graph_blind=cfg.graph_blind, resume=resume)
    meta = {"step": res.adam.step, "seed": cfg.train.seed, "graph_blind": cfg.graph_blind,
            "grounding": asdict(cfg.grounding), "loss_trace": res.loss_trace}
    save_checkpoint(res.params, res.model_cfg, ckpt, vocab=res.vocab.to_list(),
                    adam_m=res.adam.m, adam_v=res.adam.v, meta=meta)
    final = res.loss_trace[-1] if res.loss_trace else None
    print(json.dumps({"checkpoint": ckpt, "steps": res.adam.step, "final_loss": final}))
    return 0


def cmd_generate(args) -> int:
    cfg = resolve_config(args, "eval")
    kg_path, data, ckpt, out = need(cfg, "kg", "eval", "checkpoint", "output")
    require_exists(kg_path, data, ckpt)
    announce(cfg)
    ck = read_checkpoint(ckpt)
    if ck.vocab is None:
        raise CheckpointError(f"{ckpt}: checkpoint carries no vocabulary")
    kg = load_tsv(kg_path)
    if len(kg.relations) > ck.model_cfg.n_relations:
        raise ValueError(f"graph has {len(kg.relations)} relations, model was trained with {ck.model_cfg.n_relations}")
    blind = cfg.graph_blind or bool(ck.meta.get("graph_blind", False))
    lines = generate(ck.params, ck.model_cfg, Vocabulary.from_list(ck.vocab), kg, load_jsonl(data),
                     cfg.decode, cfg.grounding, graph_blind=blind)
    Path(out).write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    print(json.dumps({"output": out, "n": len(lines)}))
    return 0


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args, "eval")
    (data,) = need(cfg, "eval")
    preds = args.preds or cfg.paths.get("output")
    if not preds:
        raise ValueError("missing predictions: pass --preds")
    require_exists(data, preds)
    announce(cfg)
    ckpt = cfg.paths.get("checkpoint")
    if ckpt and Path(ckpt).exists():
        ck = read_checkpoint(ckpt)
        provider = TableProvider(Vocabulary.from_list(ck.vocab), ck.params["embed.E"].numpy())
    else:
        provider = ExactMatchProvider()
    report_path = args.report or (str(Path(preds).with_suffix(".report.json")))
    report = evaluate(preds, data, provider, report_path)
    print(report.table())
    print(json.dumps({"report": report_path}))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args, "train")
    seed = cfg.train.seed
    model_cfg = ModelConfig(d_model=8, n_heads=2, d_ff=16, max_len=cfg.model.max_len)
    announce({"model": asdict(model_cfg), "seed": seed, "f64": True, "step_size": args.step_size})
    # float32 central differences drown in rounding noise, so the check always runs in 64-bit
    tol = 1e-4
    res = grad_check(model_cfg, seed=seed, step_size=args.step_size, dtype=torch.float64)
    print(json.dumps({"max_rel_error": res.max_rel_error, "checked": res.checked, "tolerance": tol,
                      "worst": max(res.per_param, key=res.per_param.get)}))
    return 0 if res.max_rel_error < tol else 1


def cmd_demo_synth(args) -> int:
    out = Path(args.out or "synth")
    seed = args.seed if args.seed is not None else 0
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set, kg = split_synth(args.entities, args.relations, args.train_size, args.test_size, seed)
    kg.dump_tsv(out / "kg.tsv")
    dump_jsonl(train_set, out / "train.jsonl")
    dump_jsonl(test_set, out / "test.jsonl")
    run_cfg = RunConfig(
        train=TrainConfig(seed=seed, max_steps=args.steps if args.steps is not None else 3000, batch_size=32),
        paths={"kg": "kg.tsv", "train": "train.jsonl", "eval": "test.jsonl",
               "checkpoint": "model.ckpt", "output": "generations.txt"},
        decode=DecodeConfig(beam=args.beam or 1, max_len=args.max_len or 16),
    )
    (out / "config.json").write_text(json.dumps(run_cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
    announce(run_cfg)
    summary = {"dir": str(out), "train": len(train_set), "test": len(test_set), "triples": len(kg)}
    if args.ablation:
        res = run_ablation(args.entities, args.relations, args.train_size, args.test_size, seed,
                           run_cfg.model, run_cfg.train, run_cfg.grounding, run_cfg.decode)
        (out / "ablation.json").write_text(json.dumps(res.as_dict(), indent=2) + "\n", encoding="utf-8")
        summary["relation_accuracy"] = res.relation_accuracy
        for name, rep in res.reports.items():
            print(f"{name:>12}: " + "  ".join(f"{k}={v}" for k, v in rep.items()))
    print(json.dumps(summary))
    return 0


# ---------------------------------------------------------------------------
# parser


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", help="JSON run config; flags override its values")
    p.add_argument("--kg", metavar="PATH", help="knowledge graph TSV (head<TAB>relation<TAB>tail)")
    p.add_argument("--data", metavar="PATH", help="corpus JSONL with concept_set and references")
    p.add_argument("--ckpt", metavar="PATH", help="model checkpoint file")
    p.add_argument("--out", metavar="PATH", help="output file or directory")
    p.add_argument("--beam", metavar="N", type=int, help="beam width (1 = greedy)")
    p.add_argument("--max-len", metavar="N", type=int, help="maximum generated tokens")
    p.add_argument("--seed", metavar="N", type=int, help="random seed")
    p.add_argument("--deterministic", action="store_true", help="single thread, deterministic kernels")
    p.add_argument("--f64", action="store_true", help="64-bit precision for gradient checks (gradcheck always uses it)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="kgcg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    kg = sub.add_parser("kg", help="knowledge graph utilities")
    kg_sub = kg.add_subparsers(dest="kg_command", required=True)
    kg_sub.add_parser("stats", parents=[common], help="print graph statistics").set_defaults(func=cmd_kg_stats)

    g = sub.add_parser("ground", parents=[common], help="print concept subgraphs as JSON")
    g.add_argument("--concepts", metavar="A,B,...", help="comma-separated concept set (instead of --data)")
    g.set_defaults(func=cmd_ground)

    t = sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    t.add_argument("--steps", metavar="N", type=int, help="max optimizer steps")
    t.add_argument("--resume", metavar="PATH", help="continue from this checkpoint's optimizer state")
    t.add_argument("--graph-blind", action="store_true", help="strip subgraphs to SELF loops (ablation)")
    t.set_defaults(func=cmd_train)

    gen = sub.add_parser("generate", parents=[common], help="write one generated sentence per input line")
    gen.add_argument("--graph-blind", action="store_true", help="strip subgraphs to SELF loops (ablation)")
    gen.set_defaults(func=cmd_generate)

    ev = sub.add_parser("evaluate", parents=[common], help="score predictions against references")
    ev.add_argument("--preds", metavar="PATH", help="generation file, one sentence per line")
    ev.add_argument("--report", metavar="PATH", help="report JSON path (default: <preds>.report.json)")
    ev.set_defaults(func=cmd_evaluate)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check (d_model=8)")
    gc.add_argument("--step-size", metavar="H", type=float, default=1e-5, help="central-difference step")
    gc.set_defaults(func=cmd_gradcheck)

    demo = sub.add_parser("demo", help="bundled experiments")
    demo_sub = demo.add_subparsers(dest="demo_command", required=True)
    ds = demo_sub.add_parser("synth", parents=[common], help="write the synthetic benchmark (and run the ablation)")
    ds.add_argument("--relations", metavar="N", type=int, default=4, help="number of relation types")
    ds.add_argument("--entities", metavar="N", type=int, default=100, help="number of entities")
    ds.add_argument("--train-size", metavar="N", type=int, default=2000, help="training examples")
    ds.add_argument("--test-size", metavar="N", type=int, default=200, help="test examples (unseen pairs)")
    ds.add_argument("--steps", metavar="N", type=int, help="training steps written to config.json")
    ds.add_argument("--ablation", action="store_true", help="train KG and graph-blind models and compare")
    ds.set_defaults(func=cmd_demo_synth)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("KGCG_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def run(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    try:
        return args.func(args)
    except (KGFormatError, CorpusFormatError, CheckpointError, MetricInputError,
            ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
