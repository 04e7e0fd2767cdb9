"""Command-line entry point: ``ddr <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .corpus import DomainSpec, Vocabulary, generate_synthetic_benchmark, load_benchmark, load_corpus, load_qrels, load_queries, save_benchmark, tokenize
from .encoder import encode_many, init_backbone, normalize_similarity
from .experiment import MODES, ExperimentConfig, Pipeline, run_experiment
from .rem import init_rem, insert_rem
from .report import write_report
from .retrieval import EmbeddingIndex, build_index, ndcg_at_k, read_run, recall_at_k, search_many, write_run
from .training import TrainingConfig, adapt_dam, train_supervised

log = logging.getLogger("ddr")


def load_config(args) -> ExperimentConfig:
    data = {}
    if getattr(args, "config", None):
        data = json.loads(Path(args.config).read_text())
    cfg = ExperimentConfig.from_dict(data)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "steps", None) is not None:
        cfg.source_dam_steps = cfg.target_dam_steps = cfg.rem_steps = cfg.dr_steps = args.steps
    if getattr(args, "similarity", None):
        cfg.similarity = normalize_similarity(args.similarity)
    if getattr(args, "loss", None):
        cfg.loss_kind = args.loss
    return cfg


def write_resolved(cfg: ExperimentConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved-config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def _vocab(path) -> Vocabulary:
    return Vocabulary.from_list(Path(path).read_text(encoding="utf-8").split())


def _bench(cfg: ExperimentConfig, data_dir: str | None):
    if data_dir:
        return load_benchmark(data_dir)
    return generate_synthetic_benchmark(
        DomainSpec.from_dict(cfg.source),
        [DomainSpec.from_dict(t) for t in cfg.targets],
        seed=cfg.seed,
        dev_queries=cfg.dev_queries,
    )


def _model(dam: str, rem: str | None):
    return ckpt.assemble(dam, rem)


# --------------------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    out = Path(args.out_dir)
    save_benchmark(_bench(cfg, None), out)
    write_resolved(cfg, out)
    print(f"wrote benchmark to {out}")
    return 0


def cmd_adapt_dam(args) -> int:
    cfg = load_config(args)
    out = Path(args.out_dir)
    bench = _bench(cfg, args.data_dir)
    enc = cfg.encoder_config()
    if args.init == "base":
        init = init_backbone(enc, seed=cfg.seed)
    else:
        init = ckpt.assemble(args.init, None).backbone
    if args.corpus:
        docs = load_corpus(args.corpus)
    else:
        docs = bench.domain(args.domain).docs if args.domain else bench.source.docs
    seqs = [tokenize(d.text, bench.vocab, enc.max_len) for d in docs]
    tcfg = TrainingConfig(
        phase="dam_adaptation",
        lr=args.lr or cfg.target_dam_lr,
        steps=cfg.target_dam_steps,
        mlm_batch_size=cfg.mlm_batch_size,
        seed=cfg.seed,
    )
    dam, curve = adapt_dam(init, seqs, tcfg)
    ckpt.save_checkpoint(dam, out / "dam", seed=cfg.seed)
    with open(out / "mlm_curve.csv", "w") as fh:
        fh.write("step,loss\n")
        for step, loss in curve:
            fh.write(f"{step},{loss:.6f}\n")
    write_resolved(cfg, out)
    print(f"adapted backbone saved to {out / 'dam'}")
    return 0


def cmd_train_rem(args) -> int:
    cfg = load_config(args)
    out = Path(args.out_dir)
    bench = _bench(cfg, args.data_dir)
    pipe = Pipeline(cfg, bench)
    dam = ckpt.assemble(args.dam, None).backbone
    rem = init_rem(cfg.rem_config(), seed=cfg.seed)
    model = insert_rem(dam, rem)
    tcfg = TrainingConfig(
        phase="rem_finetuning",
        lr=args.lr or cfg.rem_lr,
        steps=cfg.rem_steps,
        queries_per_batch=cfg.queries_per_batch,
        hard_negatives_per_query=cfg.hard_negatives_per_query,
        seed=cfg.seed,
        loss_kind=cfg.loss_kind,
    )
    curve = train_supervised(model, pipe.examples(), tcfg, "rem_finetuning")
    ckpt.save_checkpoint(rem, out / "rem", seed=cfg.seed)
    with open(out / "rem_curve.csv", "w") as fh:
        fh.write("step,loss\n")
        for step, loss in curve:
            fh.write(f"{step},{loss:.6f}\n")
    write_resolved(cfg, out)
    print(f"relevance module saved to {out / 'rem'}")
    return 0


def cmd_build_index(args) -> int:
    model = _model(args.dam, args.rem)
    vocab = _vocab(args.vocab)
    index = build_index(model, load_corpus(args.corpus), vocab, args.similarity, workers=args.workers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out, embeddings=index.embeddings.numpy(), doc_ids=np.array(index.doc_ids))
    Path(str(out) + ".json").write_text(
        json.dumps({"similarity_kind": index.similarity_kind, **index.meta}, indent=2, sort_keys=True) + "\n"
    )
    print(f"indexed {len(index)} documents into {out}")
    return 0


def load_index(path: str | Path) -> EmbeddingIndex:
    path = Path(path)
    data = np.load(path if path.suffix == ".npz" else str(path) + ".npz")
    meta_path = Path(str(path) + ".json")
    meta = json.loads(meta_path.read_text()) if meta_path.is_file() else {"similarity_kind": "inner_product"}
    kind = meta.pop("similarity_kind")
    return EmbeddingIndex([str(x) for x in data["doc_ids"]], torch.from_numpy(data["embeddings"]), kind, meta)


def cmd_search(args) -> int:
    index = load_index(args.index)
    model = _model(args.dam, args.rem)
    vocab = _vocab(args.vocab)
    queries = load_queries(args.queries)
    enc = model.backbone.config
    q = encode_many(model, [tokenize(x.text, vocab, enc.max_len) for x in queries])
    run = search_many(index, [x.query_id for x in queries], q, args.k)
    write_run(run, args.out, tag=args.tag)
    print(f"wrote run for {len(queries)} queries to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    run = read_run(args.run)
    qrels = load_qrels(args.qrels)
    values = {
        "ndcg@10": ndcg_at_k(run, qrels, 10),
        "recall@100": recall_at_k(run, qrels, 100),
        "recall@1000": recall_at_k(run, qrels, 1000),
    }
    for k in args.k or []:
        values[f"recall@{k}"] = recall_at_k(run, qrels, k)
    print(json.dumps(values, indent=2))
    return 0


def cmd_experiment(args) -> int:
    cfg = load_config(args)
    modes = []
    for m in args.mode or ["dr", "ddr"]:
        modes.extend(MODES if m == "all" else m.split(","))
    out = Path(args.out_dir)
    bench = load_benchmark(args.data_dir) if args.data_dir else None
    result = run_experiment(modes, cfg, out, bench)
    for m in modes:
        print(f"{m:10s} mean target recall@10 = {result.target_mean(m):.4f}")
    print(f"results in {out}")
    return 0


def cmd_report(args) -> int:
    path = write_report(args.results_dir)
    print(path.read_text())
    return 0


# --------------------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="override every training step count")
    p.add_argument("--similarity", choices=["dot", "cosine"])
    p.add_argument("--loss", choices=["contrastive", "margin_mse"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddr", description="Disentangled dense retrieval at desk scale")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    _common(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("adapt-dam", help="masked-LM adaptation of a backbone")
    _common(p)
    p.add_argument("--init", default="base", help="'base' or a checkpoint directory")
    p.add_argument("--data-dir", help="benchmark directory from gen-data (default: regenerate)")
    p.add_argument("--domain", help="domain name inside the benchmark")
    p.add_argument("--corpus", help="explicit corpus.jsonl (overrides --domain)")
    p.add_argument("--lr", type=float)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_adapt_dam)

    p = sub.add_parser("train-rem", help="train a relevance module against a frozen backbone")
    _common(p)
    p.add_argument("--dam", required=True)
    p.add_argument("--data-dir")
    p.add_argument("--lr", type=float)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train_rem)

    p = sub.add_parser("build-index", help="encode a corpus")
    p.add_argument("--dam", required=True)
    p.add_argument("--rem")
    p.add_argument("--vocab", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--similarity", choices=["dot", "cosine"])
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("search", help="exact top-k search for a query file")
    p.add_argument("--index", required=True)
    p.add_argument("--dam", required=True)
    p.add_argument("--rem")
    p.add_argument("--vocab", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--k", type=int, default=1000)
    p.add_argument("--tag", default="ddr")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("evaluate", help="NDCG@10 and recall of a TREC run")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--k", type=int, action="append", help="extra recall cutoffs")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="run experiment modes end to end")
    _common(p)
    p.add_argument("--mode", action="append", help=f"one of {', '.join(MODES)} or 'all'; repeatable")
    p.add_argument("--data-dir")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="render report.md for a results directory")
    p.add_argument("--results-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
