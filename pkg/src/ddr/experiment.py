"""End-to-end experiment modes over a synthetic benchmark.

Every trained artefact is computed lazily and cached on the pipeline, so
modes that share a stage (e.g. the source backbone) train it once.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .corpus import Benchmark, DomainData, DomainSpec, generate_synthetic_benchmark, teacher_score, tokenize
from .encoder import EncoderBackbone, EncoderConfig, encode_many, init_backbone
from .rem import AssembledModel, RemConfig, RemModule, insert_rem
from .retrieval import BM25Index, build_index, ndcg_at_k, recall_at_k, search_many, write_run
from .training import (
    PAPER_LR_DR,
    PAPER_LR_REM,
    PAPER_LR_SOURCE_DAM,
    PAPER_LR_TARGET_DAM,
    TrainingConfig,
    TrainingExample,
    adapt_dam,
    disentangled_finetune,
    sequential_init,
    train_supervised,
)

log = logging.getLogger(__name__)

MODES = ("dr", "ddr", "ddr_no_df", "ddr_no_si", "ddr_no_d")
METRICS = (("ndcg", 10), ("recall", 10), ("recall", 100), ("recall", 1000))

# Desk-scale learning rates keep the original ratios, scaled up for small from-scratch models.
LR_SCALE = 50.0


def desk_encoder() -> EncoderConfig:
    # 0.1 is roughly 1/sqrt(64). With the usual 0.02, embedding rows that training
    # never touches stay far smaller than trained ones, so target documents made
    # of such words all encode alike.
    return EncoderConfig(init_std=0.1)


def default_targets(n: int = 3, overlap: float = 0.3) -> list[dict]:
    return [DomainSpec(f"target{i}", overlap=overlap, num_docs=1000, num_queries=200).to_dict() for i in range(n)]


@dataclass
class ExperimentConfig:
    seed: int = 0
    encoder: dict = field(default_factory=lambda: desk_encoder().to_dict())
    lora_rank: int = 16
    pa_bottleneck: int = 16
    lora_alpha: float | None = None
    pa_scale: float = 1.0
    source: dict = field(default_factory=lambda: DomainSpec("source", num_docs=2000, num_queries=2000).to_dict())
    targets: list = field(default_factory=default_targets)
    dev_queries: int = 200
    source_dam_steps: int = 300
    target_dam_steps: int = 300
    rem_steps: int = 300
    dr_steps: int = 300
    source_dam_lr: float = PAPER_LR_SOURCE_DAM * LR_SCALE
    target_dam_lr: float = PAPER_LR_TARGET_DAM * LR_SCALE
    rem_lr: float = PAPER_LR_REM * LR_SCALE
    dr_lr: float = PAPER_LR_DR * LR_SCALE
    queries_per_batch: int = 32
    hard_negatives_per_query: int = 3
    hard_negative_pool: int = 10
    mlm_batch_size: int = 64
    loss_kind: str = "contrastive"
    similarity: str = "inner_product"
    curve_every: int = 50
    curve_k: int = 10
    search_depth: int = 1000
    save_checkpoints: bool = True

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig.from_dict({**self.encoder, "similarity_kind": self.similarity})

    def rem_config(self) -> RemConfig:
        return RemConfig.for_encoder(
            self.encoder_config(),
            lora_rank=self.lora_rank,
            pa_bottleneck=self.pa_bottleneck,
            lora_alpha=self.lora_alpha,
            pa_scale=self.pa_scale,
        )

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class DomainMetrics:
    mode: str
    domain: str
    values: dict[str, float]


class Pipeline:
    """Lazily trains and caches every artefact the experiment modes need."""

    def __init__(self, cfg: ExperimentConfig, bench: Benchmark | None = None):
        self.cfg = cfg
        self.enc_cfg = cfg.encoder_config()
        if bench is None:
            bench = generate_synthetic_benchmark(
                DomainSpec.from_dict(cfg.source),
                [DomainSpec.from_dict(t) for t in cfg.targets],
                seed=cfg.seed,
                dev_queries=cfg.dev_queries,
            )
        self.bench = bench
        if len(bench.vocab) > self.enc_cfg.vocab_size:
            raise ValueError(f"benchmark vocabulary ({len(bench.vocab)}) exceeds encoder vocab_size")
        self._cache: dict[str, object] = {}
        self.supervised_runs: list[str] = []
        self.curves: list[tuple[str, str, int, str, float]] = []
        self.timings: dict[str, float] = {}

    # ----------------------------------------------------------------- helpers

    def _cached(self, key: str, build: Callable[[], object]):
        if key not in self._cache:
            start = time.perf_counter()
            self._cache[key] = build()
            self.timings[key] = time.perf_counter() - start
            log.info("built %s in %.1fs", key, self.timings[key])
        return self._cache[key]

    def seqs(self, domain: DomainData):
        return self._cached(
            f"seqs:{domain.name}",
            lambda: [tokenize(d.text, self.bench.vocab, self.enc_cfg.max_len) for d in domain.docs],
        )

    def _train_cfg(self, phase: str, lr: float, steps: int, offset: int) -> TrainingConfig:
        c = self.cfg
        return TrainingConfig(
            phase=phase,
            lr=lr,
            steps=steps,
            queries_per_batch=c.queries_per_batch,
            hard_negatives_per_query=c.hard_negatives_per_query,
            mlm_batch_size=c.mlm_batch_size,
            seed=c.seed * 1000 + offset,
            loss_kind=c.loss_kind,
        )

    def examples(self) -> list[TrainingExample]:
        return self._cached("examples", self._build_examples)

    def _build_examples(self) -> list[TrainingExample]:
        c = self.cfg
        src = self.bench.source
        seqs = self.seqs(src)
        by_id = {d.doc_id: i for i, d in enumerate(src.docs)}
        bm25 = BM25Index(src.docs)
        rng = np.random.default_rng(c.seed + 7)
        out = []
        for q in src.queries:
            rel = src.qrels[q.query_id]
            pos_id = sorted(rel)[0]
            pool = [d for d, _ in bm25.search(q.text.split(), c.hard_negative_pool + len(rel)) if d not in rel]
            if len(pool) < c.hard_negatives_per_query:
                extra = [d.doc_id for d in src.docs if d.doc_id not in rel and d.doc_id not in pool]
                pool += extra[: c.hard_negatives_per_query - len(pool)]
            picks = rng.choice(len(pool), size=c.hard_negatives_per_query, replace=False)
            neg_ids = [pool[int(i)] for i in sorted(picks)]
            pos_doc = src.docs[by_id[pos_id]]
            out.append(
                TrainingExample(
                    query=tokenize(q.text, self.bench.vocab, self.enc_cfg.max_len),
                    positive=seqs[by_id[pos_id]],
                    negatives=tuple(seqs[by_id[d]] for d in neg_ids),
                    teacher_pos=teacher_score(q.text, pos_doc.text),
                    teacher_neg=tuple(teacher_score(q.text, src.docs[by_id[d]].text) for d in neg_ids),
                )
            )
        return out

    # ----------------------------------------------------------------- stages

    def base(self) -> EncoderBackbone:
        return self._cached("base", lambda: init_backbone(self.enc_cfg, seed=self.cfg.seed))

    def source_dam(self) -> EncoderBackbone:
        return self._finetune("on").source_dam

    def rem(self, df_mode: str = "on") -> RemModule:
        return self._finetune(df_mode).rem

    def _finetune(self, df_mode: str):
        def build():
            c = self.cfg
            self.supervised_runs.append(f"rem[df={df_mode}]")
            return disentangled_finetune(
                self.base(),
                self.seqs(self.bench.source),
                self.examples(),
                self._train_cfg("dam_adaptation", c.source_dam_lr, c.source_dam_steps, 1),
                self._train_cfg("rem_finetuning", c.rem_lr, c.rem_steps, 2),
                c.rem_config(),
                df_mode=df_mode,
            )

        return self._cached(f"finetune:{df_mode}", build)

    def dr_model(self) -> AssembledModel:
        return self._cached("dr", lambda: self._full_finetune(self.base(), "dr"))

    def _full_finetune(self, init: EncoderBackbone, tag: str) -> AssembledModel:
        c = self.cfg
        model = insert_rem(init.clone(), None)
        self.supervised_runs.append(f"full[{tag}]")
        train_supervised(model, self.examples(), self._train_cfg("full_finetuning", c.dr_lr, c.dr_steps, 3), "full_finetuning")
        return model

    def target_dam(self, t: int, init_mode: str) -> EncoderBackbone:
        """Target backbone adapted from the source backbone (``sequential``) or the base (``base``)."""

        def build():
            c = self.cfg
            domain = self.bench.targets[t]
            init = sequential_init(self.source_dam() if init_mode == "sequential" else None, self.base(), init_mode)
            on_eval = None
            if init_mode == "sequential" and c.curve_every:
                rem = self.rem("on")

                def on_eval(step, model):
                    values = self.evaluate(insert_rem(model.backbone, rem), domain, ks=(c.curve_k,))
                    self.curves.append((domain.name, "ddr", step, f"recall@{c.curve_k}", values[f"recall@{c.curve_k}"]))

            cfg = self._train_cfg("dam_adaptation", c.target_dam_lr, c.target_dam_steps, 10 + t)
            cfg.eval_every = c.curve_every
            dam, curve = adapt_dam(init, self.seqs(domain), cfg, on_eval=on_eval)
            for step, loss in curve:
                self.curves.append((domain.name, f"mlm[{init_mode}]", step, "mlm_loss", loss))
            return dam

        return self._cached(f"target:{t}:{init_mode}", build)

    def no_d_model(self, t: int) -> AssembledModel:
        return self._cached(f"no_d:{t}", lambda: self._full_finetune(self.target_dam(t, "base"), f"no_d:{t}"))

    def model_for(self, mode: str, t: int | None) -> AssembledModel:
        """Model used by ``mode`` on target ``t`` (``None`` = source domain)."""
        if mode == "dr":
            return self.dr_model()
        if mode == "ddr":
            dam = self.source_dam() if t is None else self.target_dam(t, "sequential")
            return insert_rem(dam, self.rem("on"))
        if mode == "ddr_no_df":
            dam = self.base() if t is None else self.target_dam(t, "base")
            return insert_rem(dam, self.rem("off"))
        if mode == "ddr_no_si":
            dam = self.source_dam() if t is None else self.target_dam(t, "base")
            return insert_rem(dam, self.rem("on"))
        if mode == "ddr_no_d":
            return self.dr_model() if t is None else self.no_d_model(t)
        raise ValueError(f"unknown mode {mode!r}")

    def supervised_keys(self, mode: str) -> list[str]:
        """Supervised trainings a mode depends on, independent of sharing with other modes."""
        n = len(self.bench.targets)
        return {
            "dr": ["full[dr]"],
            "ddr": ["rem[df=on]"],
            "ddr_no_df": ["rem[df=off]"],
            "ddr_no_si": ["rem[df=on]"],
            "ddr_no_d": [f"full[no_d:{t}]" for t in range(n)],
        }[mode]

    # ----------------------------------------------------------------- evaluation

    def run(self, model, domain: DomainData) -> dict[str, list[tuple[str, float]]]:
        index = build_index(model, domain.docs, self.bench.vocab)
        qseqs = [tokenize(q.text, self.bench.vocab, self.enc_cfg.max_len) for q in domain.queries]
        q = encode_many(model, qseqs)
        return search_many(index, [x.query_id for x in domain.queries], q, self.cfg.search_depth)

    def evaluate(self, model, domain: DomainData, ks=None, run=None) -> dict[str, float]:
        run = run if run is not None else self.run(model, domain)
        return metric_values(run, domain.qrels, ks)

    def bm25_run(self, domain: DomainData):
        def build():
            index = BM25Index(domain.docs)
            return {q.query_id: index.search(q.text.split(), self.cfg.search_depth) for q in domain.queries}

        return self._cached(f"bm25:{domain.name}", build)


def metric_values(run, qrels, ks=None) -> dict[str, float]:
    out = {}
    for name, k in METRICS:
        if ks is not None and k not in ks:
            continue
        fn = ndcg_at_k if name == "ndcg" else recall_at_k
        out[f"{name}@{k}"] = fn(run, qrels, k)
    if ks is not None:
        for k in ks:
            out.setdefault(f"recall@{k}", recall_at_k(run, qrels, k))
    return out


@dataclass
class ExperimentResult:
    metrics: list[DomainMetrics]
    curves: list[tuple[str, str, int, str, float]]
    finetuning_times: dict[str, int]
    pipeline: Pipeline

    def value(self, mode: str, domain: str, metric: str) -> float:
        for m in self.metrics:
            if m.mode == mode and m.domain == domain:
                return m.values[metric]
        raise KeyError((mode, domain, metric))

    def target_mean(self, mode: str, metric: str = "recall@10") -> float:
        names = [t.name for t in self.pipeline.bench.targets]
        return float(np.mean([self.value(mode, n, metric) for n in names]))


def run_experiment(
    modes, cfg: ExperimentConfig, out_dir: str | Path | None = None, bench: Benchmark | None = None
) -> ExperimentResult:
    """Run ``modes`` end to end and (optionally) write report files to ``out_dir``."""
    for m in modes:
        if m not in MODES:
            raise ValueError(f"unknown mode {m!r}; expected one of {MODES}")
    pipe = Pipeline(cfg, bench)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "runs").mkdir(parents=True, exist_ok=True)
        (out / "resolved-config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    results: list[DomainMetrics] = []
    domains = [(None, pipe.bench.source_dev)] + list(enumerate(pipe.bench.targets))
    try:
        for domain_idx, domain in domains:
            run = pipe.bm25_run(domain)
            results.append(DomainMetrics("bm25", domain.name, metric_values(run, domain.qrels)))
            if out is not None:
                write_run(run, out / "runs" / f"bm25_{domain.name}.trec", tag="bm25")
        for mode in modes:
            for domain_idx, domain in domains:
                model = pipe.model_for(mode, domain_idx)
                run = pipe.run(model, domain)
                results.append(DomainMetrics(mode, domain.name, metric_values(run, domain.qrels)))
                if out is not None:
                    write_run(run, out / "runs" / f"{mode}_{domain.name}.trec", tag=mode)
    finally:
        if out is not None:
            write_outputs(out, results, pipe, modes)
    times = {m: len(pipe.supervised_keys(m)) for m in modes}
    return ExperimentResult(results, list(pipe.curves), times, pipe)


def metrics_csv(results: list[DomainMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "domain", "metric", "value"])
    for r in results:
        for metric, value in r.values.items():
            w.writerow([r.mode, r.domain, metric, f"{value:.6f}"])
    return buf.getvalue()


def curves_csv(curves) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["domain", "series", "step", "metric", "value"])
    for domain, series, step, metric, value in curves:
        w.writerow([domain, series, step, metric, f"{value:.6f}"])
    return buf.getvalue()


def write_outputs(out: Path, results: list[DomainMetrics], pipe: Pipeline, modes) -> None:
    from .checkpoint import save_checkpoint

    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(results))
    (out / "curves.csv").write_text(curves_csv(pipe.curves))
    times = {m: len(pipe.supervised_keys(m)) for m in modes}
    (out / "finetuning.json").write_text(json.dumps(times, indent=2, sort_keys=True) + "\n")
    # Wall-clock seconds per stage; the only output that varies between identical runs.
    (out / "timings.json").write_text(json.dumps(pipe.timings, indent=2, sort_keys=True) + "\n")
    if pipe.cfg.save_checkpoints:
        ck = out / "checkpoints"
        ck.mkdir(exist_ok=True)
        cache = pipe._cache
        if "finetune:on" in cache:
            save_checkpoint(cache["finetune:on"].source_dam, ck / "source_dam", seed=pipe.cfg.seed)
            save_checkpoint(cache["finetune:on"].rem, ck / "rem", seed=pipe.cfg.seed)
        for t, domain in enumerate(pipe.bench.targets):
            key = f"target:{t}:sequential"
            if key in cache:
                save_checkpoint(cache[key], ck / f"dam_{domain.name}", seed=pipe.cfg.seed)
        if "dr" in cache:
            save_checkpoint(cache["dr"], ck / "dr_full", seed=pipe.cfg.seed)
    from .report import write_report

    write_report(out)
