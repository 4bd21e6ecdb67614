"""Config-driven pipeline stages with on-disk artifacts.

Stages run in order ``ingest -> generate -> mine -> verify -> assemble ->
split -> embed-cache -> train -> eval -> report``. Each stage reads its
inputs from and writes its outputs to ``output_dir``; ``manifest.json``
records which config fingerprint produced each stage's artifacts.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import yaml

from synthir import adapter as adapter_mod
from synthir.bm25 import Bm25Params, build_index, mine_hard_negatives
from synthir.corpus import Corpus, corpus_stats, ingest_corpus
from synthir.dataset import assemble_instances, read_instances, split_by_query, write_instances
from synthir.embedder import Embedder, EmbedderConfig, EmbeddingCache, EmbeddingTable
from synthir.evaluation import MetricsTable, evaluate
from synthir.jsonl import atomic_write_text, read_jsonl, write_json
from synthir.llm import ChatClient, MockChatClient
from synthir.profiles import profile
from synthir.synthgen import (
    DEFAULT_PERSONAS,
    Persona,
    PromptTemplates,
    filter_negatives,
    generate_all,
    read_candidates,
    read_queries,
    read_report,
    write_candidates,
    write_queries,
    write_report,
)
from synthir.toy import make_toy_corpus

logger = logging.getLogger(__name__)

STAGES = ("ingest", "generate", "mine", "verify", "assemble", "split", "embed-cache", "train", "eval", "report")

ARTIFACTS = {
    "corpus": "corpus.jsonl",
    "corpus_stats": "corpus_stats.json",
    "queries": "queries.jsonl",
    "generation_log": "generation_log.json",
    "mined": "mined.jsonl",
    "verdicts": "verdicts.jsonl",
    "verified": "verified.jsonl",
    "fn_report": "fn_report.json",
    "instances": "instances.jsonl",
    "train": "train.jsonl",
    "eval": "eval.jsonl",
    "cache": "embeddings.cache.jsonl",
    "adapter": "adapter.ckpt.json",
    "history_steps": "history_steps.csv",
    "history_epochs": "history_epochs.csv",
    "metrics": "metrics.json",
    "metrics_table": "metrics.txt",
    "report": "report.txt",
}

# artifact name -> stage that produces it
PRODUCER = {
    "corpus": "ingest", "corpus_stats": "ingest",
    "queries": "generate", "generation_log": "generate",
    "mined": "mine",
    "verdicts": "verify", "verified": "verify", "fn_report": "verify",
    "instances": "assemble",
    "train": "split", "eval": "split",
    "cache": "embed-cache",
    "adapter": "train", "history_steps": "train", "history_epochs": "train",
    "metrics": "eval", "metrics_table": "eval",
    "report": "report",
}

REQUIRES = {
    "ingest": (),
    "generate": ("corpus",),
    "mine": ("corpus", "queries"),
    "verify": ("corpus", "queries", "mined"),
    "assemble": ("corpus", "queries", "verified"),
    "split": ("instances",),
    "embed-cache": ("corpus", "instances"),
    "train": ("corpus", "train", "eval", "cache"),
    "eval": ("corpus", "eval", "cache", "adapter"),
    "report": ("corpus_stats", "fn_report"),  # metrics are included when present
}


class StageError(RuntimeError):
    def __init__(self, message: str, stage: str | None = None, missing_stage: str | None = None):
        super().__init__(message)
        self.stage = stage
        self.missing_stage = missing_stage

    def to_dict(self) -> dict:
        d = {"error": type(self).__name__, "message": str(self)}
        if self.stage:
            d["stage"] = self.stage
        if self.missing_stage:
            d["missing_stage"] = self.missing_stage
        return d


@dataclass
class CorpusConfig:
    path: str = ""
    format: str = "jsonl"
    name: str = ""
    # used when path is empty: generate the built-in toy corpus
    toy: dict = field(default_factory=dict)


@dataclass
class LlmConfig:
    provider: str = "mock"   # "mock" or "http"
    base_url: str = ""
    model: str = "gpt-4o"
    api_key_env: str = "OPENAI_API_KEY"
    max_retries: int = 5
    concurrency: int = 8


@dataclass
class PipelineConfig:
    output_dir: str = "out"
    profile: str = "small"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    llm: LlmConfig = field(default_factory=LlmConfig)
    personas: list[Persona] = field(default_factory=lambda: list(DEFAULT_PERSONAS))
    queries_per_persona: int = 1
    templates: PromptTemplates = field(default_factory=PromptTemplates)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    mining: dict = field(default_factory=dict)  # k, k1, b
    split: dict = field(default_factory=lambda: {"ratio": 0.8, "seed": 42})
    train: dict = field(default_factory=dict)   # TrainConfig overrides on top of the profile
    eval: dict = field(default_factory=lambda: {"ks": [10, 50, 100], "ndcg_ks": [10, 50]})

    @property
    def mining_k(self) -> int:
        return int(self.mining.get("k", profile(self.profile)["mined_k"]))

    @property
    def bm25_params(self) -> Bm25Params:
        return Bm25Params(k1=self.mining.get("k1", 1.2), b=self.mining.get("b", 0.75))

    def train_config(self) -> adapter_mod.TrainConfig:
        return adapter_mod.TrainConfig.from_profile(self.profile, **self.train)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, default=str).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def path(self, artifact: str) -> Path:
        return Path(self.output_dir) / ARTIFACTS[artifact]


def _build(cls, data: dict | None, what: str):
    data = dict(data or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {what} keys: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(raw: dict, base_dir: str | os.PathLike = ".") -> PipelineConfig:
    raw = copy.deepcopy(raw or {})
    base = Path(base_dir)
    allowed = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(raw) - allowed
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    cfg = PipelineConfig()
    if "output_dir" in raw:
        cfg.output_dir = str(base / raw["output_dir"])
    else:
        cfg.output_dir = str(base / cfg.output_dir)
    cfg.profile = raw.get("profile", cfg.profile)
    profile(cfg.profile)
    cfg.corpus = _build(CorpusConfig, raw.get("corpus"), "corpus")
    if cfg.corpus.path:
        cfg.corpus.path = str(base / cfg.corpus.path)
    cfg.llm = _build(LlmConfig, raw.get("llm"), "llm")
    if "personas" in raw:
        cfg.personas = [Persona(p["name"], p["instruction"]) for p in raw["personas"]]
    cfg.queries_per_persona = int(raw.get("queries_per_persona", cfg.queries_per_persona))
    cfg.templates = _build(PromptTemplates, raw.get("templates"), "templates")
    cfg.embedder = _build(EmbedderConfig, raw.get("embedder"), "embedder")
    for key in ("mining", "split", "train", "eval"):
        if key in raw:
            merged = dict(getattr(cfg, key))
            merged.update(raw[key] or {})
            setattr(cfg, key, merged)
    cfg.train_config()  # validate keys early
    return cfg


def load_config(path: str | os.PathLike | None) -> PipelineConfig:
    """Read a YAML config; relative paths inside it resolve against its directory."""
    if path is None:
        return config_from_dict({})
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return config_from_dict(raw, Path(path).parent)


# Manifest ---------------------------------------------------------------------------

def _manifest_path(cfg: PipelineConfig) -> Path:
    return Path(cfg.output_dir) / "manifest.json"


def read_manifest(cfg: PipelineConfig) -> dict:
    p = _manifest_path(cfg)
    if not p.exists():
        return {}
    with open(p, encoding="utf-8") as fh:
        return json.load(fh)


def _stamp(cfg: PipelineConfig, stage: str, outputs: list[str]) -> None:
    manifest = read_manifest(cfg)
    manifest[stage] = {"fingerprint": cfg.fingerprint(), "outputs": sorted(outputs)}
    write_json(_manifest_path(cfg), manifest)


def _check_inputs(cfg: PipelineConfig, stage: str, strict: bool) -> None:
    manifest = read_manifest(cfg)
    fp = cfg.fingerprint()
    for art in REQUIRES[stage]:
        if not cfg.path(art).exists():
            producer = PRODUCER[art]
            raise StageError(
                f"stage {stage!r} needs {ARTIFACTS[art]}; run stage {producer!r} first",
                stage=stage, missing_stage=producer,
            )
        seen = manifest.get(PRODUCER[art], {}).get("fingerprint")
        if seen is not None and seen != fp:
            msg = (f"{ARTIFACTS[art]} was produced by stage {PRODUCER[art]!r} under config "
                   f"fingerprint {seen}, current config is {fp}")
            if strict:
                raise StageError(msg, stage=stage)
            logger.warning(msg)


# Providers --------------------------------------------------------------------------

def make_llm_client(cfg: PipelineConfig):
    if cfg.llm.provider == "mock":
        return MockChatClient()
    if cfg.llm.provider == "http":
        return ChatClient(cfg.llm.base_url, cfg.llm.model, cfg.llm.api_key_env, cfg.llm.max_retries)
    raise ValueError(f"unknown llm provider {cfg.llm.provider!r}")


def make_embedder(cfg: PipelineConfig, offline: bool = False) -> Embedder:
    return Embedder(cfg.embedder, EmbeddingCache(cfg.path("cache")), offline=offline)


def _load_corpus(cfg: PipelineConfig) -> Corpus:
    return ingest_corpus(cfg.path("corpus"), "jsonl", name=cfg.corpus.name or "corpus")


# Stages -----------------------------------------------------------------------------

def stage_ingest(cfg: PipelineConfig) -> list[str]:
    if cfg.corpus.path:
        corpus = ingest_corpus(cfg.corpus.path, cfg.corpus.format, name=cfg.corpus.name or None)
    else:
        corpus = make_toy_corpus(**cfg.corpus.toy)
    corpus.write_jsonl(cfg.path("corpus"))
    stats = corpus_stats(corpus).as_dict()
    stats.update({"name": cfg.corpus.name or corpus.name, "skipped_empty": corpus.skipped,
                  "fingerprint": cfg.fingerprint()})
    write_json(cfg.path("corpus_stats"), stats)
    return ["corpus", "corpus_stats"]


def stage_generate(cfg: PipelineConfig) -> list[str]:
    corpus = _load_corpus(cfg)
    client = make_llm_client(cfg)
    try:
        result = generate_all(corpus, cfg.personas, cfg.queries_per_persona, client,
                              cfg.templates, cfg.llm.concurrency)
    finally:
        client.close()
    write_queries(cfg.path("queries"), result.queries)
    write_json(cfg.path("generation_log"), {
        "queries": len(result.queries),
        "skipped_doc_ids": result.skipped_doc_ids,
        "fingerprint": cfg.fingerprint(),
    })
    return ["queries", "generation_log"]


def stage_mine(cfg: PipelineConfig) -> list[str]:
    corpus = _load_corpus(cfg)
    index = build_index(corpus, cfg.bm25_params)
    mined = {q.query_id: mine_hard_negatives(index, q, cfg.mining_k) for q in read_queries(cfg.path("queries"))}
    write_candidates(cfg.path("mined"), mined)
    return ["mined"]


def stage_verify(cfg: PipelineConfig) -> list[str]:
    corpus = _load_corpus(cfg)
    queries = {q.query_id: q for q in read_queries(cfg.path("queries"))}
    mined = read_candidates(cfg.path("mined"))
    client = make_llm_client(cfg)
    try:
        verified, report = filter_negatives(
            mined, queries, corpus, client, cfg.templates, checkpoint=cfg.path("verdicts"),
            concurrency=cfg.llm.concurrency, dataset_name=cfg.corpus.name or corpus.name,
            mined_per_query=cfg.mining_k,
        )
    finally:
        client.close()
    write_candidates(cfg.path("verified"), verified)
    write_report(cfg.path("fn_report"), report)
    return ["verdicts", "verified", "fn_report"]


def stage_assemble(cfg: PipelineConfig) -> list[str]:
    corpus = _load_corpus(cfg)
    instances = assemble_instances(read_queries(cfg.path("queries")), read_candidates(cfg.path("verified")),
                                   corpus, cfg.train_config().negatives_per_sample)
    write_instances(cfg.path("instances"), instances)
    return ["instances"]


def stage_split(cfg: PipelineConfig) -> list[str]:
    split = split_by_query(read_instances(cfg.path("instances")),
                           float(cfg.split.get("ratio", 0.8)), int(cfg.split.get("seed", 42)))
    write_instances(cfg.path("train"), split.train)
    write_instances(cfg.path("eval"), split.eval)
    return ["train", "eval"]


def stage_embed_cache(cfg: PipelineConfig) -> list[str]:
    corpus = _load_corpus(cfg)
    queries = [i.query for i in read_instances(cfg.path("instances"))]
    embedder = make_embedder(cfg)
    try:
        EmbeddingTable.build(embedder, corpus, queries)
    finally:
        embedder.close()
    return ["cache"]


def _table(cfg: PipelineConfig, corpus: Corpus, instances) -> EmbeddingTable:
    return EmbeddingTable.build(make_embedder(cfg, offline=True), corpus, [i.query for i in instances])


def stage_train(cfg: PipelineConfig) -> list[str]:
    corpus = _load_corpus(cfg)
    train_set = read_instances(cfg.path("train"))
    eval_set = read_instances(cfg.path("eval"))
    table = _table(cfg, corpus, train_set + eval_set)
    tcfg = cfg.train_config()
    params, history = adapter_mod.train(train_set, eval_set, table, tcfg)
    adapter_mod.save_adapter(cfg.path("adapter"), params, tcfg, cfg.fingerprint())
    history.write_csv(cfg.path("history_steps"), cfg.path("history_epochs"))
    return ["adapter", "history_steps", "history_epochs"]


def stage_eval(cfg: PipelineConfig) -> list[str]:
    corpus = _load_corpus(cfg)
    eval_set = read_instances(cfg.path("eval"))
    table = _table(cfg, corpus, eval_set)
    params, _ = adapter_mod.load_adapter(cfg.path("adapter"))
    name = cfg.embedder.model_name
    metrics = evaluate([(name, None), (f"{name} + adapter", params)], eval_set, corpus, table,
                       ks=tuple(cfg.eval.get("ks", (10, 50, 100))),
                       ndcg_ks=tuple(cfg.eval.get("ndcg_ks", (10, 50))))
    write_metrics(cfg, metrics)
    return ["metrics", "metrics_table"]


def write_metrics(cfg: PipelineConfig, metrics: MetricsTable) -> None:
    write_json(cfg.path("metrics"), {
        "models": metrics.to_json(),
        "columns": metrics.columns,
        "num_queries": metrics.num_queries,
        "excluded_queries": metrics.excluded_queries,
        "fingerprint": cfg.fingerprint(),
    })
    atomic_write_text(cfg.path("metrics_table"), metrics.render() + "\n")


def load_metrics(path) -> MetricsTable:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    cols = d["columns"]
    table = MetricsTable(
        recall_ks=tuple(int(c[2:]) for c in cols if c.startswith("R@")),
        ndcg_ks=tuple(int(c[5:]) for c in cols if c.startswith("nDCG@")),
        num_queries=d.get("num_queries", 0), excluded_queries=d.get("excluded_queries", 0),
    )
    table.rows = [(label, vals) for label, vals in d["models"].items()]
    return table


def render_report(cfg: PipelineConfig) -> str:
    with open(cfg.path("corpus_stats"), encoding="utf-8") as fh:
        stats = json.load(fh)
    fn = read_report(cfg.path("fn_report"))
    parts = [
        "Corpus",
        f"  Documents            {stats['doc_count']}",
        f"  Avg. Length (char)   {stats['avg_char_length']:.1f}",
        "",
        "Hard negatives",
        "\n".join("  " + line for line in fn.render().splitlines()),
    ]
    if cfg.path("metrics").exists():
        metrics = load_metrics(cfg.path("metrics"))
        parts += [
            "",
            f"Retrieval ({metrics.num_queries} held-out queries)",
            "\n".join("  " + line for line in metrics.render().splitlines()),
        ]
    else:
        parts += ["", "Retrieval: not evaluated yet (run stage 'eval')"]
    return "\n".join(parts) + "\n"


def stage_report(cfg: PipelineConfig) -> list[str]:
    text = render_report(cfg)
    atomic_write_text(cfg.path("report"), text)
    print(text, end="")
    return ["report"]


STAGE_FUNCS: dict[str, Callable[[PipelineConfig], list[str]]] = {
    "ingest": stage_ingest,
    "generate": stage_generate,
    "mine": stage_mine,
    "verify": stage_verify,
    "assemble": stage_assemble,
    "split": stage_split,
    "embed-cache": stage_embed_cache,
    "train": stage_train,
    "eval": stage_eval,
    "report": stage_report,
}


def run_stage(stage: str, cfg: PipelineConfig, strict: bool = False) -> list[Path]:
    """Run one stage after checking its inputs; returns the artifact paths written."""
    if stage not in STAGE_FUNCS:
        raise StageError(f"unknown stage {stage!r}; expected one of {STAGES}")
    _check_inputs(cfg, stage, strict)
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    logger.info("running stage %s", stage)
    outputs = STAGE_FUNCS[stage](cfg)
    _stamp(cfg, stage, [ARTIFACTS[o] for o in outputs])
    return [cfg.path(o) for o in outputs]


def run_pipeline(cfg: PipelineConfig, stages: tuple[str, ...] = STAGES, strict: bool = False) -> None:
    for stage in stages:
        run_stage(stage, cfg, strict)
