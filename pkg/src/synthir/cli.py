"""Pipeline subcommands: ``python -m synthir [--config PATH] <command> ...``.

Pipeline stages read and write artifacts in the configured output
directory (``run <stage>`` / ``pipeline``). The remaining subcommands
work on explicit files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from synthir import adapter as adapter_mod
from synthir.bm25 import build_index, mine_hard_negatives
from synthir.corpus import corpus_stats, ingest_corpus
from synthir.dataset import assemble_instances, read_instances, split_by_query, write_instances
from synthir.embedder import EmbeddingCache, Embedder, EmbeddingTable
from synthir.evaluation import evaluate
from synthir.jsonl import write_json
from synthir.pipeline import STAGES, StageError, load_config, make_llm_client, run_pipeline, run_stage
from synthir.synthgen import (
    Persona,
    filter_negatives,
    generate_all,
    read_candidates,
    read_queries,
    write_candidates,
    write_queries,
    write_report,
)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="python -m synthir", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML pipeline config")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("corpus", help="corpus utilities")
    csub = c.add_subparsers(dest="corpus_command", required=True)
    st = csub.add_parser("stats", help="document count and mean character length")
    st.add_argument("--input", required=True)
    st.add_argument("--format", choices=["jsonl", "dir"], default="jsonl")

    g = sub.add_parser("generate", help="LLM query generation")
    g.add_argument("--corpus", required=True)
    g.add_argument("--personas", help="YAML/JSON list of {name, instruction}")
    g.add_argument("--out", required=True)

    m = sub.add_parser("mine", help="BM25 hard-negative mining")
    m.add_argument("--corpus", required=True)
    m.add_argument("--queries", required=True)
    m.add_argument("--k", type=int)
    m.add_argument("--out", required=True)

    v = sub.add_parser("verify", help="LLM verification of mined negatives")
    v.add_argument("--mined", required=True)
    v.add_argument("--queries", required=True)
    v.add_argument("--corpus", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--report", required=True)
    v.add_argument("--checkpoint", help="verdict jsonl (default: <out>.verdicts.jsonl)")

    a = sub.add_parser("assemble", help="build training instances")
    a.add_argument("--queries", required=True)
    a.add_argument("--verified", required=True)
    a.add_argument("--corpus", required=True)
    a.add_argument("--k", type=int)
    a.add_argument("--out", required=True)

    s = sub.add_parser("split", help="query-level train/eval split")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--ratio", type=float, default=0.8)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--train-out", required=True)
    s.add_argument("--eval-out", required=True)

    e = sub.add_parser("embed-cache", help="embed corpus and queries into the cache")
    e.add_argument("--corpus", required=True)
    e.add_argument("--instances", required=True, nargs="+")
    e.add_argument("--cache", required=True)

    t = sub.add_parser("train", help="train the adapter")
    t.add_argument("--train", required=True)
    t.add_argument("--eval", required=True, help="validation instances for early stopping")
    t.add_argument("--corpus", required=True)
    t.add_argument("--cache", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--history-prefix", help="writes <prefix>_steps.csv and <prefix>_epochs.csv")

    ev = sub.add_parser("eval", help="Recall@k / nDCG@k on an eval split")
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--eval-split", required=True)
    ev.add_argument("--cache", required=True)
    ev.add_argument("--adapter")
    ev.add_argument("--label", required=True)
    ev.add_argument("--json-out")

    r = sub.add_parser("run", help="run one pipeline stage from the config")
    r.add_argument("stage", choices=STAGES)
    r.add_argument("--strict", action="store_true", help="fingerprint mismatches are errors")

    pl = sub.add_parser("pipeline", help="run every stage in order")
    pl.add_argument("--strict", action="store_true")
    return p


def _personas(path: str | None, default):
    if not path:
        return default
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    return [Persona(p["name"], p["instruction"]) for p in raw]


def _dispatch(args) -> None:
    cfg = load_config(args.config)
    cmd = args.command
    if cmd == "corpus":
        corpus = ingest_corpus(args.input, args.format)
        stats = corpus_stats(corpus).as_dict()
        stats["skipped_empty"] = corpus.skipped
        print(json.dumps(stats, sort_keys=True))
    elif cmd == "generate":
        corpus = ingest_corpus(args.corpus)
        client = make_llm_client(cfg)
        res = generate_all(corpus, _personas(args.personas, cfg.personas), cfg.queries_per_persona,
                           client, cfg.templates, cfg.llm.concurrency)
        write_queries(args.out, res.queries)
        print(json.dumps({"queries": len(res.queries), "skipped_docs": len(res.skipped_doc_ids)}))
    elif cmd == "mine":
        index = build_index(ingest_corpus(args.corpus), cfg.bm25_params)
        k = args.k or cfg.mining_k
        write_candidates(args.out, {q.query_id: mine_hard_negatives(index, q, k) for q in read_queries(args.queries)})
    elif cmd == "verify":
        corpus = ingest_corpus(args.corpus)
        queries = {q.query_id: q for q in read_queries(args.queries)}
        client = make_llm_client(cfg)
        verified, report = filter_negatives(
            read_candidates(args.mined), queries, corpus, client, cfg.templates,
            checkpoint=args.checkpoint or args.out + ".verdicts.jsonl", concurrency=cfg.llm.concurrency,
        )
        write_candidates(args.out, verified)
        write_report(args.report, report)
        print(report.render())
    elif cmd == "assemble":
        corpus = ingest_corpus(args.corpus)
        k = args.k if args.k is not None else cfg.train_config().negatives_per_sample
        write_instances(args.out, assemble_instances(read_queries(args.queries), read_candidates(args.verified), corpus, k))
    elif cmd == "split":
        sp = split_by_query(read_instances(args.inp), args.ratio, args.seed)
        write_instances(args.train_out, sp.train)
        write_instances(args.eval_out, sp.eval)
        print(json.dumps({"train": len(sp.train), "eval": len(sp.eval)}))
    elif cmd == "embed-cache":
        corpus = ingest_corpus(args.corpus)
        queries = [i.query for path in args.instances for i in read_instances(path)]
        EmbeddingTable.build(Embedder(cfg.embedder, EmbeddingCache(args.cache)), corpus, queries)
    elif cmd == "train":
        corpus = ingest_corpus(args.corpus)
        tr, va = read_instances(args.train), read_instances(args.eval)
        table = EmbeddingTable.build(Embedder(cfg.embedder, EmbeddingCache(args.cache), offline=True),
                                     corpus, [i.query for i in tr + va])
        tcfg = cfg.train_config()
        params, history = adapter_mod.train(tr, va, table, tcfg)
        adapter_mod.save_adapter(args.out, params, tcfg, cfg.fingerprint())
        prefix = args.history_prefix or str(Path(args.out).with_suffix(""))
        history.write_csv(prefix + "_steps.csv", prefix + "_epochs.csv")
        print(json.dumps({"best_epoch": history.best_epoch, "stopped_epoch": history.stopped_epoch}))
    elif cmd == "eval":
        corpus = ingest_corpus(args.corpus)
        ev = read_instances(args.eval_split)
        table = EmbeddingTable.build(Embedder(cfg.embedder, EmbeddingCache(args.cache), offline=True),
                                     corpus, [i.query for i in ev])
        params = adapter_mod.load_adapter(args.adapter)[0] if args.adapter else None
        metrics = evaluate([(args.label, params)], ev, corpus, table,
                           ks=tuple(cfg.eval["ks"]), ndcg_ks=tuple(cfg.eval["ndcg_ks"]))
        print(metrics.render())
        if args.json_out:
            write_json(args.json_out, metrics.to_json())
    elif cmd == "run":
        run_stage(args.stage, cfg, strict=args.strict)
    elif cmd == "pipeline":
        run_pipeline(cfg, strict=args.strict)


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        _dispatch(args)
    except StageError as exc:
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
