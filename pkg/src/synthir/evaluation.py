"""Exact cosine ranking over the full corpus and Recall@k / nDCG@k."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from synthir.adapter import AdapterParams, apply_adapter
from synthir.embedder import EmbeddingTable

logger = logging.getLogger(__name__)

RECALL_KS = (10, 50, 100)
NDCG_KS = (10, 50)

Judgments = Mapping[str, frozenset]
RetrievalRun = Mapping[str, Sequence[tuple[str, float]]]


def rank_corpus(query_vec: np.ndarray, doc_vecs: np.ndarray, doc_ids: Sequence[str],
                adapter: AdapterParams | None = None, depth: int | None = None) -> list[tuple[str, float]]:
    """Every document ranked by cosine similarity, ties broken by ascending doc id.

    ``adapter`` (if given) is applied to the query and the documents.
    ``depth`` truncates the returned list.
    """
    doc_vecs = np.asarray(doc_vecs, dtype=np.float64)
    query_vec = np.asarray(query_vec, dtype=np.float64)
    if doc_vecs.ndim != 2 or query_vec.shape != (doc_vecs.shape[1],):
        raise ValueError(f"dimension mismatch: query {query_vec.shape} vs documents {doc_vecs.shape}")
    if len(doc_ids) != doc_vecs.shape[0]:
        raise ValueError("need one id per document vector")
    scores = apply_adapter(adapter, doc_vecs) @ apply_adapter(adapter, query_vec)
    return _ranked(scores, list(doc_ids), depth)


def _ranked(scores: np.ndarray, doc_ids: list[str], depth: int | None) -> list[tuple[str, float]]:
    id_rank = np.argsort(np.asarray(doc_ids, dtype=object), kind="stable")
    tie = np.empty(len(doc_ids), dtype=np.int64)
    tie[id_rank] = np.arange(len(doc_ids))
    order = np.lexsort((tie, -scores))
    if depth is not None:
        order = order[:depth]
    return [(doc_ids[i], float(scores[i])) for i in order]


def _check_k(k: int) -> None:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")


def _per_query(run: RetrievalRun, judgments: Judgments):
    for qid in sorted(judgments):
        if qid not in run:
            raise KeyError(f"query {qid!r} missing from run")
        rel = judgments[qid]
        if not rel:
            raise ValueError(f"query {qid!r} has no relevant documents")
        yield qid, run[qid], rel


def recall_at_k(run: RetrievalRun, judgments: Judgments, k: int) -> float:
    """Mean over judged queries of |relevant in top k| / |relevant|."""
    _check_k(k)
    vals = [sum(1 for d, _ in ranked[:k] if d in rel) / len(rel) for _, ranked, rel in _per_query(run, judgments)]
    return float(np.mean(vals)) if vals else 0.0


def ndcg_at_k(run: RetrievalRun, judgments: Judgments, k: int) -> float:
    """Binary-gain nDCG with a ``1 / log2(rank + 1)`` discount, averaged over queries."""
    _check_k(k)
    vals = []
    for _, ranked, rel in _per_query(run, judgments):
        dcg = sum(1.0 / math.log2(r + 1) for r, (d, _) in enumerate(ranked[:k], start=1) if d in rel)
        idcg = sum(1.0 / math.log2(r + 1) for r in range(1, min(k, len(rel)) + 1))
        vals.append(dcg / idcg)
    return float(np.mean(vals)) if vals else 0.0


@dataclass
class MetricsTable:
    rows: list[tuple[str, dict[str, float]]] = field(default_factory=list)
    recall_ks: tuple[int, ...] = RECALL_KS
    ndcg_ks: tuple[int, ...] = NDCG_KS
    num_queries: int = 0
    excluded_queries: int = 0

    @property
    def columns(self) -> list[str]:
        return [f"R@{k}" for k in self.recall_ks] + [f"nDCG@{k}" for k in self.ndcg_ks]

    def row(self, label: str) -> dict[str, float]:
        for name, vals in self.rows:
            if name == label:
                return vals
        raise KeyError(label)

    def to_json(self) -> dict:
        return {label: dict(vals) for label, vals in self.rows}

    def render(self) -> str:
        cols = self.columns
        width = max([len("Model")] + [len(r[0]) for r in self.rows])
        lines = [f"{'Model':<{width}}  " + "  ".join(f"{c:>8}" for c in cols)]
        for label, vals in self.rows:
            lines.append(f"{label:<{width}}  " + "  ".join(f"{vals[c]:>8.4f}" for c in cols))
        return "\n".join(lines)


def judgments_from_instances(instances, corpus) -> tuple[dict[str, frozenset], int]:
    """Relevant set per query = its positive document; queries whose positive is gone are dropped."""
    out, dropped = {}, 0
    for inst in instances:
        if inst.positive_doc_id in corpus:
            out[inst.query_id] = frozenset([inst.positive_doc_id])
        else:
            dropped += 1
    if dropped:
        logger.warning("%d evaluation queries excluded: positive document not in corpus", dropped)
    return out, dropped


def retrieve(adapter: AdapterParams | None, query_ids: Sequence[str], table: EmbeddingTable,
             doc_ids: Sequence[str], depth: int) -> dict[str, list[tuple[str, float]]]:
    """Rank the full corpus for each query; keeps the top ``depth`` entries."""
    doc_ids = list(doc_ids)
    D = apply_adapter(adapter, np.stack([table.documents[d] for d in doc_ids]))
    Q = apply_adapter(adapter, np.stack([table.queries[q] for q in query_ids]))
    S = Q @ D.T
    return {qid: _ranked(S[i], doc_ids, depth) for i, qid in enumerate(query_ids)}


def evaluate(models: Sequence[tuple[str, AdapterParams | None]], eval_instances, corpus,
             table: EmbeddingTable, ks: Sequence[int] = RECALL_KS,
             ndcg_ks: Sequence[int] = NDCG_KS) -> MetricsTable:
    """One metrics row per ``(label, adapter)``; ``adapter=None`` is the frozen baseline."""
    judgments, dropped = judgments_from_instances(eval_instances, corpus)
    qids = sorted(judgments)
    depth = max([*ks, *ndcg_ks])
    table_out = MetricsTable(recall_ks=tuple(ks), ndcg_ks=tuple(ndcg_ks),
                             num_queries=len(qids), excluded_queries=dropped)
    for label, adapter in models:
        run = retrieve(adapter, qids, table, corpus.ids, depth) if qids else {}
        vals = {f"R@{k}": recall_at_k(run, judgments, k) for k in ks}
        vals.update({f"nDCG@{k}": ndcg_at_k(run, judgments, k) for k in ndcg_ks})
        table_out.rows.append((label, vals))
    return table_out
