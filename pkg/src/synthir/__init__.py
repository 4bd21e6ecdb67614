"""Unsupervised adaptation of dense retrievers with synthetic queries.

The pipeline: ingest a corpus, have an LLM write persona-styled queries for
each document, mine BM25 hard negatives, let the LLM veto false negatives,
train a residual adapter over frozen embeddings with a masked InfoNCE loss,
and compare Recall@k / nDCG@k before and after.
"""

from synthir.corpus import Corpus, CorpusStats, Document, corpus_stats, ingest_corpus
from synthir.bm25 import Bm25Index, Bm25Params, build_index, mine_hard_negatives, top_k
from synthir.adapter import AdapterParams, TrainConfig, batch_loss, loss_gradient, train
from synthir.evaluation import evaluate, ndcg_at_k, recall_at_k

__version__ = "0.1.0"

__all__ = [
    "AdapterParams",
    "Bm25Index",
    "Bm25Params",
    "Corpus",
    "CorpusStats",
    "Document",
    "TrainConfig",
    "batch_loss",
    "build_index",
    "corpus_stats",
    "evaluate",
    "ingest_corpus",
    "loss_gradient",
    "mine_hard_negatives",
    "ndcg_at_k",
    "recall_at_k",
    "top_k",
    "train",
]
