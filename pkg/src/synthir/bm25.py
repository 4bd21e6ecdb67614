"""Okapi BM25 over an in-memory inverted index, used to mine hard negatives."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from synthir.corpus import Corpus

_TOKEN_RE = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    """Lowercased runs of Unicode letters/digits.

    >>> tokenize("Q1-2025 report")
    ['q1', '2025', 'report']
    """
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self):
        if not self.k1 > 0:
            raise ValueError(f"k1 must be > 0, got {self.k1}")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError(f"b must lie in [0, 1], got {self.b}")


@dataclass(frozen=True)
class NegativeCandidate:
    doc_id: str
    bm25_score: float
    rank: int

    def to_record(self) -> dict:
        return {"doc_id": self.doc_id, "score": self.bm25_score, "rank": self.rank}

    @classmethod
    def from_record(cls, rec: dict) -> "NegativeCandidate":
        return cls(rec["doc_id"], float(rec["score"]), int(rec["rank"]))


@dataclass
class Bm25Index:
    postings: dict[str, list[tuple[str, int]]]
    doc_lengths: dict[str, int]
    avg_doc_length: float
    doc_count: int
    params: Bm25Params = field(default_factory=Bm25Params)

    def __post_init__(self):
        self._tf = {t: dict(plist) for t, plist in self.postings.items()}

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: str) -> float:
        n = self.df(term)
        # ln(1 + ...) keeps idf positive even for terms in every document
        return math.log(1.0 + (self.doc_count - n + 0.5) / (n + 0.5))

    def term_weight(self, term: str, doc_id: str) -> float:
        tf = self._tf.get(term, {}).get(doc_id, 0)
        if tf == 0:
            return 0.0
        k1, b = self.params.k1, self.params.b
        norm = k1 * (1.0 - b + b * self.doc_lengths[doc_id] / self.avg_doc_length)
        return self.idf(term) * tf * (k1 + 1.0) / (tf + norm)


def build_index(corpus: Corpus, params: Bm25Params | None = None) -> Bm25Index:
    params = params or Bm25Params()
    if len(corpus) == 0:
        raise ValueError("cannot index an empty corpus")
    postings: dict[str, list[tuple[str, int]]] = {}
    lengths: dict[str, int] = {}
    for doc in corpus:  # sorted by id, so posting lists come out sorted too
        terms = tokenize(doc.text)
        lengths[doc.id] = len(terms)
        for term, tf in sorted(Counter(terms).items()):
            postings.setdefault(term, []).append((doc.id, tf))
    avg = sum(lengths.values()) / len(lengths)
    if avg == 0:
        raise ValueError("corpus contains no indexable tokens")
    return Bm25Index(postings, lengths, avg, len(lengths), params)


def score(index: Bm25Index, query_terms: Sequence[str], doc_id: str) -> float:
    """BM25 score of one document; repeated query terms count once per occurrence."""
    if doc_id not in index.doc_lengths:
        raise KeyError(f"unknown document id {doc_id!r}")
    return sum(index.term_weight(t, doc_id) for t in query_terms)


def top_k(index: Bm25Index, query: str, k: int, exclude: Iterable[str] = ()) -> list[NegativeCandidate]:
    """Highest-scoring documents for ``query``, ties broken by ascending doc id.

    Documents scoring zero are never returned, so the list can be shorter
    than ``k``.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    terms = tokenize(query)
    excluded = set(exclude)
    scores: dict[str, float] = {}
    for term in terms:
        for doc_id, _ in index.postings.get(term, ()):
            if doc_id not in excluded and doc_id not in scores:
                scores[doc_id] = score(index, terms, doc_id)
    ranked = sorted(((s, d) for d, s in scores.items() if s > 0.0), key=lambda x: (-x[0], x[1]))
    return [NegativeCandidate(d, s, r) for r, (s, d) in enumerate(ranked[:k], start=1)]


def mine_hard_negatives(index: Bm25Index, query, k: int = 10) -> list[NegativeCandidate]:
    """BM25 candidates for a synthetic query, never including its positive."""
    if query.positive_doc_id not in index.doc_lengths:
        raise KeyError(f"positive document {query.positive_doc_id!r} is not in the index")
    return top_k(index, query.text, k, exclude={query.positive_doc_id})
