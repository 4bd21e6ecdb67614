"""Training instances and the query-level train/eval split."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Mapping, Sequence

from synthir.bm25 import NegativeCandidate
from synthir.corpus import Corpus
from synthir.jsonl import iter_jsonl, write_jsonl
from synthir.synthgen import SyntheticQuery


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class TrainingInstance:
    query: SyntheticQuery
    negative_doc_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if self.positive_doc_id in self.negative_doc_ids:
            raise AssemblyError(f"query {self.query_id!r}: positive {self.positive_doc_id!r} listed as a negative")
        if len(set(self.negative_doc_ids)) != len(self.negative_doc_ids):
            raise AssemblyError(f"query {self.query_id!r}: duplicate negative ids")

    @property
    def query_id(self) -> str:
        return self.query.query_id

    @property
    def positive_doc_id(self) -> str:
        return self.query.positive_doc_id

    def to_record(self) -> dict:
        return {
            "query_id": self.query.query_id,
            "query_text": self.query.text,
            "persona": self.query.persona,
            "positive_doc_id": self.query.positive_doc_id,
            "negative_doc_ids": list(self.negative_doc_ids),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TrainingInstance":
        q = SyntheticQuery(rec["query_id"], rec["query_text"], rec["persona"], rec["positive_doc_id"])
        return cls(q, tuple(rec["negative_doc_ids"]))


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[TrainingInstance, ...]
    eval: tuple[TrainingInstance, ...]
    seed: int
    ratio: float

    def __post_init__(self):
        overlap = {i.query_id for i in self.train} & {i.query_id for i in self.eval}
        if overlap:
            raise AssertionError(f"query ids on both sides of the split: {sorted(overlap)[:5]}")


def assemble_instances(
    queries: Sequence[SyntheticQuery],
    verified_negatives: Mapping[str, Sequence[NegativeCandidate]],
    corpus: Corpus,
    k: int,
) -> list[TrainingInstance]:
    """One instance per query, keeping at most ``k`` negatives by best BM25 rank."""
    out = []
    for q in queries:
        if q.positive_doc_id not in corpus:
            raise AssemblyError(f"query {q.query_id!r}: positive {q.positive_doc_id!r} not in corpus")
        cands = sorted(verified_negatives.get(q.query_id, ()), key=lambda c: c.rank)
        for c in cands:
            if c.doc_id not in corpus:
                raise AssemblyError(f"query {q.query_id!r}: negative {c.doc_id!r} not in corpus")
        out.append(TrainingInstance(q, tuple(c.doc_id for c in cands[:k])))
    return out


def split_by_query(instances: Sequence[TrainingInstance], ratio: float = 0.8, seed: int = 42) -> DatasetSplit:
    """Seeded shuffle of query ids; the first ceil(ratio * n) go to train.

    The train count is clamped to [1, n - 1] so neither side is empty.
    Documents may appear on both sides.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    if len(instances) < 2:
        raise ValueError(f"need at least 2 instances to split, got {len(instances)}")
    by_id = {}
    for inst in instances:
        if inst.query_id in by_id:
            raise ValueError(f"duplicate query id {inst.query_id!r}")
        by_id[inst.query_id] = inst
    ids = sorted(by_id)
    random.Random(seed).shuffle(ids)
    n = len(ids)
    # guard against ratio*n landing a hair above an integer
    n_train = min(max(math.ceil(ratio * n - 1e-9), 1), n - 1)
    train = tuple(by_id[q] for q in sorted(ids[:n_train]))
    eval_ = tuple(by_id[q] for q in sorted(ids[n_train:]))
    return DatasetSplit(train, eval_, seed, ratio)


def write_instances(path, instances: Sequence[TrainingInstance]) -> None:
    write_jsonl(path, (i.to_record() for i in instances))


def read_instances(path) -> list[TrainingInstance]:
    return [TrainingInstance.from_record(rec) for _, rec in iter_jsonl(path)]
