"""LLM-driven query synthesis and hard-negative verification."""

from __future__ import annotations

import json
import logging
import os
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from synthir.bm25 import NegativeCandidate
from synthir.corpus import Corpus, Document
from synthir.jsonl import dumps, iter_jsonl, write_json, write_jsonl
from synthir.llm import ChatRequest

logger = logging.getLogger(__name__)

TRUE_NEGATIVE = "true_negative"
FALSE_NEGATIVE = "false_negative"


@dataclass(frozen=True)
class Persona:
    name: str
    instruction: str


DEFAULT_PERSONAS = (
    Persona("keyword", "You are a busy employee who searches with a few terse keywords."),
    Persona("open_ended", "You are a curious colleague who asks open-ended natural-language questions."),
    Persona("task_oriented", "You are someone trying to get a specific task done and searches for what you need to do it."),
)


@dataclass
class PromptTemplates:
    system: str = "You write realistic search queries and judge search results for an internal document collection."
    generation: str = (
        "{instruction}\n"
        "Write {n} search queries a user would issue to find the document below. "
        "Reply with a numbered list, one query per line.\n\n"
        "Document:\n{document}"
    )
    verification: str = (
        "Query: {query}\n\n"
        "Document:\n{document}\n\n"
        "Does this document answer the query? Answer YES or NO."
    )
    generation_temperature: float = 0.7
    verification_temperature: float = 0.0
    max_tokens: int = 512


@dataclass(frozen=True)
class SyntheticQuery:
    query_id: str
    text: str
    persona: str
    positive_doc_id: str

    def to_record(self) -> dict:
        return {
            "query_id": self.query_id,
            "text": self.text,
            "persona": self.persona,
            "positive_doc_id": self.positive_doc_id,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SyntheticQuery":
        return cls(rec["query_id"], rec["text"], rec["persona"], rec["positive_doc_id"])


@dataclass(frozen=True)
class VerificationVerdict:
    query_id: str
    doc_id: str
    verdict: str
    raw_label: str

    def to_record(self) -> dict:
        return {"query_id": self.query_id, "doc_id": self.doc_id, "verdict": self.verdict, "raw_label": self.raw_label}

    @classmethod
    def from_record(cls, rec: dict) -> "VerificationVerdict":
        return cls(rec["query_id"], rec["doc_id"], rec["verdict"], rec["raw_label"])


@dataclass
class FalseNegativeReport:
    dataset_name: str
    mined_per_query: int
    total_mined: int
    total_false: int
    unparseable: int = 0
    queries_without_negatives: list[str] = field(default_factory=list)

    @property
    def rate(self) -> float:
        if self.total_mined == 0:
            raise ZeroDivisionError("false-negative rate undefined: nothing was mined")
        return self.total_false / self.total_mined

    def to_dict(self) -> dict:
        return {
            "dataset_name": self.dataset_name,
            "mined_per_query": self.mined_per_query,
            "total_mined": self.total_mined,
            "total_false": self.total_false,
            "rate": self.rate,
            "unparseable": self.unparseable,
            "queries_without_negatives": list(self.queries_without_negatives),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FalseNegativeReport":
        return cls(
            d["dataset_name"], d["mined_per_query"], d["total_mined"], d["total_false"],
            d.get("unparseable", 0), list(d.get("queries_without_negatives", [])),
        )

    def render(self) -> str:
        rows = [
            ("", self.dataset_name),
            ("Mined negatives per query", str(self.mined_per_query)),
            ("LLM-verified false negative rate", f"{100 * self.rate:.2f}%"),
        ]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{a:<{width}}  {b}" for a, b in rows)


# Query generation -----------------------------------------------------------

_NUMBERED_RE = re.compile(r"^\s*(\d+)\s*[.)]\s*(.+?)\s*$")


class ParseError(ValueError):
    pass


def parse_numbered_list(text: str) -> list[str]:
    """Items of a ``1. foo`` / ``2) bar`` list; raises ParseError if there are none."""
    items = []
    for line in text.splitlines():
        m = _NUMBERED_RE.match(line)
        if m:
            item = m.group(2).strip().strip('"').strip("'").strip()
            if item:
                items.append(item)
    if not items:
        raise ParseError("completion contains no numbered list items")
    return items


def _ask_for_list(client, request: ChatRequest) -> list[str] | None:
    for attempt in (1, 2):
        try:
            return parse_numbered_list(client.chat(request))
        except ParseError:
            logger.debug("unparseable generation completion (attempt %d)", attempt)
    return None


def generate_queries(
    doc: Document,
    personas: Sequence[Persona],
    queries_per_persona: int,
    client,
    templates: PromptTemplates | None = None,
) -> list[SyntheticQuery]:
    """Ask the LLM for ``queries_per_persona`` queries per persona about ``doc``.

    Case-folded duplicates (across personas too) and queries identical to the
    document text are dropped. If any persona's completion cannot be parsed
    twice in a row, the whole document is skipped and an empty list returned.
    """
    if queries_per_persona < 1:
        raise ValueError("queries_per_persona must be >= 1")
    names = [p.name for p in personas]
    if len(set(names)) != len(names):
        raise ValueError(f"persona names must be unique: {names}")
    templates = templates or PromptTemplates()
    seen = {doc.text.strip().casefold()}
    out: list[SyntheticQuery] = []
    for persona in personas:
        request = ChatRequest(
            templates.system,
            templates.generation.format(instruction=persona.instruction, n=queries_per_persona, document=doc.text),
            templates.generation_temperature,
            templates.max_tokens,
        )
        items = _ask_for_list(client, request)
        if items is None:
            logger.warning("skipping document %r: persona %r completion was not a numbered list", doc.id, persona.name)
            return []
        for j, text in enumerate(items[:queries_per_persona]):
            key = text.casefold()
            if key in seen:
                continue
            seen.add(key)
            out.append(SyntheticQuery(f"{doc.id}#{persona.name}-{j}", text, persona.name, doc.id))
    return out


@dataclass
class GenerationResult:
    queries: list[SyntheticQuery]
    skipped_doc_ids: list[str]


def generate_all(
    corpus: Corpus,
    personas: Sequence[Persona],
    queries_per_persona: int,
    client,
    templates: PromptTemplates | None = None,
    concurrency: int = 8,
) -> GenerationResult:
    def one(doc):
        return generate_queries(doc, personas, queries_per_persona, client, templates)

    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        per_doc = list(pool.map(one, corpus.documents))
    queries, skipped = [], []
    for doc, qs in zip(corpus.documents, per_doc):
        if qs:
            queries.extend(qs)
        else:
            skipped.append(doc.id)
    return GenerationResult(queries, skipped)


# Verification ---------------------------------------------------------------

_LABEL_RE = re.compile(r"[A-Za-z]+")


def parse_label(text: str) -> str | None:
    """First YES/NO token of a completion (case-insensitive), or None."""
    for tok in _LABEL_RE.findall(text):
        up = tok.upper()
        if up in ("YES", "NO"):
            return up
    return None


@dataclass
class VerificationStats:
    unparseable: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def bump(self) -> None:
        with self._lock:
            self.unparseable += 1


def verify_negative(
    query: SyntheticQuery,
    positive_text: str,
    candidate_text: str,
    client,
    templates: PromptTemplates | None = None,
    stats: VerificationStats | None = None,
    doc_id: str = "",
) -> VerificationVerdict:
    """Ask whether ``candidate_text`` answers the query.

    YES means the candidate is a false negative. After two unparseable
    answers the candidate is kept as a true negative and ``stats`` notes it.
    """
    templates = templates or PromptTemplates()
    request = ChatRequest(
        templates.system,
        templates.verification.format(query=query.text, document=candidate_text, positive=positive_text),
        templates.verification_temperature,
        templates.max_tokens,
    )
    label = None
    for _ in range(2):
        label = parse_label(client.chat(request))
        if label is not None:
            break
    if label is None:
        logger.warning("no YES/NO label for query %r / doc %r; keeping it as a negative", query.query_id, doc_id)
        if stats is not None:
            stats.bump()
        return VerificationVerdict(query.query_id, doc_id, TRUE_NEGATIVE, "")
    verdict = FALSE_NEGATIVE if label == "YES" else TRUE_NEGATIVE
    return VerificationVerdict(query.query_id, doc_id, verdict, label)


def load_verdicts(path: str | os.PathLike) -> dict[tuple[str, str], VerificationVerdict]:
    if not Path(path).exists():
        return {}
    out = {}
    for _, rec in iter_jsonl(path):
        v = VerificationVerdict.from_record(rec)
        out[(v.query_id, v.doc_id)] = v
    return out


def filter_negatives(
    mined: Mapping[str, Sequence[NegativeCandidate]],
    queries: Mapping[str, SyntheticQuery],
    corpus: Corpus,
    client,
    templates: PromptTemplates | None = None,
    checkpoint: str | os.PathLike | None = None,
    concurrency: int = 8,
    dataset_name: str | None = None,
    mined_per_query: int | None = None,
) -> tuple[dict[str, list[NegativeCandidate]], FalseNegativeReport]:
    """Drop candidates the LLM judges relevant and tally the false-negative rate.

    Verdicts are appended to ``checkpoint`` as they arrive, and verdicts
    already present there are reused, so an interrupted run can resume. On
    success the checkpoint is rewritten sorted by (query_id, doc_id).
    Surviving candidates keep their original order.
    """
    for qid, cands in mined.items():
        if qid not in queries:
            raise KeyError(f"mined candidates for unknown query {qid!r}")
        for c in cands:
            if c.doc_id not in corpus:
                raise KeyError(f"candidate {c.doc_id!r} of query {qid!r} is not in the corpus")

    done = load_verdicts(checkpoint) if checkpoint else {}
    stats = VerificationStats()
    todo = [(qid, c.doc_id) for qid in sorted(mined) for c in mined[qid] if (qid, c.doc_id) not in done]
    write_lock = threading.Lock()
    ckpt_fh = open(checkpoint, "a", encoding="utf-8") if checkpoint else None

    def work(key):
        qid, doc_id = key
        q = queries[qid]
        v = verify_negative(q, corpus[q.positive_doc_id].text, corpus[doc_id].text, client, templates, stats, doc_id)
        if ckpt_fh is not None:
            with write_lock:
                ckpt_fh.write(dumps(v.to_record()) + "\n")
                ckpt_fh.flush()
        return key, v

    try:
        with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
            for key, v in pool.map(work, todo):
                done[key] = v
    finally:
        if ckpt_fh is not None:
            ckpt_fh.close()

    verified: dict[str, list[NegativeCandidate]] = {}
    total = false = 0
    empty = []
    for qid in sorted(mined):
        kept = []
        for c in mined[qid]:
            total += 1
            if done[(qid, c.doc_id)].verdict == FALSE_NEGATIVE:
                false += 1
            else:
                kept.append(c)
        verified[qid] = kept
        if not kept:
            empty.append(qid)
    if empty:
        logger.info("%d query(ies) have no verified negatives; in-batch terms still apply", len(empty))
    if checkpoint:
        write_jsonl(checkpoint, (done[k].to_record() for k in sorted(done)))
    if mined_per_query is None:
        mined_per_query = max((len(c) for c in mined.values()), default=0)
    report = FalseNegativeReport(
        dataset_name or corpus.name, mined_per_query, total, false, stats.unparseable, empty
    )
    return verified, report


def write_queries(path, queries: Sequence[SyntheticQuery]) -> None:
    write_jsonl(path, (q.to_record() for q in queries))


def read_queries(path) -> list[SyntheticQuery]:
    return [SyntheticQuery.from_record(rec) for _, rec in iter_jsonl(path)]


def write_candidates(path, per_query: Mapping[str, Sequence[NegativeCandidate]]) -> None:
    write_jsonl(path, ({"query_id": q, "candidates": [c.to_record() for c in per_query[q]]} for q in sorted(per_query)))


def read_candidates(path) -> dict[str, list[NegativeCandidate]]:
    out = {}
    for lineno, rec in iter_jsonl(path):
        if "query_id" not in rec or "candidates" not in rec:
            raise ValueError(f"{path}:{lineno}: expected fields query_id and candidates")
        out[rec["query_id"]] = [NegativeCandidate.from_record(c) for c in rec["candidates"]]
    return out


def write_report(path, report: FalseNegativeReport) -> None:
    write_json(path, report.to_dict())


def read_report(path) -> FalseNegativeReport:
    with open(path, encoding="utf-8") as fh:
        return FalseNegativeReport.from_dict(json.load(fh))
