"""Corpus ingestion and the document-count / mean-length statistics."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from synthir.jsonl import iter_jsonl, write_jsonl

logger = logging.getLogger(__name__)

FORMATS = ("jsonl", "plaintext_dir")


class CorpusError(ValueError):
    """Raised for unreadable inputs, malformed records and duplicate ids."""


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    source: str = ""

    @property
    def char_length(self) -> int:
        # len() on str counts code points, not UTF-8 bytes
        return len(self.text)

    def to_record(self) -> dict:
        return {"id": self.id, "text": self.text, "source": self.source}


@dataclass
class Corpus:
    """Documents sorted by id. ``skipped`` counts records dropped for empty text."""

    documents: tuple[Document, ...]
    name: str = "corpus"
    skipped: int = field(default=0, compare=False)

    def __post_init__(self):
        docs = tuple(sorted(self.documents, key=lambda d: d.id))
        seen = set()
        for d in docs:
            if d.id in seen:
                raise CorpusError(f"duplicate document id {d.id!r}")
            seen.add(d.id)
        self.documents = docs
        self._by_id = {d.id: d for d in docs}

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self) -> Iterator[Document]:
        return iter(self.documents)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._by_id

    def __getitem__(self, doc_id: str) -> Document:
        try:
            return self._by_id[doc_id]
        except KeyError:
            raise KeyError(f"unknown document id {doc_id!r}") from None

    @property
    def ids(self) -> list[str]:
        return [d.id for d in self.documents]

    @classmethod
    def from_documents(cls, docs: Iterable[Document], name: str = "corpus") -> "Corpus":
        return cls(tuple(docs), name=name)

    def write_jsonl(self, path: str | os.PathLike) -> None:
        write_jsonl(path, (d.to_record() for d in self.documents))


@dataclass(frozen=True)
class CorpusStats:
    doc_count: int
    avg_char_length: float

    def as_dict(self) -> dict:
        return {"doc_count": self.doc_count, "avg_char_length": self.avg_char_length}


def _read_jsonl_documents(path: Path) -> tuple[list[Document], int]:
    docs, skipped, seen = [], 0, set()
    for lineno, rec in iter_jsonl(path):
        doc_id, text = rec.get("id"), rec.get("text")
        if not isinstance(doc_id, str) or not doc_id:
            raise CorpusError(f"{path}:{lineno}: record has no string 'id'")
        if not isinstance(text, str):
            raise CorpusError(f"{path}:{lineno}: record {doc_id!r} has no string 'text'")
        source = rec.get("source") or ""
        if not isinstance(source, str):
            raise CorpusError(f"{path}:{lineno}: 'source' must be a string")
        if doc_id in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate document id {doc_id!r}")
        seen.add(doc_id)
        if not text.strip():
            skipped += 1
            continue
        docs.append(Document(doc_id, text, source))
    return docs, skipped


def _read_plaintext_dir(path: Path) -> tuple[list[Document], int]:
    docs, skipped = [], 0
    for file in sorted(p for p in path.rglob("*") if p.is_file()):
        rel = file.relative_to(path).as_posix()
        try:
            text = file.read_text(encoding="utf-8")
        except UnicodeDecodeError as exc:
            raise CorpusError(f"{file}: not valid UTF-8") from exc
        if not text.strip():
            skipped += 1
            continue
        docs.append(Document(rel, text, rel))
    return docs, skipped


def ingest_corpus(path: str | os.PathLike, format: str = "jsonl", name: str | None = None) -> Corpus:
    """Load a corpus from a jsonl file or a directory of UTF-8 text files.

    Records whose text is empty or whitespace-only are dropped and counted in
    ``Corpus.skipped``. Duplicate ids are a hard error.
    """
    path = Path(path)
    if format == "dir":
        format = "plaintext_dir"
    if format not in FORMATS:
        raise CorpusError(f"unknown corpus format {format!r}; expected one of {FORMATS}")
    if not os.access(path, os.R_OK):
        raise CorpusError(f"cannot read corpus path {str(path)!r}")
    if format == "jsonl":
        if not path.is_file():
            raise CorpusError(f"{path} is not a file")
        docs, skipped = _read_jsonl_documents(path)
    else:
        if not path.is_dir():
            raise CorpusError(f"{path} is not a directory")
        docs, skipped = _read_plaintext_dir(path)
    if skipped:
        logger.info("dropped %d empty document(s) from %s", skipped, path)
    corpus = Corpus(tuple(docs), name=name or path.stem)
    corpus.skipped = skipped
    return corpus


def corpus_stats(corpus: Corpus) -> CorpusStats:
    n = len(corpus)
    if n == 0:
        return CorpusStats(0, 0.0)
    return CorpusStats(n, sum(d.char_length for d in corpus) / n)
