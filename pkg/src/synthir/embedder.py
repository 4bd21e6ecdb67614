"""Embedding providers (HTTP and mock), query prompting and the on-disk cache."""

from __future__ import annotations

import base64
import hashlib
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import httpx
import numpy as np

from synthir.bm25 import tokenize
from synthir.http import MalformedResponse, post_json
from synthir.jsonl import dumps, iter_jsonl

logger = logging.getLogger(__name__)

DEFAULT_TASK_PROMPT = "Retrieval relevant passage for the given query"
QUERY_KINDS = ("query", "document")
# rough upper bound used only for the overflow warning
_CHARS_PER_TOKEN = 4


class EmbeddingError(RuntimeError):
    pass


class DimensionMismatch(EmbeddingError):
    pass


class MissingEmbedding(EmbeddingError, KeyError):
    def __init__(self, missing: Sequence[str]):
        self.missing = list(missing)
        shown = ", ".join(repr(m) for m in self.missing[:5])
        more = f" (+{len(self.missing) - 5} more)" if len(self.missing) > 5 else ""
        super().__init__(f"{len(self.missing)} embedding(s) not in cache: {shown}{more}")

    def __str__(self):
        return self.args[0]


@dataclass
class EmbedderConfig:
    provider: str = "mock"  # "mock" or "http"
    model_name: str = "mock-hash"
    dimension: int = 256
    endpoint_url: str = ""
    api_key_env: str = "OPENAI_API_KEY"
    max_sequence_length: int = 1024
    prompt_mode: str = "none"  # "none" or "query_only"
    query_task_prompt: str | None = DEFAULT_TASK_PROMPT
    batch_size: int = 64
    max_retries: int = 5
    # mock only: low-rank nuisance component added to every vector
    noise_scale: float = 0.0
    noise_rank: int = 0
    noise_seed: int = 0

    def __post_init__(self):
        if self.provider not in ("mock", "http"):
            raise ValueError(f"unknown embedder provider {self.provider!r}")
        if self.prompt_mode not in ("none", "query_only"):
            raise ValueError(f"prompt_mode must be 'none' or 'query_only', got {self.prompt_mode!r}")
        if self.dimension <= 0:
            raise ValueError("dimension must be positive")


def format_query(text: str, config: EmbedderConfig) -> str:
    """Prefix a query with the instruction prompt when the model expects one."""
    if config.prompt_mode == "none":
        return text
    if not config.query_task_prompt:
        raise ValueError("prompt_mode 'query_only' requires query_task_prompt")
    return f"Instruct: {config.query_task_prompt}\nQuery:{text}"


def _digest(s: str) -> bytes:
    return hashlib.blake2b(s.encode("utf-8"), digest_size=16).digest()


def mock_embed(text: str, dimension: int) -> np.ndarray:
    """Signed feature hashing of the token bag, L2-normalized.

    Every token lands in one coordinate with a +/-1 sign, so texts sharing
    tokens get higher cosine similarity. Deterministic across processes.
    """
    if dimension < 2:
        raise ValueError("mock_embed needs dimension >= 2")
    vec = np.zeros(dimension)
    tokens = tokenize(text) or ["\x00empty"]
    for tok in tokens:
        h = int.from_bytes(_digest(tok), "little")
        vec[h % dimension] += 1.0 if (h >> 64) & 1 else -1.0
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        # every token cancelled out; fall back to hashing the whole string
        h = int.from_bytes(_digest("\x00text" + text), "little")
        vec[h % dimension] = 1.0
        norm = 1.0
    return vec / norm


def _nuisance_basis(dimension: int, rank: int, seed: int) -> np.ndarray:
    basis = np.random.default_rng(seed).standard_normal((rank, dimension))
    return basis / np.linalg.norm(basis, axis=1, keepdims=True)


def _nuisance_coefficients(text: str, rank: int) -> np.ndarray:
    seed = int.from_bytes(_digest("\x00noise" + text)[:8], "little")
    return np.random.default_rng(seed).standard_normal(rank)


def cache_key(model_name: str, kind: str, formatted_text: str) -> str:
    return hashlib.sha256(f"{model_name}\x00{kind}\x00{formatted_text}".encode("utf-8")).hexdigest()


class EmbeddingCache:
    """Append-only jsonl of ``{"key", "vector"}`` records with an in-memory index.

    Vectors are stored as base64 little-endian float64 so reloads are exact.
    ``path=None`` gives a purely in-memory cache.
    """

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self._index: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            for lineno, rec in iter_jsonl(self.path):
                raw = base64.b64decode(rec["vector"])
                self._index[rec["key"]] = np.frombuffer(raw, dtype="<f8").copy()

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def __len__(self) -> int:
        return len(self._index)

    def get(self, key: str) -> np.ndarray | None:
        return self._index.get(key)

    def put_many(self, items: Iterable[tuple[str, np.ndarray]]) -> None:
        with self._lock:
            lines = []
            for key, vec in items:
                if key in self._index:
                    continue
                vec = np.asarray(vec, dtype=np.float64)
                self._index[key] = vec
                enc = base64.b64encode(vec.astype("<f8").tobytes()).decode("ascii")
                lines.append(dumps({"key": key, "vector": enc}) + "\n")
            if self.path is not None and lines:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.writelines(lines)


class Embedder:
    """Embeds queries and documents through the configured provider.

    With ``offline=True`` only the cache is consulted and a miss raises
    :class:`MissingEmbedding`.
    """

    def __init__(
        self,
        config: EmbedderConfig,
        cache: EmbeddingCache | None = None,
        offline: bool = False,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self.cache = cache if cache is not None else EmbeddingCache()
        self.offline = offline
        self.requests = 0
        self._sleep = sleep
        self._http = None
        self._headers = {}
        if config.provider == "http" and not offline:
            if not config.endpoint_url:
                raise ValueError("http embedder needs endpoint_url")
            key = os.environ.get(config.api_key_env)
            if key:
                self._headers = {"Authorization": f"Bearer {key}"}
            self._http = httpx.Client(timeout=120.0, transport=transport)
        self._basis = None
        if config.provider == "mock" and config.noise_rank > 0:
            self._basis = _nuisance_basis(config.dimension, config.noise_rank, config.noise_seed)

    def embed_batch(self, texts: Sequence[str], kind: str) -> np.ndarray:
        """Return an ``(len(texts), dimension)`` array in input order."""
        if kind not in QUERY_KINDS:
            raise ValueError(f"kind must be one of {QUERY_KINDS}, got {kind!r}")
        if len(texts) == 0:
            raise ValueError("embed_batch needs at least one text")
        formatted = [format_query(t, self.config) if kind == "query" else t for t in texts]
        keys = [cache_key(self.config.model_name, kind, f) for f in formatted]
        pending = {}
        for k, f in zip(keys, formatted):
            if k not in self.cache and k not in pending:
                pending[k] = f
        if pending:
            if self.offline:
                raise MissingEmbedding([pending[k] for k in pending])
            todo = list(pending.items())
            step = max(1, self.config.batch_size)
            for start in range(0, len(todo), step):
                chunk = todo[start:start + step]
                vecs = self._fetch([f for _, f in chunk])
                self.cache.put_many((k, v) for (k, _), v in zip(chunk, vecs))
        return np.stack([self.cache.get(k) for k in keys])

    def _fetch(self, texts: list[str]) -> list[np.ndarray]:
        self.requests += 1
        limit = self.config.max_sequence_length * _CHARS_PER_TOKEN
        for t in texts:
            if len(t) > limit:
                logger.warning("text of %d chars likely exceeds %d tokens; the endpoint will truncate it",
                               len(t), self.config.max_sequence_length)
        if self.config.provider == "mock":
            out = []
            for t in texts:
                v = mock_embed(t, self.config.dimension)
                if self._basis is not None:
                    v = v + self.config.noise_scale * (_nuisance_coefficients(t, self.config.noise_rank) @ self._basis)
                out.append(v)
            return out
        body = post_json(
            self._http, self.config.endpoint_url.rstrip("/") + "/embeddings",
            {"model": self.config.model_name, "input": texts}, self._headers,
            max_retries=self.config.max_retries, sleep=self._sleep,
        )
        try:
            data = sorted(body["data"], key=lambda d: d.get("index", 0))
            vecs = [np.asarray(d["embedding"], dtype=np.float64) for d in data]
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponse("embedding response lacks data[].embedding") from exc
        if len(vecs) != len(texts):
            raise MalformedResponse(f"asked for {len(texts)} embeddings, got {len(vecs)}")
        for v in vecs:
            if v.shape != (self.config.dimension,):
                raise DimensionMismatch(f"endpoint returned {v.shape[0]}-dim vector, config says {self.config.dimension}")
            if not np.all(np.isfinite(v)):
                raise EmbeddingError("endpoint returned a non-finite embedding")
        return vecs

    def close(self) -> None:
        if self._http is not None:
            self._http.close()


@dataclass
class EmbeddingTable:
    """Frozen base vectors looked up by query id and document id."""

    queries: dict[str, np.ndarray]
    documents: dict[str, np.ndarray]

    @property
    def dimension(self) -> int:
        for v in self.documents.values():
            return v.shape[0]
        raise ValueError("empty embedding table")

    def query(self, qid: str) -> np.ndarray:
        return self.queries[qid]

    def document(self, doc_id: str) -> np.ndarray:
        return self.documents[doc_id]

    @classmethod
    def build(cls, embedder: Embedder, corpus, queries: Sequence) -> "EmbeddingTable":
        """Embed every corpus document and every query (objects with ``query_id``/``text``)."""
        missing = []
        docs: dict[str, np.ndarray] = {}
        qs: dict[str, np.ndarray] = {}
        doc_list = list(corpus.documents)
        if doc_list:
            try:
                mat = embedder.embed_batch([d.text for d in doc_list], "document")
                docs = {d.id: row for d, row in zip(doc_list, mat)}
            except MissingEmbedding:
                missing += [f"document {d.id}" for d in doc_list
                            if cache_key(embedder.config.model_name, "document", d.text) not in embedder.cache]
        if queries:
            try:
                mat = embedder.embed_batch([q.text for q in queries], "query")
                qs = {q.query_id: row for q, row in zip(queries, mat)}
            except MissingEmbedding:
                missing += [f"query {q.query_id}" for q in queries
                            if cache_key(embedder.config.model_name, "query", format_query(q.text, embedder.config))
                            not in embedder.cache]
        if missing:
            raise MissingEmbedding(missing)
        return cls(qs, docs)
