"""Synthetic clustered corpus for offline end-to-end runs.

Documents are bags of made-up words: most come from one of several topic
vocabularies, a few from a shared pool of filler words. A fraction of
documents are "replies" that reuse words from an earlier document in the
same topic, which gives BM25 mining some genuine false negatives to find.
"""

from __future__ import annotations

import random

from synthir.corpus import Corpus, Document

_ONSETS = "b c d f g h j k l m n p r s t v w z br cr dr fl gr kl pl pr sk st tr".split()
_VOWELS = "a e i o u ai ea io ou".split()
_CODAS = "n r s t l m k x nd rt".split()


def _pseudo_words(rng: random.Random, n: int, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        w = rng.choice(_ONSETS) + rng.choice(_VOWELS) + rng.choice(_ONSETS) + rng.choice(_VOWELS) + rng.choice(_CODAS)
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def make_toy_corpus(
    n_docs: int = 200,
    n_clusters: int = 8,
    topic_vocab: int = 40,
    shared_vocab: int = 150,
    topic_words: int = 14,
    shared_words: int = 6,
    reply_fraction: float = 0.1,
    seed: int = 0,
    name: str = "toy",
) -> Corpus:
    rng = random.Random(seed)
    taken: set[str] = set()
    topics = [_pseudo_words(rng, topic_vocab, taken) for _ in range(n_clusters)]
    shared = _pseudo_words(rng, shared_vocab, taken)
    docs: list[Document] = []
    texts_by_cluster: list[list[list[str]]] = [[] for _ in range(n_clusters)]
    for i in range(n_docs):
        c = i % n_clusters
        earlier = texts_by_cluster[c]
        if earlier and rng.random() < reply_fraction:
            words = rng.sample(rng.choice(earlier), topic_words // 2 + shared_words // 2)
            words += rng.sample(topics[c], topic_words - topic_words // 2)
        else:
            words = rng.sample(topics[c], topic_words) + rng.sample(shared, shared_words)
        rng.shuffle(words)
        earlier.append(words)
        docs.append(Document(f"doc{i:04d}", " ".join(words), f"topic{c}"))
    return Corpus(tuple(docs), name=name)
