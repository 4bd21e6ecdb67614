"""
Recall@k and nDCG@k
===================

Every evaluation query has one relevant document (its positive). Ranking is
exact cosine similarity over the full corpus.
"""

import numpy as np

from synthir.evaluation import ndcg_at_k, rank_corpus, recall_at_k

rng = np.random.default_rng(5)
doc_ids = [f"d{i:02d}" for i in range(20)]
docs = rng.standard_normal((20, 16))
query = docs[7] + 2.0 * rng.standard_normal(16)

ranked = rank_corpus(query, docs, doc_ids)
position = [d for d, _ in ranked].index("d07") + 1
print("relevant document d07 is ranked", position)

run = {"q": ranked}
judgments = {"q": frozenset(["d07"])}
for k in (1, 3, 10):
    print(f"  R@{k:<2} = {recall_at_k(run, judgments, k):.3f}   nDCG@{k:<2} = {ndcg_at_k(run, judgments, k):.3f}")

# one relevant document at rank r scores 1 / log2(r + 1): rank 3 gives exactly 0.5
toy_run = {"q": [("a", 0.9), ("b", 0.8), ("rel", 0.7)]}
print("rank-3 nDCG@10:", ndcg_at_k(toy_run, {"q": frozenset(["rel"])}, 10))
