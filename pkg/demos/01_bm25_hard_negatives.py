"""
Mining hard negatives with BM25
===============================

A synthetic query has one positive document. Documents that share its
vocabulary but are not the positive make useful negatives for contrastive
training. Here we build a tiny inbox, index it and mine candidates.
"""

from synthir.bm25 import build_index, mine_hard_negatives, top_k
from synthir.corpus import Corpus, Document
from synthir.synthgen import SyntheticQuery

inbox = Corpus.from_documents([
    Document("m1", "Budget for the Houston trading desk approved by Alice"),
    Document("m2", "Re: budget meeting moved to Friday, Houston office"),
    Document("m3", "Gas pipeline capacity report for Q3"),
    Document("m4", "Lunch order for the trading desk"),
    Document("m5", "Alice approved the travel budget"),
])
index = build_index(inbox)
print(f"{index.doc_count} documents, mean length {index.avg_doc_length:.1f} tokens")

# plain retrieval: ties are broken by document id so the output is stable
for cand in top_k(index, "houston budget", k=3):
    print(f"  {cand.rank}. {cand.doc_id}  {cand.bm25_score:.4f}")

# mining drops the positive and keeps the rest in rank order
query = SyntheticQuery("m1#keyword-0", "budget approved Houston desk", "keyword", "m1")
negatives = mine_hard_negatives(index, query, k=10)
print("hard negatives for", repr(query.text))
for cand in negatives:
    print(f"  {cand.rank}. {cand.doc_id}  {inbox[cand.doc_id].text}")

# m5 ("Alice approved the travel budget") answers a similar query: that is the
# kind of false negative the LLM verification stage is there to remove
