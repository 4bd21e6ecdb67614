"""Independent reference implementations used as test oracles.

Nothing here imports the code under test's internals; each oracle recomputes
its quantity from first principles with plain Python loops.
"""

import math
import re
from collections import Counter


# -- BM25 -----------------------------------------------------------------------

def bm25_tokens(text):
    return re.findall(r"[^\W_]+", text.lower())


def bm25_brute_scores(texts_by_id, query, k1=1.2, b=0.75):
    """Score every document with Okapi BM25 computed straight from raw counts."""
    toks = {d: bm25_tokens(t) for d, t in texts_by_id.items()}
    n = len(toks)
    avg = sum(len(v) for v in toks.values()) / n
    q = bm25_tokens(query)
    out = {}
    for d, words in toks.items():
        counts = Counter(words)
        s = 0.0
        for term in q:
            df = sum(1 for w in toks.values() if term in w)
            tf = counts.get(term, 0)
            if tf == 0:
                continue
            idf = math.log(1.0 + (n - df + 0.5) / (df + 0.5))
            s += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len(words) / avg))
        out[d] = s
    return out


def bm25_brute_top_k(texts_by_id, query, k, exclude=(), k1=1.2, b=0.75):
    scores = bm25_brute_scores(texts_by_id, query, k1, b)
    ranked = sorted(((s, d) for d, s in scores.items() if d not in exclude and s > 0), key=lambda x: (-x[0], x[1]))
    return ranked[:k]


# -- loss -----------------------------------------------------------------------

def _matvec(W, e):
    return [e[r] + sum(W[r][c] * e[c] for c in range(len(e))) for r in range(len(e))]


def _unit(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def _dot(u, v):
    return math.fsum(a * b for a, b in zip(u, v))


def masked_infonce_oracle(W, queries, positives, negatives, ids, tau, margin=0.1):
    """Enumerate every partition term one at a time.

    ``negatives[i]`` is the list of hard-negative vectors of row ``i``.
    Returns (loss, masks) where masks maps (family, i, j) -> 0/1.
    """
    W = [list(map(float, row)) for row in W]
    aq = [_unit(_matvec(W, list(map(float, e)))) for e in queries]
    ap = [_unit(_matvec(W, list(map(float, e)))) for e in positives]
    an = [[_unit(_matvec(W, list(map(float, e)))) for e in row] for row in negatives]
    n = len(aq)
    masks = {}
    losses = []
    for i in range(n):
        s_pos = _dot(aq[i], ap[i])
        thr = s_pos + margin
        terms = [math.exp(s_pos / tau)]
        for k, neg in enumerate(an[i]):
            s = _dot(aq[i], neg)
            m = 0 if s > thr else 1
            masks[("hard", i, k)] = m
            terms.append(m * math.exp(s / tau))
        for j in range(n):
            if j == i:
                continue
            s = _dot(aq[i], aq[j])
            m = 0 if s > thr else 1
            masks[("qq", i, j)] = m
            terms.append(m * math.exp(s / tau))
            s = _dot(ap[i], ap[j])
            m = 0 if (s > thr or ids[j] == ids[i]) else 1
            masks[("dd", i, j)] = m
            terms.append(m * math.exp(s / tau))
            s = _dot(aq[i], ap[j])
            m = 0 if (s > thr or ids[j] == ids[i]) else 1
            masks[("qd", i, j)] = m
            terms.append(m * math.exp(s / tau))
        losses.append(-(s_pos / tau - math.log(math.fsum(terms))))
    return math.fsum(losses) / n, masks


def central_differences(f, W, h=1e-5):
    import numpy as np

    grad = np.zeros_like(W)
    for r in range(W.shape[0]):
        for c in range(W.shape[1]):
            Wp = W.copy()
            Wp[r, c] += h
            Wm = W.copy()
            Wm[r, c] -= h
            grad[r, c] = (f(Wp) - f(Wm)) / (2 * h)
    return grad


# -- optimizer ------------------------------------------------------------------

def adamw_scalar(w, grads, lrs, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, (g, lr) in enumerate(zip(grads, lrs), start=1):
        w = w - lr * wd * w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        w = w - lr * mh / (math.sqrt(vh) + eps)
    return w


# -- metrics --------------------------------------------------------------------

def recall_brute(ranked_ids, relevant, k):
    hits = 0
    for pos, d in enumerate(ranked_ids):
        if pos < k and d in relevant:
            hits += 1
    return hits / len(relevant)


def ndcg_brute(ranked_ids, relevant, k):
    def dcg(ids):
        total = 0.0
        for pos in range(min(k, len(ids))):
            if ids[pos] in relevant:
                total += 1.0 / math.log2(pos + 2)
        return total

    ideal = sorted(relevant) + [d for d in ranked_ids if d not in relevant]
    return dcg(list(ranked_ids)) / dcg(ideal)
