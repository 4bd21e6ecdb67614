"""
The masked contrastive loss
===========================

Each query competes its positive against hard negatives and against the
other queries and positives in the batch. Competitors that look *more*
similar than the positive (by a margin of 0.1), or that are the very same
document, are masked out because they are probably unlabelled positives.
"""

import numpy as np

from synthir.adapter import (
    AdapterParams,
    TrainBatch,
    TrainConfig,
    batch_loss,
    compute_mask,
    loss_gradient,
    masked_loss,
    similarities,
)

rng = np.random.default_rng(0)
d = 8
queries = rng.standard_normal((3, d))
positives = queries + 0.5 * rng.standard_normal((3, d))
# row 0 gets a near-copy of its own query as a "negative": it beats the
# positive by more than the margin, so it is masked
negatives = [[queries[0] + 0.01 * rng.standard_normal(d), rng.standard_normal(d)],
             [rng.standard_normal(d)],
             []]
# rows 1 and 2 point at the same document, so their cross terms are masked too
batch = TrainBatch.from_lists(queries, positives, negatives, ["doc-a", "doc-b", "doc-b"])

W = AdapterParams.zeros(d)          # the adapter starts as the identity map
sims = similarities(W, batch)
mask = compute_mask(batch, sims, margin=0.1)
print("positive similarities", np.round(sims.positive, 3))
print("hard-negative similarities (nan = padding)\n", np.round(np.where(batch.valid, sims.hard, np.nan), 3))
print("hard-negative mask\n", mask.hard)
print("doc-doc mask\n", mask.dd)

config = TrainConfig(temperature=0.07)
print(f"loss at W = 0: {batch_loss(W, batch, config):.6f}")

# the gradient treats the mask as a constant; compare one entry with a
# central difference taken under the same frozen mask
G = loss_gradient(W, batch, config)
h = 1e-5
E = np.zeros((d, d))
E[2, 5] = h
fd = (masked_loss(AdapterParams(W.W + E), batch, config, mask)
      - masked_loss(AdapterParams(W.W - E), batch, config, mask)) / (2 * h)
print(f"dL/dW[2,5]: analytic {G[2, 5]:.10f}  finite difference {fd:.10f}")
