"""
Learning-rate schedule and AdamW
================================

Linear warmup over the first 6% of steps, then linear decay to 2% of the
base rate. AdamW applies decoupled weight decay before the Adam step.
"""

import numpy as np

from synthir.adapter import AdapterParams, LrSchedule, OptimizerState, adamw_step, lr_at

schedule = LrSchedule.build(total_steps=1000, base_lr=1e-6)
print("warmup steps:", schedule.warmup_steps)
for step in (0, 30, 60, 500, 1000):
    print(f"  lr({step:4d}) = {lr_at(step, schedule):.3e}")

# first Adam step with g = 1: the bias-corrected update is lr * 1 / (1 + eps)
params, state = adamw_step(OptimizerState.zeros_like(np.zeros((1, 1))),
                            AdapterParams.zeros(1), np.ones((1, 1)), lr=0.1, weight_decay=0.0)
print("W after one step:", params.W[0, 0])

# Adam moves each weight by roughly lr per step whatever the gradient scale,
# so at lr = 1e-6 the adapter needs thousands of steps to move noticeably
W = AdapterParams(np.full((2, 2), 0.5))
state = OptimizerState.zeros_like(W.W)
for step in range(1, 101):
    W, state = adamw_step(state, W, np.array([[1.0, -1.0], [1e-3, 0.0]]), lr=1e-3, weight_decay=0.01)
print("after 100 steps:\n", np.round(W.W, 5))
