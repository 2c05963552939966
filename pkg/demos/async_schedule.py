"""How the asynchronous sampler interleaves action and vision updates.

A stub velocity field makes each update visible: actions only move on every
q-th step while the predicted future moves on every step.

Run: python3 demos/async_schedule.py
"""

import numpy as np

from dust.model import ModelConfig
from dust.rng import SeededRng
from dust.sampler import SamplerConfig, sample_joint, update_schedule


class ConstantField:
    cfg = ModelConfig()

    def __call__(self, ctx, state, A, O, tau_a, tau_o):
        return np.ones_like(A), np.ones_like(O)


for n_a, n_o in [(4, 4), (4, 16), (2, 8)]:
    sc = SamplerConfig(n_a, n_o)
    marks = "".join("A" if act else "." for _, act in update_schedule(sc))
    print(f"N_A={n_a:2d} N_o={n_o:2d} q={sc.q}:  {marks}")

model = ConstantField()
A0 = np.zeros((1, 4, 2))
O0 = np.zeros((1, 4, 8))
_, _, trace = sample_joint(model, np.zeros((1, 2, 32)), np.zeros((1, 2)), [SeededRng(0)],
                           SamplerConfig(2, 8), record_states=True, init=(A0, O0))
print("\nstep  tau_a  tau_o  action-moved  A[0,0,0]  O[0,0,0]")
for rec, (A, O) in zip(trace.records, trace.snapshots):
    print(f"{rec.step:4d}  {rec.tau_a:5.3f}  {rec.tau_o:5.3f}  {str(rec.updates_action):>12s}"
          f"  {A[0, 0, 0]:8.3f}  {O[0, 0, 0]:8.3f}")
# both end at 1.0: N_A strides of 1/N_A and N_o strides of 1/N_o
