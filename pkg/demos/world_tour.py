"""A walk through the point-mass world: goals, expert chunks, embeddings, datasets.

Run: python3 demos/world_tour.py
"""

import numpy as np

from dust.rng import SeededRng
from dust.world import World, WorldConfig, expert_policy, generate_dataset, rollout, step

cfg = WorldConfig()
world = World(cfg)
print("goals:", cfg.goals, "| chunk length k =", cfg.k, "| horizon =", cfg.horizon)

# The expert walks straight at the goal, capped at v_max per step.
pos = np.array([-0.9, 0.8])
chunk = []
for _ in range(cfg.k):
    a = world.expert_action(pos, 3)
    chunk.append(a)
    pos = step(pos, a)
print("first expert chunk toward goal 3:\n", np.round(chunk, 3))

# Future observations are a frozen random-Fourier map of position: (m, d_o) tokens.
e = world.embed(np.array([0.1, -0.2]))
print("embedding shape", e.shape, "range", e.min().round(3), e.max().round(3))

# Context = [position code, instruction code], both d_ctx wide.
ctx = world.make_context(np.array([0.1, -0.2]), 1)
print("context tokens", ctx.shape)

# A dataset is a list of expert episodes; tuples() flattens them for training.
ds = generate_dataset(SeededRng(0), cfg, 20)
tup = ds.tuples()
print({k: v.shape for k, v in tup.items()})

# The noise-free expert is the ceiling for closed-loop success.
res = rollout(expert_policy(cfg), cfg, SeededRng(1), 100)
print("expert success rate:", res.success_rate)
