"""Train a small model on expert data, evaluate it, then sweep test-time steps.

Defaults finish in a couple of minutes; pass a step count for a longer run,
e.g. ``python3 demos/train_and_sweep.py 5000`` reproduces the desk setting.
"""

import logging
import sys

from dust.harness.config import ExperimentConfig
from dust.harness.experiments import evaluate, make_dataset, scaling_sweep
from dust.harness.train import train

logging.basicConfig(level=logging.INFO, format="%(message)s")
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1000

cfg = ExperimentConfig.from_dict({"train": {"lr": 3e-4, "steps": steps, "data_episodes": 500}})
data = make_dataset(cfg)
print(f"{len(data.episodes)} episodes, {data.tuples()['state'].shape[0]} training tuples")

res = train(cfg, data)
last = res.metrics[-1]
print(f"final losses: joint {last.L_joint:.4f} action {last.L_A:.4f} world-model {last.L_WM:.4f}")

model = res.checkpoint.model()
ev = evaluate(model, cfg.world, cfg.sampler, 100, cfg.train.eval_seed)
print(f"closed-loop success over 100 episodes: {ev.success_rate:.2f} "
      f"(future-embedding mse {ev.wm_embedding_mse:.4f})")

# More vision steps per action step: N_A stays at 4 while N_o grows.
for row in scaling_sweep(model, cfg.world, [4, 16], "async", 100, cfg.train.eval_seed):
    print(row.as_dict())
