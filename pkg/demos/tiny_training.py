"""A few PPO iterations on the empty reach task; enough to watch the curve move."""

import sys
from dataclasses import replace

from armplan.ppo import TrainConfig, train

cfg = replace(TrainConfig(), total_steps=32_768, horizon=1024, n_envs=4, seed=0)
out = sys.argv[1] if len(sys.argv) > 1 else None
_, curve = train(cfg, out_dir=out)
for row in curve:
    print(f"iter {row['iteration']:3d}  reward {row['mean_reward']:8.2f}  "
          f"success {row['success_rate']:.2f}")
