"""
A short training run
====================

Train the full agent (PPO with future prediction and RandomShift) for a
few updates, evaluate it on held-out easy episodes and write the training
curve and one trajectory as SVG.  The numbers are those of a barely
trained policy; the point is the pipeline, not the score.
"""
from pathlib import Path

import torch

from signnav.evaluation import evaluate_policy, generate_episode_set
from signnav.plots import emit_plots
from signnav.trainer import TrainConfig, train
from signnav.world import get_world

torch.set_num_threads(1)
out = Path("demo-run")

cfg = TrainConfig(total_steps=8192, num_envs=4, rollout_length=128)
result = train(cfg, progress=lambda r: print(f"update {r['update']}: return {r['mean_return']:.3f} "
                                             f"fp {r['fp_total']:.3f} rs {r['loss_rs']:.4f}"))

episodes = generate_episode_set(8, "easy", seed=12345)
logs = []
res = evaluate_policy(result.policy, episodes, max_steps=200, logs=logs)
print(res.summary())

ep = episodes[0]
paths = emit_plots(out, result.stats, [(get_world(ep.world_seed, ep.profile), logs[0], ep.start[:2], ep.goal[:2])])
print("wrote", *[p.name for p in paths])
