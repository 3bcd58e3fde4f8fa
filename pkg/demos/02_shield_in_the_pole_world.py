"""
Collision shield on the pole course
===================================

Fit the collision predictor Q_c on pole worlds that the trials never use,
then fly the proportional heading controller across the pole band with and
without the shield.  Expect a minute or two on one core.
"""
import numpy as np

from signnav.config import QcDataConfig
from signnav.evaluation import (SAFETY_PROFILE, SAFETY_WORLD_SEED, TrialConfig, default_trial_pairs,
                                fit_safety_qc, run_safety_trials)
from signnav.shield import Shield, ShieldConfig, compute_direction, preprocess_depth
from signnav.world import get_world, render

qc = fit_safety_qc(QcDataConfig(), beta=0.3, seed=0)

# what Q_c thinks about the first pole, seen head-on from 0.4 m off its surface
world = get_world(SAFETY_WORLD_SEED, SAFETY_PROFILE)
px, py, r = world.circles[0]
_, depth = render((px - r - 0.4, py, 0.0), world)
s_d = preprocess_depth(depth)
print("s_d", np.round(s_d, 2), "D =", compute_direction(s_d))
for a in ([1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]):
    print("Q_c(s_d, a=%s) = %.3f" % (a, qc.predict(s_d[None], np.array([a]))[0]))

shield = Shield(qc, ShieldConfig())
dec = shield.correct(np.array([1.0, 0.0]), s_d)
print("full speed ahead ->", np.round(dec.action, 2), "after", dec.iterations, "corrections,",
      "fallback" if dec.fallback else f"Q_c {dec.q_final:.2f}")

pairs = default_trial_pairs(world)
cfg = TrialConfig(trials_per_pair=2)
for name, sh in (("shield on", shield), ("shield off", None)):
    report = run_safety_trials(world, pairs, sh, cfg)
    agg = report.aggregate()
    print(f"{name:10s} SR {agg['sr']:.2f}  SPL {agg['spl']:.2f}  "
          f"correction rate {agg['correction_rate']:.3f}  collisions {agg['collisions']}")

print(report.to_csv())
