"""
A walk through the simulator
============================

Build a small room, look through the agent's camera and drive it toward a
goal pose by hand.  Every step prints the progress reward and the geodesic
distance that produced it.
"""
import math

import numpy as np

from signnav.evaluation import compute_spl
from signnav.world import Action, EpisodeSpec, NavEnv, geodesic_distance, make_world, render

# a 6 x 4 m room with one pillar and one crate between start and goal
world = make_world((0.0, 0.0, 6.0, 4.0), circles=[(3.0, 2.0, 0.4)], boxes=[(4.2, 0.0, 4.6, 1.2)], seed=3)

start = (0.8, 2.0, 0.0)
goal = (5.2, 2.6, 0.0)
image, depth = render(start, world)
print("image", image.shape, "nearest ray", depth.min().round(2), "m")

# the straight line is blocked, so the geodesic is longer than the Euclidean gap
length = geodesic_distance(start[:2], goal[:2], world)
print(f"euclidean {math.dist(start[:2], goal[:2]):.2f} m, geodesic {length:.2f} m")

env = NavEnv(world)
env.reset(EpisodeSpec(world.seed, world.profile, start, goal, "easy", length))

# steer around the pillar on its upper side, then straighten out
plan = [(0.25, math.radians(15))] * 30 + [(0.25, 0.0)] * 40 + [(0.25, -math.radians(15))] * 30 + [(0.25, 0.0)] * 90
total = 0.0
for t, (v, w) in enumerate(plan):
    step = env.step(Action(v, w))
    total += step.reward
    if t % 20 == 0 or step.done:
        print(f"t={t:3d} d={step.info.distance:.2f} alpha={step.info.heading_error:5.1f} "
              f"r={step.reward:+.3f} collision={step.collision}")
    if step.done:
        break

print("return", round(total, 3), "success", step.info.success)
print("SPL", compute_spl([(step.info.success, step.info.path_length, length)]))

# the stop rule: both speeds under their thresholds ends the episode
env.reset(EpisodeSpec(world.seed, world.profile, start, goal, "easy", length))
print("stop ends episode:", env.step(Action(0.02, 0.0)).done)
print("depth profile (16 blocks):", np.round(depth.reshape(16, -1).min(1), 2))
