"""Image-goal navigation on a 2D ray-cast simulator with PPO, self-supervised
auxiliary losses and a learned collision shield."""

from .config import RunConfig
from .evaluation import (compute_spl, compute_sr, evaluate_policy, fit_safety_qc, generate_episode_set,
                         run_ablation, run_safety_trials)
from .policy import NavPolicy, PolicyConfig
from .shield import CollisionPredictor, Shield, ShieldConfig
from .trainer import TrainConfig, train
from .world import Action, EpisodeSpec, NavEnv, get_world, make_world, render

__version__ = "0.1.0"

__all__ = ["Action", "CollisionPredictor", "EpisodeSpec", "NavEnv", "NavPolicy", "PolicyConfig", "RunConfig",
           "Shield", "ShieldConfig", "TrainConfig", "compute_spl", "compute_sr", "evaluate_policy",
           "fit_safety_qc", "generate_episode_set", "get_world", "make_world", "render", "run_ablation",
           "run_safety_trials", "train"]
