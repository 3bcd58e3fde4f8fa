"""Command-line entry point: train, eval, safety-trials, gen-episodes, plot.

Every command writes into one run directory (``--out``, default
``$SIGNNAV_OUT/<command>-seed<seed>`` with ``SIGNNAV_OUT`` defaulting to
``runs``) and first echoes the effective configuration to ``config.txt``.
Settings resolve as ``--set``/flags > ``--config`` file > defaults.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import torch

from .config import ConfigError, RunConfig, config_to_text, parse_assignments, parse_config_text
from .evaluation import (SAFETY_PROFILE, SAFETY_WORLD_SEED, default_trial_pairs, episodes_from_csv,
                         episodes_to_csv, evaluate_policy, fit_safety_qc, generate_episode_set,
                         results_to_csv, run_safety_trials, summary_to_csv)
from .nn import load_checkpoint, load_module_state, save_checkpoint
from .plots import emit_plots, read_stats_csv
from .policy import NavPolicy, PolicyConfig
from .shield import CollisionPredictor, Shield
from .trainer import stats_to_csv, train
from .world import TrajectoryLog, get_world

COMMANDS = ("train", "eval", "safety-trials", "gen-episodes", "plot")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--out", type=Path, help="run directory")
    p.add_argument("--seed", type=int, help="seed for training and trials")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. --set shield.d_c=0.4")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="signnav", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the navigation policy and collision predictor")
    _common(p)
    p.add_argument("--steps", type=int, help="total environment steps")
    p.add_argument("--no-fp", action="store_true", help="disable the future-prediction task")
    p.add_argument("--no-rs", action="store_true", help="disable the RandomShift task")

    p = sub.add_parser("eval", help="evaluate a checkpoint on an episode set")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--episodes", type=Path, help="episode CSV (default: generate from eval.* settings)")
    p.add_argument("--no-shield", action="store_true")
    p.add_argument("--save-trajectories", action="store_true")

    p = sub.add_parser("safety-trials", help="point-to-point trials in the pole world")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="take Q_c from this checkpoint instead of fitting one")
    p.add_argument("--no-shield", action="store_true")

    p = sub.add_parser("gen-episodes", help="write an episode set CSV")
    _common(p)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--difficulty", choices=("easy", "medium", "hard"), default="easy")

    p = sub.add_parser("plot", help="render CSV/SVG plots from a run directory")
    _common(p)
    p.add_argument("--run", type=Path, required=True, help="run directory holding stats.csv/trajectories")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config is not None:
        if not args.config.exists():
            raise ConfigError(f"config file not found: {args.config}")
        cfg = parse_config_text(args.config.read_text(), cfg)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    flags = []
    if getattr(args, "steps", None) is not None:
        flags.append(f"train.total_steps={args.steps}")
    if getattr(args, "no_fp", False):
        flags.append("train.use_fp=false")
    if getattr(args, "no_rs", False):
        flags.append("train.use_rs=false")
    return parse_assignments(flags + list(args.set), cfg)


def run_dir(args, cfg: RunConfig) -> Path:
    if args.out is not None:
        return args.out
    root = Path(os.environ.get("SIGNNAV_OUT", "runs"))
    return root / f"{args.command}-seed{cfg.train.seed}"


def save_models(path: Path, policy: NavPolicy, qc: CollisionPredictor, cfg: RunConfig) -> None:
    tensors = {f"policy.{k}": v for k, v in policy.state_dict().items()}
    tensors.update({f"qc.{k}": v for k, v in qc.state_dict().items()})
    save_checkpoint(path, tensors, {"config": config_to_text(cfg)})


def load_models(path: Path, cfg: RunConfig) -> tuple[NavPolicy, CollisionPredictor]:
    tensors, _ = load_checkpoint(path)
    policy = NavPolicy(PolicyConfig(reward_bins=cfg.train.reward_bins))
    qc = CollisionPredictor()
    if any(k.startswith("policy.") for k in tensors):
        load_module_state(policy, tensors, "policy.")
    load_module_state(qc, tensors, "qc.")
    return policy, qc


def _held_out_episodes(cfg: RunConfig):
    e = cfg.eval
    return generate_episode_set(e.episodes, e.difficulty, e.episode_seed, e.profile,
                                [e.world_seed0 + i for i in range(e.num_worlds)])


def cmd_train(args, cfg: RunConfig, out: Path) -> int:
    def progress(row):
        print(f"update {row['update']} steps {row['env_steps']} sr {row['success_rate']:.3f} "
              f"reward {row['mean_reward']:.4f}", flush=True)

    result = train(cfg.train, cfg.shield, progress=progress)
    (out / "stats.csv").write_text(stats_to_csv(result.stats))
    save_models(out / "checkpoint.bin", result.policy, result.qc, cfg)
    emit_plots(out, result.stats)
    return 0


def cmd_eval(args, cfg: RunConfig, out: Path) -> int:
    policy, qc = load_models(args.checkpoint, cfg)
    if args.episodes is not None:
        episodes = episodes_from_csv(args.episodes.read_text())
    else:
        episodes = _held_out_episodes(cfg)
    shield = None if args.no_shield else Shield(qc, cfg.shield)
    logs = [] if args.save_trajectories else None
    result = evaluate_policy(policy, episodes, shield, cfg.eval.batch_size, cfg.eval.max_steps, logs)
    (out / "results.csv").write_text(results_to_csv(result))
    (out / "metrics.csv").write_text(summary_to_csv(result.summary()))
    if logs is not None:
        _write_trajectories(out, logs, [(ep.world_seed, ep.profile, ep.start, ep.goal) for ep in episodes])
    if result.skipped:
        print(f"skipped {len(result.skipped)} disconnected episodes: {result.skipped}", file=sys.stderr)
    print(summary_to_csv(result.summary()), end="")
    return 0


def cmd_safety(args, cfg: RunConfig, out: Path) -> int:
    world = get_world(SAFETY_WORLD_SEED, SAFETY_PROFILE)
    pairs = default_trial_pairs(world)
    shield = None
    if not args.no_shield:
        if args.checkpoint is not None:
            _, qc = load_models(args.checkpoint, cfg)
        else:
            qc = fit_safety_qc(cfg.qc, cfg.shield.beta, cfg.trial.seed)
            save_models(out / "qc.bin", NavPolicy(), qc, cfg)
        shield = Shield(qc, cfg.shield)
    logs: list[TrajectoryLog] = []
    report = run_safety_trials(world, pairs, shield, cfg.trial, logs)
    (out / "trials.csv").write_text(report.to_csv())
    meta = [(SAFETY_WORLD_SEED, SAFETY_PROFILE, (log.rows[0][1], log.rows[0][2]) if log.rows else pairs[i // cfg.trial.trials_per_pair][0],
             pairs[i // cfg.trial.trials_per_pair][1]) for i, log in enumerate(logs)]
    _write_trajectories(out, logs, meta)
    print(report.to_csv(), end="")
    return 0


def _write_trajectories(out: Path, logs, meta) -> None:
    tdir = out / "trajectories"
    tdir.mkdir(exist_ok=True)
    index = ["file,world_seed,profile,start_x,start_y,goal_x,goal_y"]
    for i, (log, (seed, profile, start, goal)) in enumerate(zip(logs, meta)):
        name = f"traj_{i:03d}.csv"
        (tdir / name).write_text(log.to_csv())
        index.append(f"{name},{seed},{profile},{start[0]!r},{start[1]!r},{goal[0]!r},{goal[1]!r}")
    (tdir / "index.csv").write_text("\n".join(index) + "\n")


def cmd_gen(args, cfg: RunConfig, out: Path) -> int:
    e = cfg.eval
    episodes = generate_episode_set(args.n, args.difficulty, cfg.train.seed, e.profile,
                                    [e.world_seed0 + i for i in range(e.num_worlds)])
    (out / "episodes.csv").write_text(episodes_to_csv(episodes))
    return 0


def cmd_plot(args, cfg: RunConfig, out: Path) -> int:
    stats = None
    if (args.run / "stats.csv").exists():
        stats = read_stats_csv((args.run / "stats.csv").read_text())
    trajectories = []
    index = args.run / "trajectories" / "index.csv"
    if index.exists():
        for line in index.read_text().strip().splitlines()[1:]:
            name, seed, profile, *xy = line.split(",")
            sx, sy, gx, gy = map(float, xy)
            log = TrajectoryLog.from_csv((args.run / "trajectories" / name).read_text())
            trajectories.append((get_world(int(seed), profile), log, (sx, sy), (gx, gy)))
    if stats is None and not trajectories:
        raise FileNotFoundError(f"no stats.csv or trajectories/index.csv under {args.run}")
    emit_plots(out, stats, trajectories)
    return 0


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "safety-trials": cmd_safety,
            "gen-episodes": cmd_gen, "plot": cmd_plot}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if getattr(args, "checkpoint", None) is not None and not args.checkpoint.exists():
            raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
        out = run_dir(args, cfg)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(f"command = {args.command}\n" + config_to_text(cfg))
        torch.set_num_threads(1)
        return HANDLERS[args.command](args, cfg, out)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"signnav {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
