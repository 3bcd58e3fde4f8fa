"""Episode datasets, navigation metrics, policy evaluation and safety trials."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np
import torch

from .policy import NavPolicy, PolicyState, observations_to_tensors
from .shield import Shield, preprocess_rays
from .world import (DT, MAX_STEPS, V_ANG_MAX, V_LIN_MAX, Action, AgentState, EpisodeSpec, NavEnv,
                    TrajectoryLog, WorldMap, geodesic_distance, get_world, move, normalized_to_physical,
                    physical_to_normalized, render, start_state, wrap_angle)

DIFFICULTY_RANGES = {"easy": (1.5, 3.0), "medium": (3.0, 5.0), "hard": (5.0, 10.0)}


# --------------------------------------------------------------------------
# Episode sets


def sample_episode(world: WorldMap, difficulty: str, rng: np.random.Generator,
                   max_tries: int = 100) -> EpisodeSpec:
    """Rejection-sample a start/goal pair whose geodesic distance lies in the difficulty range.

    Start and goal sit on free grid-cell centers so that the stored optimal
    length is exactly the grid geodesic between them.
    """
    lo, hi = DIFFICULTY_RANGES[difficulty]
    free_r, free_c = np.nonzero(~world.occupancy)
    for _ in range(max_tries):
        k = int(rng.integers(len(free_r)))
        gx, gy = world.cell_center(free_r[k], free_c[k])
        field_ = world.distance_field(gx, gy)[free_r, free_c]
        ok = np.nonzero((field_ >= lo) & (field_ < hi))[0]
        if len(ok) == 0:
            continue
        j = int(ok[rng.integers(len(ok))])
        sx, sy = world.cell_center(free_r[j], free_c[j])
        heading = rng.uniform(-math.pi, math.pi, size=2)
        return EpisodeSpec(world.seed, world.profile,
                           (float(sx), float(sy), float(wrap_angle(heading[0]))),
                           (float(gx), float(gy), float(wrap_angle(heading[1]))),
                           difficulty, float(field_[j]))
    raise RuntimeError(f"no {difficulty} episode found in world {world.seed} after {max_tries} goals")


def generate_episode_set(n: int, difficulty: str = "easy", seed: int = 0, profile: str = "sparse",
                         world_seeds: Sequence[int] = tuple(range(1000, 1008))) -> list[EpisodeSpec]:
    """``n`` episodes cycling over ``world_seeds``; deterministic per ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if difficulty not in DIFFICULTY_RANGES:
        raise ValueError(f"unknown difficulty {difficulty!r}")
    rng = np.random.default_rng(seed)
    worlds = [get_world(s, profile) for s in world_seeds]
    return [sample_episode(worlds[i % len(worlds)], difficulty, rng) for i in range(n)]


EPISODE_COLUMNS = ("episode", "world_seed", "profile", "difficulty", "start_x", "start_y",
                   "start_theta", "goal_x", "goal_y", "goal_theta", "optimal_length")


def episodes_to_csv(episodes: Sequence[EpisodeSpec]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EPISODE_COLUMNS)
    for i, ep in enumerate(episodes):
        w.writerow([i, ep.world_seed, ep.profile, ep.difficulty, *map(repr, ep.start), *map(repr, ep.goal),
                    repr(ep.optimal_length)])
    return buf.getvalue()


def episodes_from_csv(text: str) -> list[EpisodeSpec]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and set(rows[0]) != set(EPISODE_COLUMNS):
        raise ValueError("not an episode CSV")
    out = []
    for r in rows:
        out.append(EpisodeSpec(int(r["world_seed"]), r["profile"],
                               tuple(float(r[f"start_{k}"]) for k in ("x", "y", "theta")),
                               tuple(float(r[f"goal_{k}"]) for k in ("x", "y", "theta")),
                               r["difficulty"], float(r["optimal_length"])))
    return out


# --------------------------------------------------------------------------
# Metrics


def compute_spl(results) -> float:
    """Mean of S_i * L_i / max(L_i, p_i) over ``(S_i, p_i, L_i)`` triples."""
    results = list(results)
    if not results:
        return math.nan
    total = 0.0
    for s, p, length in results:
        if not length > 0:
            raise ValueError("optimal path lengths must be positive")
        total += float(s) * length / max(length, p)
    return total / len(results)


def compute_sr(successes) -> float:
    s = list(successes)
    return float(np.mean(s)) if s else math.nan


@dataclass(frozen=True)
class EpisodeResult:
    success: int
    path_length: float
    optimal_length: float
    steps: int
    corrections: int = 0
    collisions: int = 0


@dataclass
class EvalResult:
    episodes: list[EpisodeResult] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)

    @property
    def sr(self) -> float:
        return compute_sr(e.success for e in self.episodes)

    @property
    def spl(self) -> float:
        return compute_spl((e.success, e.path_length, e.optimal_length) for e in self.episodes)

    @property
    def correction_rate(self) -> float:
        steps = sum(e.steps for e in self.episodes)
        return sum(e.corrections for e in self.episodes) / steps if steps else 0.0

    def summary(self) -> dict[str, float]:
        return {"episodes": len(self.episodes), "skipped": len(self.skipped), "sr": self.sr,
                "spl": self.spl, "correction_rate": self.correction_rate,
                "collisions": sum(e.collisions for e in self.episodes)}


RESULT_COLUMNS = ("episode", "success", "path_length", "optimal_length", "steps", "corrections",
                  "collisions")


def results_to_csv(result: EvalResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for i, e in enumerate(result.episodes):
        w.writerow([i, e.success, f"{e.path_length:.9g}", f"{e.optimal_length:.9g}", e.steps,
                    e.corrections, e.collisions])
    return buf.getvalue()


def summary_to_csv(summary: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(summary.keys())
    w.writerow([f"{v:.9g}" if isinstance(v, float) else v for v in summary.values()])
    return buf.getvalue()


# --------------------------------------------------------------------------
# Agents and evaluation


class Agent(Protocol):
    def reset(self, n: int) -> None: ...

    def act(self, observations, active: np.ndarray) -> np.ndarray:
        """Normalized actions ``(n, 2)`` for every slot (inactive slots are ignored)."""


class PolicyAgent:
    """Deterministic (mean) actions from a recurrent policy."""

    def __init__(self, policy: NavPolicy):
        self.policy = policy
        self.state: PolicyState | None = None

    def reset(self, n: int) -> None:
        self.state = PolicyState.initial(n, self.policy.config.hidden_dim)

    @torch.no_grad()
    def act(self, observations, active: np.ndarray) -> np.ndarray:
        current, goal = observations_to_tensors(observations)
        out = self.policy.act(self.policy.encode(current, goal), self.state, stochastic=False)
        self.state = out.state
        return out.action.numpy().astype(float)


class ScriptedAgent:
    """Replays fixed normalized action sequences, then issues stop actions."""

    STOP = np.array([-1.0, 0.0])

    def __init__(self, sequences: Sequence[np.ndarray]):
        self.sequences = [np.asarray(s, dtype=float).reshape(-1, 2) for s in sequences]
        self.t = 0

    def reset(self, n: int) -> None:
        self.t = 0

    def act(self, observations, active: np.ndarray) -> np.ndarray:
        out = np.array([seq[self.t] if self.t < len(seq) else self.STOP
                        for seq in self.sequences[:len(observations)]])
        self.t += 1
        return out


def evaluate_policy(agent: Agent, episodes: Sequence[EpisodeSpec], shield: Shield | None = None,
                    batch_size: int = 8, max_steps: int = MAX_STEPS,
                    logs: list[TrajectoryLog] | None = None, world: WorldMap | None = None) -> EvalResult:
    """Run every episode to termination in batches of parallel environments.

    Episodes with an infinite optimal length are skipped (their indices are
    reported in ``skipped``).  When ``logs`` is a list, one trajectory log
    per evaluated episode is appended to it.  ``world`` replaces the
    procedural world for episodes whose seed and profile match it.
    """
    if isinstance(agent, NavPolicy):
        agent = PolicyAgent(agent)
    result = EvalResult()
    runnable = []
    for i, ep in enumerate(episodes):
        if math.isfinite(ep.optimal_length) and ep.optimal_length > 0:
            runnable.append(i)
        else:
            result.skipped.append(i)
    for b in range(0, len(runnable), batch_size):
        idx = runnable[b:b + batch_size]
        envs = [NavEnv(world, max_steps=max_steps) for _ in idx]
        obs = [env.reset(episodes[i]) for env, i in zip(envs, idx)]
        n = len(idx)
        agent.reset(n)
        active = np.ones(n, dtype=bool)
        corrections = np.zeros(n, dtype=int)
        collisions = np.zeros(n, dtype=int)
        latched: list[int | None] = [None] * n
        batch_logs = [TrajectoryLog() for _ in idx]
        finals: list[EpisodeResult | None] = [None] * n
        while active.any():
            actions = agent.act(obs, active)
            for k in np.nonzero(active)[0]:
                a = np.clip(actions[k], -1.0, 1.0)
                q = math.nan
                corrected = fallback = False
                if shield is not None:
                    s_d = preprocess_rays(obs[k].depth[None])[0]
                    decision = shield.correct(a, s_d, latched[k])
                    a, corrected, q = decision.action, decision.corrected, decision.q_initial
                    fallback = decision.fallback
                    latched[k] = decision.direction if fallback else None
                    corrections[k] += int(corrected)
                res = envs[k].step(Action(*normalized_to_physical(a)))
                collisions[k] += res.collision
                batch_logs[k].record(envs[k].state, Action(*normalized_to_physical(a)), res.reward,
                                     res.collision, q, corrected, fallback)
                obs[k] = res.observation
                if res.done:
                    active[k] = False
                    finals[k] = EpisodeResult(int(res.info.success), res.info.path_length,
                                              episodes[idx[k]].optimal_length,
                                              envs[k].state.time_step, int(corrections[k]),
                                              int(collisions[k]))
        result.episodes.extend(finals)
        if logs is not None:
            logs.extend(batch_logs)
    return result


ABLATION_VARIANTS = {
    "sign": {"use_fp": True, "use_rs": True},
    "fp": {"use_fp": True, "use_rs": False},
    "rs": {"use_fp": False, "use_rs": True},
    "vanilla": {"use_fp": False, "use_rs": False},
}
ABLATION_COLUMNS = ("variant", "seed", "env_steps", "train_sr", "sr", "spl")


def run_ablation(base, seeds: Sequence[int], variants: Sequence[str], episodes: Sequence[EpisodeSpec],
                 batch_size: int = 8, max_steps: int = MAX_STEPS, progress=None) -> list[dict]:
    """Train every (variant, seed) from ``base`` (a TrainConfig) and evaluate on ``episodes``.

    Variants are keys of ``ABLATION_VARIANTS``.  ``progress(variant, seed,
    row)`` is forwarded from the training loop.
    """
    from .trainer import train

    rows = []
    for variant in variants:
        for seed in seeds:
            cfg = replace(base, seed=seed, **ABLATION_VARIANTS[variant])
            hook = None if progress is None else (lambda row, v=variant, s=seed: progress(v, s, row))
            trained = train(cfg, progress=hook)
            result = evaluate_policy(trained.policy, episodes, None, batch_size, max_steps)
            last = trained.stats[-1]
            rows.append({"variant": variant, "seed": seed, "env_steps": last["env_steps"],
                         "train_sr": last["success_rate"], "sr": result.sr, "spl": result.spl})
    return rows


def ablation_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow([r["variant"], r["seed"], r["env_steps"]] + [_fmt(r[c]) for c in ABLATION_COLUMNS[3:]])
    return buf.getvalue()


# --------------------------------------------------------------------------
# Safety trials

SAFETY_PROFILE = "poles"
SAFETY_WORLD_SEED = 7
K_YAW = 1.0


@dataclass(frozen=True)
class TrialConfig:
    trials_per_pair: int = 10
    v_lin: float = V_LIN_MAX
    k_yaw: float = K_YAW
    goal_radius: float = 1.0
    max_steps: int = 1000
    position_jitter: float = 0.1
    heading_jitter: float = math.radians(10.0)
    yaw_noise: float = math.radians(1.0)
    seed: int = 0


def default_trial_pairs(world: WorldMap | None = None) -> list[tuple[tuple[float, float], tuple[float, float]]]:
    """Nine start/end pairs crossing the pole band from x=1 to x=9."""
    ys = (2.5, 5.0, 7.5)
    return [((1.0, ya), (9.0, yb)) for ya in ys for yb in ys]


def heading_controller(state: AgentState, goal_xy, v_lin: float = V_LIN_MAX, k_yaw: float = K_YAW) -> np.ndarray:
    """Physical (v_lin, v_ang) steering toward ``goal_xy`` proportionally to the yaw error."""
    bearing = math.atan2(goal_xy[1] - state.y, goal_xy[0] - state.x)
    err = float(wrap_angle(bearing - state.heading))
    return np.array([v_lin, float(np.clip(k_yaw * err, -V_ANG_MAX, V_ANG_MAX))])


@dataclass(frozen=True)
class TrialOutcome:
    success: int
    collided: int
    path_length: float
    optimal_length: float
    steps: int
    corrections: int


def run_trial(world: WorldMap, start_pose, goal_xy, shield: Shield | None, config: TrialConfig,
              rng: np.random.Generator, log: TrajectoryLog | None = None) -> TrialOutcome:
    """Fly one point-to-point trial; any contact ends it as a failure."""
    state = start_state(start_pose)
    optimal = geodesic_distance(start_pose[:2], goal_xy, world)
    path = 0.0
    corrections = 0
    latched = None
    for _ in range(config.max_steps):
        if math.hypot(goal_xy[0] - state.x, goal_xy[1] - state.y) <= config.goal_radius:
            return TrialOutcome(1, 0, path, optimal, state.time_step, corrections)
        v = heading_controller(state, goal_xy, config.v_lin, config.k_yaw)
        v[1] += rng.normal(0.0, config.yaw_noise)
        a = physical_to_normalized(v)
        q = math.nan
        corrected = fallback = False
        if shield is not None:
            _, depth = render(state.pose, world)
            decision = shield.correct(a, preprocess_rays(depth[None])[0], latched)
            a, corrected, q = decision.action, decision.corrected, decision.q_initial
            fallback = decision.fallback
            latched = decision.direction if fallback else None
            corrections += int(corrected)
        action = Action(*normalized_to_physical(a))
        prev = state
        state, collided = move(state, action, world, DT)
        path += math.hypot(state.x - prev.x, state.y - prev.y)
        if log is not None:
            log.record(state, action, 0.0, int(collided), q, corrected, fallback)
        if collided:
            return TrialOutcome(0, 1, path, optimal, state.time_step, corrections)
    return TrialOutcome(0, 0, path, optimal, state.time_step, corrections)


@dataclass
class SafetyReport:
    pairs: list[tuple]
    outcomes: list[list[TrialOutcome]]

    def pair_rows(self) -> list[dict]:
        rows = []
        for (s, g), outs in zip(self.pairs, self.outcomes):
            steps = sum(o.steps for o in outs)
            rows.append({"start_x": s[0], "start_y": s[1], "goal_x": g[0], "goal_y": g[1],
                         "sr": compute_sr(o.success for o in outs),
                         "spl": compute_spl((o.success, o.path_length, o.optimal_length) for o in outs),
                         "correction_rate": sum(o.corrections for o in outs) / steps if steps else 0.0,
                         "collisions": sum(o.collided for o in outs)})
        return rows

    def aggregate(self) -> dict:
        flat = [o for outs in self.outcomes for o in outs]
        steps = sum(o.steps for o in flat)
        return {"trials": len(flat), "sr": compute_sr(o.success for o in flat),
                "spl": compute_spl((o.success, o.path_length, o.optimal_length) for o in flat),
                "correction_rate": sum(o.corrections for o in flat) / steps if steps else 0.0,
                "collisions": sum(o.collided for o in flat)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["pair", "start_x", "start_y", "goal_x", "goal_y", "sr", "spl", "correction_rate", "collisions"]
        w.writerow(cols)
        rows = self.pair_rows()
        for i, r in enumerate(rows):
            w.writerow([i] + [_fmt(r[c]) for c in cols[1:]])
        agg = self.aggregate()
        w.writerow(["all", "", "", "", ""] + [_fmt(agg[c]) for c in cols[5:]])
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.9g}"


def run_safety_trials(world: WorldMap, pairs, shield: Shield | None, config: TrialConfig = TrialConfig(),
                      logs: list[TrajectoryLog] | None = None) -> SafetyReport:
    """Repeat each pair ``trials_per_pair`` times with jittered start poses.

    Trial ``j`` of pair ``i`` draws its jitter and controller noise from a
    generator seeded by ``(config.seed, i, j)``, so shield ON and OFF runs
    face identical perturbations.
    """
    outcomes = []
    for i, (s, g) in enumerate(pairs):
        outs = []
        for j in range(config.trials_per_pair):
            rng = np.random.default_rng([config.seed, i, j])
            base = math.atan2(g[1] - s[1], g[0] - s[0])
            jitter = rng.uniform(-1.0, 1.0, size=3) * [config.position_jitter, config.position_jitter,
                                                      config.heading_jitter]
            pose = (s[0] + jitter[0], s[1] + jitter[1], base + jitter[2])
            log = TrajectoryLog() if logs is not None else None
            outs.append(run_trial(world, pose, g, shield, config, rng, log))
            if logs is not None:
                logs.append(log)
        outcomes.append(outs)
    return SafetyReport(list(pairs), outcomes)


def held_action_collides(state: AgentState, action: Action, world: WorldMap, horizon: int) -> bool:
    """Whether holding ``action`` for ``horizon`` steps from ``state`` makes contact."""
    for _ in range(horizon):
        state, collided = move(state, action, world, DT)
        if collided:
            return True
    return False


def collect_qc_data(world_seeds: Sequence[int], steps_per_world: int = 4000, seed: int = 0,
                    profile: str = SAFETY_PROFILE, label_horizon: int = 20, action_noise: float = 0.5,
                    uniform_fraction: float = 0.6, segment_length: int = 300):
    """Collision-labelled ``(s_d, a, c)`` transitions from noisy goal-seeking flights.

    The agent steers toward random goals with the heading controller; each
    action is either the controller output plus Gaussian noise or, with
    probability ``uniform_fraction``, uniform over the action box.  Contact
    does not end a segment, so sliding along obstacles is well covered.
    ``c`` is the contact flag of holding ``a`` for ``label_horizon`` steps
    (``label_horizon=1`` gives the plain one-step flag).
    """
    rng = np.random.default_rng(seed)
    depth, actions, labels = [], [], []
    for ws in world_seeds:
        world = get_world(ws, profile)
        free_r, free_c = np.nonzero(~world.occupancy)

        def random_point():
            k = int(rng.integers(len(free_r)))
            return world.cell_center(free_r[k], free_c[k])

        t = segment_length
        for _ in range(steps_per_world):
            if t >= segment_length:
                state = start_state((*random_point(), rng.uniform(-math.pi, math.pi)))
                goal = random_point()
                t = 0
            if rng.random() < uniform_fraction:
                a = rng.uniform(-1.0, 1.0, size=2)
            else:
                v = heading_controller(state, goal)
                a = np.clip(physical_to_normalized(v) + rng.normal(0.0, action_noise, size=2), -1.0, 1.0)
            _, d = render(state.pose, world)
            action = Action(*normalized_to_physical(a))
            depth.append(preprocess_rays(d[None])[0])
            actions.append(a)
            labels.append(float(held_action_collides(state, action, world, label_horizon)))
            state, _ = move(state, action, world, DT)
            t += 1
            if math.hypot(goal[0] - state.x, goal[1] - state.y) < 0.5:
                goal = random_point()
    return np.array(depth), np.array(actions), np.array(labels)


def fit_safety_qc(qc_config, beta: float = 0.3, seed: int = 0):
    """Collect pole-world data per ``qc_config`` (a :class:`QcDataConfig`) and fit Q_c."""
    from .shield import QcTrainConfig, train_qc

    c = qc_config
    d, a, y = collect_qc_data([c.world_seed0 + i for i in range(c.num_worlds)], c.steps_per_world,
                              seed, label_horizon=c.label_horizon,
                              uniform_fraction=c.uniform_fraction)
    return train_qc(d, a, y, beta, QcTrainConfig(c.epochs, c.batch_size, c.lr, seed))
