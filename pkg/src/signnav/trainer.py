"""PPO with future-prediction and RandomShift auxiliary tasks.

One training iteration collects ``rollout_length`` steps from each of
``num_envs`` environments, then

1. runs one pass of future-prediction minibatches updating the encoder and
   the predictor head,
2. runs ``ppo_epochs`` passes of recurrent PPO minibatches minimizing
   ``-L_a + L_v + lambda_rs * L_rs`` over encoder, GRU, actor and critic,
   and trains the collision predictor on the same minibatch.

Recurrent minibatches are contiguous chunks of ``seq_len`` steps that start
from the hidden state stored during collection.
"""
from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass
from typing import Iterator

import numpy as np
import torch
from torch import nn

from .nn import check_finite, clipped_step, make_optimizer
from .policy import (NavPolicy, PolicyConfig, PolicyState, Prediction, gaussian_kl,
                     squashed_log_prob)
from .shield import CollisionPredictor, ShieldConfig, preprocess_rays, qc_loss, soft_label
from .world import Action, EpisodeSpec, NavEnv, get_world, normalized_to_physical


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    total_steps: int = 500_000
    num_envs: int = 8
    rollout_length: int = 256
    seq_len: int = 32
    discount: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    ppo_epochs: int = 2
    num_minibatches: int = 4
    lr: float = 2.5e-4
    max_grad_norm: float = 0.5
    value_coef: float = 1.0
    entropy_coef: float = 0.0
    lambda_r: float = 0.1
    lambda_d: float = 1.0
    lambda_T: float = 0.1
    lambda_rs: float = 0.5
    use_fp: bool = True
    use_rs: bool = True
    train_qc: bool = True
    qc_lr: float = 1e-3
    reward_bins: int = 41
    reward_min: float = -1.0
    reward_max: float = 3.0
    shift_max: int = 4
    log_std_init: float = 0.0
    profile: str = "sparse"
    difficulty: str = "easy"
    num_worlds: int = 8
    world_seed0: int = 1000
    stats_window: int = 100

    def __post_init__(self):
        for name in ("value_coef", "entropy_coef", "lambda_r", "lambda_d", "lambda_T", "lambda_rs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.reward_max > self.reward_min or self.reward_bins < 2:
            raise ValueError("reward bins must be strictly increasing")
        if self.rollout_length % self.seq_len:
            raise ValueError("rollout_length must be a multiple of seq_len")
        if self.shift_max < 0:
            raise ValueError("shift_max must be >= 0")

    @property
    def world_seeds(self) -> list[int]:
        return [self.world_seed0 + i for i in range(self.num_worlds)]


# --------------------------------------------------------------------------
# Targets


class TwoHotCoder:
    """Linear two-hot encoding of scalars over a fixed, sorted bin grid."""

    def __init__(self, bin_values=None, low: float = -1.0, high: float = 3.0, bins: int = 41):
        if bin_values is None:
            bin_values = np.linspace(low, high, bins)
        self.bin_values = np.asarray(bin_values, dtype=float)
        if np.any(np.diff(self.bin_values) <= 0):
            raise ValueError("bin values must be strictly increasing")

    def __len__(self) -> int:
        return len(self.bin_values)

    def encode(self, r) -> np.ndarray:
        b = self.bin_values
        r = np.clip(np.asarray(r, dtype=float), b[0], b[-1])
        i = np.clip(np.searchsorted(b, r, side="right") - 1, 0, len(b) - 2)
        w_hi = (r - b[i]) / (b[i + 1] - b[i])
        out = np.zeros(r.shape + (len(b),))
        np.put_along_axis(out, i[..., None], (1.0 - w_hi)[..., None], axis=-1)
        np.put_along_axis(out, (i + 1)[..., None], w_hi[..., None], axis=-1)
        return out

    def encode_tensor(self, r: torch.Tensor) -> torch.Tensor:
        return torch.as_tensor(self.encode(r.detach().cpu().numpy()), dtype=r.dtype)

    def expectation(self, probs) -> np.ndarray:
        return np.asarray(probs) @ self.bin_values


def compute_gae(rewards, values, dones, bootstrap_value, discount: float = 0.99, lam: float = 0.95):
    """Generalized advantage estimates over the leading (time) axis.

    ``dones[t]`` marks that the episode ended after step ``t``; no value is
    bootstrapped across it.  Returns ``(advantages, value_targets)``.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    adv = np.zeros_like(rewards)
    last = np.zeros_like(rewards[0])
    next_value = np.asarray(bootstrap_value, dtype=float)
    for t in range(len(rewards) - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + discount * next_value * live - values[t]
        last = delta + discount * lam * live * last
        adv[t] = last
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv: torch.Tensor) -> torch.Tensor:
    return (adv - adv.mean()) / (adv.std(unbiased=False) + 1e-8)


# --------------------------------------------------------------------------
# Losses


def random_shift(images: torch.Tensor, max_shift: int = 4, generator: torch.Generator | None = None) -> torch.Tensor:
    """Translate each image by integer offsets in [-max_shift, max_shift] with edge replication."""
    if max_shift == 0:
        return images
    n, c, h, w = images.shape
    s = max_shift
    padded = nn.functional.pad(images, (s, s, s, s), mode="replicate")
    off = torch.randint(0, 2 * s + 1, (n, 2), generator=generator)
    rows = off[:, 0:1] + torch.arange(h)
    cols = off[:, 1:2] + torch.arange(w)
    return padded[torch.arange(n)[:, None, None, None], torch.arange(c)[None, :, None, None],
                  rows[:, None, :, None], cols[:, None, None, :]]


def two_hot_cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return -(target * torch.log_softmax(logits, dim=-1)).sum(-1).mean()


def fp_loss_terms(pred: Prediction, reward_target: torch.Tensor, next_latent: torch.Tensor,
                  done: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(reward cross-entropy, latent MSE, termination MSE); latent/done targets are detached."""
    reward = two_hot_cross_entropy(pred.reward_logits, reward_target)
    dynamic = nn.functional.mse_loss(pred.next_latent, next_latent.detach())
    termination = nn.functional.mse_loss(torch.sigmoid(pred.done_logit), done.detach())
    return reward, dynamic, termination


def loss_fp(policy: NavPolicy, current, goal, actions, next_current, rewards, dones,
            coder: TwoHotCoder, config: TrainConfig) -> tuple[torch.Tensor, dict[str, float]]:
    """Future-prediction loss on a flat minibatch of transitions.

    Next-step latents are encoded with the current encoder without gradient;
    gradients reach the encoder only through ``h_t`` and the predictor.
    """
    h = policy.encode(current, goal)
    with torch.no_grad():
        h_next = policy.encode(next_current, goal)
    pred = policy.predict_transition(h, actions)
    reward, dynamic, termination = fp_loss_terms(pred, coder.encode_tensor(rewards), h_next, dones)
    total = config.lambda_r * reward + config.lambda_d * dynamic + config.lambda_T * termination
    parts = {"fp_reward": reward, "fp_dynamic": dynamic, "fp_done": termination}
    check_finite(((f"loss_fp.{k}", v.detach()) for k, v in parts.items()), "loss")
    return total, {k: float(v.detach()) for k, v in parts.items()}


def loss_rs(clean: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
            augmented: tuple[torch.Tensor, torch.Tensor, torch.Tensor]) -> torch.Tensor:
    """KL(clean || augmented) over pre-squash Gaussians + value MSE; clean branch detached."""
    mean_c, log_std_c, value_c = (t.detach() for t in clean)
    mean_a, log_std_a, value_a = augmented
    kl = gaussian_kl(mean_c, log_std_c, mean_a, log_std_a).mean()
    return kl + nn.functional.mse_loss(value_a, value_c)


def ppo_surrogate(log_prob: torch.Tensor, old_log_prob: torch.Tensor, advantages: torch.Tensor,
                  clip_eps: float = 0.2) -> torch.Tensor:
    """Mean clipped surrogate objective L_a (to be maximized)."""
    ratio = torch.exp(log_prob - old_log_prob)
    clipped = torch.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    return torch.min(ratio * advantages, clipped * advantages).mean()


def value_loss(values: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return (0.5 * (targets - values) ** 2).mean()


# --------------------------------------------------------------------------
# Rollouts


@dataclass
class RolloutBatch:
    """Tensors with leading axes (L, B); hidden states are the GRU inputs at each step."""

    current: torch.Tensor
    goal: torch.Tensor
    next_current: torch.Tensor
    raw_actions: torch.Tensor
    actions: torch.Tensor
    prev_actions: torch.Tensor
    hidden: torch.Tensor
    starts: torch.Tensor
    log_probs: torch.Tensor
    values: torch.Tensor
    rewards: torch.Tensor
    dones: torch.Tensor
    collisions: torch.Tensor
    depth: torch.Tensor
    bootstrap_value: torch.Tensor
    advantages: torch.Tensor | None = None
    targets: torch.Tensor | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.rewards.shape)

    def compute_targets(self, discount: float, lam: float) -> None:
        adv, targets = compute_gae(self.rewards.numpy(), self.values.numpy(), self.dones.numpy(),
                                   self.bootstrap_value.numpy(), discount, lam)
        self.advantages = torch.as_tensor(adv, dtype=self.values.dtype)
        self.targets = torch.as_tensor(targets, dtype=self.values.dtype)


class EpisodeSampler:
    """Endless stream of training episodes drawn from a fixed set of worlds."""

    def __init__(self, world_seeds, profile: str, difficulty: str, rng: np.random.Generator):
        from .evaluation import sample_episode

        self._sample = sample_episode
        self.worlds = [get_world(s, profile) for s in world_seeds]
        self.difficulty = difficulty
        self.rng = rng

    def __call__(self) -> EpisodeSpec:
        world = self.worlds[int(self.rng.integers(len(self.worlds)))]
        return self._sample(world, self.difficulty, self.rng)


class RolloutCollector:
    def __init__(self, policy: NavPolicy, sampler, num_envs: int, generator: torch.Generator,
                 window: int = 100):
        self.policy = policy
        self.sampler = sampler
        self.generator = generator
        self.envs = [NavEnv() for _ in range(num_envs)]
        self.obs = [env.reset(sampler()) for env in self.envs]
        self.state = PolicyState.initial(num_envs, policy.config.hidden_dim)
        self.starts = np.ones(num_envs, dtype=bool)
        self.episode_returns = np.zeros(num_envs)
        self.completed: deque = deque(maxlen=window)
        self.total_steps = 0
        self.total_episodes = 0

    def _images(self):
        current = torch.as_tensor(np.stack([o.current for o in self.obs]))
        goal = torch.as_tensor(np.stack([o.goal for o in self.obs]))
        return current, goal

    @torch.no_grad()
    def collect(self, length: int) -> RolloutBatch:
        B = len(self.envs)
        buf: dict[str, list] = {k: [] for k in (
            "current", "goal", "next_current", "raw_actions", "actions", "prev_actions", "hidden",
            "starts", "log_probs", "values", "rewards", "dones", "collisions", "depth")}
        for _ in range(length):
            current, goal = self._images()
            buf["current"].append(current)
            buf["goal"].append(goal)
            buf["hidden"].append(self.state.hidden)
            buf["prev_actions"].append(self.state.prev_action)
            buf["starts"].append(torch.as_tensor(self.starts.astype(np.float32)))
            buf["depth"].append(torch.as_tensor(preprocess_rays(np.stack([o.depth for o in self.obs])),
                                                dtype=torch.float32))
            h = self.policy.encode(current, goal)
            out = self.policy.act(h, self.state, stochastic=True, generator=self.generator)
            physical = normalized_to_physical(out.action.numpy().astype(float))
            rewards = np.zeros(B)
            dones = np.zeros(B)
            collisions = np.zeros(B)
            next_current = []
            for i, env in enumerate(self.envs):
                res = env.step(Action(*physical[i]))
                rewards[i] = res.reward
                dones[i] = res.done
                collisions[i] = res.collision
                next_current.append(res.observation.current)
                self.episode_returns[i] += res.reward
                if res.done:
                    self.completed.append((float(res.info.success), self.episode_returns[i]))
                    self.episode_returns[i] = 0.0
                    self.total_episodes += 1
                    self.obs[i] = env.reset(self.sampler())
                else:
                    self.obs[i] = res.observation
            buf["next_current"].append(torch.as_tensor(np.stack(next_current)))
            buf["raw_actions"].append(out.raw)
            buf["actions"].append(out.action)
            buf["log_probs"].append(out.log_prob)
            buf["values"].append(out.value)
            buf["rewards"].append(torch.as_tensor(rewards, dtype=torch.float32))
            buf["dones"].append(torch.as_tensor(dones, dtype=torch.float32))
            buf["collisions"].append(torch.as_tensor(collisions, dtype=torch.float32))
            self.starts = dones.astype(bool)
            self.state = out.state.reset_where(self.starts)
            self.total_steps += B
        current, goal = self._images()
        z = self.policy.core(self.policy.encode(current, goal), self.state)
        bootstrap = self.policy.heads(z)[2]
        tensors = {k: torch.stack(v) for k, v in buf.items()}
        return RolloutBatch(**tensors, bootstrap_value=bootstrap)

    def success_rate(self) -> float:
        if not self.completed:
            return math.nan
        return float(np.mean([s for s, _ in self.completed]))

    def mean_return(self) -> float:
        if not self.completed:
            return math.nan
        return float(np.mean([r for _, r in self.completed]))


# --------------------------------------------------------------------------
# Update


def _chunks(n: int, parts: int, generator: torch.Generator) -> Iterator[torch.Tensor]:
    perm = torch.randperm(n, generator=generator)
    yield from torch.tensor_split(perm, parts)


def fp_pass(policy: NavPolicy, optimizer, batch: RolloutBatch, config: TrainConfig,
            coder: TwoHotCoder, generator: torch.Generator) -> dict[str, float]:
    L, B = batch.shape
    flat = lambda t: t.reshape(L * B, *t.shape[2:])  # noqa: E731
    cur, goal, nxt = flat(batch.current), flat(batch.goal), flat(batch.next_current)
    acts, rew, done = flat(batch.actions), flat(batch.rewards), flat(batch.dones)
    sums: dict[str, float] = {}
    count = 0
    for idx in _chunks(L * B, config.num_minibatches, generator):
        loss, parts = loss_fp(policy, cur[idx], goal[idx], acts[idx], nxt[idx], rew[idx], done[idx],
                              coder, config)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        check_finite(((f"grad.{n}", p.grad) for n, p in policy.named_parameters()), "gradient")
        parts["fp_grad_norm"] = clipped_step(optimizer, policy.parameters(), config.max_grad_norm)
        parts["fp_total"] = loss.item()
        for k, v in parts.items():
            sums[k] = sums.get(k, 0.0) + v
        count += 1
    return {k: v / count for k, v in sums.items()}


def ppo_update(policy: NavPolicy, qc: CollisionPredictor | None, optimizer, qc_optimizer,
               batch: RolloutBatch, config: TrainConfig, coder: TwoHotCoder,
               generator: torch.Generator, shield_config: ShieldConfig = ShieldConfig()) -> dict[str, float]:
    """One training iteration on a collected batch (targets must already be computed)."""
    if batch.advantages is None:
        raise ValueError("compute advantages before updating")
    stats: dict[str, float] = {}
    if config.use_fp:
        stats.update(fp_pass(policy, optimizer, batch, config, coder, generator))

    L, B = batch.shape
    T = config.seq_len
    n_chunks = L // T
    adv_all = normalize_advantages(batch.advantages)

    def gather(t: torch.Tensor, env_idx, start_idx) -> torch.Tensor:
        # (L, B, ...) -> (T, M, ...)
        steps = start_idx[None, :] + torch.arange(T)[:, None]
        return t[steps, env_idx[None, :]]

    sums: dict[str, float] = {}
    count = 0
    for _ in range(config.ppo_epochs):
        for ids in _chunks(B * n_chunks, config.num_minibatches, generator):
            env_idx = ids % B
            start_idx = (ids // B) * T
            cur = gather(batch.current, env_idx, start_idx)
            goal = gather(batch.goal, env_idx, start_idx)
            M = len(ids)
            hidden0 = batch.hidden[start_idx, env_idx]
            prev = gather(batch.prev_actions, env_idx, start_idx)
            starts = gather(batch.starts, env_idx, start_idx)

            def forward(images):
                h = policy.encode(images.reshape(T * M, *images.shape[2:]),
                                  goal.reshape(T * M, *goal.shape[2:])).reshape(T, M, -1)
                z = policy.unroll(h, prev, hidden0, starts)
                return policy.heads(z)

            mean, log_std, value = forward(cur)
            logp = squashed_log_prob(gather(batch.raw_actions, env_idx, start_idx), mean, log_std)
            l_a = ppo_surrogate(logp, gather(batch.log_probs, env_idx, start_idx),
                                gather(adv_all, env_idx, start_idx), config.clip_eps)
            l_v = value_loss(value, gather(batch.targets, env_idx, start_idx))
            terms = {"policy": -l_a, "value": config.value_coef * l_v}
            if config.use_rs:
                shifted = random_shift(cur.reshape(T * M, *cur.shape[2:]), config.shift_max,
                                       generator).reshape(cur.shape)
                terms["rs"] = config.lambda_rs * loss_rs((mean, log_std, value), forward(shifted))
            if config.entropy_coef:
                terms["entropy"] = -config.entropy_coef * log_std.sum(-1).mean()
            check_finite(((f"loss.{k}", v.detach()) for k, v in terms.items()), "loss")
            loss = sum(terms.values())
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            check_finite(((f"grad.{n}", p.grad) for n, p in policy.named_parameters()), "gradient")
            grad_norm = clipped_step(optimizer, policy.parameters(), config.max_grad_norm)
            with torch.no_grad():
                approx_kl = float((gather(batch.log_probs, env_idx, start_idx) - logp).mean())
            record = {"loss_policy": -l_a.item(), "loss_value": l_v.item(),
                      "loss_rs": terms["rs"].item() / config.lambda_rs if config.use_rs and config.lambda_rs else 0.0,
                      "grad_norm": grad_norm, "approx_kl": approx_kl}

            if qc is not None and config.train_qc:
                s_d = gather(batch.depth, env_idx, start_idx).reshape(T * M, -1)
                a = gather(batch.actions, env_idx, start_idx).reshape(T * M, -1)
                c = gather(batch.collisions, env_idx, start_idx).reshape(T * M)
                global_index = (gather(torch.arange(L)[:, None] * B + torch.arange(B)[None, :],
                                       env_idx, start_idx).reshape(-1)).numpy()
                soft = soft_label(s_d.numpy(), shield_config.beta)
                labels = np.where(global_index % 2 == 0, c.numpy(), soft)
                l_c = qc_loss(qc, s_d, a, torch.as_tensor(labels, dtype=s_d.dtype))
                check_finite([("loss.qc", l_c.detach())], "loss")
                qc_optimizer.zero_grad(set_to_none=True)
                l_c.backward()
                qc_optimizer.step()
                record["loss_qc"] = l_c.item()
            for k, v in record.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
    stats.update({k: v / count for k, v in sums.items()})
    return stats


# --------------------------------------------------------------------------
# Training loop

STATS_COLUMNS = ("update", "env_steps", "episodes", "mean_reward", "mean_return", "success_rate",
                 "loss_policy", "loss_value", "loss_rs", "fp_total", "fp_reward", "fp_dynamic",
                 "fp_done", "loss_qc", "grad_norm", "fp_grad_norm", "approx_kl")


def stats_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(STATS_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row.get(c, math.nan)) for c in STATS_COLUMNS])
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.9g}"


@dataclass
class TrainResult:
    policy: NavPolicy
    qc: CollisionPredictor
    stats: list[dict]
    config: TrainConfig


def build_models(config: TrainConfig) -> tuple[NavPolicy, CollisionPredictor]:
    torch.manual_seed(config.seed)
    policy = NavPolicy(PolicyConfig(reward_bins=config.reward_bins, log_std_init=config.log_std_init))
    qc = CollisionPredictor()
    return policy, qc


def train(config: TrainConfig, shield_config: ShieldConfig = ShieldConfig(),
          progress=None) -> TrainResult:
    """Run the full training loop; ``progress(row)`` is called after every update."""
    policy, qc = build_models(config)
    generator = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    coder = TwoHotCoder(low=config.reward_min, high=config.reward_max, bins=config.reward_bins)
    optimizer = make_optimizer(policy.parameters(), config.lr)
    qc_optimizer = make_optimizer(qc.parameters(), config.qc_lr)
    sampler = EpisodeSampler(config.world_seeds, config.profile, config.difficulty, rng)
    collector = RolloutCollector(policy, sampler, config.num_envs, generator, config.stats_window)
    per_update = config.num_envs * config.rollout_length
    n_updates = max(1, math.ceil(config.total_steps / per_update))
    rows = []
    for update in range(n_updates):
        batch = collector.collect(config.rollout_length)
        batch.compute_targets(config.discount, config.gae_lambda)
        stats = ppo_update(policy, qc, optimizer, qc_optimizer, batch, config, coder, generator,
                           shield_config)
        row = {"update": update + 1, "env_steps": collector.total_steps,
               "episodes": collector.total_episodes, "mean_reward": float(batch.rewards.mean()),
               "mean_return": collector.mean_return(), "success_rate": collector.success_rate(),
               **stats}
        rows.append(row)
        if progress is not None:
            progress(row)
    return TrainResult(policy, qc, rows, config)

