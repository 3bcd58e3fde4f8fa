"""Recurrent image-goal navigation model.

Stacked current/goal images go through a conv encoder to a latent ``h``;
a GRU conditioned on the previous (normalized) action produces ``z``;
a state-independent-std Gaussian actor (tanh-squashed) and a value head
read from ``z``.  A separate MLP predicts reward bins, the next latent
and the done flag from ``(h, a)`` for the future-prediction task.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from .nn import ConvEncoder, GRUCell, dense, mlp
from .world import Observation

LOG_STD_MIN = -5.0
LOG_STD_MAX = 1.0
ACTION_DIM = 2
_LOG2 = math.log(2.0)


@dataclass(frozen=True)
class PolicyConfig:
    image_channels: int = 3
    image_height: int = 16
    image_width: int = 64
    latent_dim: int = 256
    hidden_dim: int = 128
    predictor_hidden: int = 256
    reward_bins: int = 41
    log_std_init: float = 0.0


class PolicyState(NamedTuple):
    hidden: torch.Tensor  # (N, hidden_dim)
    prev_action: torch.Tensor  # (N, 2), normalized

    @classmethod
    def initial(cls, n: int, hidden_dim: int = 128, dtype=torch.float32) -> "PolicyState":
        return cls(torch.zeros(n, hidden_dim, dtype=dtype), torch.zeros(n, ACTION_DIM, dtype=dtype))

    def reset_where(self, mask) -> "PolicyState":
        keep = (~torch.as_tensor(mask, dtype=torch.bool)).to(self.hidden.dtype)[:, None]
        return PolicyState(self.hidden * keep, self.prev_action * keep)


class ActOutput(NamedTuple):
    action: torch.Tensor  # squashed, normalized to [-1, 1]
    raw: torch.Tensor  # pre-squash sample u
    log_prob: torch.Tensor
    value: torch.Tensor
    state: PolicyState


class Prediction(NamedTuple):
    reward_logits: torch.Tensor
    next_latent: torch.Tensor
    done_logit: torch.Tensor


def squash_log_det(u: torch.Tensor) -> torch.Tensor:
    """log(1 - tanh(u)^2), computed without cancellation for large |u|."""
    return 2.0 * (_LOG2 - u - nn.functional.softplus(-2.0 * u))


def gaussian_log_prob(u: torch.Tensor, mean: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    z = (u - mean) * torch.exp(-log_std)
    return (-0.5 * z * z - log_std - 0.5 * math.log(2 * math.pi)).sum(-1)


def squashed_log_prob(u: torch.Tensor, mean: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    """Log density of ``tanh(u)`` where ``u ~ Normal(mean, exp(log_std))``."""
    return gaussian_log_prob(u, mean, log_std) - squash_log_det(u).sum(-1)


def gaussian_kl(mean_p, log_std_p, mean_q, log_std_q) -> torch.Tensor:
    """KL(p || q) for diagonal Gaussians, summed over the last axis."""
    var_ratio = torch.exp(2 * (log_std_p - log_std_q))
    t = ((mean_p - mean_q) * torch.exp(-log_std_q)) ** 2
    return 0.5 * (var_ratio + t - 1.0 - 2 * (log_std_p - log_std_q)).sum(-1)


class Predictor(nn.Module):
    def __init__(self, latent_dim: int, hidden: int, bins: int):
        super().__init__()
        self.trunk = nn.Sequential(mlp([latent_dim + ACTION_DIM, hidden, hidden], out_gain=math.sqrt(2)),
                                   nn.ReLU())
        self.reward = dense(hidden, bins, gain=0.01)
        self.latent = dense(hidden, latent_dim, gain=1.0)
        self.done = dense(hidden, 1, gain=0.01)

    def forward(self, h: torch.Tensor, a: torch.Tensor) -> Prediction:
        y = self.trunk(torch.cat([h, a], dim=-1))
        return Prediction(self.reward(y), self.latent(y), self.done(y).squeeze(-1))


class NavPolicy(nn.Module):
    def __init__(self, config: PolicyConfig = PolicyConfig()):
        super().__init__()
        self.config = config
        c = config
        self.encoder = ConvEncoder(2 * c.image_channels, c.image_height, c.image_width, c.latent_dim)
        self.gru = GRUCell(c.latent_dim + ACTION_DIM, c.hidden_dim)
        self.actor = dense(c.hidden_dim, ACTION_DIM, gain=0.01)
        self.log_std = nn.Parameter(torch.full((ACTION_DIM,), float(c.log_std_init)))
        self.critic = dense(c.hidden_dim, 1, gain=1.0)
        self.predictor = Predictor(c.latent_dim, c.predictor_hidden, c.reward_bins)

    # -- components ---------------------------------------------------------

    def encode(self, current: torch.Tensor, goal: torch.Tensor) -> torch.Tensor:
        if current.shape != goal.shape:
            raise ValueError(f"current {tuple(current.shape)} and goal {tuple(goal.shape)} differ")
        return self.encoder(torch.cat([current, goal], dim=1))

    def core(self, h: torch.Tensor, state: PolicyState) -> torch.Tensor:
        return self.gru(torch.cat([h, state.prev_action], dim=-1), state.hidden)

    def heads(self, z: torch.Tensor):
        mean = self.actor(z)
        log_std = torch.clamp(self.log_std, LOG_STD_MIN, LOG_STD_MAX).expand_as(mean)
        return mean, log_std, self.critic(z).squeeze(-1)

    def unroll(self, h_seq: torch.Tensor, prev_actions: torch.Tensor, hidden0: torch.Tensor,
               starts: torch.Tensor) -> torch.Tensor:
        """Run the GRU over (T, N, ...) inputs, zeroing the hidden state where ``starts``."""
        z = hidden0
        out = []
        for t in range(h_seq.shape[0]):
            keep = (1.0 - starts[t].to(z.dtype))[:, None]
            z = self.core(h_seq[t], PolicyState(z * keep, prev_actions[t] * keep))
            out.append(z)
        return torch.stack(out)

    def predict_transition(self, h: torch.Tensor, a: torch.Tensor) -> Prediction:
        return self.predictor(h, a)

    # -- acting -------------------------------------------------------------

    def act(self, h: torch.Tensor, state: PolicyState, stochastic: bool = True,
            generator: torch.Generator | None = None) -> ActOutput:
        z = self.core(h, state)
        mean, log_std, value = self.heads(z)
        if stochastic:
            noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
            u = mean + torch.exp(log_std) * noise
        else:
            u = mean
        a = torch.tanh(u)
        return ActOutput(a, u, squashed_log_prob(u, mean, log_std), value, PolicyState(z, a))

    def policy_card(self) -> str:
        lines = ["format = signnav-policy-card/1"]
        lines += [f"{k} = {v}" for k, v in asdict(self.config).items()]
        lines.append(f"log_std_range = {LOG_STD_MIN} {LOG_STD_MAX}")
        lines.append("action_distribution = tanh-squashed diagonal gaussian, state-independent std")
        lines.append(f"parameters = {sum(p.numel() for p in self.parameters())}")
        return "\n".join(lines) + "\n"


def observations_to_tensors(observations: Sequence[Observation], dtype=torch.float32):
    """Stack observations into (current, goal) image tensors of shape (N, C, H, W)."""
    current = torch.as_tensor(np.stack([o.current for o in observations]), dtype=dtype)
    goal = torch.as_tensor(np.stack([o.goal for o in observations]), dtype=dtype)
    return current, goal
