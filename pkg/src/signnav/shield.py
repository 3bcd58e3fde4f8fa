"""Depth-based collision prediction and action correction.

A depth image (or ray strip) is cropped and min-pooled into a 16-block
depth vector ``s_d`` in [0, 1].  A small network ``Q_c(s_d, a)`` predicts
the probability that executing normalized action ``a`` collides; it is
trained with binary cross-entropy on an alternating 1:1 mix of hard
contact labels and depth-derived soft labels.  When ``Q_c >= d_c`` the
shield corrects the action, either by gradient descent on ``Q_c`` or by
fixed decrements toward the clearer side, with a rotate-in-place fallback.

Sign convention: positive ``v_ang`` turns left; ``s_d[0]`` is the leftmost
block.  ``D = -1`` means the left half is clearer, so subtracting
``D * delta_ang`` from ``v_ang`` turns toward it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from scipy.special import expit
from torch import nn

from .nn import make_optimizer, mlp
from .world import MAX_DEPTH

DEPTH_BLOCKS = 16
ACTION_DIM = 2


@dataclass(frozen=True)
class ShieldConfig:
    beta: float = 0.3
    d_c: float = 0.5
    delta_lin: float = 0.3
    delta_ang: float = 0.3
    max_corrections: int = 5
    eta_c: float = 0.1
    mode: str = "fixed_interval"

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if not 0 < self.d_c < 1:
            raise ValueError("d_c must lie in (0, 1)")
        if self.max_corrections < 1:
            raise ValueError("max_corrections must be >= 1")
        if self.mode not in ("gradient", "fixed_interval"):
            raise ValueError(f"unknown shield mode {self.mode!r}")


# --------------------------------------------------------------------------
# Depth preprocessing and labels


def preprocess_depth(depth, max_depth: float = MAX_DEPTH, blocks: int = DEPTH_BLOCKS) -> np.ndarray:
    """Crop the central 20% of rows, min-pool columns into ``blocks`` groups, normalize.

    Accepts a depth image ``(H, W)`` or a single ray strip ``(W,)``, which is
    used as-is.  When ``W`` is not divisible by ``blocks`` the leftmost
    blocks receive one extra column each.
    """
    d = np.clip(np.asarray(depth, dtype=float), 0.0, max_depth)
    if d.ndim == 2:
        h = d.shape[0]
        n = max(1, int(round(0.2 * h)))
        start = (h - n) // 2
        d = d[start:start + n].min(axis=0)
    elif d.ndim != 1:
        raise ValueError(f"expected a depth image or ray strip, got shape {d.shape}")
    return preprocess_rays(d[None], max_depth, blocks)[0]


def preprocess_rays(rays, max_depth: float = MAX_DEPTH, blocks: int = DEPTH_BLOCKS) -> np.ndarray:
    """Batched min-pooling of ray strips ``(N, W)`` into ``(N, blocks)``."""
    rays = np.clip(np.asarray(rays, dtype=float), 0.0, max_depth)
    width = rays.shape[-1]
    if width < blocks:
        raise ValueError(f"need at least {blocks} columns, got {width}")
    parts = np.array_split(np.arange(width), blocks)
    starts = np.array([p[0] for p in parts])
    pooled = np.minimum.reduceat(rays, starts, axis=-1)
    return pooled / max_depth


def soft_label(s_d, beta: float = 0.3):
    """Sigmoid(10 * (beta - min(s_d))) over the last axis."""
    return expit(10.0 * (beta - np.min(np.asarray(s_d, dtype=float), axis=-1)))


def mixed_labels(hard, soft, offset: int = 0) -> np.ndarray:
    """Alternate hard (even global index) and soft (odd) labels, exactly 1:1."""
    hard = np.asarray(hard, dtype=float)
    soft = np.asarray(soft, dtype=float)
    idx = offset + np.arange(len(hard))
    return np.where(idx % 2 == 0, hard, soft)


def compute_direction(s_d) -> int:
    """Safer turning direction D: -1 if the left half is clearer, else +1 (ties +1)."""
    s = np.asarray(s_d, dtype=float)
    half = len(s) // 2
    return -1 if s[:half].mean() > s[half:].mean() else 1


# --------------------------------------------------------------------------
# Collision predictor


class CollisionPredictor(nn.Module):
    """Q_c: (s_d, a) -> collision probability, two hidden layers of width 64."""

    def __init__(self, depth_dim: int = DEPTH_BLOCKS, hidden: int = 64):
        super().__init__()
        self.net = mlp([depth_dim + ACTION_DIM, hidden, hidden, 1], out_gain=1.0)

    def logits(self, s_d: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([s_d, a], dim=-1)).squeeze(-1)

    def forward(self, s_d: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(s_d, a))

    @torch.no_grad()
    def predict(self, s_d, a) -> np.ndarray:
        dtype = next(self.parameters()).dtype
        s = torch.as_tensor(np.asarray(s_d), dtype=dtype)
        act = torch.as_tensor(np.asarray(a), dtype=dtype)
        return self(s, act).numpy()


def qc_loss(qc: CollisionPredictor, s_d: torch.Tensor, a: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return nn.functional.binary_cross_entropy_with_logits(qc.logits(s_d, a), labels)


@dataclass(frozen=True)
class QcTrainConfig:
    epochs: int = 20
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0


def train_qc(depth: np.ndarray, actions: np.ndarray, collisions: np.ndarray, beta: float = 0.3,
             config: QcTrainConfig = QcTrainConfig(), qc: CollisionPredictor | None = None) -> CollisionPredictor:
    """Fit Q_c on a stream of (s_d, a, c) transitions with mixed labels.

    Labels are mixed once over the stream order, so each sample keeps its
    hard or soft label across epochs.
    """
    gen = torch.Generator().manual_seed(config.seed)
    if qc is None:
        torch.manual_seed(config.seed)
        qc = CollisionPredictor()
    dtype = next(qc.parameters()).dtype
    s = torch.as_tensor(np.asarray(depth), dtype=dtype)
    a = torch.as_tensor(np.asarray(actions), dtype=dtype)
    y = torch.as_tensor(mixed_labels(collisions, soft_label(depth, beta)), dtype=dtype)
    opt = make_optimizer(qc.parameters(), config.lr)
    n = len(s)
    for _ in range(config.epochs):
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, config.batch_size):
            idx = perm[i:i + config.batch_size]
            opt.zero_grad(set_to_none=True)
            qc_loss(qc, s[idx], a[idx], y[idx]).backward()
            opt.step()
    return qc


# --------------------------------------------------------------------------
# Action correction

QFunction = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class ShieldDecision:
    action: np.ndarray  # normalized
    corrected: bool
    iterations: int
    fallback: bool
    capped: bool  # iteration cap reached while still predicted unsafe
    q_initial: float
    q_final: float
    direction: int = 0  # D used by fixed-interval correction


def _q_value(q: QFunction, s: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    return q(s[None], a[None])[0]


def _dtype_of(q) -> torch.dtype:
    if isinstance(q, nn.Module):
        p = next(q.parameters(), None)
        if p is not None:
            return p.dtype
    return torch.float64


def correct_gradient(a, s_d, q: QFunction, config: ShieldConfig = ShieldConfig()) -> ShieldDecision:
    """Iterate a <- clip(a - eta_c * d/da [Q_c(s_d, a) - d_c]^+) until Q_c < d_c or the cap."""
    dtype = _dtype_of(q)
    s = torch.as_tensor(np.asarray(s_d), dtype=dtype)
    act = torch.as_tensor(np.asarray(a), dtype=dtype).clone()
    with torch.no_grad():
        q0 = float(_q_value(q, s, act))
    qk = q0
    k = 0
    while qk >= config.d_c and k < config.max_corrections:
        x = act.clone().requires_grad_(True)
        excess = torch.relu(_q_value(q, s, x) - config.d_c)
        (grad,) = torch.autograd.grad(excess, x)
        act = torch.clamp(act - config.eta_c * grad, -1.0, 1.0)
        k += 1
        with torch.no_grad():
            qk = float(_q_value(q, s, act))
    return ShieldDecision(act.detach().numpy().astype(float), k > 0, k, False,
                          qk >= config.d_c, q0, qk)


def correct_fixed(a, s_d, q: QFunction, config: ShieldConfig = ShieldConfig(),
                  direction: int | None = None) -> ShieldDecision:
    """Fixed-interval correction a <- (v_lin - delta_lin, v_ang - D * delta_ang).

    After ``max_corrections`` unsuccessful steps the forward speed is set to
    zero (normalized -1) and the agent rotates in place at full rate in
    direction ``-D``.
    """
    dtype = _dtype_of(q)
    s = torch.as_tensor(np.asarray(s_d), dtype=dtype)
    D = compute_direction(s_d) if direction is None else int(direction)
    act = np.clip(np.asarray(a, dtype=float), -1.0, 1.0)

    def value(x):
        with torch.no_grad():
            return float(_q_value(q, s, torch.as_tensor(x, dtype=dtype)))

    q0 = qk = value(act)
    k = 0
    while qk >= config.d_c and k < config.max_corrections:
        act = np.clip(act - np.array([config.delta_lin, D * config.delta_ang]), -1.0, 1.0)
        k += 1
        qk = value(act)
    fallback = qk >= config.d_c
    if fallback:
        act = np.array([-1.0, -float(D)])
        qk = value(act)
    return ShieldDecision(act, k > 0, k, fallback, False, q0, qk, D)


class Shield:
    """Q_c plus a correction rule; pure given a parameter snapshot."""

    def __init__(self, qc: CollisionPredictor, config: ShieldConfig = ShieldConfig()):
        self.qc = qc
        self.config = config

    def predict(self, s_d, a) -> float:
        return float(self.qc.predict(np.asarray(s_d)[None], np.asarray(a)[None])[0])

    def correct(self, a, s_d, direction: int | None = None) -> ShieldDecision:
        """Correct ``a``; ``direction`` overrides D (callers latch it across fallback steps)."""
        if self.config.mode == "gradient":
            return correct_gradient(a, s_d, self.qc, self.config)
        return correct_fixed(a, s_d, self.qc, self.config, direction)


def soft_label_entropy(p) -> np.ndarray:
    """Binary entropy in nats; the BCE floor for a perfect prediction of label ``p``."""
    p = np.asarray(p, dtype=float)
    return -(p * np.log(p) + (1 - p) * np.log1p(-p))

