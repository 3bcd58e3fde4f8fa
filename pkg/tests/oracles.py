"""Independent reference computations shared by unit and acceptance tests."""
import math

import numpy as np
import torch

from signnav.policy import NavPolicy, PolicyConfig, squashed_log_prob
from signnav.shield import CollisionPredictor, qc_loss
from signnav.trainer import (TrainConfig, TwoHotCoder, fp_loss_terms, loss_fp, loss_rs, ppo_surrogate,
                             random_shift, value_loss)

TINY = PolicyConfig(latent_dim=16, hidden_dim=8, predictor_hidden=16, reward_bins=41)
F64 = torch.float64


def brute_force_gae(rewards, values, dones, bootstrap, discount, lam):
    """A_t as an explicit sum of (gamma*lam)^k TD residuals up to the episode end."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    n = len(rewards)
    nxt = np.append(values[1:], bootstrap)
    delta = [rewards[t] + discount * nxt[t] * (1 - dones[t]) - values[t] for t in range(n)]
    adv = np.zeros(n)
    for t in range(n):
        total = 0.0
        for k in range(t, n):
            total += (discount * lam) ** (k - t) * delta[k]
            if dones[k]:
                break
        adv[t] = total
    return adv, adv + values


def two_hot_reference(r, bins):
    """Linear interpolation weights computed bin by bin."""
    r = min(max(r, bins[0]), bins[-1])
    out = np.zeros(len(bins))
    for i in range(len(bins) - 1):
        lo, hi = bins[i], bins[i + 1]
        if lo <= r <= hi:
            w = (r - lo) / (hi - lo)
            out[i], out[i + 1] = 1 - w, w
            return out
    raise AssertionError("unreachable")


def sampled_fd_error(loss_fn, params, coords=12, eps=1e-6, seed=0, fd_fn=None, smooth=("log_std",), smooth_eps=1e-3):
    """Max relative error between autograd and central differences on sampled coordinates.

    ``params`` maps names to float64 leaf tensors.  Autograd runs on
    ``loss_fn``; differences are taken of ``fd_fn`` (default ``loss_fn``),
    which lets detached targets be replaced by precomputed constants.  The
    error of each tensor is max|g - fd| / max(|g|, |fd|) over its sampled
    entries, using the fourth-order central stencil.

    Tensors named in ``smooth`` get the larger step ``smooth_eps``.  log_std
    only enters Gaussian terms (no ReLU kinks), and in the RandomShift KL
    it sits at a near-stationary point: its gradient is ~1e-9 while the
    KL's O(1) terms cancel, so with a 1e-6 step rounding noise in the loss
    would swamp the difference quotient.
    """
    fd_fn = fd_fn or loss_fn
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for name, p in params.items():
        grad = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        flat = p.data.view(-1)
        h = smooth_eps if name.rsplit(".", 1)[-1] in smooth else eps
        idx = rng.choice(flat.numel(), size=min(coords, flat.numel()), replace=False)
        g, fd = [], []
        for i in idx:
            orig = flat[i].item()
            f = {}
            with torch.no_grad():
                for k in (-2, -1, 1, 2):
                    flat[i] = orig + k * h
                    f[k] = fd_fn().item()
                flat[i] = orig
            fd.append((f[-2] - 8 * f[-1] + 8 * f[1] - f[2]) / (12 * h))
            g.append(grad.view(-1)[i].item())
        g, fd = np.array(g), np.array(fd)
        scale = max(np.abs(g).max(), np.abs(fd).max())
        if scale < 1e-10:
            continue
        worst = max(worst, np.abs(g - fd).max() / scale)
    return worst


def tiny_policy(seed=0):
    torch.manual_seed(seed)
    return NavPolicy(TINY).to(F64)


def toy_sequences(seed=0, T=4, M=2):
    """A small recurrent minibatch with on-policy log-probs from ``tiny_policy(seed)``."""
    g = torch.Generator().manual_seed(seed + 100)
    cur = torch.rand(T, M, 3, 16, 64, generator=g, dtype=F64)
    goal = torch.rand(T, M, 3, 16, 64, generator=g, dtype=F64)
    nxt = torch.rand(T, M, 3, 16, 64, generator=g, dtype=F64)
    raw = torch.randn(T, M, 2, generator=g, dtype=F64)
    prev = torch.cat([torch.zeros(1, M, 2, dtype=F64), torch.tanh(raw[:-1])])
    starts = torch.zeros(T, M, dtype=torch.bool)
    starts[0] = True
    return {
        "current": cur, "goal": goal, "next_current": nxt, "raw": raw, "actions": torch.tanh(raw),
        "prev": prev, "starts": starts, "hidden0": torch.zeros(M, TINY.hidden_dim, dtype=F64),
        "advantages": torch.randn(T, M, generator=g, dtype=F64),
        "targets": torch.randn(T, M, generator=g, dtype=F64),
        "rewards": torch.rand(T, M, generator=g, dtype=F64) * 4 - 1,
        "dones": (torch.rand(T, M, generator=g, dtype=F64) < 0.3).to(F64),
        "depth": torch.rand(T * M, 16, generator=g, dtype=F64),
        "labels": torch.rand(T * M, generator=g, dtype=F64),
    }


def heads_over(policy, batch, images):
    T, M = batch["starts"].shape
    h = policy.encode(_flat(images), _flat(batch["goal"])).reshape(T, M, -1)
    z = policy.unroll(h, batch["prev"], batch["hidden0"], batch["starts"])
    return policy.heads(z)


def _flat(t):
    return t.reshape(t.shape[0] * t.shape[1], *t.shape[2:])


def loss_closures(policy, batch, old_log_prob, shifted, config=TrainConfig(), coder=None):
    """Each loss term as ``(autograd_fn, fd_fn)``; ``fd_fn`` freezes detached targets."""
    coder = coder or TwoHotCoder()
    with torch.no_grad():
        clean_frozen = tuple(t.clone() for t in heads_over(policy, batch, batch["current"]))
        next_frozen = policy.encode(_flat(batch["next_current"]), _flat(batch["goal"])).clone()
    reward_target = coder.encode_tensor(_flat(batch["rewards"]))

    def policy_term():
        mean, log_std, _ = heads_over(policy, batch, batch["current"])
        logp = squashed_log_prob(batch["raw"], mean, log_std)
        return -ppo_surrogate(logp, old_log_prob, batch["advantages"], config.clip_eps)

    def value_term():
        return value_loss(heads_over(policy, batch, batch["current"])[2], batch["targets"])

    def fp_term():
        total, _ = loss_fp(policy, _flat(batch["current"]), _flat(batch["goal"]), _flat(batch["actions"]),
                           _flat(batch["next_current"]), _flat(batch["rewards"]), _flat(batch["dones"]),
                           coder, config)
        return total

    def fp_frozen():
        h = policy.encode(_flat(batch["current"]), _flat(batch["goal"]))
        r, d, t = fp_loss_terms(policy.predict_transition(h, _flat(batch["actions"])), reward_target,
                                next_frozen, _flat(batch["dones"]))
        return config.lambda_r * r + config.lambda_d * d + config.lambda_T * t

    def rs_term():
        clean = heads_over(policy, batch, batch["current"])
        return loss_rs(clean, heads_over(policy, batch, shifted))

    def rs_frozen():
        return loss_rs(clean_frozen, heads_over(policy, batch, shifted))

    def ppo_part(rs):
        return policy_term() + config.value_coef * value_term() + config.lambda_rs * rs()

    return {
        "policy": (policy_term, policy_term),
        "value": (value_term, value_term),
        "fp": (fp_term, fp_frozen),
        "rs": (rs_term, rs_frozen),
        "total": (lambda: ppo_part(rs_term) + fp_term(), lambda: ppo_part(rs_frozen) + fp_frozen()),
    }


def toy_old_log_prob(policy, batch):
    with torch.no_grad():
        mean, log_std, _ = heads_over(policy, batch, batch["current"])
        return squashed_log_prob(batch["raw"], mean, log_std) + 0.05 * batch["advantages"]


def toy_shifted(batch, seed=0):
    images = batch["current"]
    return random_shift(_flat(images), 4, torch.Generator().manual_seed(seed)).reshape(images.shape)


def loss_term_fd_errors(seed=0, coords=6):
    """Max FD relative error for each loss term of the combined objective and of Q_c's BCE.

    Every term except ``fp`` and ``qc`` passes through the GRU unroll.
    """
    policy = tiny_policy(seed)
    batch = toy_sequences(seed)
    closures = loss_closures(policy, batch, toy_old_log_prob(policy, batch), toy_shifted(batch, seed))
    params = dict(policy.named_parameters())
    errors = {}
    for name, (auto, fd) in closures.items():
        use = params
        if name == "fp":
            use = {k: v for k, v in params.items() if k.startswith(("encoder", "predictor"))}
        errors[name] = sampled_fd_error(auto, use, coords, seed=seed, fd_fn=fd)
    torch.manual_seed(seed)
    qc = CollisionPredictor().to(F64)
    a = batch["actions"].reshape(-1, 2)
    errors["qc"] = sampled_fd_error(lambda: qc_loss(qc, batch["depth"], a, batch["labels"]),
                                    dict(qc.named_parameters()), coords, seed=seed)
    return errors


def detach_check(seed=0):
    """Evidence that the L_rs and L_fp target branches pass no gradient.

    Returns ``(leaks, fd_errors)``.  ``leaks[term]`` is the largest
    autograd gradient reaching a separate copy of the policy that produces
    the targets (exactly 0 when targets are detached).  ``fd_errors[term]``
    compares the live gradient with central differences of the same loss
    whose targets are frozen constants, so a leak through the target branch
    would show up as a mismatch.
    """
    live = tiny_policy(seed)
    copy = tiny_policy(seed)
    batch = toy_sequences(seed)
    shifted = toy_shifted(batch, seed)
    coder = TwoHotCoder()
    cfg = TrainConfig()

    leaks = {}
    loss_rs(heads_over(copy, batch, batch["current"]), heads_over(live, batch, shifted)).backward()
    leaks["rs"] = _max_grad(copy)
    for p in copy.parameters():
        p.grad = None
    h = live.encode(_flat(batch["current"]), _flat(batch["goal"]))
    h_next = copy.encode(_flat(batch["next_current"]), _flat(batch["goal"]))
    r, d, t = fp_loss_terms(live.predict_transition(h, _flat(batch["actions"])),
                            coder.encode_tensor(_flat(batch["rewards"])), h_next, _flat(batch["dones"]))
    (cfg.lambda_r * r + cfg.lambda_d * d + cfg.lambda_T * t).backward()
    leaks["fp"] = _max_grad(copy)

    closures = loss_closures(live, batch, toy_old_log_prob(live, batch), shifted, cfg, coder)
    params = dict(live.named_parameters())
    fd_errors = {name: sampled_fd_error(closures[name][0], params, 6, seed=seed, fd_fn=closures[name][1])
                 for name in ("rs", "fp")}
    return leaks, fd_errors


def _max_grad(module):
    return max((p.grad.abs().max().item() for p in module.parameters() if p.grad is not None), default=0.0)


def soft_label_reference(min_sd, beta):
    return 1.0 / (1.0 + math.exp(-10.0 * (beta - min_sd)))
