"""Imagination training: world-model rollouts, lambda returns, TD value
learning, and the sign-based PMPO policy objective with a behavioral prior.

Rollouts run under no_grad with the transformer frozen; the stored agent-slot
states are replayed through the (trainable) policy and value heads for the
losses. One rollout per context.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .dynamics import DynamicsModel, commit_frame, prefill_context, rollout_frame
from .heads import (
    AgentHeads, policy_kl, policy_log_prob, policy_sample, twohot_decode,
    twohot_nll,
)


@dataclass
class RLConfig:
    gamma: float = 0.997
    lam: float = 0.95
    alpha: float = 0.5
    beta: float = 0.3
    horizon: int = 16
    terminal_threshold: float = 0.5

    def __post_init__(self):
        if not (0 < self.gamma < 1 and 0 < self.lam < 1):
            raise ValueError("gamma and lam must lie in (0, 1)")
        if not (0 <= self.alpha <= 1 and self.beta >= 0):
            raise ValueError("alpha in [0,1] and beta >= 0 required")


@dataclass
class Trajectory:
    states: torch.Tensor    # (B, H+1, D) agent outputs, detached
    latents: torch.Tensor   # (B, H, N_z, C)
    actions: torch.Tensor   # (B, H, 3)
    rewards: torch.Tensor   # (B, H+1)
    values: torch.Tensor    # (B, H+1)
    conts: torch.Tensor     # (B, H+1) 1 = non-terminal
    returns: torch.Tensor   # (B, H+1) lambda returns
    advantages: torch.Tensor  # (B, H+1)

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]


def lambda_returns(r: torch.Tensor, v: torch.Tensor, c: torch.Tensor,
                   gamma: float, lam: float) -> torch.Tensor:
    """Backward recursion R_t = r_t + gamma c_t ((1-lam) v_t + lam R_{t+1}),
    with R_T = v_T. Shapes (..., T)."""
    if not (r.shape == v.shape == c.shape):
        raise ValueError("r, v, c must share a shape")
    T = r.shape[-1]
    R = torch.zeros_like(v)
    R[..., -1] = v[..., -1]
    for t in range(T - 2, -1, -1):
        R[..., t] = r[..., t] + gamma * c[..., t] * (
            (1 - lam) * v[..., t] + lam * R[..., t + 1])
    return R


@torch.no_grad()
def imagine(model: DynamicsModel, context_z: torch.Tensor,
            context_actions: torch.Tensor | None, task: torch.Tensor,
            rl: RLConfig, generator: torch.Generator | None = None,
            context_labeled: torch.Tensor | None = None,
            k_inf: int | None = None) -> Trajectory:
    """Roll the world model forward rl.horizon steps from dataset contexts,
    sampling actions from the policy head. Exactly one rollout per context."""
    if context_z.shape[1] < 1:
        raise ValueError("context must hold at least one frame")
    heads = model.heads
    cache, ctx_h = prefill_context(model, context_z, context_actions, task,
                                   generator, labeled=context_labeled)
    states = [ctx_h[:, -1]]
    actions = []
    latents = []
    B = context_z.shape[0]
    ones = torch.ones(B, 1, device=context_z.device)
    for _ in range(rl.horizon):
        logits = heads.policy.head(states[-1], distance=0)
        act = policy_sample(logits, generator)
        z = rollout_frame(model, cache, act.unsqueeze(1), task, k_inf, generator,
                          labeled=ones)
        _, h = commit_frame(model, cache, z, act.unsqueeze(1), task, generator,
                            labeled=ones)
        states.append(h)
        actions.append(act)
        latents.append(z)
    h_all = torch.stack(states, dim=1)  # (B, H+1, D)
    rewards = twohot_decode(torch.softmax(
        heads.reward.head(h_all, distance=0), dim=-1), heads.spec)
    values = twohot_decode(torch.softmax(
        heads.value.head(h_all, distance=0), dim=-1), heads.spec)
    conts = (rewards <= rl.terminal_threshold).float()
    returns = lambda_returns(rewards, values, conts, rl.gamma, rl.lam)
    return Trajectory(
        states=h_all,
        latents=torch.stack(latents, dim=1) if latents else
        torch.zeros(B, 0, *context_z.shape[2:], device=context_z.device),
        actions=torch.stack(actions, dim=1) if actions else
        torch.zeros(B, 0, 3, dtype=torch.long, device=context_z.device),
        rewards=rewards,
        values=values,
        conts=conts,
        returns=returns,
        advantages=returns - values,
    )


def value_loss(heads: AgentHeads, states: torch.Tensor, returns: torch.Tensor,
               normalizer=None) -> torch.Tensor:
    """Twohot NLL of the lambda returns; returns carry no gradient."""
    logits = heads.value.head(states.detach(), distance=0)
    nll = twohot_nll(logits, returns.detach(), heads.spec).mean()
    if normalizer is not None:
        return normalizer.scale("value", nll)
    return nll


def pmpo_partition(advantages: torch.Tensor) -> torch.Tensor:
    """True where the state belongs to the positive set (A >= 0)."""
    return advantages >= 0


def pmpo_terms(logits: torch.Tensor, actions: torch.Tensor,
               positive: torch.Tensor, prior_logits: torch.Tensor,
               alpha: float = 0.5, beta: float = 0.3):
    """Sign-based policy objective with reverse prior KL.

    L = (1-alpha) * mean_{D-} ln pi - alpha * mean_{D+} ln pi
        + beta * mean KL[pi || prior]. Empty sets contribute zero;
    advantage magnitudes never enter.
    """
    lp = policy_log_prob(logits, actions).reshape(-1)
    pos = positive.reshape(-1)
    neg = ~pos
    loss = lp.new_zeros(())
    if neg.any():
        loss = loss + (1 - alpha) * lp[neg].mean()
    if pos.any():
        loss = loss - alpha * lp[pos].mean()
    kl = policy_kl(logits, prior_logits.detach()).mean()
    loss = loss + beta * kl
    return loss, kl


def pmpo_loss(heads: AgentHeads, states: torch.Tensor, actions: torch.Tensor,
              positive: torch.Tensor, prior_logits: torch.Tensor,
              alpha: float = 0.5, beta: float = 0.3):
    logits = heads.policy.head(states.detach(), distance=0)
    loss, kl = pmpo_terms(logits, actions, positive, prior_logits, alpha, beta)
    return loss, {"kl": float(kl.detach()),
                  "pos_frac": float(positive.float().mean())}
