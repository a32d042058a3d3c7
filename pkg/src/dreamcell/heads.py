"""Agent output heads: symexp-twohot scalars, factored policy, and
multi-token-prediction behavior cloning + reward losses.

Scalars (rewards, values, returns) live on 63 symexp-spaced bin centers and
are encoded as two-hot weight vectors, linear in symlog space. The policy
factorizes as move(5) x craft(5) x use(Bernoulli); joint log-probs are the
sum of the component log-probs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .env import N_CRAFTS, N_MOVES

PROB_FLOOR = 1e-8
POLICY_LOGITS = N_MOVES + N_CRAFTS + 1  # move, craft, use-logit


def symlog(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.log1p(torch.abs(x))


def symexp(y: torch.Tensor) -> torch.Tensor:
    return torch.sign(y) * torch.expm1(torch.abs(y))


@dataclass(frozen=True)
class TwoHotSpec:
    bins: int = 63
    low: float = -8.0
    high: float = 8.0

    def __post_init__(self):
        if self.bins % 2 != 1:
            raise ValueError("need an odd bin count so the middle center is 0")
        if self.low != -self.high:
            raise ValueError("bin range must be symmetric about 0")

    @property
    def centers(self) -> torch.Tensor:
        # built by mirroring so the middle center is exactly 0 and the layout
        # is exactly symmetric
        half = symexp(torch.linspace(0.0, self.high, (self.bins + 1) // 2,
                                     dtype=torch.float64))
        return torch.cat([-half[1:].flip(0), half]).to(torch.float32)


def twohot_encode(x: torch.Tensor, spec: TwoHotSpec) -> torch.Tensor:
    """Scalar -> weight vector over bins, linear in symlog-space distance."""
    s = symlog(x.to(torch.float64)).clamp(spec.low, spec.high)
    pos = (s - spec.low) / (spec.high - spec.low) * (spec.bins - 1)
    lo = pos.floor().long().clamp(0, spec.bins - 2)
    frac = (pos - lo.to(pos.dtype)).clamp(0.0, 1.0)
    out = torch.zeros(*x.shape, spec.bins, dtype=torch.float32, device=x.device)
    out.scatter_(-1, lo.unsqueeze(-1), (1.0 - frac).float().unsqueeze(-1))
    out.scatter_add_(-1, (lo + 1).unsqueeze(-1), frac.float().unsqueeze(-1))
    return out


def twohot_decode(probs: torch.Tensor, spec: TwoHotSpec) -> torch.Tensor:
    """Expectation over bin centers."""
    return probs @ spec.centers.to(probs.dtype).to(probs.device)


def twohot_nll(logits: torch.Tensor, target: torch.Tensor,
               spec: TwoHotSpec) -> torch.Tensor:
    """-log p(target): cross entropy against the two-hot encoding, with
    probabilities floored so the gradient stays finite everywhere."""
    weights = twohot_encode(target, spec)
    probs = torch.softmax(logits, dim=-1).clamp_min(PROB_FLOOR)
    return -(weights * probs.log()).sum(dim=-1)


# ------------------------------------------------------------ factored policy

def split_policy_logits(logits: torch.Tensor):
    move, craft, use = logits.split([N_MOVES, N_CRAFTS, 1], dim=-1)
    return move, craft, use.squeeze(-1)


def policy_log_prob(logits: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
    """Joint log-prob of (move, craft, use) actions: sum of component terms.

    logits (..., 11); actions (..., 3) integer.
    """
    move, craft, use = split_policy_logits(logits)
    lp_move = F.log_softmax(move, dim=-1).gather(
        -1, actions[..., 0:1].long()).squeeze(-1)
    lp_craft = F.log_softmax(craft, dim=-1).gather(
        -1, actions[..., 1:2].long()).squeeze(-1)
    a_use = actions[..., 2].to(use.dtype)
    lp_use = -F.binary_cross_entropy_with_logits(use, a_use, reduction="none")
    return lp_move + lp_craft + lp_use


def policy_sample(logits: torch.Tensor, generator: torch.Generator | None = None):
    move, craft, use = split_policy_logits(logits)
    flat_move = move.reshape(-1, N_MOVES)
    flat_craft = craft.reshape(-1, N_CRAFTS)
    m = torch.multinomial(torch.softmax(flat_move, -1), 1, generator=generator)
    c = torch.multinomial(torch.softmax(flat_craft, -1), 1, generator=generator)
    u = (torch.rand(use.reshape(-1).shape, generator=generator,
                    device=logits.device) < torch.sigmoid(use.reshape(-1))).long()
    out = torch.cat([m, c, u.unsqueeze(-1)], dim=-1)
    return out.view(*logits.shape[:-1], 3)


def policy_kl(logits_p: torch.Tensor, logits_q: torch.Tensor) -> torch.Tensor:
    """KL(p || q) for the factored distribution: sum of component KLs."""
    total = torch.zeros(logits_p.shape[:-1], dtype=logits_p.dtype,
                        device=logits_p.device)
    for p, q, kind in zip(split_policy_logits(logits_p),
                          split_policy_logits(logits_q),
                          ("cat", "cat", "bern")):
        if kind == "cat":
            lp = F.log_softmax(p, dim=-1)
            lq = F.log_softmax(q, dim=-1)
            total = total + (lp.exp() * (lp - lq)).sum(-1)
        else:
            pp = torch.sigmoid(p)
            lp1, lq1 = F.logsigmoid(p), F.logsigmoid(q)
            lp0, lq0 = F.logsigmoid(-p), F.logsigmoid(-q)
            total = total + pp * (lp1 - lq1) + (1 - pp) * (lp0 - lq0)
    return total


# ------------------------------------------------------------ MTP heads

@dataclass(frozen=True)
class MTPConfig:
    horizon: int = 8  # distances 0..horizon inclusive

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def distances(self) -> int:
        return self.horizon + 1


class MTPHead(nn.Module):
    """Small MLP trunk with one output layer per prediction distance."""

    def __init__(self, dim: int, out_dim: int, distances: int, hidden: int = 0):
        super().__init__()
        hidden = hidden or dim
        self.trunk = nn.Sequential(nn.Linear(dim, hidden), nn.SiLU())
        self.outs = nn.ModuleList(nn.Linear(hidden, out_dim) for _ in range(distances))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        """(..., D) -> (..., distances, out_dim)."""
        z = self.trunk(h)
        return torch.stack([layer(z) for layer in self.outs], dim=-2)

    def head(self, h: torch.Tensor, distance: int = 0) -> torch.Tensor:
        return self.outs[distance](self.trunk(h))


class AgentHeads(nn.Module):
    """Policy + reward MTP heads and the value head, all reading the agent
    slot outputs of the dynamics transformer."""

    def __init__(self, dim: int, mtp: MTPConfig | None = None,
                 spec: TwoHotSpec | None = None):
        super().__init__()
        self.mtp = mtp or MTPConfig()
        self.spec = spec or TwoHotSpec()
        self.policy = MTPHead(dim, POLICY_LOGITS, self.mtp.distances)
        self.reward = MTPHead(dim, self.spec.bins, self.mtp.distances)
        self.value = MTPHead(dim, self.spec.bins, 1)


def mtp_bc_reward_terms(policy_logits: torch.Tensor, reward_logits: torch.Tensor,
                        actions: torch.Tensor, rewards: torch.Tensor,
                        tagged: torch.Tensor, spec: TwoHotSpec):
    """Raw MTP losses. Distance n at time t is supervised by actions[t+n] and
    rewards[t+n], truncated at the sequence end; only tagged sequences count.

    policy_logits (B, T, N_d, 11); reward_logits (B, T, N_d, bins);
    actions (B, T, 3); rewards (B, T); tagged (B,) bool.
    """
    B, T, n_dist, _ = policy_logits.shape
    n_tagged = max(1, int(tagged.sum()))
    bc_terms = []
    rw_terms = []
    for n in range(n_dist):
        t_max = T - n
        if t_max <= 0:
            break
        lp = policy_log_prob(policy_logits[:, :t_max, n], actions[:, n:n + t_max])
        nll_r = twohot_nll(reward_logits[:, :t_max, n],
                           rewards[:, n:n + t_max].float(), spec)
        bc_terms.append((-lp * tagged[:, None]).sum() / (n_tagged * t_max))
        rw_terms.append((nll_r * tagged[:, None]).sum() / (n_tagged * t_max))
    return torch.stack(bc_terms).sum(), torch.stack(rw_terms).sum()


def bc_reward_loss(heads: AgentHeads, h: torch.Tensor, actions: torch.Tensor,
                   rewards: torch.Tensor, tagged: torch.Tensor,
                   normalizer=None):
    """Multi-token behavior-cloning and reward losses on the agent outputs
    of tagged sequences; each head RMS-normalized separately."""
    if not tagged.any():
        zero = h.sum() * 0.0
        return zero, {"bc": 0.0, "reward": 0.0}
    bc, rw = mtp_bc_reward_terms(heads.policy(h), heads.reward(h),
                                 actions, rewards, tagged, heads.spec)
    parts = {"bc": float(bc.detach()), "reward": float(rw.detach())}
    if normalizer is not None:
        total = normalizer.scale("bc", bc) + normalizer.scale("reward", rw)
    else:
        total = bc + rw
    return total, parts
