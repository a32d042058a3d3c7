"""Shortcut-forcing dynamics model over tokenizer latents.

Per-timestep signal levels and dyadic step sizes corrupt the latent sequence;
the transformer predicts clean latents (x-prediction) conditioned on a meta
token carrying (sigma, d) and one action token per frame. Training mixes the
flow-matching loss at the finest step with a two-half-step bootstrap at
coarser steps; sampling runs K forward passes per generated frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .env import N_CRAFTS, N_MOVES, N_TASKS
from .heads import AgentHeads, MTPConfig, TwoHotSpec
from .transformer import AttentionConfig, KVCache, TransformerCore


@dataclass
class ShortcutConfig:
    k_max: int = 16
    k_inf: int = 4
    context_signal: float = 0.9   # snapped onto the sigma grid at use sites
    ramp_slope: float = 0.9
    ramp_floor: float = 0.1

    def __post_init__(self):
        if self.k_max & (self.k_max - 1) != 0 or self.k_max < 1:
            raise ValueError("k_max must be a power of two")
        if self.k_inf < 1 or self.k_max % self.k_inf != 0:
            raise ValueError("k_inf must divide k_max")

    @property
    def d_min(self) -> float:
        return 1.0 / self.k_max

    @property
    def levels(self) -> int:
        return int(math.log2(self.k_max)) + 1

    def ramp(self, sigma: torch.Tensor) -> torch.Tensor:
        return self.ramp_slope * sigma + self.ramp_floor

    def snap_sigma(self, sigma: float) -> float:
        return round(sigma * self.k_max) / self.k_max


def sample_schedule(shape, k_max: int, generator: torch.Generator | None = None,
                    device=None):
    """Per timestep: d = 1/2^j with j uniform over {0..log2 k_max}, then
    sigma uniform over the multiples of d in [0, 1-d]."""
    levels = int(math.log2(k_max)) + 1
    j = torch.randint(0, levels, shape, generator=generator, device=device)
    steps = (2 ** j).to(torch.float64)
    d = 1.0 / steps
    n_grid = steps.long()  # sigma in {0, d, ..., 1-d}: n_grid choices
    u = torch.rand(shape, generator=generator, device=device, dtype=torch.float64)
    sigma = (u * n_grid).floor().clamp(max=(n_grid - 1)) * d
    return sigma.float(), d.float()


def corrupt(z1: torch.Tensor, z0: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Mixture (1 - sigma) * noise + sigma * data; sigma broadcast over
    trailing dims."""
    while sigma.dim() < z1.dim():
        sigma = sigma.unsqueeze(-1)
    return (1.0 - sigma) * z0 + sigma * z1


def x_to_v(x_pred: torch.Tensor, z_noisy: torch.Tensor, sigma: torch.Tensor,
           d_min: float = 1.0 / 16) -> torch.Tensor:
    """Convert an x-prediction into the velocity toward it:
    v = (x_pred - z_sigma) / (1 - sigma). Requires sigma <= 1 - d_min."""
    if torch.any(sigma > 1.0 - d_min + 1e-9):
        raise ValueError("sigma beyond 1 - d_min: velocity denominator too small")
    while sigma.dim() < x_pred.dim():
        sigma = sigma.unsqueeze(-1)
    return (x_pred - z_noisy) / (1.0 - sigma)


@dataclass
class DynamicsConfig:
    spatial: int = 16         # latent tokens per frame (reshaped bottleneck)
    channels: int = 8         # channels per latent token
    actions: int = 1
    registers: int = 4
    agents: int = 1
    core: AttentionConfig = field(default_factory=lambda: AttentionConfig(
        layers=8, dim=128, q_heads=4, kv_heads=2, temporal_period=4, window=48))
    shortcut: ShortcutConfig = field(default_factory=ShortcutConfig)
    mtp: MTPConfig = field(default_factory=MTPConfig)

    @property
    def slots(self):
        return (("action", self.actions), ("meta", 1), ("spatial", self.spatial),
                ("register", self.registers), ("agent", self.agents))


NO_TASK_INDEX = N_TASKS  # embedding row for "no task"


class DynamicsModel(nn.Module):
    def __init__(self, cfg: DynamicsConfig | None = None):
        super().__init__()
        self.cfg = cfg or DynamicsConfig()
        c = self.cfg
        D = c.core.dim
        self.spatial_in = nn.Linear(c.channels, D)
        # spatial slots carry no content identity at sigma=0 (pure noise), so
        # each needs a learned position embedding to be distinguishable
        self.spatial_pos = nn.Parameter(torch.randn(c.spatial, D) * 0.02)
        self.spatial_out = nn.Linear(D, c.channels)
        self.move_embed = nn.Embedding(N_MOVES, D)
        self.craft_embed = nn.Embedding(N_CRAFTS, D)
        self.use_embed = nn.Embedding(2, D)
        self.action_base = nn.Parameter(torch.randn(D) * 0.02)
        half = D // 2
        self.sigma_embed = nn.Embedding(c.shortcut.k_max + 1, half)
        self.d_embed = nn.Embedding(c.shortcut.levels, D - half)
        self.meta_proj = nn.Linear(D, D)
        self.register_tokens = nn.Parameter(torch.randn(c.registers, D) * 0.02)
        self.task_embed = nn.Embedding(N_TASKS + 1, D)
        self.core = TransformerCore(c.core, c.slots, "space_layer")
        self.heads = AgentHeads(D, c.mtp)
        self.forward_count = 0  # transformer invocations, for instrumentation

    # ------------------------------------------------------------ embedding

    def encode_actions(self, actions: torch.Tensor | None,
                       labeled: torch.Tensor | None = None,
                       shape: tuple[int, int] | None = None) -> torch.Tensor:
        """(B, T, 3) integer actions -> (B, T, 1, D) action tokens.

        Each component embeds separately; the sum rides on a learned base
        embedding. Unlabeled frames (labeled False or actions None) use the
        base embedding alone.
        """
        if actions is None:
            B, T = shape
            base = self.action_base.view(1, 1, 1, -1)
            return base.expand(B, T, 1, -1)
        emb = (self.move_embed(actions[..., 0].long())
               + self.craft_embed(actions[..., 1].long())
               + self.use_embed(actions[..., 2].long()))
        if labeled is not None:
            emb = emb * labeled[..., None].to(emb.dtype)
        return (emb + self.action_base).unsqueeze(2)

    def meta_token(self, sigma: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
        """Discrete embeddings of sigma (grid index) and d (log2 index),
        channels concatenated then projected: (B, T) -> (B, T, 1, D)."""
        k_max = self.cfg.shortcut.k_max
        sig_idx = torch.round(sigma * k_max).long().clamp(0, k_max)
        d_idx = torch.round(-torch.log2(d.double())).long().clamp(
            0, self.cfg.shortcut.levels - 1)
        meta = torch.cat([self.sigma_embed(sig_idx), self.d_embed(d_idx)], dim=-1)
        return self.meta_proj(meta).unsqueeze(2)

    def assemble(self, z: torch.Tensor, sigma: torch.Tensor, d: torch.Tensor,
                 actions: torch.Tensor | None, labeled: torch.Tensor | None,
                 task: torch.Tensor | None) -> torch.Tensor:
        B, T = z.shape[:2]
        spatial = self.spatial_in(z) + self.spatial_pos.to(z.dtype)
        act = self.encode_actions(actions, labeled, shape=(B, T))
        meta = self.meta_token(sigma, d)
        regs = self.register_tokens.to(z.dtype).expand(B, T, -1, -1)
        if task is None:
            task = torch.full((B,), NO_TASK_INDEX, dtype=torch.long, device=z.device)
        agent = self.task_embed(task.long()).view(B, 1, 1, -1).expand(B, T, 1, -1)
        return torch.cat([act, meta, spatial, regs, agent], dim=2)

    # ------------------------------------------------------------ forward

    def forward(self, z: torch.Tensor, sigma: torch.Tensor, d: torch.Tensor,
                actions: torch.Tensor | None = None,
                labeled: torch.Tensor | None = None,
                task: torch.Tensor | None = None,
                cache: KVCache | None = None, commit: bool = True,
                image_mode: torch.Tensor | None = None):
        """Returns (x_prediction (B, T, N_z, C), agent outputs (B, T, D))."""
        tokens = self.assemble(z, sigma, d, actions, labeled, task)
        h = self.core(tokens, cache=cache, commit=commit, image_mode=image_mode)
        self.forward_count += 1
        n_front = self.cfg.actions + 1
        spatial_h = h[:, :, n_front:n_front + self.cfg.spatial, :]
        agent_h = h[:, :, -self.cfg.agents:, :].squeeze(2)
        return self.spatial_out(spatial_h), agent_h

    def new_cache(self, batch: int, device=None, dtype=torch.float32) -> KVCache:
        return KVCache(self.core, batch, device=device, dtype=dtype)


def ramp_weight(sigma: torch.Tensor, cfg: ShortcutConfig) -> torch.Tensor:
    return cfg.ramp(sigma)


def bootstrap_targets(model: DynamicsModel, z_noisy: torch.Tensor,
                      sigma: torch.Tensor, d: torch.Tensor,
                      actions: torch.Tensor | None,
                      labeled: torch.Tensor | None = None,
                      task: torch.Tensor | None = None,
                      image_mode: torch.Tensor | None = None) -> torch.Tensor:
    """Two-half-step distillation target in v-space, under stop-gradient.

    Frames at the finest step keep their (z_noisy, sigma) as context in both
    half-step passes; their target values are never used.
    """
    cfg = model.cfg.shortcut
    is_boot = d > cfg.d_min + 1e-9
    d_half = torch.where(is_boot, d / 2, d)
    with torch.no_grad():
        x_a, _ = model(z_noisy, sigma, d_half, actions, labeled, task,
                       image_mode=image_mode)
        b1 = x_to_v(x_a, z_noisy, sigma, cfg.d_min)
        boot = is_boot[..., None, None]
        z_mid = torch.where(boot, z_noisy + b1 * (d / 2)[..., None, None], z_noisy)
        sigma_mid = torch.where(is_boot, sigma + d / 2, sigma)
        x_b, _ = model(z_mid, sigma_mid, d_half, actions, labeled, task,
                       image_mode=image_mode)
        b2 = (x_b - z_mid) / (1.0 - sigma_mid)[..., None, None]
        return (b1 + b2) / 2


def shortcut_forcing_loss(model: DynamicsModel, z1: torch.Tensor,
                          actions: torch.Tensor | None,
                          labeled: torch.Tensor | None = None,
                          task: torch.Tensor | None = None,
                          generator: torch.Generator | None = None,
                          image_mode: torch.Tensor | None = None,
                          schedule=None, noise=None, targets=None):
    """Shortcut-forcing objective in x-space with the ramp weight.

    Finest-step frames take the flow loss |x_pred - z1|^2; coarser steps
    distill two half steps computed under stop-gradient, scaled back into
    x-space by (1 - sigma)^2. Returns (loss, parts, agent outputs of the
    main pass). Pass precomputed targets to hold them fixed (gradient
    checking needs the stop-gradient side frozen).
    """
    cfg = model.cfg.shortcut
    B, T = z1.shape[:2]
    if schedule is None:
        sigma, d = sample_schedule((B, T), cfg.k_max, generator, device=z1.device)
    else:
        sigma, d = schedule
        if torch.any((sigma / d) % 1 > 1e-6) or torch.any(sigma + d > 1 + 1e-9):
            raise ValueError("schedule violates the dyadic grid invariants")
    if noise is None:
        noise = torch.randn(z1.shape, generator=generator, device=z1.device,
                            dtype=z1.dtype)
    z_noisy = corrupt(z1, noise, sigma)
    is_boot = d > cfg.d_min + 1e-9
    if targets is None:
        v_target = bootstrap_targets(model, z_noisy, sigma, d, actions, labeled,
                                     task, image_mode)
    else:
        v_target = targets

    x_pred, agent_h = model(z_noisy, sigma, d, actions, labeled, task,
                            image_mode=image_mode)
    flow_err = (x_pred - z1).pow(2).mean(dim=(-1, -2))
    v_pred = (x_pred - z_noisy) / (1.0 - sigma)[..., None, None]
    boot_err = (1.0 - sigma) ** 2 * (v_pred - v_target).pow(2).mean(dim=(-1, -2))
    per_step = torch.where(is_boot, boot_err, flow_err) * ramp_weight(sigma, cfg)
    loss = per_step.mean()
    with torch.no_grad():
        flow_frac = (~is_boot).float().mean()
        parts = {
            "flow": float((flow_err * ~is_boot).sum() / (~is_boot).sum().clamp(min=1)),
            "bootstrap": float((boot_err * is_boot).sum() / is_boot.sum().clamp(min=1))
            if bool(is_boot.any()) else 0.0,
            "flow_frac": float(flow_frac),
        }
    return loss, parts, agent_h


# ------------------------------------------------------------ sampling

def rollout_frame(model: DynamicsModel, cache: KVCache,
                  action: torch.Tensor | None, task: torch.Tensor | None,
                  k_inf: int | None = None,
                  generator: torch.Generator | None = None,
                  labeled: torch.Tensor | None = None) -> torch.Tensor:
    """Generate one frame of latents with exactly k_inf forward passes.

    Starts from pure noise at sigma = 0 and Euler-steps the x-prediction
    velocity: z <- z + (x_pred - z) / (1 - sigma) * d with d = 1/k_inf.
    The cache is never committed here; callers commit via commit_frame.
    """
    cfg = model.cfg
    k = k_inf or cfg.shortcut.k_inf
    B = cache_batch(cache)
    device = next(model.parameters()).device
    z = torch.randn(B, 1, cfg.spatial, cfg.channels, generator=generator,
                    device=device)
    d = torch.full((B, 1), 1.0 / k, device=device)
    for step in range(k):
        sigma = torch.full((B, 1), step / k, device=device)
        x_pred, _ = model(z, sigma, d, action, labeled, task,
                          cache=cache, commit=False)
        z = z + x_to_v(x_pred, z, sigma, 1.0 / k) * (1.0 / k)
    return z.squeeze(1)


def cache_batch(cache: KVCache) -> int:
    for k, _ in cache.layers.values():
        return k.shape[0]
    return 1


def commit_frame(model: DynamicsModel, cache: KVCache, z: torch.Tensor,
                 action: torch.Tensor | None, task: torch.Tensor | None,
                 generator: torch.Generator | None = None,
                 labeled: torch.Tensor | None = None):
    """Append a generated frame to the context, re-corrupted to the context
    noise level. Returns (x_pred, agent_h) of the commit pass."""
    cfg = model.cfg.shortcut
    sig_ctx = cfg.snap_sigma(cfg.context_signal)
    B = z.shape[0]
    z = z.unsqueeze(1)
    noise = torch.randn(z.shape, generator=generator, device=z.device)
    sigma = torch.full((B, 1), sig_ctx, device=z.device)
    d = torch.full((B, 1), cfg.d_min, device=z.device)
    z_ctx = corrupt(z, noise, sigma)
    x_pred, agent_h = model(z_ctx, sigma, d, action, labeled, task,
                            cache=cache, commit=True)
    return x_pred, agent_h.squeeze(1)


def prefill_context(model: DynamicsModel, z_context: torch.Tensor,
                    actions: torch.Tensor | None, task: torch.Tensor | None,
                    generator: torch.Generator | None = None,
                    labeled: torch.Tensor | None = None):
    """Fill a fresh cache with context latents corrupted to the context
    signal level. Returns (cache, agent outputs (B, T, D))."""
    cfg = model.cfg.shortcut
    sig_ctx = cfg.snap_sigma(cfg.context_signal)
    B, T = z_context.shape[:2]
    device = z_context.device
    cache = model.new_cache(B, device=device)
    noise = torch.randn(z_context.shape, generator=generator, device=device)
    sigma = torch.full((B, T), sig_ctx, device=device)
    d = torch.full((B, T), cfg.d_min, device=device)
    z_ctx = corrupt(z_context, noise, sigma)
    _, agent_h = model(z_ctx, sigma, d, actions, labeled, task,
                       cache=cache, commit=True)
    return cache, agent_h


def generate(model: DynamicsModel, z_context: torch.Tensor,
             context_actions: torch.Tensor | None,
             future_actions: torch.Tensor | None, n_frames: int,
             task: torch.Tensor | None = None,
             generator: torch.Generator | None = None,
             k_inf: int | None = None,
             context_labeled: torch.Tensor | None = None,
             future_labeled: torch.Tensor | None = None) -> torch.Tensor:
    """Autoregressive latent video: context (B, Tc, N_z, C) plus n_frames
    actions (B, n, 3) -> generated latents (B, n, N_z, C). The ring cache
    keeps generation length unbounded."""
    B = z_context.shape[0]
    cache, _ = prefill_context(model, z_context, context_actions, task,
                               generator, labeled=context_labeled)
    out = []
    for i in range(n_frames):
        act = None if future_actions is None else future_actions[:, i:i + 1]
        lab = None if future_labeled is None else future_labeled[:, i:i + 1]
        z = rollout_frame(model, cache, act, task, k_inf, generator, labeled=lab)
        out.append(z)
        commit_frame(model, cache, z, act, task, generator, labeled=lab)
    if not out:
        return torch.zeros(B, 0, model.cfg.spatial, model.cfg.channels,
                           device=z_context.device)
    return torch.stack(out, dim=1)
