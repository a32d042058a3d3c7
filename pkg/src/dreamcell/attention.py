"""Attention primitives: logit soft cap, QKNorm, rotary time encoding, and
grouped-query attention.

grouped_attention is the single attention kernel: the transformer's space and
time layers call it on reshaped views (per-frame groups and per-slot groups
respectively), and tests call it directly against brute-force references.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F


def soft_cap(logits: torch.Tensor, cap: float) -> torch.Tensor:
    """Bound logits smoothly to (-cap, cap) via cap * tanh(x / cap)."""
    if cap <= 0:
        raise ValueError("cap must be positive")
    return cap * torch.tanh(logits / cap)


def unit_qk(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Per-head unit L2 normalization over the channel axis."""
    return x / x.norm(dim=-1, keepdim=True).clamp_min(eps)


def rotary_angles(frame_index: torch.Tensor, head_dim: int, base: float,
                  dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    if head_dim % 2 != 0:
        raise ValueError("head dim must be even for rotary encoding")
    half = head_dim // 2
    inv_freq = base ** (-torch.arange(half, dtype=dtype) * 2.0 / head_dim)
    angles = frame_index.to(dtype)[..., None] * inv_freq
    return torch.cos(angles), torch.sin(angles)


def rotary_time(x: torch.Tensor, frame_index: torch.Tensor,
                base: float = 10_000.0) -> torch.Tensor:
    """Rotate channel pairs (split-half convention) by the frame position.

    x: (..., N, head_dim); frame_index: (N,) or broadcastable to x[..., :, 0].
    Spatial slots of one frame share the frame's position, so within-frame
    logits are rotation-invariant while cross-frame logits depend only on the
    frame-index difference.
    """
    cos, sin = rotary_angles(frame_index, x.shape[-1], base, x.dtype)
    x1, x2 = x.chunk(2, dim=-1)
    return torch.cat((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)


def kv_head_of(query_head: int, q_heads: int, kv_heads: int) -> int:
    return (query_head * kv_heads) // q_heads


def grouped_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                      q_heads: int, kv_heads: int,
                      mask: torch.Tensor | None, cap: float,
                      q_gain: torch.Tensor | None = None,
                      k_gain: torch.Tensor | None = None) -> torch.Tensor:
    """Grouped-query attention with QKNorm and logit soft capping.

    q: (G, H_q, Nq, hd); k, v: (G, H_kv, Nk, hd); mask broadcastable to
    (G, H_q, Nq, Nk), True = may attend. Query head h reads kv head
    floor(h * H_kv / H_q). Optional per-head scalar gains rescale the
    unit-normalized projections (learnable QKNorm scale).
    """
    if q_heads % kv_heads != 0:
        raise ValueError("q_heads must be divisible by kv_heads")
    hd = q.shape[-1]
    q = unit_qk(q)
    k = unit_qk(k)
    if q_gain is not None:
        q = q * q_gain.view(1, q_heads, 1, 1)
    if k_gain is not None:
        k = k * k_gain.view(1, kv_heads, 1, 1)
    group = q_heads // kv_heads
    k = k.repeat_interleave(group, dim=1)
    v = v.repeat_interleave(group, dim=1)
    logits = q @ k.transpose(-1, -2) / math.sqrt(hd)
    logits = soft_cap(logits, cap)
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    return torch.softmax(logits, dim=-1) @ v
