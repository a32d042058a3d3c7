"""Block-causal transformer shared by the tokenizer and the dynamics model.

Layers alternate: every `temporal_period`-th layer (layer 0 included) attends
over time (each slot to the same slot index in current and past frames,
limited to the last `window` frames); all other layers attend within the
frame under the layout's modality rules. Both layer types reduce to the same
grouped_attention kernel on reshaped views.

Incremental mode streams one frame at a time against a ring KV cache holding
the last window-1 frames of the time layers; its outputs match full-sequence
processing to float32 tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .attention import grouped_attention, rotary_time
from .masks import space_mask


@dataclass
class AttentionConfig:
    layers: int = 6
    dim: int = 96
    q_heads: int = 4
    kv_heads: int = 2
    temporal_period: int = 4
    soft_cap: float = 50.0
    rope_base: float = 10_000.0
    window: int = 48          # context window W in frames
    mlp_hidden: int = 0       # 0 -> nearest multiple of 8 to dim * 8/3

    def __post_init__(self):
        if self.q_heads % self.kv_heads != 0:
            raise ValueError("q_heads must be divisible by kv_heads")
        if self.dim % self.q_heads != 0:
            raise ValueError("dim must be divisible by q_heads")
        if self.mlp_hidden == 0:
            self.mlp_hidden = int(round(self.dim * 8 / 3 / 8) * 8)

    @property
    def head_dim(self) -> int:
        return self.dim // self.q_heads

    def layer_kind(self, i: int) -> str:
        return "time" if i % self.temporal_period == 0 else "space"


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        ms = x.pow(2).mean(dim=-1, keepdim=True)
        return x * torch.rsqrt(ms + self.eps) * self.weight


class SwiGLU(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.gate_up = nn.Linear(dim, 2 * hidden, bias=False)
        self.down = nn.Linear(hidden, dim, bias=False)

    def forward(self, x):
        gate, up = self.gate_up(x).chunk(2, dim=-1)
        return self.down(nn.functional.silu(gate) * up)


class Attention(nn.Module):
    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        hd = cfg.head_dim
        self.qkv = nn.Linear(cfg.dim, (cfg.q_heads + 2 * cfg.kv_heads) * hd, bias=False)
        self.out = nn.Linear(cfg.q_heads * hd, cfg.dim, bias=False)
        self.q_gain = nn.Parameter(torch.ones(cfg.q_heads))
        self.k_gain = nn.Parameter(torch.ones(cfg.kv_heads))

    def project(self, x):
        cfg = self.cfg
        hd = cfg.head_dim
        q, k, v = self.qkv(x).split(
            [cfg.q_heads * hd, cfg.kv_heads * hd, cfg.kv_heads * hd], dim=-1)
        shape = x.shape[:-1]
        q = q.view(*shape, cfg.q_heads, hd)
        k = k.view(*shape, cfg.kv_heads, hd)
        v = v.view(*shape, cfg.kv_heads, hd)
        return q, k, v

    def attend(self, q, k, v, mask):
        """q: (G, Nq, H_q, hd); k, v: (G, Nk, H_kv, hd)."""
        cfg = self.cfg
        out = grouped_attention(
            q.transpose(1, 2), k.transpose(1, 2), v.transpose(1, 2),
            cfg.q_heads, cfg.kv_heads, mask, cfg.soft_cap,
            self.q_gain, self.k_gain)
        out = out.transpose(1, 2).reshape(*q.shape[:2], -1)
        return self.out(out)


class Block(nn.Module):
    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.attn_norm = RMSNorm(cfg.dim)
        self.attn = Attention(cfg)
        self.mlp_norm = RMSNorm(cfg.dim)
        self.mlp = SwiGLU(cfg.dim, cfg.mlp_hidden)


class KVCache:
    """Ring buffer of time-layer keys/values for the last window-1 frames."""

    def __init__(self, core: "TransformerCore", batch: int,
                 device=None, dtype=torch.float32):
        cfg = core.cfg
        self.capacity = max(cfg.window - 1, 0)
        self.count = 0  # absolute frames committed
        hd = cfg.head_dim
        S = core.slots_per_frame
        self.layers = {}
        self._appended = {}
        for i in range(cfg.layers):
            if cfg.layer_kind(i) == "time":
                self.layers[i] = (
                    torch.zeros(batch, self.capacity, S, cfg.kv_heads, hd,
                                device=device, dtype=dtype),
                    torch.zeros(batch, self.capacity, S, cfg.kv_heads, hd,
                                device=device, dtype=dtype),
                )
                self._appended[i] = 0

    def stored(self, layer: int):
        """Past K/V ordered oldest to newest: (B, P, S, H_kv, hd)."""
        k, v = self.layers[layer]
        n_app = self._appended[layer]
        if n_app <= self.capacity:
            return k[:, :n_app], v[:, :n_app]
        head = n_app % self.capacity
        idx = (torch.arange(self.capacity, device=k.device) + head) % self.capacity
        return k[:, idx], v[:, idx]

    def append(self, layer: int, k_new, v_new):
        """k_new, v_new: (B, n, S, H_kv, hd), already rotated to absolute
        frame positions."""
        if self.capacity == 0:
            return
        k, v = self.layers[layer]
        for j in range(k_new.shape[1]):
            pos = (self._appended[layer] + j) % self.capacity
            k[:, pos] = k_new[:, j].detach()
            v[:, pos] = v_new[:, j].detach()
        self._appended[layer] += k_new.shape[1]

    def advance(self, n: int):
        self.count += n


class TransformerCore(nn.Module):
    """Stack of pre-norm attention + SwiGLU blocks over a (T, S, D) grid."""

    def __init__(self, cfg: AttentionConfig, slots: tuple[tuple[str, int], ...],
                 rule_kind: str = "space_layer"):
        super().__init__()
        self.cfg = cfg
        self.slots = slots
        self.slots_per_frame = sum(c for _, c in slots)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.final_norm = RMSNorm(cfg.dim)
        mask = torch.from_numpy(space_mask(slots, rule_kind))
        self.register_buffer("frame_mask", mask, persistent=False)

    def _time_mask(self, T: int, image_mode: torch.Tensor | None, device):
        q = torch.arange(T, device=device)
        allow = (q[None, :] <= q[:, None]) & (q[:, None] - q[None, :] < self.cfg.window)
        if image_mode is None:
            return allow  # (T, T)
        eye = torch.eye(T, dtype=torch.bool, device=device)
        per = torch.where(image_mode.view(-1, 1, 1), eye, allow)  # (B, T, T)
        return per

    def _space_attend(self, block, x):
        B, T, S, D = x.shape
        h = x.reshape(B * T, S, D)
        q, k, v = block.attn.project(h)
        return block.attn.attend(q, k, v, self.frame_mask).view(B, T, S, D)

    def _time_attend_full(self, block, layer_idx, x, frame_idx, image_mode, cache):
        B, T, S, D = x.shape
        q, k, v = block.attn.project(x)  # (B, T, S, H, hd)
        q = rotary_time(q.movedim(1, -2), frame_idx, self.cfg.rope_base).movedim(-2, 1)
        k = rotary_time(k.movedim(1, -2), frame_idx, self.cfg.rope_base).movedim(-2, 1)
        if cache is not None:
            keep = min(T, cache.capacity)
            cache.append(layer_idx, k[:, T - keep:], v[:, T - keep:])
        mask = self._time_mask(T, image_mode, x.device)
        if mask.dim() == 2:
            mask = mask.view(1, 1, T, T)
        else:
            mask = mask.repeat_interleave(S, dim=0).unsqueeze(1)  # (B*S, 1, T, T)
        # group by slot: (B*S, T, H, hd)
        qs = q.permute(0, 2, 1, 3, 4).reshape(B * S, T, self.cfg.q_heads, -1)
        ks = k.permute(0, 2, 1, 3, 4).reshape(B * S, T, self.cfg.kv_heads, -1)
        vs = v.permute(0, 2, 1, 3, 4).reshape(B * S, T, self.cfg.kv_heads, -1)
        out = block.attn.attend(qs, ks, vs, mask)
        return out.view(B, S, T, D).transpose(1, 2)

    def _time_attend_step(self, block, layer_idx, x, cache, commit):
        B, n, S, D = x.shape
        if n != 1:
            raise ValueError("incremental mode processes one frame at a time")
        frame_idx = torch.arange(cache.count, cache.count + n, device=x.device)
        q, k, v = block.attn.project(x)
        q = rotary_time(q.movedim(1, -2), frame_idx, self.cfg.rope_base).movedim(-2, 1)
        k = rotary_time(k.movedim(1, -2), frame_idx, self.cfg.rope_base).movedim(-2, 1)
        pk, pv = cache.stored(layer_idx)
        ks = torch.cat([pk, k], dim=1)  # (B, P+1, S, H_kv, hd)
        vs = torch.cat([pv, v], dim=1)
        if commit:
            # append only after the concat: stored() may alias ring memory
            cache.append(layer_idx, k, v)
        P = ks.shape[1]
        qs = q.permute(0, 2, 1, 3, 4).reshape(B * S, n, self.cfg.q_heads, -1)
        ks = ks.permute(0, 2, 1, 3, 4).reshape(B * S, P, self.cfg.kv_heads, -1)
        vs = vs.permute(0, 2, 1, 3, 4).reshape(B * S, P, self.cfg.kv_heads, -1)
        out = block.attn.attend(qs, ks, vs, None)
        return out.view(B, S, n, D).transpose(1, 2)

    def forward(self, x: torch.Tensor, cache: KVCache | None = None,
                commit: bool = True, image_mode: torch.Tensor | None = None,
                frame_offset: int = 0) -> torch.Tensor:
        """x: (B, T, S, D) embedded tokens -> (B, T, S, D) outputs.

        Without a cache: full-sequence processing (optionally prefilling a
        fresh cache when one is passed with count == 0 and commit=True).
        With a non-empty cache: incremental single-frame step; commit=False
        leaves the cache untouched (ephemeral sampling call).
        """
        B, T, S, D = x.shape
        if S != self.slots_per_frame:
            raise ValueError(f"layout mismatch: got {S} slots, expected "
                             f"{self.slots_per_frame}")
        incremental = cache is not None and cache.count > 0
        if incremental:
            if image_mode is not None:
                raise ValueError("image_mode is a training-only path")
            for i, block in enumerate(self.blocks):
                h = block.attn_norm(x)
                if self.cfg.layer_kind(i) == "time":
                    x = x + self._time_attend_step(block, i, h, cache, commit)
                else:
                    x = x + self._space_attend(block, h)
                x = x + block.mlp(block.mlp_norm(x))
            if commit:
                cache.advance(T)
        else:
            frame_idx = torch.arange(frame_offset, frame_offset + T, device=x.device)
            prefill = cache if (cache is not None and commit) else None
            for i, block in enumerate(self.blocks):
                h = block.attn_norm(x)
                if self.cfg.layer_kind(i) == "time":
                    x = x + self._time_attend_full(block, i, h, frame_idx,
                                                   image_mode, prefill)
                else:
                    x = x + self._space_attend(block, h)
                x = x + block.mlp(block.mlp_norm(x))
            if prefill is not None:
                prefill.advance(T)
        return self.final_norm(x)
