"""Causal video tokenizer: masked autoencoding with a tanh bottleneck.

Encoder consumes patch embeddings plus learned latent slots and reads the
per-frame code out of the latent slots through a low-dimensional projection
with tanh. The decoder re-projects codes and reads pixels out of learned
patch-query slots. Both stacks are block-causal in time, so frames encode
and decode one by one for interactive use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .transformer import AttentionConfig, KVCache, TransformerCore

PATCH = 8
FRAME_PX = 64
PATCH_DIM = PATCH * PATCH * 3


@dataclass
class TokenizerConfig:
    latents: int = 16         # latent tokens per frame
    bottleneck: int = 8       # channels per latent token
    mask_prob_max: float = 0.9
    perceptual_weight: float = 0.2
    enc: AttentionConfig = field(default_factory=lambda: AttentionConfig(
        layers=4, dim=96, q_heads=4, kv_heads=2, window=8))
    dec: AttentionConfig = field(default_factory=lambda: AttentionConfig(
        layers=4, dim=96, q_heads=4, kv_heads=2, window=8))

    @property
    def patches(self) -> int:
        return (FRAME_PX // PATCH) ** 2

    def __post_init__(self):
        if self.bottleneck >= self.enc.dim:
            raise ValueError("bottleneck must be narrower than the model width")


def patchify(frames: torch.Tensor) -> torch.Tensor:
    """(B, T, 64, 64, 3) float in [0,1] -> (B, T, P, 192)."""
    B, T, H, W, C = frames.shape
    g = H // PATCH
    x = frames.view(B, T, g, PATCH, g, PATCH, C)
    return x.permute(0, 1, 2, 4, 3, 5, 6).reshape(B, T, g * g, PATCH_DIM)


def unpatchify(patches: torch.Tensor) -> torch.Tensor:
    B, T, P, _ = patches.shape
    g = FRAME_PX // PATCH
    x = patches.view(B, T, g, g, PATCH, PATCH, 3)
    return x.permute(0, 1, 2, 4, 3, 5, 6).reshape(B, T, FRAME_PX, FRAME_PX, 3)


def frames_to_float(frames_u8) -> torch.Tensor:
    if isinstance(frames_u8, torch.Tensor):
        return frames_u8.to(torch.float32) / 255.0
    return torch.from_numpy(frames_u8.copy()).float() / 255.0


def float_to_frames(frames: torch.Tensor):
    return (frames.clamp(0, 1) * 255.0).round().to(torch.uint8)


class Tokenizer(nn.Module):
    def __init__(self, cfg: TokenizerConfig | None = None):
        super().__init__()
        self.cfg = cfg or TokenizerConfig()
        c = self.cfg
        D_e, D_d = c.enc.dim, c.dec.dim
        self.patch_in = nn.Linear(PATCH_DIM, D_e)
        # masked patches all share mask_embed; the position embedding is what
        # lets the encoder know which patch went missing
        self.patch_pos = nn.Parameter(torch.randn(c.patches, D_e) * 0.02)
        self.mask_embed = nn.Parameter(torch.randn(D_e) * 0.02)
        self.latent_tokens = nn.Parameter(torch.randn(c.latents, D_e) * 0.02)
        self.encoder = TransformerCore(
            c.enc, (("patch", c.patches), ("latent", c.latents)), "tokenizer_enc")
        self.to_code = nn.Linear(D_e, c.bottleneck)
        self.from_code = nn.Linear(c.bottleneck, D_d)
        self.query_tokens = nn.Parameter(torch.randn(c.patches, D_d) * 0.02)
        self.decoder = TransformerCore(
            c.dec, (("latent", c.latents), ("patch_query", c.patches)), "tokenizer_dec")
        self.patch_out = nn.Linear(D_d, PATCH_DIM)

    # ------------------------------------------------------------ masking

    def mask_patches(self, frames: torch.Tensor,
                     generator: torch.Generator | None = None,
                     forced_p: float | None = None):
        """Per image draw p ~ U(0, mask_prob_max) and replace each patch
        embedding with the learned mask token with probability p.

        Returns (patch embeddings, mask) with mask True where replaced.
        """
        emb = self.patch_in(patchify(frames))
        B, T, P, D = emb.shape
        if forced_p is not None:
            p = torch.full((B, T, 1), forced_p, device=emb.device)
        else:
            p = torch.rand(B, T, 1, generator=generator, device=emb.device)
            p = p * self.cfg.mask_prob_max
        u = torch.rand(B, T, P, generator=generator, device=emb.device)
        mask = u < p
        emb = torch.where(mask[..., None], self.mask_embed.to(emb.dtype), emb)
        return emb + self.patch_pos.to(emb.dtype), mask

    # ------------------------------------------------------------ encode/decode

    def _encode_tokens(self, patch_emb: torch.Tensor) -> torch.Tensor:
        B, T, P, D = patch_emb.shape
        lat = self.latent_tokens.to(patch_emb.dtype).expand(B, T, -1, -1)
        return torch.cat([patch_emb, lat], dim=2)

    def encode(self, frames: torch.Tensor, generator: torch.Generator | None = None,
               mask_mode: str = "none", cache: KVCache | None = None,
               commit: bool = True) -> torch.Tensor:
        """Frames (B, T, 64, 64, 3) float -> latents (B, T, N_l, D_b) in (-1, 1).

        mask_mode "train" applies the randomized patch dropout; "none" is the
        inference path (p = 0).
        """
        if mask_mode == "train":
            emb, _ = self.mask_patches(frames, generator)
        else:
            emb = self.patch_in(patchify(frames)) + self.patch_pos
        h = self.encoder(self._encode_tokens(emb), cache=cache, commit=commit)
        lat = h[:, :, self.cfg.patches:, :]
        return torch.tanh(self.to_code(lat))

    def decode(self, latents: torch.Tensor, cache: KVCache | None = None,
               commit: bool = True) -> torch.Tensor:
        """Latents (B, T, N_l, D_b) -> frames (B, T, 64, 64, 3) in [0, 1]."""
        B, T = latents.shape[:2]
        lat = self.from_code(latents)
        q = self.query_tokens.to(lat.dtype).expand(B, T, -1, -1)
        h = self.decoder(torch.cat([lat, q], dim=2), cache=cache, commit=commit)
        patches = torch.sigmoid(self.patch_out(h[:, :, self.cfg.latents:, :]))
        return unpatchify(patches)

    def forward(self, frames: torch.Tensor, generator: torch.Generator | None = None,
                image_mode: torch.Tensor | None = None):
        """Masked-autoencoding training pass: frames -> reconstructions."""
        emb, mask = self.mask_patches(frames, generator)
        h = self.encoder(self._encode_tokens(emb), image_mode=image_mode)
        lat = torch.tanh(self.to_code(h[:, :, self.cfg.patches:, :]))
        return self.decode_with_mode(lat, image_mode), mask

    def decode_with_mode(self, latents, image_mode):
        B, T = latents.shape[:2]
        lat = self.from_code(latents)
        q = self.query_tokens.to(lat.dtype).expand(B, T, -1, -1)
        h = self.decoder(torch.cat([lat, q], dim=2), image_mode=image_mode)
        return unpatchify(torch.sigmoid(self.patch_out(h[:, :, self.cfg.latents:, :])))


_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T.contiguous()


def sobel_maps(frames: torch.Tensor) -> torch.Tensor:
    """3x3 Sobel gradients per channel, valid padding: (B*T, 6, 62, 62)."""
    B, T, H, W, C = frames.shape
    x = frames.reshape(B * T, H, W, C).permute(0, 3, 1, 2)
    kx = _SOBEL_X.to(frames.dtype).to(frames.device).view(1, 1, 3, 3).repeat(C, 1, 1, 1)
    ky = _SOBEL_Y.to(frames.dtype).to(frames.device).view(1, 1, 3, 3).repeat(C, 1, 1, 1)
    gx = F.conv2d(x, kx, groups=C)
    gy = F.conv2d(x, ky, groups=C)
    return torch.cat([gx, gy], dim=1)


def reconstruction_terms(pred: torch.Tensor, true: torch.Tensor):
    """Raw loss terms: pixel MSE and the perceptual proxy (L1 between Sobel
    gradient maps, which a constant brightness offset leaves at zero)."""
    mse = (pred - true).pow(2).mean()
    perc = (sobel_maps(pred) - sobel_maps(true)).abs().mean()
    return mse, perc


def tokenizer_loss(pred: torch.Tensor, true: torch.Tensor, normalizer,
                   perceptual_weight: float = 0.2):
    """Normalized reconstruction loss: norm(MSE) + w * norm(PERC)."""
    mse, perc = reconstruction_terms(pred, true)
    loss = normalizer.scale("tok_mse", mse) + \
        perceptual_weight * normalizer.scale("tok_perc", perc)
    return loss, {"tok_mse": float(mse.detach()), "tok_perc": float(perc.detach())}
