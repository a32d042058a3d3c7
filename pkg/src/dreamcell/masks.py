"""Token layouts and attention masks for the block-causal transformer.

A sequence is T frames of S slots each, the slots partitioned into named
modalities. Four mask kinds exist:

    space_layer    within-frame attention, subject to modality rules
    time_layer     same slot index across current and past frames
    tokenizer_enc  latents read everything (current+past); others stay
                   within their own modality
    tokenizer_dec  modalities read themselves and the latents; latents
                   stay within themselves

Modality rules shared by all kinds: nothing may attend into the future, and
no non-agent slot may attend to an agent slot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MASK_KINDS = ("space_layer", "time_layer", "tokenizer_enc", "tokenizer_dec")


@dataclass(frozen=True)
class TokenLayout:
    frames: int
    slots: tuple[tuple[str, int], ...]  # ordered (modality, count)

    def __post_init__(self):
        if any(count < 0 for _, count in self.slots):
            raise ValueError("slot counts must be >= 0")

    @property
    def slots_per_frame(self) -> int:
        return sum(count for _, count in self.slots)

    @property
    def total(self) -> int:
        return self.frames * self.slots_per_frame

    def modalities(self) -> list[str]:
        return [name for name, count in self.slots for _ in range(count)]

    def slot_slice(self, name: str) -> slice:
        start = 0
        for mod, count in self.slots:
            if mod == name:
                return slice(start, start + count)
            start += count
        raise KeyError(name)

    def count(self, name: str) -> int:
        return sum(c for n, c in self.slots if n == name)


def dynamics_layout(frames: int, actions: int = 1, spatial: int = 16,
                    registers: int = 4, agents: int = 1) -> TokenLayout:
    return TokenLayout(frames, (("action", actions), ("meta", 1),
                                ("spatial", spatial), ("register", registers),
                                ("agent", agents)))


def encoder_layout(frames: int, patches: int = 64, latents: int = 16) -> TokenLayout:
    return TokenLayout(frames, (("patch", patches), ("latent", latents)))


def decoder_layout(frames: int, latents: int = 16, patches: int = 64) -> TokenLayout:
    return TokenLayout(frames, (("latent", latents), ("patch_query", patches)))


def modality_allow(kind: str, mq: str, mk: str) -> bool:
    """May a query of modality mq attend a key of modality mk (time aside)?"""
    if mk == "agent" and mq != "agent":
        return False
    if kind == "tokenizer_enc":
        return mq == "latent" or mq == mk
    if kind == "tokenizer_dec":
        if mq == "latent":
            return mk == "latent"
        return mk == mq or mk == "latent"
    return True


def build_mask(layout: TokenLayout, kind: str, window: int | None = None,
               image_mode: bool = False) -> np.ndarray:
    """Boolean allow matrix over the flattened (frame, slot) index space.

    window limits how many frames back a query may reach (inclusive of its
    own frame); image_mode restricts all kinds to within-frame attention.
    """
    if kind not in MASK_KINDS:
        raise ValueError(f"unknown mask kind {kind!r}")
    if kind.startswith("tokenizer") and layout.count("latent") == 0:
        raise ValueError("tokenizer masks require at least one latent slot")

    S = layout.slots_per_frame
    T = layout.frames
    mods = layout.modalities()

    frame_q = np.repeat(np.arange(T), S)
    slot_q = np.tile(np.arange(S), T)
    causal = frame_q[None, :] <= frame_q[:, None]
    if window is not None:
        causal &= frame_q[:, None] - frame_q[None, :] < window
    same_frame = frame_q[None, :] == frame_q[:, None]
    if image_mode:
        causal = causal & same_frame

    mod_ok = np.ones((S, S), dtype=bool)
    for i, mq in enumerate(mods):
        for j, mk in enumerate(mods):
            mod_ok[i, j] = modality_allow(kind, mq, mk)
    mod_ok_full = np.tile(mod_ok, (T, T))

    if kind == "space_layer":
        allow = same_frame & causal & mod_ok_full
    elif kind == "time_layer":
        allow = causal & (slot_q[None, :] == slot_q[:, None])
    else:
        allow = causal & mod_ok_full

    if not allow.any(axis=1).all():
        raise ValueError("mask leaves a query row with no allowed keys")
    return allow


def space_mask(layout_slots: tuple[tuple[str, int], ...], kind: str) -> np.ndarray:
    """(S, S) within-frame modality mask, shared by every frame."""
    if kind == "time_layer":
        raise ValueError("time_layer has no within-frame specialization")
    return build_mask(TokenLayout(1, layout_slots), kind)
