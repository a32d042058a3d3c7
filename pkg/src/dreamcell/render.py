"""Pure renderer from GridState to 64x64 RGB frames, plus HUD decoding.

Layout: 8x8 tiles of 8px each. The top tile row (always border wall) is
replaced by the HUD strip: eight 8px-wide slots, one per inventory item,
whose brightness steps with the item count (saturating at 7). The HUD
encoding is invertible, which the event-accuracy evaluation relies on.
"""

from __future__ import annotations

import numpy as np

from .env import (
    EMPTY, GEM_TILE, GRID, IRON_TILE, LAVA, N_ITEMS, STONE_TILE, TREE, WALL,
    GridState,
)

TILE_PX = 8
FRAME_PX = GRID * TILE_PX  # 64

# Disjoint palettes so the nether split shares no tile colors with overworld.
PALETTES = {
    "overworld": {
        EMPTY: (96, 160, 72),
        TREE: (32, 96, 32),
        STONE_TILE: (128, 128, 128),
        IRON_TILE: (200, 168, 120),
        GEM_TILE: (64, 208, 224),
        WALL: (64, 56, 48),
    },
    "nether": {
        EMPTY: (120, 48, 48),
        STONE_TILE: (88, 40, 72),
        IRON_TILE: (224, 200, 48),
        GEM_TILE: (216, 96, 216),
        WALL: (40, 24, 32),
        LAVA: (248, 120, 16),
    },
}
AGENT_COLOR = {"overworld": (240, 240, 240), "nether": (200, 232, 248)}

# Bright, max-channel-255 colors so HUD levels decode robustly.
HUD_COLORS = np.array([
    (160, 96, 0),     # log
    (255, 200, 80),   # plank
    (255, 128, 0),    # wood_pick
    (160, 160, 160),  # stone
    (120, 160, 255),  # stone_pick
    (255, 255, 255),  # iron
    (80, 255, 120),   # iron_pick
    (0, 255, 255),    # gem
], dtype=np.float64)

HUD_MAX_LEVEL = 7


def _triangle(facing: int) -> np.ndarray:
    rows = [
        "...11...",
        "...11...",
        "..1111..",
        "..1111..",
        ".111111.",
        ".111111.",
        "11111111",
        "........",
    ]
    mask = np.array([[ch == "1" for ch in row] for row in rows])
    return np.rot90(mask, k=-facing)  # N template rotated clockwise per facing


_TRIANGLES = [_triangle(f) for f in range(4)]


def hud_slot_pixels(item: int, count: int) -> np.ndarray:
    level = min(int(count), HUD_MAX_LEVEL)
    value = np.round(HUD_COLORS[item] * (level + 1) / (HUD_MAX_LEVEL + 1))
    return value.astype(np.uint8)


def render(state: GridState) -> np.ndarray:
    """Render a (64, 64, 3) uint8 frame. Pure function of the state."""
    palette = PALETTES[state.theme]
    frame = np.zeros((FRAME_PX, FRAME_PX, 3), dtype=np.uint8)
    for r in range(GRID):
        for c in range(GRID):
            color = palette[int(state.tiles[r, c])]
            frame[r * TILE_PX:(r + 1) * TILE_PX, c * TILE_PX:(c + 1) * TILE_PX] = color

    ar, ac = state.agent_pos
    block = frame[ar * TILE_PX:(ar + 1) * TILE_PX, ac * TILE_PX:(ac + 1) * TILE_PX]
    block[_TRIANGLES[state.agent_facing]] = AGENT_COLOR[state.theme]

    for item in range(N_ITEMS):
        frame[0:TILE_PX, item * TILE_PX:(item + 1) * TILE_PX] = hud_slot_pixels(
            item, int(state.inventory[item]))
    return frame


def decode_hud(frame: np.ndarray) -> np.ndarray:
    """Recover per-item inventory levels (0..7) from the HUD strip.

    Works on noisy generated frames: each slot is averaged and snapped to the
    nearest brightness level of its known item color.
    """
    levels = np.zeros(N_ITEMS, dtype=np.int64)
    strip = frame[0:TILE_PX].astype(np.float64)
    for item in range(N_ITEMS):
        slot = strip[:, item * TILE_PX:(item + 1) * TILE_PX].reshape(-1, 3)
        mean = slot.mean(axis=0)
        candidates = np.stack([
            np.round(HUD_COLORS[item] * (lvl + 1) / (HUD_MAX_LEVEL + 1))
            for lvl in range(HUD_MAX_LEVEL + 1)
        ])
        levels[item] = int(np.argmin(((candidates - mean) ** 2).sum(axis=1)))
    return levels
