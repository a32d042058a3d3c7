"""MiniQuarry: a deterministic 8x8 crafting grid-world.

The world is fully observed in a single 64x64 frame. An agent walks between
tiles, mines resources (gated by tool prerequisites), and crafts tools along
an 8-item ladder: log -> plank -> wood_pick -> stone -> stone_pick -> iron ->
iron_pick -> gem. All transitions are pure functions of (state, action).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

GRID = 8
EPISODE_LEN = 256

# Tile codes.
EMPTY, TREE, STONE_TILE, IRON_TILE, GEM_TILE, WALL, LAVA = range(7)

# Item / inventory codes. Task k's milestone event is item k.
LOG, PLANK, WOOD_PICK, STONE, STONE_PICK, IRON, IRON_PICK, GEM = range(8)
N_ITEMS = 8

ITEM_NAMES = (
    "log", "plank", "wood_pick", "stone", "stone_pick", "iron", "iron_pick", "gem",
)
TASK_NAMES = (
    "mine_log", "craft_plank", "craft_wood_pick", "mine_stone",
    "craft_stone_pick", "mine_iron", "craft_iron_pick", "mine_gem",
)
N_TASKS = 8
NO_TASK = -1

# Movement. Facing shares the N/E/S/W order of moves 1..4.
MOVE_NOOP, MOVE_N, MOVE_E, MOVE_S, MOVE_W = range(5)
FACE_N, FACE_E, FACE_S, FACE_W = range(4)
DELTAS = ((-1, 0), (0, 1), (1, 0), (0, -1))  # row, col per facing

# Crafting. Values of the `craft` action component.
CRAFT_NONE, CRAFT_PLANK, CRAFT_WOOD_PICK, CRAFT_STONE_PICK, CRAFT_IRON_PICK = range(5)

N_MOVES = 5
N_CRAFTS = 5

RECIPES = {
    CRAFT_PLANK: (PLANK, ((LOG, 1),)),
    CRAFT_WOOD_PICK: (WOOD_PICK, ((PLANK, 2),)),
    CRAFT_STONE_PICK: (STONE_PICK, ((PLANK, 1), (STONE, 2))),
    CRAFT_IRON_PICK: (IRON_PICK, ((PLANK, 1), (IRON, 2))),
}

# tile -> (item mined, tool required or None)
MINE_RULES = {
    TREE: (LOG, None),
    STONE_TILE: (STONE, WOOD_PICK),
    IRON_TILE: (IRON, STONE_PICK),
    GEM_TILE: (GEM, IRON_PICK),
}
ITEM_SOURCE_TILE = {LOG: TREE, STONE: STONE_TILE, IRON: IRON_TILE, GEM: GEM_TILE}

THEMES = ("overworld", "nether")


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    theme: str = "overworld"
    episode_len: int = EPISODE_LEN

    def __post_init__(self):
        if self.theme not in THEMES:
            raise ValueError(f"unknown theme {self.theme!r}")


@dataclass
class EnvAction:
    move: int = MOVE_NOOP
    craft: int = CRAFT_NONE
    use: int = 0

    def __post_init__(self):
        if not (0 <= self.move < N_MOVES and 0 <= self.craft < N_CRAFTS
                and self.use in (0, 1)):
            raise ValueError(f"invalid action {(self.move, self.craft, self.use)}")


@dataclass
class GridState:
    tiles: np.ndarray          # (8, 8) uint8
    agent_pos: tuple[int, int]
    agent_facing: int
    inventory: np.ndarray      # (8,) int16
    tick: int
    theme: str
    episode_len: int = EPISODE_LEN

    def clone(self) -> "GridState":
        return GridState(self.tiles.copy(), self.agent_pos, self.agent_facing,
                         self.inventory.copy(), self.tick, self.theme,
                         self.episode_len)


def _resource_counts(rng: np.random.Generator, theme: str) -> dict[int, int]:
    # Four trees minimum: the full ladder consumes four logs.
    counts = {
        STONE_TILE: int(rng.integers(4, 7)),
        IRON_TILE: int(rng.integers(2, 4)),
        GEM_TILE: int(rng.integers(1, 3)),
    }
    if theme == "overworld":
        counts[TREE] = int(rng.integers(4, 7))
    else:
        counts[LAVA] = int(rng.integers(3, 6))
    return counts


def _neighbors(pos):
    r, c = pos
    for dr, dc in DELTAS:
        yield r + dr, c + dc


def _layout_ok(tiles: np.ndarray, agent_pos) -> bool:
    """Every resource must be orthogonally adjacent to an empty tile reachable
    from the agent. Mining only opens space, so this check at reset time
    guarantees reachability for the whole episode."""
    reach = np.zeros_like(tiles, dtype=bool)
    stack = [agent_pos]
    reach[agent_pos] = True
    while stack:
        pos = stack.pop()
        for nb in _neighbors(pos):
            if tiles[nb] == EMPTY and not reach[nb]:
                reach[nb] = True
                stack.append(nb)
    for tile_kind in MINE_RULES:
        for r, c in zip(*np.nonzero(tiles == tile_kind)):
            if not any(reach[nb] for nb in _neighbors((r, c)) if tiles[nb] == EMPTY):
                return False
    return True


def env_reset(config: WorldConfig) -> GridState:
    """Deterministically generate the initial world for (seed, theme)."""
    theme_code = THEMES.index(config.theme)
    for attempt in range(256):
        rng = np.random.default_rng([config.seed % 2**63, theme_code, attempt])
        tiles = np.full((GRID, GRID), EMPTY, dtype=np.uint8)
        tiles[0, :] = tiles[-1, :] = WALL
        tiles[:, 0] = tiles[:, -1] = WALL
        interior = [(r, c) for r in range(1, GRID - 1) for c in range(1, GRID - 1)]
        order = rng.permutation(len(interior))
        cells = [interior[i] for i in order]
        placed = 0
        for kind, count in _resource_counts(rng, config.theme).items():
            for _ in range(count):
                tiles[cells[placed]] = kind
                placed += 1
        agent_pos = cells[placed]
        facing = int(rng.integers(4))
        if _layout_ok(tiles, agent_pos):
            return GridState(
                tiles=tiles,
                agent_pos=agent_pos,
                agent_facing=facing,
                inventory=np.zeros(N_ITEMS, dtype=np.int16),
                tick=0,
                theme=config.theme,
                episode_len=config.episode_len,
            )
    raise RuntimeError(f"no valid layout for seed {config.seed}")  # pragma: no cover


def env_step(state: GridState, action: EnvAction) -> tuple[GridState, list[tuple[int, int, int]]]:
    """Apply one action. Components apply in order move -> use -> craft.

    Returns the next state and the list of (tick, item, count) events emitted.
    Infeasible use/craft components are no-ops.
    """
    if state.tick >= state.episode_len:
        raise ValueError("episode is over")
    s = state.clone()
    events: list[tuple[int, int, int]] = []

    if action.move != MOVE_NOOP:
        s.agent_facing = action.move - 1
        dr, dc = DELTAS[s.agent_facing]
        target = (s.agent_pos[0] + dr, s.agent_pos[1] + dc)
        if s.tiles[target] == EMPTY:
            s.agent_pos = target

    if action.use:
        dr, dc = DELTAS[s.agent_facing]
        target = (s.agent_pos[0] + dr, s.agent_pos[1] + dc)
        rule = MINE_RULES.get(int(s.tiles[target]))
        if rule is not None:
            item, tool = rule
            if tool is None or s.inventory[tool] > 0:
                s.tiles[target] = EMPTY
                s.inventory[item] += 1
                events.append((state.tick, item, 1))

    if action.craft != CRAFT_NONE:
        product, cost = RECIPES[action.craft]
        if all(s.inventory[ing] >= n for ing, n in cost):
            for ing, n in cost:
                s.inventory[ing] -= n
            s.inventory[product] += 1
            events.append((state.tick, product, 1))

    s.tick += 1
    return s, events
