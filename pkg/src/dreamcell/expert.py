"""Greedy scripted expert: shortest-path mining and recipe-chain crafting.

The expert pursues the milestone item of a task by recursing through the
prerequisite DAG (missing tool -> craft it; missing ingredient -> obtain it),
walking BFS-shortest paths to resources. With epsilon > 0 each emitted action
is replaced by a uniformly random one with probability epsilon, which leaves
failure cases in the offline dataset.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from .env import (
    CRAFT_IRON_PICK, CRAFT_NONE, CRAFT_PLANK, CRAFT_STONE_PICK, CRAFT_WOOD_PICK,
    DELTAS, EMPTY, GEM, GRID, IRON, IRON_PICK, ITEM_SOURCE_TILE, LOG, MOVE_NOOP,
    N_CRAFTS, N_MOVES, PLANK, RECIPES, STONE, STONE_PICK, WOOD_PICK,
    EnvAction, GridState,
)

CRAFT_FOR_ITEM = {PLANK: CRAFT_PLANK, WOOD_PICK: CRAFT_WOOD_PICK,
                  STONE_PICK: CRAFT_STONE_PICK, IRON_PICK: CRAFT_IRON_PICK}
TOOL_FOR_ITEM = {LOG: None, STONE: WOOD_PICK, IRON: STONE_PICK, GEM: IRON_PICK}


def random_action(rng: np.random.Generator) -> EnvAction:
    return EnvAction(move=int(rng.integers(N_MOVES)),
                     craft=int(rng.integers(N_CRAFTS)),
                     use=int(rng.integers(2)))


def _bfs_step(state: GridState, kind: int):
    """First move toward the nearest tile adjacent to a `kind` resource.

    Returns (move, facing_if_adjacent) where facing_if_adjacent is the facing
    toward the resource once standing next to it, or None if unreachable.
    """
    tiles = state.tiles
    start = state.agent_pos

    def adjacent_dir(pos):
        for f, (dr, dc) in enumerate(DELTAS):
            if tiles[pos[0] + dr, pos[1] + dc] == kind:
                return f
        return None

    here = adjacent_dir(start)
    if here is not None:
        return MOVE_NOOP, here

    seen = {start}
    queue = deque([(start, None)])  # (pos, first move)
    while queue:
        pos, first = queue.popleft()
        for f, (dr, dc) in enumerate(DELTAS):
            nxt = (pos[0] + dr, pos[1] + dc)
            if nxt in seen or tiles[nxt] != EMPTY:
                continue
            seen.add(nxt)
            nxt_first = first if first is not None else f + 1  # move code
            if adjacent_dir(nxt) is not None:
                return nxt_first, None
            queue.append((nxt, nxt_first))
    return None


def plan_action(state: GridState, item: int) -> EnvAction | None:
    """Next greedy action toward producing one `item` event, or None if the
    item is unobtainable in the current world."""
    if item in CRAFT_FOR_ITEM:
        craft = CRAFT_FOR_ITEM[item]
        _, cost = RECIPES[craft]
        for ing, n in cost:
            if state.inventory[ing] < n:
                return plan_action(state, ing)
        return EnvAction(craft=craft)

    tool = TOOL_FOR_ITEM[item]
    if tool is not None and state.inventory[tool] == 0:
        return plan_action(state, tool)
    found = _bfs_step(state, ITEM_SOURCE_TILE[item])
    if found is None:
        return None
    move, face = found
    if face is not None:
        if face == state.agent_facing:
            return EnvAction(use=1)
        # Moving into the resource tile is blocked, so this only turns.
        return EnvAction(move=face + 1)
    return EnvAction(move=move)


def scripted_expert(state: GridState, task: int, rng: np.random.Generator,
                    epsilon: float = 0.1) -> EnvAction:
    """Greedy action toward the task's milestone event, epsilon-randomized."""
    if epsilon > 0 and rng.random() < epsilon:
        return random_action(rng)
    action = plan_action(state, task)  # task index == milestone item index
    if action is None:
        return wander(state, rng)
    return action


def wander(state: GridState, rng: np.random.Generator) -> EnvAction:
    """Free-roam fallback: walk toward open space."""
    for _ in range(4):
        move = int(rng.integers(1, N_MOVES))
        dr, dc = DELTAS[move - 1]
        target = (state.agent_pos[0] + dr, state.agent_pos[1] + dc)
        if state.tiles[target] == EMPTY:
            return EnvAction(move=move)
    return EnvAction(move=int(rng.integers(1, N_MOVES)))
