"""Offline dataset: episode rollout, shard serialization, and readers.

Shard layout: one directory per shard holding `episodes.bin` plus
`manifest.json`. The binary format is little-endian, per episode:

    header  {u32 length, u8 theme, u64 seed, i16 task}
    length x {64*64*3 frame bytes, u8 move, u8 craft, u8 use, u8 reward}
    u32 n_events, then n_events x {u32 tick, u8 item, u8 count}

The event-list length prefix makes episodes self-delimiting. Collection is
deterministic given the root seed: episode i draws from an rng seeded by
(root_seed, i) regardless of worker scheduling.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import (
    EPISODE_LEN, N_TASKS, NO_TASK, TASK_NAMES, THEMES, EnvAction, GridState,
    WorldConfig, env_reset, env_step,
)
from .expert import scripted_expert
from .render import FRAME_PX, render

FORMAT_VERSION = 1
_HEADER = struct.Struct("<IBQh")
_EVENT = struct.Struct("<IBB")
FRAME_BYTES = FRAME_PX * FRAME_PX * 3
RECORD_BYTES = FRAME_BYTES + 4


@dataclass
class Episode:
    frames: np.ndarray    # (T, 64, 64, 3) uint8
    actions: np.ndarray   # (T, 3) uint8 columns: move, craft, use
    rewards: np.ndarray   # (T,) uint8
    events: list[tuple[int, int, int]]
    task: int             # NO_TASK for free play
    seed: int
    theme: str

    def __len__(self) -> int:
        return len(self.frames)


def run_episode(config: WorldConfig, policy, task: int = NO_TASK) -> Episode:
    """Roll one episode with policy(state, tick) -> EnvAction.

    frames[t] is the observation before actions[t]; rewards[t] is 1 iff the
    episode's task event fired during step t.
    """
    state = env_reset(config)
    T = config.episode_len
    frames = np.empty((T, FRAME_PX, FRAME_PX, 3), dtype=np.uint8)
    actions = np.empty((T, 3), dtype=np.uint8)
    rewards = np.zeros(T, dtype=np.uint8)
    events: list[tuple[int, int, int]] = []
    for t in range(T):
        frames[t] = render(state)
        action = policy(state, t)
        state, evs = env_step(state, action)
        actions[t] = (action.move, action.craft, action.use)
        events.extend(evs)
        if task != NO_TASK and any(item == task for _, item, _ in evs):
            rewards[t] = 1
    return Episode(frames, actions, rewards, events, task, config.seed, config.theme)


def expert_policy(task: int, rng: np.random.Generator, epsilon: float = 0.1):
    """Expert for a tagged episode: pursue `task` repeatedly."""
    def policy(state: GridState, tick: int) -> EnvAction:
        return scripted_expert(state, task, rng, epsilon=epsilon)
    return policy


def free_play_policy(rng: np.random.Generator, epsilon: float = 0.1):
    """Untagged episodes: chase a rotating random milestone, like uniform
    gameplay footage. Keeps events in the unlabeled half of the data."""
    target = [int(rng.integers(N_TASKS))]

    def policy(state: GridState, tick: int) -> EnvAction:
        inv_before = int(state.inventory[target[0]])
        if inv_before > 0 and rng.random() < 0.3:
            target[0] = int(rng.integers(N_TASKS))
        return scripted_expert(state, target[0], rng, epsilon=epsilon)
    return policy


def default_task_mix() -> dict[int, float]:
    mix = {NO_TASK: 0.5}
    for k in range(N_TASKS):
        mix[k] = 0.5 / N_TASKS
    return mix


def parse_task_mix(spec: str) -> dict[int, float]:
    """Parse 'mine_gem:1.0' / 'none:0.5,mine_log:0.5' style mix strings."""
    if not spec:
        return default_task_mix()
    mix: dict[int, float] = {}
    for part in spec.split(","):
        name, _, weight = part.partition(":")
        name = name.strip()
        if name == "none":
            key = NO_TASK
        elif name in TASK_NAMES:
            key = TASK_NAMES.index(name)
        else:
            raise ValueError(f"unknown task {name!r} in task mix")
        mix[key] = float(weight)
    total = sum(mix.values())
    if total <= 0:
        raise ValueError("task mix weights must sum to a positive value")
    return {k: v / total for k, v in mix.items()}


def collect_episode(root_seed: int, index: int, config: WorldConfig,
                    task_mix: dict[int, float], epsilon: float = 0.1) -> Episode:
    rng = np.random.default_rng([root_seed % 2**63, index])
    keys = sorted(task_mix)
    probs = np.array([task_mix[k] for k in keys])
    task = int(keys[rng.choice(len(keys), p=probs / probs.sum())])
    world = WorldConfig(seed=int(rng.integers(2**62)), theme=config.theme,
                        episode_len=config.episode_len)
    if task == NO_TASK:
        policy = free_play_policy(rng, epsilon=epsilon)
    else:
        policy = expert_policy(task, rng, epsilon=epsilon)
    return run_episode(world, policy, task=task)


def write_shard(path: Path, episodes: list[Episode]) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    offsets = []
    try:
        with open(path / "episodes.bin", "wb") as f:
            for ep in episodes:
                offsets.append(f.tell())
                theme_code = THEMES.index(ep.theme)
                f.write(_HEADER.pack(len(ep), theme_code, ep.seed % 2**64, ep.task))
                records = np.empty((len(ep), RECORD_BYTES), dtype=np.uint8)
                records[:, :FRAME_BYTES] = ep.frames.reshape(len(ep), -1)
                records[:, FRAME_BYTES:FRAME_BYTES + 3] = ep.actions
                records[:, FRAME_BYTES + 3] = ep.rewards
                f.write(records.tobytes())
                f.write(struct.pack("<I", len(ep.events)))
                for tick, item, count in ep.events:
                    f.write(_EVENT.pack(tick, item, count))
        manifest = {
            "format_version": FORMAT_VERSION,
            "n_episodes": len(episodes),
            "frame_px": FRAME_PX,
            "offsets": offsets,
            "seeds": [ep.seed for ep in episodes],
            "tasks": [ep.task for ep in episodes],
            "themes": [ep.theme for ep in episodes],
            "lengths": [len(ep) for ep in episodes],
        }
        with open(path / "manifest.json", "w") as f:
            json.dump(manifest, f, sort_keys=True, indent=0)
    except OSError as exc:
        raise OSError(f"failed writing shard at {path}: {exc}") from exc


def collect_dataset(n_episodes: int, config: WorldConfig, out_dir: Path,
                    task_mix: dict[int, float] | None = None, seed: int = 0,
                    shard_size: int = 64, epsilon: float = 0.1,
                    progress: bool = False) -> list[Path]:
    """Collect episodes into shard directories under out_dir."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    task_mix = task_mix or default_task_mix()
    out_dir = Path(out_dir)
    shards = []
    buffer: list[Episode] = []
    shard_idx = 0
    for i in range(n_episodes):
        buffer.append(collect_episode(seed, i, config, task_mix, epsilon=epsilon))
        if len(buffer) == shard_size or i == n_episodes - 1:
            shard_path = out_dir / f"shard-{shard_idx:04d}"
            write_shard(shard_path, buffer)
            shards.append(shard_path)
            shard_idx += 1
            buffer = []
            if progress:
                print(f"collected {i + 1}/{n_episodes} episodes", flush=True)
    return shards


class ShardReader:
    """Zero-copy access to one shard via memmap."""

    def __init__(self, path: Path):
        self.path = Path(path)
        with open(self.path / "manifest.json") as f:
            self.manifest = json.load(f)
        if self.manifest["format_version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported shard format in {path}")
        self._data = np.memmap(self.path / "episodes.bin", dtype=np.uint8, mode="r")

    @property
    def n_episodes(self) -> int:
        return self.manifest["n_episodes"]

    def episode(self, i: int) -> Episode:
        off = self.manifest["offsets"][i]
        length, theme_code, seed, task = _HEADER.unpack(
            bytes(self._data[off:off + _HEADER.size]))
        off += _HEADER.size
        records = self._data[off:off + length * RECORD_BYTES].reshape(length, RECORD_BYTES)
        frames = records[:, :FRAME_BYTES].reshape(length, FRAME_PX, FRAME_PX, 3)
        actions = records[:, FRAME_BYTES:FRAME_BYTES + 3]
        rewards = records[:, FRAME_BYTES + 3]
        off += length * RECORD_BYTES
        (n_events,) = struct.unpack("<I", bytes(self._data[off:off + 4]))
        off += 4
        events = [_EVENT.unpack(bytes(self._data[off + j * _EVENT.size:
                                                 off + (j + 1) * _EVENT.size]))
                  for j in range(n_events)]
        return Episode(frames, actions, rewards, [tuple(e) for e in events],
                       int(task), int(seed), THEMES[theme_code])


class Dataset:
    """All shards under a root directory, addressable as one episode list."""

    def __init__(self, root: Path):
        root = Path(root)
        shard_dirs = sorted(p for p in root.glob("shard-*") if p.is_dir())
        if not shard_dirs and (root / "episodes.bin").exists():
            shard_dirs = [root]
        if not shard_dirs:
            raise FileNotFoundError(f"no shards under {root}")
        self.shards = [ShardReader(p) for p in shard_dirs]
        self._index = [(si, ei) for si, s in enumerate(self.shards)
                       for ei in range(s.n_episodes)]

    def __len__(self) -> int:
        return len(self._index)

    def episode(self, i: int) -> Episode:
        si, ei = self._index[i]
        return self.shards[si].episode(ei)

    def task_of(self, i: int) -> int:
        si, ei = self._index[i]
        return self.shards[si].manifest["tasks"][ei]

    def length_of(self, i: int) -> int:
        si, ei = self._index[i]
        return self.shards[si].manifest["lengths"][ei]

    def split(self, holdout_fraction: float = 0.1) -> tuple[list[int], list[int]]:
        """Deterministic train/holdout episode index split."""
        n = len(self)
        n_hold = max(1, int(round(n * holdout_fraction)))
        hold = set(range(0, n, max(1, n // n_hold))[:n_hold])
        train = [i for i in range(n) if i not in hold]
        return train, sorted(hold)
