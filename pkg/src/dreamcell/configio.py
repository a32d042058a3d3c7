"""Run configuration: one flat dataclass, a key=value config-file parser, and
the DREAMCELL_SEED environment override. Unknown config keys are errors."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

SEED_ENV = "DREAMCELL_SEED"


@dataclass
class RunConfig:
    # run identity
    phase: str = ""
    data_dir: str = ""
    out: str = ""
    resume: str = ""
    tokenizer_ckpt: str = ""
    init_ckpt: str = ""
    seed: int = 0
    device: str = "cpu"

    # dynamics transformer
    dim: int = 128
    layers: int = 8
    q_heads: int = 4
    kv_heads: int = 2
    temporal_period: int = 4
    window: int = 48
    spatial: int = 16
    channels: int = 8
    registers: int = 4

    # tokenizer
    tok_dim: int = 96
    tok_layers: int = 4
    tok_heads: int = 4
    tok_kv_heads: int = 2
    tok_window: int = 8
    latents: int = 16

    # shortcut objective
    k_max: int = 16
    k_inf: int = 4
    context_signal: float = 0.9

    # agent heads / RL
    mtp_horizon: int = 8
    gamma: float = 0.997
    lam: float = 0.95
    alpha: float = 0.5
    beta: float = 0.3
    imag_horizon: int = 16
    imag_context: int = 8

    # training
    steps: int = 2000
    batch_size: int = 16
    batch_len_short: int = 16
    batch_len_long: int = 64
    long_every: int = 8          # 7 short batches, then 1 long
    lr: float = 3e-4
    warmup: int = 1000
    grad_clip: float = 1.0
    image_frac: float = 0.3
    action_mode: str = "all"     # all | none | fraction:F | overworld-only
    from_scratch: bool = False
    log_every: int = 25
    ckpt_every: int = 1000
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_len_long <= self.window:
            raise ValueError("long batch length must exceed the context window")
        env_seed = os.environ.get(SEED_ENV)
        if env_seed is not None:
            object.__setattr__(self, "seed", int(env_seed))

    def asdict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(field, raw: str):
    t = field.type if not isinstance(field.type, str) else field.type
    name = t if isinstance(t, str) else t.__name__
    if name == "int":
        return int(raw)
    if name == "float":
        return float(raw)
    if name == "bool":
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"bad boolean {raw!r}")
    return raw


def parse_config_file(path) -> dict:
    """Flat `key = value` lines; '#' comments; unknown keys are errors."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, _, raw = line.partition("=")
        key = key.strip().replace("-", "_")
        raw = raw.strip()
        if key not in _FIELDS:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _convert(_FIELDS[key], raw)
    return values


def load_config(path=None, **overrides) -> RunConfig:
    values = parse_config_file(path) if path else {}
    for k, v in overrides.items():
        if v is None:
            continue
        if k not in _FIELDS:
            raise ValueError(f"unknown config key {k!r}")
        values[k] = v
    return RunConfig(**values)
