"""Running-RMS loss normalization shared by every training phase.

Each named loss term is divided by a running estimate of its root mean
square; the divisor is treated as a constant (no gradient flows through it).
The first observation seeds the estimate at raw^2 so the initial scale is 1.
"""

from __future__ import annotations

import torch

DECAY = 0.99
EPS = 1e-8


class LossNormalizer:
    def __init__(self):
        self.mean_square: dict[str, float] = {}
        self.counts: dict[str, int] = {}

    def scale(self, name: str, raw: torch.Tensor) -> torch.Tensor:
        """Update the running estimate with raw and return raw / rms."""
        value = float(raw.detach()) if isinstance(raw, torch.Tensor) else float(raw)
        if not (value == value and abs(value) != float("inf")):
            raise ValueError(f"loss term {name!r} is not finite: {value}")
        if name not in self.mean_square:
            self.mean_square[name] = value * value
            self.counts[name] = 1
        else:
            self.mean_square[name] = DECAY * self.mean_square[name] + \
                (1 - DECAY) * value * value
            self.counts[name] += 1
        return raw / self.divisor(name)

    def divisor(self, name: str) -> float:
        return max(self.mean_square[name] ** 0.5, EPS)

    def state_dict(self) -> dict:
        return {"mean_square": dict(self.mean_square), "counts": dict(self.counts)}

    def load_state_dict(self, state: dict) -> None:
        self.mean_square = dict(state["mean_square"])
        self.counts = {k: int(v) for k, v in state["counts"].items()}
