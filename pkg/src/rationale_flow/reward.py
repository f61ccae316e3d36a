"""Sparse anchor log-rewards with linear interpolation in between.

The log-reward of a terminated prefix ``z[:t]`` is ``log P(X z[:t] <T> Y)``
divided by the reward temperature.  Exact values are computed only every
``lam`` tokens (and at both ends); everything else is filled in linearly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .toyworld import JointModel, log_joint


@dataclass(frozen=True)
class RewardTrace:
    n: int
    lam: int
    anchor_indices: tuple[int, ...]
    anchor_logreward: tuple[float, ...]
    interp_logreward: tuple[float, ...]
    reward_temperature: float

    @property
    def final(self) -> float:
        return self.interp_logreward[-1]


def anchor_indices(n: int, lam: int) -> tuple[int, ...]:
    if lam < 1:
        raise ValueError(f"lambda must be >= 1, got {lam}")
    idx = list(range(0, n + 1, lam))
    if idx[-1] != n:
        idx.append(n)
    return tuple(idx)


def interpolate(anchors: Sequence[int], values: Sequence[float]) -> list[float]:
    """Piecewise-linear fill; each segment uses its own width."""
    out = [0.0] * (anchors[-1] + 1)
    for (a, ra), (b, rb) in zip(zip(anchors, values), zip(anchors[1:], values[1:])):
        width = b - a
        out[a] = ra
        for i in range(1, width):
            out[a + i] = ra + i / width * (rb - ra)
    out[anchors[-1]] = values[-1]
    return out


def prefix_logrewards(model: JointModel, x, y, z, reward_temperature: float = 1.0) -> list[float]:
    """Exact tempered log-reward of every terminated prefix ``z[:t]``, t = 0..n."""
    return [log_joint(model, x, z[:t], y) / reward_temperature for t in range(len(z) + 1)]


def compute_trace(model: JointModel, x, y, z, lam: int, reward_temperature: float = 1.0) -> RewardTrace:
    if not reward_temperature > 0:
        raise ValueError("reward_temperature must be positive")
    z = tuple(z)
    anchors = anchor_indices(len(z), lam)
    values = tuple(log_joint(model, x, z[:t], y) / reward_temperature for t in anchors)
    return RewardTrace(len(z), lam, anchors, values, tuple(interpolate(anchors, values)),
                       float(reward_temperature))


def reward_at(trace: RewardTrace, t: int) -> float:
    if not 0 <= t <= trace.n:
        raise IndexError(f"t={t} outside 0..{trace.n}")
    return trace.interp_logreward[t]


def second_differences(values: Sequence[float]) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return v[2:] - 2 * v[1:-1] + v[:-2]


def second_difference_bound(model: JointModel, x, y, z, reward_temperature: float = 1.0) -> float:
    """max_s |R(s+1) - 2 R(s) + R(s-1)| over the exact prefix log-rewards."""
    if len(z) < 2:
        raise ValueError("second differences need a rationale of length >= 2")
    return float(np.max(np.abs(second_differences(prefix_logrewards(model, x, y, z, reward_temperature)))))
