"""Sub-trajectory balance losses, the reference filter and the aggregate loss.

With a single parent per state the backward policy is identically 1, so the
balance residual of the sub-trajectory ``(i, j)`` is

    R_i + sum_{k=i+1..j} log q(z_k | z_<k) + log q(T | z_<=j) - R_j - log q(T | z_<=i)

with every ``R`` already a log-reward.  Writing
``C_t = sum_{k<=t} log q(z_k | z_<k) + log q(T | z_<=t) - R_t`` the residual is
``C_j - C_i``, which makes the analytic gradient linear in ``n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import NumericalError
from .reward import RewardTrace
from .sampler import Key, PolicyParams, Trajectory

Gradient = dict[Key, np.ndarray]


@dataclass(frozen=True)
class SubTrajectoryResidual:
    i: int
    j: int
    residual: float


@dataclass(frozen=True)
class FilterDecision:
    logreward: float
    ref_logreward: float
    delta: float
    accepted: bool


def _rows(params: PolicyParams, traj: Trajectory) -> list[np.ndarray]:
    iid, z = traj.instance_id, traj.tokens
    return [params.base_logprobs((iid, z[:t])) for t in range(len(z) + 1)]


def _cumulative(params: PolicyParams, traj: Trajectory, logrewards: Sequence[float]):
    z = traj.tokens
    n = len(z)
    if len(logrewards) != n + 1:
        raise ValueError(f"need {n + 1} prefix log-rewards, got {len(logrewards)}")
    rows = _rows(params, traj)
    term = params.vocab_size
    C = np.empty(n + 1)
    acc = 0.0
    for t in range(n + 1):
        if t > 0:
            acc += rows[t - 1][z[t - 1]]
        stop = 0.0 if t == traj.max_len else rows[t][term]
        C[t] = acc + stop - logrewards[t]
    return C, rows


def subtb_residuals(params: PolicyParams, trajectory: Trajectory,
                    per_prefix_logreward: Sequence[float]) -> list[SubTrajectoryResidual]:
    """Every ``(i, j)`` residual, evaluated term by term."""
    z = trajectory.tokens
    n = len(z)
    if len(per_prefix_logreward) != n + 1:
        raise ValueError(f"need {n + 1} prefix log-rewards, got {len(per_prefix_logreward)}")
    rows = _rows(params, trajectory)
    term = params.vocab_size

    def stop(t):
        return 0.0 if t == trajectory.max_len else float(rows[t][term])

    out = []
    for i in range(n + 1):
        for j in range(i + 1, n + 1):
            forward = math.fsum(float(rows[k - 1][z[k - 1]]) for k in range(i + 1, j + 1))
            r = per_prefix_logreward[i] + forward + stop(j) - per_prefix_logreward[j] - stop(i)
            out.append(SubTrajectoryResidual(i, j, r))
    return out


def _pair_weights(n: int, length_decay: float | None) -> np.ndarray:
    idx = np.arange(n + 1)
    gap = np.abs(idx[:, None] - idx[None, :])
    w = np.ones((n + 1, n + 1)) if length_decay is None else np.power(float(length_decay), gap)
    np.fill_diagonal(w, 0.0)
    return w


def subtb_loss(params: PolicyParams, trajectory: Trajectory, per_prefix_logreward: Sequence[float],
               length_decay: float | None = None) -> tuple[float, Gradient]:
    """Sum of squared residuals over all pairs, with its gradient in the logits.

    ``length_decay`` weights a pair by ``length_decay ** (j - i)``; ``None``
    keeps the plain unweighted sum.
    """
    C, rows = _cumulative(params, trajectory, per_prefix_logreward)
    if not np.all(np.isfinite(C)):
        raise NumericalError(f"non-finite flow terms for trajectory {trajectory.tokens}")
    n = len(C) - 1
    z = trajectory.tokens
    if n == 0:
        return 0.0, {}
    if length_decay is None:
        c = C.tolist()
        loss = math.fsum((c[j] - c[i]) ** 2 for i in range(n + 1) for j in range(i + 1, n + 1))
        total = math.fsum(c)
        # dL/dC_t = 2 sum_i (C_t - C_i)
        g = [2.0 * ((n + 1) * ct - total) for ct in c]
    else:
        diff = C[None, :] - C[:, None]
        w = _pair_weights(n, length_decay)
        iu = np.triu_indices(n + 1, k=1)
        loss = math.fsum((w[iu] * diff[iu] ** 2).tolist())
        g = (2.0 * (w * (-diff)).sum(axis=1)).tolist()
    # dL/d log q(z_k) accumulates g_t for every t >= k
    G = [0.0] * (n + 2)
    for t in range(n, -1, -1):
        G[t] = G[t + 1] + g[t]
    term = params.vocab_size
    grads: Gradient = {}
    for t in range(n + 1):
        probs = np.exp(rows[t])
        gl = np.zeros(params.n_actions)
        coef = 0.0
        if t < n:
            gl[z[t]] += G[t + 1]
            coef += G[t + 1]
        if t != trajectory.max_len:
            gl[term] += g[t]
            coef += g[t]
        if coef == 0.0 and not gl.any():
            continue
        gl -= coef * probs
        grads[(trajectory.instance_id, z[:t])] = gl
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite loss or gradient for trajectory {trajectory.tokens}")
    return loss, grads


def isubtb_loss(params: PolicyParams, trajectory: Trajectory, trace: RewardTrace,
                length_decay: float | None = None) -> tuple[float, Gradient]:
    """Sub-trajectory balance with the interpolated prefix rewards of ``trace``."""
    if trace.n != len(trajectory.tokens):
        raise ValueError(f"trace covers {trace.n} tokens but the trajectory has {len(trajectory.tokens)}")
    return subtb_loss(params, trajectory, trace.interp_logreward, length_decay)


def delta_schedule(s: int, tau_max: float = 1.5, tau_min: float = 1.0, horizon: int = 50) -> float:
    """Annealed acceptance coefficient: tau_max down to tau_min, then flat."""
    if horizon <= 0:
        return tau_min
    return tau_max - (tau_max - tau_min) * min(1.0, s / horizon)


def filter_candidates(candidate_logrewards: Sequence[float], ref_logreward: float, s: int,
                      tau_max: float = 1.5, tau_min: float = 1.0,
                      horizon: int = 50) -> list[FilterDecision]:
    """Keep a candidate iff its log-reward beats ``delta_s`` times the reference's."""
    if not ref_logreward < 0:
        raise ValueError(f"reference log-reward must be negative, got {ref_logreward}")
    delta = delta_schedule(s, tau_max, tau_min, horizon)
    threshold = delta * ref_logreward
    return [FilterDecision(float(r), float(ref_logreward), delta, bool(r > threshold))
            for r in candidate_logrewards]


def merge_gradients(parts: Sequence[Mapping[Key, np.ndarray]]) -> Gradient:
    """Exactly rounded elementwise sum, so the result ignores summation order."""
    collected: dict[Key, list[np.ndarray]] = {}
    for part in parts:
        for k, v in part.items():
            collected.setdefault(k, []).append(v)
    out: Gradient = {}
    for k in sorted(collected):
        vs = collected[k]
        out[k] = vs[0].copy() if len(vs) == 1 else np.array(
            [math.fsum(col) for col in zip(*(v.tolist() for v in vs))])
    return out


def rgfn_step_loss(params: PolicyParams, candidates: Sequence[tuple[Trajectory, RewardTrace]],
                   decisions: Sequence[FilterDecision],
                   length_decay: float | None = None) -> tuple[float, Gradient, int]:
    """Summed interpolated balance loss over the accepted candidates only."""
    if len(candidates) != len(decisions):
        raise ValueError("one decision per candidate is required")
    losses, grads = [], []
    for (traj, trace), dec in zip(candidates, decisions):
        if not dec.accepted:
            continue
        loss, g = isubtb_loss(params, traj, trace, length_decay)
        losses.append(loss)
        grads.append(g)
    return math.fsum(losses), merge_gradients(grads), len(losses)
