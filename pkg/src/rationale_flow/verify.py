"""Independent oracles: exact distributions, distances, flow residuals,
interpolation error bounds and finite-difference gradient checks."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from .inference import InferenceConfig, bin_rank
from .objective import isubtb_loss, subtb_residuals
from .reward import RewardTrace, compute_trace, prefix_logrewards
from .sampler import PolicyParams, Trajectory, action_logprobs, sample_rationale, step_logprobs
from .toyworld import (DEFAULT_ENUMERATION_CAP, Instance, JointModel, Tokens, WorldSpec, all_contexts,
                       as_rng, conditional_logprob, enumerate_rationales, greedy_rationale, log_joint,
                       log_prefix, make_world)


@dataclass(frozen=True)
class DistanceReport:
    tv: float
    kl: float
    support_size: int
    sample_count: int = 0


def policy_distribution(params: PolicyParams, instance_id: int, max_len: int, mode: str = "exact",
                        n: int = 0, rng_seed=None,
                        cap: int = DEFAULT_ENUMERATION_CAP) -> dict[Tokens, float]:
    """Distribution over complete rationales under the temperature-1 policy.

    ``exact`` enumerates every rationale up to ``max_len`` (termination forced
    there); ``sampled`` returns frequencies of ``n`` ancestral samples.
    """
    if mode == "exact":
        out = {}
        for z in enumerate_rationales(params.vocab_size, max_len, 0, cap):
            out[z] = math.exp(math.fsum(step_logprobs(params, instance_id, z, max_len)))
        return out
    if mode == "sampled":
        if n < 1:
            raise ValueError("sampled mode needs n >= 1")
        rng = as_rng(rng_seed)
        counts = Counter(sample_rationale(params, instance_id, 1.0, max_len, 0, rng).tokens
                         for _ in range(n))
        return {z: c / n for z, c in counts.items()}
    raise ValueError(f"unknown mode {mode!r}")


def distance(target: Mapping, learned: Mapping, sample_count: int = 0) -> DistanceReport:
    """Total variation and KL(target || learned) over the union support."""
    support = set(target) | set(learned)
    tv = 0.5 * math.fsum(abs(target.get(k, 0.0) - learned.get(k, 0.0)) for k in support)
    terms = []
    for k, p in target.items():
        if p <= 0:
            continue
        q = learned.get(k, 0.0)
        if q <= 0:
            terms = [math.inf]
            break
        terms.append(p * math.log(p / q))
    kl = math.inf if terms and terms[0] == math.inf else max(0.0, math.fsum(terms))
    return DistanceReport(tv=min(1.0, tv), kl=kl, support_size=len(support), sample_count=sample_count)


def flow_residual_report(params: PolicyParams, trajectory: Trajectory,
                         exact_logrewards: Sequence[float]) -> float:
    """Largest absolute balance residual using exact (every-index) rewards."""
    res = subtb_residuals(params, trajectory, exact_logrewards)
    return max((abs(r.residual) for r in res), default=0.0)


@dataclass(frozen=True)
class Prop1Result:
    max_error: float
    uniform_bound: float
    curvature: float
    errors: tuple[float, ...]
    index_bounds: tuple[float, ...]
    passes: tuple[bool, ...]

    @property
    def ok(self) -> bool:
        return all(self.passes)


def interpolation_check(exact: Sequence[float], lam: int, denominator: float = 8.0) -> Prop1Result:
    """Compare interpolated against exact prefix rewards, index by index.

    Index ``a + i`` inside a segment ``[a, b]`` of width ``w`` is checked against
    ``M * i * (w - i) / denominator`` where ``M`` is the largest absolute second
    difference of ``exact``.
    """
    from .reward import anchor_indices, interpolate, second_differences

    n = len(exact) - 1
    anchors = anchor_indices(n, lam)
    interp = interpolate(anchors, [exact[a] for a in anchors])
    M = float(np.max(np.abs(second_differences(exact)))) if n >= 2 else 0.0
    errors, bounds = [], []
    for a, b in zip(anchors, anchors[1:]):
        w = b - a
        for i in range(1, w):
            errors.append(abs(interp[a + i] - exact[a + i]))
            bounds.append(M * i * (w - i) / denominator)
    passes = tuple(e <= bd for e, bd in zip(errors, bounds))
    return Prop1Result(max(errors, default=0.0), M * lam**2 / 8, M, tuple(errors), tuple(bounds), passes)


def prop1_check(model: JointModel, x, y, z, lam: int, reward_temperature: float = 1.0,
                denominator: float = 8.0) -> Prop1Result:
    return interpolation_check(prefix_logrewards(model, x, y, tuple(z), reward_temperature), lam, denominator)


def numeric_gradient(params: PolicyParams, trajectory: Trajectory, trace: RewardTrace, eps: float = 1e-6,
                     keys=None, length_decay: float | None = None) -> dict:
    """Central differences of the interpolated balance loss for every touched logit."""
    _, analytic = isubtb_loss(params, trajectory, trace, length_decay)
    keys = list(analytic) if keys is None else keys
    out = {}
    for key in keys:
        iid, prefix = key
        base = params.logits(iid, prefix)
        g = np.zeros_like(base)
        for a in range(len(base)):
            for sign in (+1, -1):
                bumped = base.copy()
                bumped[a] += sign * eps
                params.set_logits(iid, prefix, bumped)
                loss, _ = isubtb_loss(params, trajectory, trace, length_decay)
                g[a] += sign * loss
            g[a] /= 2 * eps
        params.set_logits(iid, prefix, base)
        out[key] = g
    return out


def gradcheck(params: PolicyParams, trajectory: Trajectory, trace: RewardTrace, eps: float = 1e-6,
              atol: float = 1e-8, length_decay: float | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error is measured per logit row, ``max|a - n| / max(max|a|, max|n|, atol)``:
    entries of one softmax row share a scale, and an entry that is exactly
    zero analytically can only be matched to within rounding noise.
    """
    _, analytic = isubtb_loss(params, trajectory, trace, length_decay)
    numeric = numeric_gradient(params, trajectory, trace, eps, list(analytic), length_decay)
    worst = 0.0
    for key, a in analytic.items():
        n = numeric[key]
        scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))), atol)
        worst = max(worst, float(np.max(np.abs(a - n))) / scale)
    return worst


def trace_for(model: JointModel, x, y, trajectory: Trajectory, lam: int,
              reward_temperature: float = 1.0) -> RewardTrace:
    return compute_trace(model, x, y, trajectory.tokens, lam, reward_temperature)


# -- BiN enumeration oracle -------------------------------------------------

def sampling_distribution(params: PolicyParams, instance_id: int, temperature: float, max_len: int,
                          min_len: int = 0, cap: int = DEFAULT_ENUMERATION_CAP) -> dict[Tokens, float]:
    """Exact law of ``sample_rationale``: tempered rows, terminal masked below ``min_len``."""
    term = params.vocab_size
    out = {}
    for z in enumerate_rationales(params.vocab_size, max_len, min_len, cap):
        logp = 0.0
        for t in range(len(z) + 1):
            if t == max_len:
                break
            row = action_logprobs(params, instance_id, z[:t], temperature)
            if t < min_len:
                row = row.copy()
                row[term] = -np.inf
                row = row - logsumexp(row)
            logp += row[z[t]] if t < len(z) else row[term]
        out[z] = math.exp(logp)
    return out


def answer_distribution(model: JointModel, prefix: Sequence[int], max_len: int,
                        min_len: int = 0) -> dict[Tokens, float]:
    """Exact law of ``sample_continuation(model, prefix, max_len, min_len=min_len)``."""
    term = model.terminal
    out = {}
    for y in enumerate_rationales(model.vocab_size, max_len, min_len):
        lp = 0.0
        hist = list(prefix)
        for t in range(len(y) + 1):
            if t == max_len:
                break
            row = model.log_row(hist)
            if t < min_len:
                row = row.copy()
                row[term] = -np.inf
                row = row - logsumexp(row)
            lp += row[y[t]] if t < len(y) else row[term]
            if t < len(y):
                hist.append(y[t])
        out[y] = math.exp(lp)
    return out


def bin_limit_scores(params: PolicyParams, model: JointModel, instance_id: int, x: Sequence[int],
                     config: InferenceConfig) -> dict[Tokens, float]:
    """Large-N limit of the grouped BiN score for every reachable answer.

    A group's score is the mean of ``exp(log P(Z <T> Y | X)) / |Z <T> Y|`` over
    the candidates sharing answer ``Y``, which converges to the conditional
    expectation of that quantity given ``Y`` under the sampling law.  Every
    ``(Z, Y)`` pair is enumerated.
    """
    x = tuple(x)
    log_px = log_prefix(model, x)
    q = sampling_distribution(params, instance_id, config.temperature, config.max_rationale_len,
                              config.min_rationale_len)
    num: dict[Tokens, list[float]] = {}
    den: dict[Tokens, list[float]] = {}
    for z, wz in q.items():
        if wz == 0.0:
            continue
        for y, py in answer_distribution(model, (*x, *z, model.terminal), config.answer_max_len,
                                           config.answer_min_len).items():
            w = wz * py
            s = math.exp(log_joint(model, x, z, y) - log_px) / (len(z) + 1 + len(y))
            num.setdefault(y, []).append(w * s)
            den.setdefault(y, []).append(w)
    return {y: math.fsum(num[y]) / math.fsum(den[y]) for y in num if math.fsum(den[y]) > 0}


def bin_oracle_answer(params: PolicyParams, model: JointModel, instance_id: int, x: Sequence[int],
                      config: InferenceConfig) -> Tokens:
    scores = bin_limit_scores(params, model, instance_id, x, config)
    return min(scores, key=lambda y: (-scores[y], y))


def bin_match_rate(params: PolicyParams, model: JointModel, instance_id: int, x: Sequence[int],
                   config: InferenceConfig, trials: int, seed_offset: int = 0) -> float:
    """Fraction of seeded BiN runs whose selection equals the enumerated argmax."""
    target = bin_oracle_answer(params, model, instance_id, x, config)
    hits = 0
    for k in range(trials):
        cfg = replace(config, rng_seed=seed_offset + k)
        hits += bin_rank(params, model, instance_id, x, cfg)[0].answer == target
    return hits / trials


# -- constructed worlds -----------------------------------------------------

def adversarial_world(seed: int, max_len: int = 3) -> tuple[JointModel, list[Instance], PolicyParams]:
    """A world whose greedy reference hides the posterior mass, plus a bad start.

    The sampler starts concentrated on a decoy first token ``d`` followed by
    an immediate stop, and the answer is made nearly impossible after ``d <T>``,
    so the initial samples carry very low reward.
    """
    spec = WorldSpec(vocab_size=3, order=2, n_instances=1, x_len=(2, 3), y_len=(1, 2),
                     max_rationale_len=max_len, concentration=1.0)
    base, inst = make_world(spec, np.random.default_rng(seed))
    x, y, zr = inst[0].x, inst[0].y, inst[0].z_ref
    V = base.vocab_size
    d = (zr[0] + 1) % V if zr else 0
    tables = {c: r.copy() for c, r in base.tables.items()}
    row = tables[(d, base.terminal)]
    row[y[0]] = 1e-4
    tables[(d, base.terminal)] = row / row.sum()
    model = JointModel(V, base.order, tables)
    instances = [Instance(x, y, greedy_rationale(model, x, 1, max_len))]
    params = PolicyParams(V)
    start = np.zeros(V + 1)
    start[d] = 4.0
    params.set_logits(0, (), start)
    stop = np.zeros(V + 1)
    stop[V] = 4.0
    params.set_logits(0, (d,), stop)
    return model, instances, params


def affine_world(vocab_size: int = 3, order: int = 1,
                 rationale_len: int = 24) -> tuple[JointModel, Tokens, Tokens, Tokens]:
    """World where the rationale ``0 0 0 ...`` adds a constant log-prob per token.

    Every context ending in token 0 shares one row, so the prefix log-reward
    is affine in the prefix length.  Each scored entry is ``exp(-k/2)`` so
    its log is a short dyadic number and all the sums involved are exact;
    the interpolation error is then exactly zero, not merely tiny.
    Returns ``(model, x, z, y)``.
    """
    V = vocab_size
    if V < 3:
        raise ValueError("affine_world needs vocab_size >= 3")
    used = {0: -0.5, V: -2.0}          # after token 0: continue, or stop
    tables = {}
    for ctx in all_contexts(V, order):
        last = ctx[-1]
        if last == 0:
            fixed = used
        elif last == V:
            fixed = {2: -1.0}          # answer token after the terminal
        elif last == V + 1:
            fixed = {1: -1.0}          # first question token
        else:
            fixed = {0: -1.0}          # question token 1 -> 0
        row = np.zeros(V + 1)
        for sym, lp in fixed.items():
            row[sym] = math.exp(lp)
        free = [a for a in range(V + 1) if a not in fixed]
        row[free] = (1.0 - math.fsum(row)) / len(free)
        tables[ctx] = row
    model = JointModel(V, order, tables)
    return model, (1, 0), (0,) * rationale_len, (2,)


def point_mass_world() -> tuple[JointModel, list[Instance]]:
    """After ``x = (0,)``: token 1, then the terminal, then answer ``(0,)``, each
    with probability ``1 - 2e-6``, so the posterior is essentially ``Z = (1,)``."""
    V = 2

    def near(sym, eps=1e-6):
        row = np.full(V + 1, eps)
        row[sym] = 1 - V * eps
        return row

    rows = {c: np.full(V + 1, 1 / (V + 1)) for c in all_contexts(V, 1)}
    rows[(0,)], rows[(1,)], rows[(V,)] = near(1), near(V), near(0)
    model = JointModel(V, 1, rows)
    return model, [Instance((0,), (0,), greedy_rationale(model, (0,), 1, 2))]
