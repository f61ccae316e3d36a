"""Answer selection by marginalizing over sampled rationales (BiN) and the
best-of-N baseline that scores each candidate on its own (BoN)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .sampler import PolicyParams, sample_rationale
from .toyworld import JointModel, Tokens, log_joint, log_prefix, sample_continuation, seed_stream

REPORT_VERSION = 1


@dataclass
class InferenceConfig:
    n_rationales: int = 64
    temperature: float = 1.0
    answer_max_len: int = 2
    answer_min_len: int = 1
    rng_seed: int = 0
    max_rationale_len: int = 4
    min_rationale_len: int = 0

    def __post_init__(self):
        if self.n_rationales < 1:
            raise ValueError("n_rationales must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not 0 <= self.answer_min_len <= self.answer_max_len or self.answer_max_len < 1:
            raise ValueError("need 0 <= answer_min_len <= answer_max_len and answer_max_len >= 1")


@dataclass(frozen=True)
class Support:
    rationale: Tokens
    joint_logprob: float
    length: int

    @property
    def log_normalized(self) -> float:
        """log of the length-normalized likelihood, ``log(exp(joint) / length)``."""
        return self.joint_logprob - math.log(self.length)


@dataclass
class RankedAnswer:
    answer: Tokens
    score: float
    support: list[Support] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "answer": list(self.answer),
            "score": self.score,
            "support": [{"rationale": list(s.rationale), "joint_logprob": s.joint_logprob,
                         "length": s.length} for s in self.support],
        }


@dataclass(frozen=True)
class SampledPair:
    rationale: Tokens
    answer: Tokens
    joint_logprob: float
    length: int


def sample_pairs(params: PolicyParams, model: JointModel, instance_id: int, x: Sequence[int],
                 config: InferenceConfig) -> list[SampledPair]:
    """Draw N (rationale, answer) pairs and score ``log P(Z <T> Y | X)``.

    Pair ``i`` uses its own child seed, so the same seed always yields the
    same candidate set regardless of how the pairs are later ranked.
    """
    x = tuple(x)
    log_px = log_prefix(model, x)
    seeds = seed_stream(config.rng_seed, "rank").spawn(config.n_rationales)
    pairs = []
    for ss in seeds:
        rng = np.random.default_rng(ss)
        z = sample_rationale(params, instance_id, config.temperature, config.max_rationale_len,
                             config.min_rationale_len, rng).tokens
        y = sample_continuation(model, (*x, *z, model.terminal), config.answer_max_len, rng,
                                config.answer_min_len)
        pairs.append(SampledPair(z, y, log_joint(model, x, z, y) - log_px, len(z) + 1 + len(y)))
    return pairs


def _select(ranked: list[RankedAnswer]) -> RankedAnswer:
    return min(ranked, key=lambda r: (-r.score, r.answer))


def group_scores(pairs: Sequence[SampledPair]) -> list[RankedAnswer]:
    """Average the length-normalized likelihoods of candidates sharing an answer."""
    groups: dict[Tokens, list[Support]] = {}
    for p in pairs:
        groups.setdefault(p.answer, []).append(Support(p.rationale, p.joint_logprob, p.length))
    out = []
    for answer in sorted(groups):
        sup = groups[answer]
        logs = np.array([s.log_normalized for s in sup])
        out.append(RankedAnswer(answer, float(np.exp(logsumexp(logs) - math.log(len(sup)))), sup))
    return out


def bin_rank(params: PolicyParams, model: JointModel, instance_id: int, x: Sequence[int],
             config: InferenceConfig) -> tuple[RankedAnswer, list[RankedAnswer]]:
    ranked = group_scores(sample_pairs(params, model, instance_id, x, config))
    return _select(ranked), ranked


def bon_rank(params: PolicyParams, model: JointModel, instance_id: int, x: Sequence[int],
             config: InferenceConfig) -> tuple[RankedAnswer, list[RankedAnswer]]:
    """Each candidate scored by its length-normalized log-likelihood; no pooling."""
    ranked = [RankedAnswer(p.answer, p.joint_logprob / p.length,
                           [Support(p.rationale, p.joint_logprob, p.length)])
              for p in sample_pairs(params, model, instance_id, x, config)]
    return _select(ranked), ranked


def rank_report(mode: str, selected: RankedAnswer, ranked: list[RankedAnswer], instance_id: int,
                config: InferenceConfig) -> dict:
    return {
        "version": REPORT_VERSION,
        "mode": mode,
        "instance": instance_id,
        "n_rationales": config.n_rationales,
        "temperature": config.temperature,
        "answer_max_len": config.answer_max_len,
        "answer_min_len": config.answer_min_len,
        "rng_seed": config.rng_seed,
        "selected": selected.to_dict(),
        "candidates": [r.to_dict() for r in ranked],
    }
