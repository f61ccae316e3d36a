"""Explore / filter / update training loop with annealed schedules."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, NumericalError, VersionError
from .objective import filter_candidates, delta_schedule, isubtb_loss, rgfn_step_loss, FilterDecision
from .reward import RewardTrace, compute_trace
from .sampler import PolicyParams, Trajectory, apply_gradient, make_trajectory, params_from_dict, \
    params_to_dict, sample_rationale
from .toyworld import Instance, JointModel, seed_stream

log = logging.getLogger(__name__)

METRICS_VERSION = 1
METRICS_HEADER = (
    "step", "instance", "accept_count", "fallback", "mean_logreward", "max_logreward",
    "ref_logreward", "loss", "grad_norm", "delta", "sample_temp", "reward_temp",
)


def linear_anneal(s: int, start: float, end: float, horizon: int) -> float:
    if horizon <= 0:
        return end
    return start + (end - start) * min(1.0, s / horizon)


@dataclass
class TrainConfig:
    m: int = 6
    lam: int = 8
    lr: float = 1e-2
    weight_decay: float = 0.05
    steps: int = 1000
    tau_max: float = 1.5
    tau_min: float = 1.0
    delta_horizon: int = 50
    sample_temp_max: float = 1.0
    sample_temp_min: float = 0.5
    reward_temp_start: float = 1.0
    reward_temp_end: float = 0.7
    reward_temp_horizon: int = 50
    min_rationale_len: int = 1
    max_rationale_len: int = 4
    rng_seed: int = 0
    fallback_on_empty: bool = True
    use_filter: bool = True
    length_decay: float | None = None
    checkpoint_every: int = 0
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        temps = (self.sample_temp_max, self.sample_temp_min, self.reward_temp_start, self.reward_temp_end)
        if not all(t > 0 for t in temps):
            raise DataError("all temperatures must be positive")
        if self.m < 1 or self.lam < 1:
            raise DataError("m and lam must be >= 1")
        if self.tau_max < self.tau_min:
            raise DataError("tau_max must be >= tau_min")
        if self.steps < 0:
            raise DataError("steps must be >= 0")
        if not 0 <= self.min_rationale_len <= self.max_rationale_len:
            raise DataError("need 0 <= min_rationale_len <= max_rationale_len")
        if self.length_decay is not None and not self.length_decay > 0:
            raise DataError("length_decay must be positive")
        if self.threads < 1:
            raise DataError("threads must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise DataError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise DataError(str(exc)) from exc

    def delta(self, s: int) -> float:
        return delta_schedule(s, self.tau_max, self.tau_min, self.delta_horizon)

    def sample_temperature(self, s: int) -> float:
        # annealed over the reward-temperature horizon
        return linear_anneal(s, self.sample_temp_max, self.sample_temp_min, self.reward_temp_horizon)

    def reward_temperature(self, s: int) -> float:
        return linear_anneal(s, self.reward_temp_start, self.reward_temp_end, self.reward_temp_horizon)


@dataclass(frozen=True)
class Candidate:
    trajectory: Trajectory
    trace: RewardTrace

    @property
    def logreward(self) -> float:
        return self.trace.final


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    instance: int
    accept_count: int
    fallback: bool
    mean_logreward: float
    max_logreward: float
    ref_logreward: float
    loss: float
    grad_norm: float
    delta: float
    sample_temp: float
    reward_temp: float

    def row(self) -> list[str]:
        return [repr(v) if isinstance(v, float) else str(int(v)) for v in
                (getattr(self, h) for h in METRICS_HEADER)]


def explore(params: PolicyParams, model: JointModel, instance_id: int, instance: Instance,
            config: TrainConfig, s: int, rng_seed) -> tuple[list[Candidate], Candidate]:
    """Sample ``m`` candidates at the step-``s`` temperature and score them.

    Returns the candidates and the identically scored reference rationale.
    """
    seeds = np.random.SeedSequence(rng_seed).spawn(config.m) if not isinstance(
        rng_seed, np.random.SeedSequence) else rng_seed.spawn(config.m)
    temp = config.sample_temperature(s)
    rtemp = config.reward_temperature(s)

    def one(seed) -> Candidate:
        traj = sample_rationale(params, instance_id, temp, config.max_rationale_len,
                                config.min_rationale_len, seed)
        return Candidate(traj, compute_trace(model, instance.x, instance.y, traj.tokens, config.lam, rtemp))

    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            cands = list(pool.map(one, seeds))
    else:
        cands = [one(sd) for sd in seeds]
    ref_traj = make_trajectory(params, instance_id, instance.z_ref, config.max_rationale_len, temp)
    ref = Candidate(ref_traj, compute_trace(model, instance.x, instance.y, instance.z_ref, config.lam, rtemp))
    return cands, ref


def _grad_norm(grads) -> float:
    return math.sqrt(math.fsum(float(np.dot(g, g)) for g in grads.values()))


def train_step(params: PolicyParams, model: JointModel, instances: Sequence[Instance],
               config: TrainConfig, s: int) -> tuple[MetricsRecord, dict]:
    """One explore/filter/update step at global step ``s``; mutates ``params``."""
    iid = s % len(instances)
    inst = instances[iid]
    cands, ref = explore(params, model, iid, inst, config, s, seed_stream(config.rng_seed, "train", s))
    rewards = [c.logreward for c in cands]
    if config.use_filter:
        decisions = filter_candidates(rewards, ref.logreward, s, config.tau_max, config.tau_min,
                                      config.delta_horizon)
    else:
        decisions = [FilterDecision(r, ref.logreward, config.delta(s), True) for r in rewards]
    loss, grads, accepted = rgfn_step_loss(params, [(c.trajectory, c.trace) for c in cands],
                                           decisions, config.length_decay)
    fallback = False
    if accepted == 0 and config.fallback_on_empty:
        loss, grads = isubtb_loss(params, ref.trajectory, ref.trace, config.length_decay)
        fallback = True
    state = {"step": s, "instance": iid, "loss": loss,
             "candidates": [list(c.trajectory.tokens) for c in cands],
             "accepted": [d.accepted for d in decisions]}
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite loss at step {s}", state)
    gnorm = _grad_norm(grads)
    if grads:
        apply_gradient(params, grads, config.lr, config.weight_decay)
    rec = MetricsRecord(
        step=s, instance=iid, accept_count=accepted, fallback=fallback,
        mean_logreward=math.fsum(rewards) / len(rewards), max_logreward=max(rewards),
        ref_logreward=ref.logreward, loss=loss, grad_norm=gnorm, delta=config.delta(s),
        sample_temp=config.sample_temperature(s), reward_temp=config.reward_temperature(s),
    )
    return rec, state


def train(model: JointModel, instances: Sequence[Instance], config: TrainConfig,
          params: PolicyParams | None = None, start_step: int = 0, out_dir=None,
          callback: Callable[[int, PolicyParams, MetricsRecord], bool | None] | None = None,
          ) -> tuple[PolicyParams, list[MetricsRecord]]:
    """Run steps ``start_step .. config.steps - 1`` round-robin over instances.

    Randomness for step ``s`` comes only from ``(rng_seed, s)``, so a run
    resumed from a checkpoint reproduces the uninterrupted one.  ``callback``
    may return True to stop early.  When ``out_dir`` is given, checkpoints are
    written every ``checkpoint_every`` steps and a state dump on numeric failure.
    """
    if not instances:
        raise DataError("no training instances")
    params = params if params is not None else PolicyParams(model.vocab_size)
    if params.vocab_size != model.vocab_size:
        raise DataError("checkpoint vocabulary does not match the world")
    out = Path(out_dir) if out_dir is not None else None
    records: list[MetricsRecord] = []
    for s in range(start_step, config.steps):
        try:
            rec, _ = train_step(params, model, instances, config, s)
        except NumericalError as exc:
            if out is not None:
                dump = {"error": str(exc.args[0]), "state": exc.args[1] if len(exc.args) > 1 else None,
                        "params": params_to_dict(params, s)}
                (out / f"failure_step{s}.json").write_text(json.dumps(dump))
            raise
        records.append(rec)
        if out is not None and config.checkpoint_every and (s + 1) % config.checkpoint_every == 0:
            save_checkpoint(params, s + 1, out / f"checkpoint_{s + 1:07d}.json")
        if callback is not None and callback(s, params, rec):
            break
    return params, records


def save_checkpoint(params: PolicyParams, step: int, path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params, step)) + "\n")


def load_checkpoint(path) -> tuple[PolicyParams, int]:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"checkpoint {path} is not valid JSON") from exc
    if not isinstance(d, dict):
        raise DataError("checkpoint must be a JSON object")
    if d.get("version") != 1:
        raise VersionError(f"unsupported checkpoint version {d.get('version')!r}")
    return params_from_dict(d)


def metrics_csv(records: Sequence[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)
