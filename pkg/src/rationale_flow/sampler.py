"""Amortized rationale sampler: a full-prefix tabular softmax policy.

Logits are keyed by ``(instance_id, prefix)`` so the policy can express any
distribution over bounded-length rationales.  Each prefix has ``V + 1``
actions: the ``V`` tokens and the terminal.  A prefix of length ``max_len``
has no choice left, so its termination is forced and carries log-probability
zero.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import log_softmax

from .errors import DataError, NumericalError, VersionError
from .toyworld import Tokens, as_rng

CHECKPOINT_VERSION = 1

Key = tuple[int, Tokens]


@dataclass
class _Slot:
    logits: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0


class PolicyParams:
    """Lazily initialized logit table plus AdamW moments for every entry."""

    def __init__(self, vocab_size: int):
        self.vocab_size = int(vocab_size)
        self.slots: dict[Key, _Slot] = {}
        self._logp_cache: dict[Key, np.ndarray] = {}
        self._uniform = np.full(self.vocab_size + 1, -math.log(self.vocab_size + 1))

    @property
    def n_actions(self) -> int:
        return self.vocab_size + 1

    def logits(self, instance_id: int, prefix: Sequence[int]) -> np.ndarray:
        slot = self.slots.get((instance_id, tuple(prefix)))
        if slot is None:
            return np.zeros(self.n_actions)
        return slot.logits.copy()

    def set_logits(self, instance_id: int, prefix: Sequence[int], logits) -> None:
        arr = np.array(logits, dtype=np.float64)
        if arr.shape != (self.n_actions,) or not np.all(np.isfinite(arr)):
            raise ValueError("logits must be a finite vector of length V+1")
        key = (int(instance_id), tuple(prefix))
        slot = self.slots.get(key)
        if slot is None:
            self.slots[key] = _Slot(arr, np.zeros_like(arr), np.zeros_like(arr))
        else:
            slot.logits = arr
        self._logp_cache.pop(key, None)

    def base_logprobs(self, key: Key) -> np.ndarray:
        """Temperature-1 log-softmax for ``key`` (cached; do not mutate)."""
        cached = self._logp_cache.get(key)
        if cached is not None:
            return cached
        slot = self.slots.get(key)
        if slot is None:
            return self._uniform
        out = log_softmax(slot.logits)
        self._logp_cache[key] = out
        return out

    def copy(self) -> "PolicyParams":
        new = PolicyParams(self.vocab_size)
        new.slots = {k: _Slot(s.logits.copy(), s.m.copy(), s.v.copy(), s.t) for k, s in self.slots.items()}
        return new

    def __eq__(self, other) -> bool:
        if not isinstance(other, PolicyParams) or other.vocab_size != self.vocab_size:
            return NotImplemented
        if self.slots.keys() != other.slots.keys():
            return False
        for k, a in self.slots.items():
            b = other.slots[k]
            if a.t != b.t or not all(np.array_equal(p, q) for p, q in
                                     ((a.logits, b.logits), (a.m, b.m), (a.v, b.v))):
                return False
        return True


def action_logprobs(params: PolicyParams, instance_id: int, prefix: Sequence[int],
                    temperature: float = 1.0) -> np.ndarray:
    """log-softmax(logits / temperature) over the V tokens and the terminal."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    key = (instance_id, tuple(prefix))
    if temperature == 1.0:
        return params.base_logprobs(key).copy()
    return log_softmax(params.logits(instance_id, prefix) / temperature)


@dataclass(frozen=True)
class Trajectory:
    instance_id: int
    tokens: Tokens
    per_step_logprob: tuple[float, ...]
    terminated: bool
    sampling_temperature: float
    max_len: int

    def __post_init__(self):
        if len(self.per_step_logprob) != len(self.tokens) + 1:
            raise ValueError("per_step_logprob must have one entry per token plus the terminal")

    @property
    def forced(self) -> bool:
        """Termination was imposed by the length cap rather than chosen."""
        return len(self.tokens) == self.max_len


def step_logprobs(params: PolicyParams, instance_id: int, tokens: Sequence[int],
                  max_len: int) -> tuple[float, ...]:
    """Temperature-1 log-probabilities of each token and the closing terminal."""
    tokens = tuple(tokens)
    out = []
    for t, tok in enumerate(tokens):
        out.append(float(params.base_logprobs((instance_id, tokens[:t]))[tok]))
    if len(tokens) == max_len:
        out.append(0.0)
    else:
        out.append(float(params.base_logprobs((instance_id, tokens))[params.vocab_size]))
    return tuple(out)


def make_trajectory(params: PolicyParams, instance_id: int, tokens: Sequence[int], max_len: int,
                    sampling_temperature: float = 1.0) -> Trajectory:
    """Wrap an externally chosen rationale (e.g. the reference) as a Trajectory."""
    tokens = tuple(int(t) for t in tokens)
    if len(tokens) > max_len:
        raise ValueError(f"rationale of length {len(tokens)} exceeds max_len {max_len}")
    return Trajectory(instance_id, tokens, step_logprobs(params, instance_id, tokens, max_len),
                      terminated=len(tokens) < max_len, sampling_temperature=sampling_temperature,
                      max_len=max_len)


def sample_rationale(params: PolicyParams, instance_id: int, temperature: float, max_len: int,
                     min_len: int, rng_seed) -> Trajectory:
    """Ancestral sampling from the tempered policy.

    The terminal is masked (and the row renormalized) before ``min_len`` tokens
    and forced at ``max_len``.  The recorded log-probabilities are the
    temperature-1, unmasked ones: the masked tempered row only drives sampling.
    """
    if not 0 <= min_len <= max_len:
        raise ValueError(f"need 0 <= min_len <= max_len, got {min_len}, {max_len}")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    rng = as_rng(rng_seed)
    terminal = params.vocab_size
    tokens: list[int] = []
    logps: list[float] = []
    terminated = False
    while len(tokens) < max_len:
        base = params.base_logprobs((instance_id, tuple(tokens))).tolist()
        top = max(base)
        weights = [math.exp((b - top) / temperature) for b in base]
        if len(tokens) < min_len:
            weights[terminal] = 0.0
        u = rng.random() * math.fsum(weights)
        a, acc = 0, weights[0]
        while acc <= u and a < terminal:
            a += 1
            acc += weights[a]
        if weights[a] == 0.0:
            # u landed on the masked terminal through rounding
            a = max(i for i, w in enumerate(weights) if w > 0)
        logps.append(base[a])
        if a == terminal:
            terminated = True
            break
        tokens.append(a)
    if not terminated:
        logps.append(0.0)
    return Trajectory(instance_id, tuple(tokens), tuple(logps), terminated, float(temperature), max_len)


def trajectory_logprob(params: PolicyParams, trajectory: Trajectory) -> float:
    """log q(Z) under the current parameters, recomputed from scratch."""
    return math.fsum(step_logprobs(params, trajectory.instance_id, trajectory.tokens, trajectory.max_len))


def apply_gradient(params: PolicyParams, gradient: Mapping[Key, np.ndarray], lr: float,
                   weight_decay: float = 0.0, betas: tuple[float, float] = (0.9, 0.999),
                   eps: float = 1e-8) -> PolicyParams:
    """AdamW step on every entry present in ``gradient``; others are untouched.

    Bias correction uses each entry's own update count, so an entry first
    touched late in training still takes a full-size first step.
    """
    b1, b2 = betas
    for key, g in gradient.items():
        g = np.asarray(g, dtype=np.float64)
        if g.shape != (params.n_actions,):
            raise ValueError(f"gradient for {key} has shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for entry {key}")
    for key, g in gradient.items():
        slot = params.slots.get(key)
        if slot is None:
            z = np.zeros(params.n_actions)
            slot = params.slots[key] = _Slot(z.copy(), z.copy(), z.copy())
        slot.t += 1
        slot.m = b1 * slot.m + (1 - b1) * g
        slot.v = b2 * slot.v + (1 - b2) * g * g
        m_hat = slot.m / (1 - b1**slot.t)
        v_hat = slot.v / (1 - b2**slot.t)
        slot.logits = slot.logits * (1 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
        params._logp_cache.pop(key, None)
    return params


def params_from_distribution(target: Mapping[Tokens, float], instance_id: int, vocab_size: int,
                             max_len: int, floor: float = -1e3,
                             params: PolicyParams | None = None) -> PolicyParams:
    """Logits equal to the conditional log-probabilities of ``target``.

    ``target`` is a distribution over rationales of length ``<= max_len``;
    the resulting policy (with forced termination at ``max_len``) reproduces it.
    """
    params = params if params is not None else PolicyParams(vocab_size)
    mass: dict[Tokens, float] = {}
    for z, p in target.items():
        for t in range(len(z) + 1):
            mass[z[:t]] = mass.get(z[:t], 0.0) + p
    with np.errstate(divide="ignore"):
        for prefix, total in mass.items():
            if len(prefix) >= max_len or total <= 0:
                continue
            probs = np.array([mass.get(prefix + (a,), 0.0) for a in range(vocab_size)]
                             + [target.get(prefix, 0.0)])
            logits = np.maximum(np.log(probs / total), floor)
            params.set_logits(instance_id, prefix, logits)
    return params


# -- checkpoint format ------------------------------------------------------

def _key_str(key: Key) -> str:
    iid, prefix = key
    return f"{iid}|{'.'.join(map(str, prefix))}"


def _parse_key(s: str) -> Key:
    try:
        iid, rest = s.split("|")
        return int(iid), tuple(int(t) for t in rest.split(".")) if rest else ()
    except ValueError:
        raise DataError(f"bad checkpoint key {s!r}") from None


def params_to_dict(params: PolicyParams, step: int) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "step": int(step),
        "vocab_size": params.vocab_size,
        "entries": {
            _key_str(k): {"logits": s.logits.tolist(), "m": s.m.tolist(), "v": s.v.tolist(), "t": s.t}
            for k, s in sorted(params.slots.items())
        },
    }


def params_from_dict(d: dict) -> tuple[PolicyParams, int]:
    if not isinstance(d, dict) or d.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {d.get('version') if isinstance(d, dict) else None!r}")
    try:
        params = PolicyParams(int(d["vocab_size"]))
        for ks, e in d["entries"].items():
            arrays = [np.array(e[f], dtype=np.float64) for f in ("logits", "m", "v")]
            if any(a.shape != (params.n_actions,) for a in arrays):
                raise DataError(f"entry {ks} has the wrong width")
            if not all(np.all(np.isfinite(a)) for a in arrays):
                raise DataError(f"entry {ks} is not finite")
            params.slots[_parse_key(ks)] = _Slot(*arrays, t=int(e["t"]))
        return params, int(d["step"])
    except (KeyError, TypeError) as exc:
        raise DataError(f"corrupt checkpoint: {exc}") from exc


def save_params(params: PolicyParams, step: int, path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params, step)) + "\n")


def load_params(path) -> tuple[PolicyParams, int]:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    return params_from_dict(d)
