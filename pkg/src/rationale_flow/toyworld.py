"""Enumerable ground-truth generative worlds.

A world is a tabular order-k autoregressive model over ``V`` tokens plus a
terminal symbol.  Scored sequences always have the shape ``X Z <T> Y``: the
question, the latent rationale, exactly one terminal, then the answer.
Contexts shorter than ``k`` are left-padded with a pad symbol that owns its
own table rows.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import DataError, EnumerationError

WORLD_VERSION = 1
ROW_FLOOR = 1e-6
DEFAULT_ENUMERATION_CAP = 10**7

Tokens = tuple[int, ...]


def as_rng(seed) -> np.random.Generator:
    """Accept an int, SeedSequence or Generator and return a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def seed_stream(seed: int, stream: str, *extra: int) -> np.random.SeedSequence:
    """Named, independent sub-stream of a master seed."""
    key = int.from_bytes(hashlib.sha256(stream.encode()).digest()[:4], "little")
    return np.random.SeedSequence([int(seed), key, *map(int, extra)])


class JointModel:
    """Order-k tabular model; ``tables`` maps context tuples to probability rows.

    Symbols are ``0..V-1`` for tokens, ``V`` for the terminal and ``V+1`` for
    the pad symbol (which only ever appears inside contexts).
    """

    def __init__(self, vocab_size: int, order: int, tables: dict[Tokens, Sequence[float]]):
        if vocab_size < 2:
            raise DataError(f"vocab_size must be >= 2, got {vocab_size}")
        if order < 1:
            raise DataError(f"order must be >= 1, got {order}")
        self.vocab_size = int(vocab_size)
        self.order = int(order)
        self.tables: dict[Tokens, np.ndarray] = {}
        self._log_tables: dict[Tokens, np.ndarray] = {}
        for ctx, row in tables.items():
            ctx = tuple(int(c) for c in ctx)
            arr = np.asarray(row, dtype=np.float64)
            if len(ctx) != self.order:
                raise DataError(f"context {ctx} has length {len(ctx)}, expected {self.order}")
            if arr.shape != (self.vocab_size + 1,):
                raise DataError(f"row for context {ctx} has shape {arr.shape}")
            if not np.all(arr > 0) or abs(math.fsum(arr) - 1.0) > 1e-12:
                raise DataError(f"row for context {ctx} is not a strictly positive distribution")
            arr.setflags(write=False)
            self.tables[ctx] = arr
            self._log_tables[ctx] = np.log(arr)
        missing = [c for c in all_contexts(self.vocab_size, self.order) if c not in self.tables]
        if missing:
            raise DataError(f"model is missing {len(missing)} context rows, e.g. {missing[0]}")

    @property
    def terminal(self) -> int:
        return self.vocab_size

    @property
    def pad(self) -> int:
        return self.vocab_size + 1

    def context(self, history: Sequence[int]) -> Tokens:
        tail = tuple(history[-self.order:]) if history else ()
        return (self.pad,) * (self.order - len(tail)) + tail

    def log_row(self, history: Sequence[int]) -> np.ndarray:
        ctx = self.context(history)
        try:
            return self._log_tables[ctx]
        except KeyError:
            raise DataError(f"unknown context {ctx}: corrupt model") from None

    def row(self, history: Sequence[int]) -> np.ndarray:
        return np.exp(self.log_row(history))


def all_contexts(vocab_size: int, order: int) -> list[Tokens]:
    """Every reachable context: a run of pads followed by tokens/terminal."""
    pad = vocab_size + 1
    symbols = range(vocab_size + 1)
    out = []
    for n_pad in range(order, -1, -1):
        for tail in itertools.product(symbols, repeat=order - n_pad):
            out.append((pad,) * n_pad + tail)
    return out


def conditional_logprob(model: JointModel, context: Sequence[int], symbol: int) -> float:
    if not 0 <= symbol <= model.vocab_size:
        raise ValueError(f"symbol {symbol} outside 0..{model.vocab_size}")
    return float(model.log_row(context)[symbol])


def scored_sequence(model: JointModel, x: Sequence[int], z: Sequence[int], y: Sequence[int]) -> list[int]:
    for part in (x, z, y):
        for tok in part:
            if not 0 <= tok < model.vocab_size:
                raise ValueError(f"token {tok} outside vocabulary of size {model.vocab_size}")
    return [*x, *z, model.terminal, *y]


def log_joint(model: JointModel, x: Sequence[int], z: Sequence[int], y: Sequence[int]) -> float:
    """log P(X Z <T> Y), summed left to right one symbol at a time."""
    seq = scored_sequence(model, x, z, y)
    total = 0.0
    for pos, sym in enumerate(seq):
        total += conditional_logprob(model, seq[:pos], sym)
    return total


def log_prefix(model: JointModel, seq: Sequence[int]) -> float:
    """log probability of an unterminated token prefix (e.g. the question alone)."""
    total = 0.0
    for pos, sym in enumerate(seq):
        total += conditional_logprob(model, seq[:pos], sym)
    return total


def enumerate_rationales(vocab_size: int, max_len: int, min_len: int = 0,
                         cap: int = DEFAULT_ENUMERATION_CAP) -> Iterable[Tokens]:
    count = sum(vocab_size**n for n in range(min_len, max_len + 1))
    if count > cap:
        raise EnumerationError(
            f"{count} rationales of length {min_len}..{max_len} exceed the enumeration cap {cap}")
    for n in range(min_len, max_len + 1):
        yield from itertools.product(range(vocab_size), repeat=n)


def exact_posterior(model: JointModel, x: Sequence[int], y: Sequence[int], max_len: int,
                    min_len: int = 0, temperature: float = 1.0,
                    cap: int = DEFAULT_ENUMERATION_CAP) -> dict[Tokens, float]:
    """P(Z | X, Y) over all rationales of length ``min_len..max_len``.

    ``temperature`` tempers the target as ``P(XZY)^(1/temperature)``; at 1 this
    is the plain posterior.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    zs = list(enumerate_rationales(model.vocab_size, max_len, min_len, cap))
    logw = np.array([log_joint(model, x, z, y) for z in zs]) / temperature
    probs = np.exp(logw - logsumexp(logw))
    return dict(zip(zs, probs.tolist()))


def sample_continuation(model: JointModel, prefix: Sequence[int], max_len: int, rng_seed,
                        min_len: int = 0) -> Tokens:
    """Ancestral sampling after ``prefix`` until the terminal or ``max_len`` tokens.

    The terminal is masked out (and the row renormalized) while fewer than
    ``min_len`` tokens have been produced.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    rng = as_rng(rng_seed)
    history = list(prefix)
    out: list[int] = []
    while len(out) < max_len:
        probs = model.row(history)
        if len(out) < min_len:
            probs = probs.copy()
            probs[model.terminal] = 0.0
        sym = _draw(probs, rng)
        if sym == model.terminal:
            break
        out.append(sym)
        history.append(sym)
    return tuple(out)


def _draw(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    # guards the u*total == total rounding case landing on a masked tail entry
    return min(idx, int(np.flatnonzero(probs)[-1]))


def greedy_rationale(model: JointModel, x: Sequence[int], min_len: int, max_len: int) -> Tokens:
    """Most-probable-next-symbol decoding after X, kept inside the length bounds."""
    history = list(x)
    out: list[int] = []
    while len(out) < max_len:
        logp = model.log_row(history)
        best = int(np.argmax(logp))
        if best == model.terminal:
            if len(out) >= min_len:
                break
            best = int(np.argmax(logp[: model.vocab_size]))
        out.append(best)
        history.append(best)
    return tuple(out)


@dataclass(frozen=True)
class Instance:
    x: Tokens
    y: Tokens
    z_ref: Tokens


@dataclass
class WorldSpec:
    """Recipe for a random world.  ``concentration=None`` gives uniform rows."""

    vocab_size: int = 3
    order: int = 1
    n_instances: int = 1
    x_len: tuple[int, int] = (2, 3)
    y_len: tuple[int, int] = (1, 2)
    min_rationale_len: int = 1
    max_rationale_len: int = 4
    ref_len: tuple[int, int] | None = None
    concentration: float | None = 1.0

    def __post_init__(self):
        self.x_len = tuple(self.x_len)
        self.y_len = tuple(self.y_len)
        if self.ref_len is not None:
            self.ref_len = tuple(self.ref_len)
        self.validate()

    def validate(self) -> None:
        def bounds(name, pair, lo):
            if len(pair) != 2 or not lo <= pair[0] <= pair[1]:
                raise DataError(f"{name} must be a pair lo <= hi with lo >= {lo}, got {pair}")

        if self.vocab_size < 2:
            raise DataError("vocab_size must be >= 2")
        if self.order < 1:
            raise DataError("order must be >= 1")
        if self.n_instances < 1:
            raise DataError("n_instances must be >= 1")
        bounds("x_len", self.x_len, 0)
        bounds("y_len", self.y_len, 0)
        bounds("rationale length", (self.min_rationale_len, self.max_rationale_len), 0)
        if self.ref_len is not None:
            bounds("ref_len", self.ref_len, self.min_rationale_len)
            if self.ref_len[1] > self.max_rationale_len:
                raise DataError("ref_len upper bound exceeds max_rationale_len")
        if self.concentration is not None and not self.concentration > 0:
            raise DataError("concentration must be positive (or null for uniform rows)")

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown world spec fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise DataError(str(exc)) from exc


def random_tables(vocab_size: int, order: int, concentration: float | None,
                  rng: np.random.Generator) -> dict[Tokens, np.ndarray]:
    tables = {}
    for ctx in all_contexts(vocab_size, order):
        if concentration is None:
            row = np.full(vocab_size + 1, 1.0 / (vocab_size + 1))
        else:
            row = rng.dirichlet(np.full(vocab_size + 1, concentration))
            row = np.maximum(row, ROW_FLOOR)
            row = row / row.sum()
        tables[ctx] = row
    return tables


def _sample_tokens(model: JointModel, history: list[int], length: int,
                   rng: np.random.Generator) -> Tokens:
    out = []
    for _ in range(length):
        probs = model.row(history)[: model.vocab_size]
        tok = _draw(probs, rng)
        out.append(tok)
        history = history + [tok]
    return tuple(out)


def make_world(spec: WorldSpec, rng_seed) -> tuple[JointModel, list[Instance]]:
    rng = as_rng(rng_seed)
    model = JointModel(spec.vocab_size, spec.order,
                       random_tables(spec.vocab_size, spec.order, spec.concentration, rng))
    ref_lo, ref_hi = spec.ref_len or (spec.min_rationale_len, spec.max_rationale_len)
    instances = []
    for _ in range(spec.n_instances):
        x = _sample_tokens(model, [], int(rng.integers(spec.x_len[0], spec.x_len[1] + 1)), rng)
        z_ref = greedy_rationale(model, x, ref_lo, ref_hi)
        y_len = int(rng.integers(spec.y_len[0], spec.y_len[1] + 1))
        y = _sample_tokens(model, [*x, *z_ref, model.terminal], y_len, rng)
        instances.append(Instance(x=x, y=y, z_ref=z_ref))
    return model, instances


# -- world file -------------------------------------------------------------

def _ctx_key(model_vocab: int, ctx: Tokens) -> str:
    names = {model_vocab: "T", model_vocab + 1: "_"}
    return ",".join(names.get(c, str(c)) for c in ctx)


def _parse_ctx_key(vocab_size: int, key: str) -> Tokens:
    names = {"T": vocab_size, "_": vocab_size + 1}
    try:
        return tuple(names[p] if p in names else int(p) for p in key.split(","))
    except ValueError:
        raise DataError(f"bad context key {key!r}") from None


def world_to_dict(model: JointModel, instances: Sequence[Instance],
                  spec: WorldSpec | None = None) -> dict:
    out = {
        "version": WORLD_VERSION,
        "vocab_size": model.vocab_size,
        "order": model.order,
        "tables": {_ctx_key(model.vocab_size, ctx): [float(f"{p:.17g}") for p in row]
                   for ctx, row in model.tables.items()},
        "instances": [{"x": list(i.x), "y": list(i.y), "z_ref": list(i.z_ref)} for i in instances],
    }
    if spec is not None:
        out["spec"] = asdict(spec)
    return out


def world_from_dict(d: dict) -> tuple[JointModel, list[Instance]]:
    if d.get("version") != WORLD_VERSION:
        raise DataError(f"unsupported world file version {d.get('version')!r}")
    try:
        vocab = int(d["vocab_size"])
        tables = {_parse_ctx_key(vocab, k): v for k, v in d["tables"].items()}
        model = JointModel(vocab, int(d["order"]), tables)
        instances = [Instance(tuple(i["x"]), tuple(i["y"]), tuple(i["z_ref"])) for i in d["instances"]]
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed world file: {exc}") from exc
    for inst in instances:
        for part in (inst.x, inst.y, inst.z_ref):
            if any(not 0 <= t < vocab for t in part):
                raise DataError("instance token outside vocabulary")
    return model, instances


def dumps_world(model: JointModel, instances: Sequence[Instance], spec: WorldSpec | None = None) -> str:
    return json.dumps(world_to_dict(model, instances, spec), indent=1, sort_keys=True) + "\n"


def save_world(path, model: JointModel, instances: Sequence[Instance],
               spec: WorldSpec | None = None) -> None:
    Path(path).write_text(dumps_world(model, instances, spec))


def load_world(path) -> tuple[JointModel, list[Instance]]:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"world file {path} is not valid JSON: {exc}") from exc
    return world_from_dict(d)
