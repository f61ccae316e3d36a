"""Command-line entry point: ``rationale-flow <command> ...``.

Exit codes: 0 success, 2 usage, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from dataclasses import replace
from importlib import metadata
from pathlib import Path

from .errors import DataError, NumericalError
from .inference import InferenceConfig, bin_rank, bon_rank, rank_report
from .toyworld import WorldSpec, dumps_world, exact_posterior, load_world, make_world, seed_stream
from .trainer import METRICS_VERSION, TrainConfig, config_to_dict, load_checkpoint, metrics_csv, \
    save_checkpoint, train
from .verify import distance, policy_distribution

log = logging.getLogger("rationale_flow")

MANIFEST_VERSION = 1
REPORT_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_json(path) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise DataError(f"{path} must hold a JSON object")
    return d


def _emit(obj: dict, out: str | None) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True, default=float) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _world_max_len(world_path: str, override: int | None) -> int:
    if override is not None:
        return override
    spec = _read_json(world_path).get("spec")
    if not spec or "max_rationale_len" not in spec:
        raise DataError("world file has no spec block; pass --max-len")
    return int(spec["max_rationale_len"])


def _instance(instances, iid: int):
    if not 0 <= iid < len(instances):
        raise DataError(f"instance {iid} out of range (world has {len(instances)})")
    return instances[iid]


# -- commands ---------------------------------------------------------------

def cmd_make_world(args) -> int:
    spec = WorldSpec.from_dict(_read_json(args.spec))
    model, instances = make_world(spec, seed_stream(args.seed, "world"))
    Path(args.out).write_text(dumps_world(model, instances, spec))
    return EXIT_OK


def cmd_train(args) -> int:
    if args.from_manifest:
        manifest = _read_json(args.from_manifest)
        if manifest.get("version") != MANIFEST_VERSION:
            raise DataError(f"unsupported manifest version {manifest.get('version')!r}")
        world_path = manifest["world"]
        if sha256_file(world_path) != manifest["world_sha256"]:
            raise DataError(f"world file {world_path} does not match the manifest hash")
        config = TrainConfig.from_dict(manifest["config"])
        resume = manifest.get("resume")
    else:
        if not (args.world and args.config):
            raise _Usage("train needs --world and --config, or --from-manifest")
        world_path = str(Path(args.world).resolve())
        config = TrainConfig.from_dict(_read_json(args.config))
        if args.no_filter:
            config = replace(config, use_filter=False)
        resume = str(Path(args.resume).resolve()) if args.resume else None
    if args.threads is not None:
        # worker count never changes results, so it stays out of the manifest
        config = replace(config, threads=args.threads)
    model, instances = load_world(world_path)
    params, start = load_checkpoint(resume) if resume else (None, 0)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = config_to_dict(replace(config, threads=1))
    manifest = {
        "version": MANIFEST_VERSION,
        "tool_version": tool_version(),
        "metrics_version": METRICS_VERSION,
        "world": world_path,
        "world_sha256": sha256_file(world_path),
        "seed": config.rng_seed,
        "config": snapshot,
        "resume": resume,
        "artifacts": {"metrics": "metrics.csv", "final_checkpoint": "checkpoint_final.json",
                      "checkpoint_pattern": "checkpoint_{step:07d}.json"},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    params, records = train(model, instances, config, params=params, start_step=start, out_dir=out)
    (out / "metrics.csv").write_text(metrics_csv(records))
    save_checkpoint(params, max(start, config.steps), out / "checkpoint_final.json")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, instances = load_world(args.world)
    inst = _instance(instances, args.instance)
    max_len = _world_max_len(args.world, args.max_len)
    params, step = load_checkpoint(args.checkpoint)
    target = exact_posterior(model, inst.x, inst.y, max_len, temperature=args.target_temperature)
    if args.mode == "exact":
        learned = policy_distribution(params, args.instance, max_len)
        n = 0
    else:
        learned = policy_distribution(params, args.instance, max_len, "sampled", args.samples,
                                      seed_stream(args.seed, "eval"))
        n = args.samples
    rep = distance(target, learned, n)
    _emit({"version": REPORT_VERSION, "instance": args.instance, "checkpoint_step": step,
           "target_temperature": args.target_temperature, "tv": rep.tv,
           "kl": rep.kl if math.isfinite(rep.kl) else None, "support_size": rep.support_size,
           "sample_count": rep.sample_count}, args.out)
    return EXIT_OK


def cmd_rank(args) -> int:
    model, instances = load_world(args.world)
    inst = _instance(instances, args.instance)
    params, _ = load_checkpoint(args.checkpoint)
    try:
        config = InferenceConfig(n_rationales=args.n, temperature=args.temperature,
                                 answer_max_len=args.answer_max_len, answer_min_len=args.answer_min_len,
                                 rng_seed=args.seed, max_rationale_len=_world_max_len(args.world, args.max_len),
                                 min_rationale_len=args.min_len)
    except ValueError as exc:
        raise _Usage(str(exc)) from exc
    ranker = bin_rank if args.mode == "bin" else bon_rank
    selected, ranked = ranker(params, model, args.instance, inst.x, config)
    _emit(rank_report(args.mode, selected, ranked, args.instance, config), args.out)
    return EXIT_OK


def cmd_oracle(args) -> int:
    from . import acceptance

    chosen = dict(acceptance.FAST)
    if args.include_slow:
        chosen.update(acceptance.SLOW)
    if args.only:
        wanted = {int(c) for c in args.only.split(",")}
        chosen = {k: v for k, v in {**acceptance.FAST, **acceptance.SLOW}.items() if k in wanted}
    results = []
    for number in sorted(chosen):
        res = chosen[number]()
        log.info(res.line())
        results.append({"number": res.number, "name": res.name, "passed": res.passed, "detail": res.detail})
    _emit({"version": REPORT_VERSION, "tool_version": tool_version(), "criteria": results,
           "all_passed": all(r["passed"] for r in results)}, args.out)
    return EXIT_OK


# -- parser -----------------------------------------------------------------

class _Usage(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _Usage(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rationale-flow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-world", help="generate a seeded world file")
    s.add_argument("--spec", required=True, help="WorldSpec JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_world)

    s = sub.add_parser("train", help="train the sampler; writes metrics, checkpoints and a manifest")
    s.add_argument("--world")
    s.add_argument("--config", help="TrainConfig JSON")
    s.add_argument("--from-manifest", help="rerun exactly what a previous manifest describes")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--no-filter", action="store_true", help="train on every candidate (ablation arm)")
    s.add_argument("--threads", type=int, help="cap on exploration worker threads")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="distance between a checkpoint and the exact posterior")
    s.add_argument("--world", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--instance", type=int, default=0)
    s.add_argument("--max-len", type=int)
    s.add_argument("--target-temperature", type=float, default=1.0)
    s.add_argument("--mode", choices=("exact", "sampled"), default="exact")
    s.add_argument("--samples", type=int, default=100_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("rank", help="select an answer with BiN or BoN")
    s.add_argument("--world", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--instance", type=int, default=0)
    s.add_argument("--n", type=int, default=64, help="number of sampled rationales")
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--mode", choices=("bin", "bon"), default="bin")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--answer-max-len", type=int, default=2)
    s.add_argument("--answer-min-len", type=int, default=1)
    s.add_argument("--max-len", type=int)
    s.add_argument("--min-len", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_rank)

    s = sub.add_parser("oracle", help="run the verification suite and emit a JSON report")
    s.add_argument("--include-slow", action="store_true", help="also run the long training criteria")
    s.add_argument("--only", help="comma-separated criterion numbers")
    s.add_argument("--out")
    s.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _Usage as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except _Usage as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numeric error: {exc.args[0]}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
