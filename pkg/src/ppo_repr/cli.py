"""Command-line entry point: ``ppo-repr {train,toy,capacity,correlate,summarize}``."""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import sys
from pathlib import Path

from .capacity import capacity_loss, make_capacity_probe
from .diagnostics import RANK_KEYS, aggregate_correlations, rank_correlations, read_records
from .errors import ConfigurationError
from .harness import (
    apply_overrides,
    load_config,
    load_config_text,
    resummarize,
    run_experiment,
    tomllib,
)
from .networks import ActorCritic, init_actor_critic
from .ppo import build_normalizer, env_dims
from .seeding import stream_rng, stream_seed
from .toy import ToyConfig, toy_simulate, toy_verify_claims


def _run_config(args):
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"seeds=[{args.seed}]")
    if args.config:
        return load_config(args.config, overrides)
    return load_config_text("", overrides)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    status, root = run_experiment(cfg, args.out, log=sys.stderr)
    print(root / "manifest.json")
    return status


def _toy_config(args) -> ToyConfig:
    raw: dict = {}
    if args.config:
        raw = tomllib.loads(Path(args.config).read_text(encoding="utf-8"))
        raw = raw.get("toy", raw)
    raw = apply_overrides({"toy": raw}, [o if o.startswith("toy.") else f"toy.{o}" for o in args.override or []])["toy"]
    if args.seed is not None:
        raw["phi_seed"] = args.seed
    known = {f.name for f in dataclasses.fields(ToyConfig)}
    for key in raw:
        if key not in known:
            raise ConfigurationError(f"unknown config key 'toy.{key}'")
    if "theta0" in raw:
        raw["theta0"] = tuple(raw["theta0"])
    return ToyConfig(**raw)


def cmd_toy(args) -> int:
    cfg = _toy_config(args)
    trace = toy_simulate(cfg)
    text = trace.to_csv()
    if args.out:
        out = Path(args.out)
        if out.suffix != ".csv":
            out.mkdir(parents=True, exist_ok=True)
            out = out / f"toy_alpha{cfg.alpha:g}.csv"
        out.write_text(text, encoding="utf-8")
        print(out)
    else:
        sys.stdout.write(text)
    claims = toy_verify_claims(trace, cfg)
    print(json.dumps(dataclasses.asdict(claims)), file=sys.stderr)
    return 0


def cmd_capacity(args) -> int:
    cfg = _run_config(args)
    _, _, tc = cfg.variants()[0]
    seed = cfg.seeds[0]
    tc = dataclasses.replace(tc, seed=seed)
    obs_dim, n_out = env_dims(tc.env)
    actor_spec, critic_spec = tc.specs(obs_dim, n_out)
    if args.checkpoint:
        agent, _ = ActorCritic.load(args.checkpoint)
    else:
        agent = init_actor_critic(actor_spec, critic_spec, stream_rng(seed, "init"), tc.ppo.shared_trunk)
    probe = make_capacity_probe(actor_spec, critic_spec, tc.env, tc.capacity, stream_seed(seed, "capacity"),
                                build_normalizer(tc), tc.ppo.adam)
    result = {"actor_capacity_loss": capacity_loss(agent.actor, probe, "actor"),
              "critic_capacity_loss": capacity_loss(agent.critic, probe, "critic")}
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def _metrics_files(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_file():
            out.append(p)
        else:
            found = sorted(p.rglob("metrics.jsonl"))
            if not found:
                raise ConfigurationError(f"no metrics.jsonl under {p}")
            out.extend(found)
    return out


def cmd_correlate(args) -> int:
    files = _metrics_files(args.runs)
    pairs = [tuple(p.split(":", 1)) for p in args.pair] if args.pair else [
        (f"actor_{a}", f"actor_{b}") for a, b in itertools.combinations(RANK_KEYS, 2)]
    result = {}
    for x, y in pairs:
        per_run = []
        for f in files:
            recs = [r for r in read_records(f) if r.get(x) is not None and r.get(y) is not None]
            if len(recs) < 2:
                continue
            per_run.append(rank_correlations([r[x] for r in recs], [r[y] for r in recs], args.width))
        result[f"{x}:{y}"] = {"runs": len(per_run), **aggregate_correlations(per_run)}
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_summarize(args) -> int:
    files = _metrics_files(args.runs)
    status = 0
    out = {}
    for f in files:
        summary = resummarize(f.parent)
        out[str(f.parent)] = summary
        if args.check:
            stored = json.loads((f.parent / "summary.json").read_text(encoding="utf-8"))
            if stored != summary:
                print(f"summary mismatch: {f.parent}", file=sys.stderr)
                status = 1
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppo-repr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_help="run config (TOML)"):
        p.add_argument("--config", help=config_help)
        p.add_argument("--seed", type=int, help="run only this seed")
        p.add_argument("--out", help="output location")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="set a config key, e.g. ppo.epochs=16 (repeatable)")

    p = sub.add_parser("train", help="run an experiment grid and write metrics, summaries and checkpoints")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("toy", help="simulate the two-state model; writes the trace as CSV")
    common(p, "toy config (TOML, keys under [toy])")
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("capacity", help="capacity loss of a checkpoint (or a fresh init)")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint .bin file")
    p.set_defaults(func=cmd_capacity)

    p = sub.add_parser("correlate", help="correlations between logged metric series")
    p.add_argument("runs", nargs="+", help="metrics.jsonl files or directories containing them")
    p.add_argument("--pair", action="append", metavar="X:Y", help="metric pair (repeatable)")
    p.add_argument("--width", type=int, default=64, help="feature-layer width for the L2 normalization")
    p.add_argument("--out")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("summarize", help="recompute window summaries from metrics.jsonl")
    p.add_argument("runs", nargs="+")
    p.add_argument("--check", action="store_true", help="fail if a stored summary.json differs")
    p.add_argument("--out")
    p.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
