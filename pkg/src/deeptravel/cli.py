"""Command-line entry point: ``deeptravel <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import datagen
from .domain import Query
from .policy import OracleAgent, PolicyParams, behavior_clone
from .protocol import EpisodeLimits, load_trajectories, save_trajectories
from .sandbox import Sandbox
from .trainer import StepMetrics, TrainerConfig, evaluate_rewards, load_checkpoint, pass_rate, train, write_metrics
from .verifier import Verifier
from .world import ConfigError, WorldConfig, generate_world, load_world, save_world, seed_from_env

logger = logging.getLogger("deeptravel")

ABLATIONS = ("none", "no-er", "no-cs", "no-traj", "no-turn")
EXTRA_TRAIN_KEYS = {"bc_epochs": 20, "bc_learning_rate": 1.0, "transfer_buffer": 60, "checkpoint_every": 0}


class UsageError(Exception):
    """Bad flags or configuration; exit status 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit directly; route through main instead
        raise UsageError(f"{self.prog}: {message}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_train_config(path: str | None, overrides: Sequence[str]) -> tuple[TrainerConfig, dict]:
    data: dict = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError("config file must hold a flat JSON object")
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        data[key.strip()] = _parse_value(value)
    extras = {k: data.pop(k, v) for k, v in EXTRA_TRAIN_KEYS.items()}
    try:
        return TrainerConfig.from_dict(data), extras
    except (TypeError, ConfigError) as exc:
        raise UsageError(str(exc)) from None


def _read_world(path: str):
    try:
        return load_world(path)
    except FileNotFoundError:
        raise RuntimeError(f"world file not found: {path}") from None


def _read_queries(paths: Sequence[str]) -> list[Query]:
    out: list[Query] = []
    for p in paths:
        path = Path(p)
        if path.is_dir():
            path = path / "train.jsonl"
        if not path.exists():
            raise RuntimeError(f"query file not found: {path}")
        out.extend(datagen.read_queries(path))
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_world(args) -> int:
    seed = args.seed if args.seed is not None else seed_from_env(0)
    config = WorldConfig(n_cities=args.cities, horizon_days=args.days,
                         **({"start_date": args.start_date} if args.start_date else {}))
    try:
        config.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    world = generate_world(seed, config)
    digest = save_world(world, args.out)
    print(f"world seed={seed} cities={len(world.cities)} days={config.horizon_days} digest={digest}")
    return 0


def cmd_gen_data(args) -> int:
    try:
        spec = datagen.parse_splits(args.splits)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if spec.empty:
        print("empty split spec: nothing to generate")
        return 0
    world = _read_world(args.world)
    combinatorics = datagen.CombinatoricsConfig()
    if args.combinatorics:
        combinatorics = datagen.CombinatoricsConfig.from_dict(json.loads(Path(args.combinatorics).read_text()))
    try:
        datagen.make_probe(args.probe)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    report = datagen.generate_dataset(world, spec, args.out_dir, args.probe, args.k, combinatorics,
                                      args.seed if args.seed is not None else seed_from_env(0), args.overrides)
    for name, cells in report.counts.items():
        print(f"{name}: " + ", ".join(f"{lvl}={n}" for lvl, n in cells.items()))
    print(f"manifest: {report.manifest}")
    return 0


def cmd_train(args) -> int:
    config, extras = load_train_config(args.config, args.set)
    if args.ablation not in ABLATIONS:
        raise UsageError(f"unknown ablation {args.ablation!r}")
    if args.ablation == "no-er":
        config.gamma = None
    world = _read_world(args.world)
    sandbox = Sandbox(world)
    dataset = _read_queries(args.data)
    val = _read_queries(args.val) if args.val else []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    verifier = Verifier(int(extras["transfer_buffer"]), skip_trajectory=args.ablation == "no-traj",
                        skip_turn=args.ablation == "no-turn")
    params = PolicyParams()
    resume = load_checkpoint(args.resume) if args.resume else None
    if args.cold_start and args.ablation != "no-cs" and resume is None:
        if args.cold_start == "auto":
            teacher = datagen.distill_cold_start(OracleAgent(), dataset, sandbox, Verifier(), config.limits,
                                                 config.seed)
            save_trajectories(teacher, out / "cold_start.jsonl", {q.id: q for q in dataset})
        else:
            teacher = load_trajectories(args.cold_start)
        history: list[float] = []
        params = behavior_clone(params, teacher, int(extras["bc_epochs"]), float(extras["bc_learning_rate"]),
                                history=history)
        print(f"cold start: {len(teacher)} teacher traces, loss {history[0]:.4f} -> {history[-1]:.4f}")
        params.save(out / "cold_start_params.json")
    (out / "config.json").write_text(json.dumps({**config.to_dict(), **extras, "ablation": args.ablation}, indent=2))

    def report(m) -> None:
        if m.step % max(1, config.total_steps // 10) == 0:
            print(f"step {m.step}: reward={m.mean_reward:.3f} keep={m.keep_rate:.2f} entropy={m.entropy:.3f} "
                  f"buffer={m.buffer_size}")

    result = train(config, dataset, sandbox, params, verifier, val, resume=resume,
                   checkpoint_path=out / "checkpoint.json", checkpoint_every=int(extras["checkpoint_every"]),
                   on_step=report)
    result.params.save(out / "params.json")
    metrics = result.metrics
    if resume is not None and (out / "metrics.jsonl").exists():
        earlier = [StepMetrics(**json.loads(line)) for line in (out / "metrics.jsonl").read_text().splitlines()
                   if line.strip()]
        metrics = [m for m in earlier if m.step <= resume.step] + metrics
    write_metrics(metrics, out / "metrics.jsonl", out / "metrics.csv")
    print(f"trained {len(result.metrics)} steps; params -> {out / 'params.json'}")
    return 0


def _agent_for(spec: str):
    if spec == "oracle":
        return OracleAgent()
    if spec == "untrained":
        return PolicyParams()
    path = Path(spec)
    if not path.exists():
        raise RuntimeError(f"params file not found: {spec}")
    return PolicyParams.load(path)


def cmd_eval(args) -> int:
    world = _read_world(args.world)
    queries = _read_queries(args.benchmark)
    if not queries:
        raise RuntimeError("benchmark is empty")
    policy = _agent_for(args.params)
    rewards = evaluate_rewards(policy, Sandbox(world), queries, EpisodeLimits(args.max_turns))
    table: dict = {}
    for split, constrained in (("without_constraint", False), ("with_constraint", True)):
        row = {}
        for level in datagen.LEVELS:
            cell = [r for q, r in zip(queries, rewards) if q.constrained == constrained and q.difficulty == level]
            if cell:
                row[level] = round(pass_rate(cell), 2)
        cell = [r for q, r in zip(queries, rewards) if q.constrained == constrained]
        if cell:
            row["all"] = round(pass_rate(cell), 2)
            table[split] = row
    table["overall"] = round(pass_rate(rewards), 2)
    table["n_queries"] = len(queries)
    table["policy"] = args.params
    for split in ("without_constraint", "with_constraint"):
        if split in table:
            print(f"{split:>20}: " + "  ".join(f"{k}={v:.2f}" for k, v in table[split].items()))
    print(f"{'overall':>20}: {table['overall']:.2f}")
    if args.report:
        Path(args.report).write_text(json.dumps(table, indent=2))
    return 0


def cmd_inspect(args) -> int:
    lines = [line for line in Path(args.trajectory).read_text().splitlines() if line.strip()]
    try:
        records = [json.loads(line) for line in lines]
    except json.JSONDecodeError as exc:
        raise RuntimeError(f"cannot parse {args.trajectory}: {exc}") from None
    if not 0 <= args.index < len(records):
        raise RuntimeError(f"index {args.index} out of range: file holds {len(records)} trajectories")
    trajectories = load_trajectories(args.trajectory)
    t = trajectories[args.index]
    print(f"query: {t.query_id}  terminal: {t.terminal}  segments: {len(t.segments)}  tool calls: {t.tool_calls}")
    for seg in t.segments:
        body = seg.body if len(seg.body) <= args.width else seg.body[:args.width] + "..."
        print(f"  [{seg.turn_index}] {seg.kind.value}: {body}")
    print("decisions:")
    for d in t.decisions:
        print(f"  {d.head}{list(d.features)} -> {d.choice} logp={d.log_prob:.4f}{' (masked)' if d.masked else ''}")
    query_data = records[args.index].get("query")
    query = Query.from_dict(query_data) if query_data else None
    if query is None and args.queries:
        query = next((q for q in _read_queries([args.queries]) if q.id == t.query_id), None)
    if query is None:
        print("reward: unavailable (no query recorded for this trajectory)")
        return 0
    record = Verifier().joint_reward(query, t)
    verdict = record.trajectory_verdict
    print(f"trajectory verdict: {verdict.conclusion.value if verdict else 'verifier failed'}")
    if verdict:
        for rubric in verdict.rubrics:
            print(f"  {'PASS' if rubric.passed else 'FAIL'} {rubric.name} {'; '.join(rubric.diagnostics)}")
    for v in record.turn_verdicts:
        print(f"  turn {v.turn_index}: logic={'ok' if v.call_logic_ok else 'FAIL'} "
              f"consistency={'ok' if v.consistency_ok else 'FAIL'} {v.diagnostics}")
    print(f"reward r={record.r}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deeptravel", description="Travel-planning agent RL toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-world", help="generate a seeded sandbox world")
    p.add_argument("--seed", type=int)
    p.add_argument("--cities", type=int, default=6)
    p.add_argument("--days", type=int, default=30)
    p.add_argument("--start-date")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("gen-data", help="synthesize benchmark and RL query files")
    p.add_argument("--world", required=True)
    p.add_argument("--splits", required=True,
                   help="e.g. constrained=156/45/299,unconstrained=222/78/200,train=450,val=50")
    p.add_argument("--probe", default="weak:0.25")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--seed", type=int)
    p.add_argument("--combinatorics")
    p.add_argument("--overrides")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="cold start (optional) then RL")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--world", required=True)
    p.add_argument("--data", required=True, nargs="+")
    p.add_argument("--val", nargs="*")
    p.add_argument("--cold-start", help="teacher trajectory JSONL, or 'auto' to distill from the oracle")
    p.add_argument("--ablation", default="none", choices=ABLATIONS)
    p.add_argument("--resume")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy final pass rate on benchmark files")
    p.add_argument("--params", required=True, help="params JSON, 'oracle' or 'untrained'")
    p.add_argument("--world", required=True)
    p.add_argument("--benchmark", required=True, nargs="+")
    p.add_argument("--max-turns", type=int, default=8)
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="pretty-print one stored trajectory")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--queries")
    p.add_argument("--width", type=int, default=160)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError(parser.format_usage().strip())
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
