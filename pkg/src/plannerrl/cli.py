"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.

Flag precedence for ``train``: config file < individual flags < ``--mode``.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .metrics import analyze_logs, metrics_csv, reward_tier_table, stage_entropy_table, tool_call_table
from .policy import CheckpointError, load_checkpoint
from .grammar import FeatureSpace, GrammarConfig
from .shaping import ShapingError
from .trainer import (
    MODES,
    ConfigError,
    TrainConfig,
    TrainingAborted,
    default_output_root,
    evaluate,
    replay,
    run_experiment,
)
from .trajectory import TrajectoryError
from .world import WorldConfigError, generate_world, load_queries, load_world, sample_queries, save_queries, save_world

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _parse_hops(text: str) -> tuple[int, int]:
    parts = text.split("-") if "-" in text else [text, text]
    try:
        lo, hi = (int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or LO-HI, got {text!r}") from None
    return lo, hi


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_gen_world(args) -> int:
    world = generate_world(args.seed, args.entities, args.relations, args.hops)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_world(world, out)
    if args.queries_out:
        qs = sample_queries(world, args.n_queries, args.seed, args.multi_hop_ratio)
        save_queries(qs, args.queries_out)
    print(f"wrote {out} ({len(world.entities)} entities, {len(world.relations)} facts, sha256 {world.digest()[:12]})")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {}
    for key in ("seed", "steps", "learning_rate", "batch_queries", "rollouts_per_query"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = val
    if overrides:
        cfg = replace(cfg, **overrides)
    if args.mode:
        cfg = cfg.with_mode(args.mode)
    return cfg


def cmd_train(args) -> int:
    cfg = _train_config(args)
    world = load_world(args.world)
    train_q = load_queries(args.queries) if args.queries else None
    held_q = load_queries(args.heldout) if args.heldout else ([] if train_q is not None else None)
    out = Path(args.out_dir) if args.out_dir else default_output_root() / "run"
    params, rows, _ = run_experiment(cfg, world, out, train_q, held_q)
    last = rows[-1] if rows else None
    msg = f"trained {len(rows)} steps into {out}"
    if last:
        msg += f"; final mean reward {last.mean_reward:.3f}"
    print(msg)
    return EXIT_OK


def cmd_eval(args) -> int:
    world = load_world(args.world)
    queries = load_queries(args.queries)
    if not queries:
        raise WorldConfigError(f"{args.queries}: no queries")
    space = FeatureSpace(GrammarConfig(max_hops=args.max_hops))
    params = load_checkpoint(args.checkpoint, space)
    report = evaluate(params, world, queries, greedy=args.greedy, seed=args.seed, space=space)
    print(json.dumps(report.as_dict(), indent=1, sort_keys=True))
    return EXIT_OK


def _table_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    lines = [",".join(cols)] + [",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols) for r in rows]
    return "\n".join(lines) + "\n"


def cmd_analyze(args) -> int:
    logs = Path(args.logs)
    config_path = args.config
    if (logs / "trajectories").is_dir():
        # a run directory: read its logs and, unless given, its config
        config_path = config_path or (logs / "config.json" if (logs / "config.json").exists() else None)
        logs = logs / "trajectories"
    if not logs.is_dir():
        raise WorldConfigError(f"{args.logs}: not a log directory")
    cfg = TrainConfig.load(config_path) if config_path else TrainConfig()
    if args.mode:
        cfg = cfg.with_mode(args.mode)
    shaping = cfg.shaping
    group_size = args.group_size or cfg.rollouts_per_query
    rows = analyze_logs(logs, shaping, group_size)
    if args.format == "metrics":
        _emit(metrics_csv(rows), args.out)
        return EXIT_OK
    parts = [
        "# stage entropy\n" + _table_csv(stage_entropy_table(rows)),
        "# reward tiers\n" + _table_csv(reward_tier_table(rows)),
        "# tool calls\n" + _table_csv(tool_call_table(rows)),
    ]
    _emit("\n".join(parts), args.out)
    return EXIT_OK


def cmd_replay(args) -> int:
    out = Path(args.out_dir)
    _, rows, _ = replay(args.manifest, out)
    print(f"replayed {len(rows)} steps into {out}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .api.app import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="plannerrl", description="Train and analyze a planning search agent on a synthetic world.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-world", help="generate a knowledge world file")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--entities", type=int, required=True)
    g.add_argument("--relations", type=int, required=True)
    g.add_argument("--hops", type=_parse_hops, default=(1, 3), help="N or LO-HI")
    g.add_argument("--out", required=True)
    g.add_argument("--queries-out", help="also write sampled queries as JSON lines")
    g.add_argument("--n-queries", type=int, default=256)
    g.add_argument("--multi-hop-ratio", type=float, default=0.75)
    g.set_defaults(func=cmd_gen_world)

    t = sub.add_parser("train", help="train one run and write metrics, logs and checkpoints")
    t.add_argument("--world", required=True)
    t.add_argument("--config")
    t.add_argument("--out-dir", help="defaults to $PLANNERRL_OUTPUT_ROOT/run")
    t.add_argument("--mode", choices=MODES, help="overrides the shaping enable flags")
    t.add_argument("--queries", help="training queries (JSON lines); sampled from the world when absent")
    t.add_argument("--heldout", help="held-out queries recorded in the run directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--batch-queries", type=int)
    t.add_argument("--rollouts-per-query", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a query file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--world", required=True)
    e.add_argument("--queries", required=True)
    e.add_argument("--greedy", action="store_true", help="argmax decoding (ties go to the lowest token id)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--max-hops", type=int, default=GrammarConfig().max_hops)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="rebuild per-step tables from trajectory logs")
    a.add_argument("logs", help="run directory, or a directory holding step_XXXX.jsonl files")
    a.add_argument("--config", help="run config; supplies shaping settings and group size")
    a.add_argument("--mode", choices=MODES, default=None)
    a.add_argument("--group-size", type=int, help="rollouts per query; defaults to the config value")
    a.add_argument("--format", choices=("tables", "metrics"), default="tables")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    r = sub.add_parser("replay", help="re-run an experiment from its manifest")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out-dir", required=True)
    r.set_defaults(func=cmd_replay)

    s = sub.add_parser("serve", help="run the HTTP service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    s.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except TrainingAborted as exc:
        print(f"error: training aborted at {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ShapingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (WorldConfigError, TrajectoryError, CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
