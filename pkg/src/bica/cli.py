"""Command-line entry point: train, eval, ablate, compare, serve, replay."""
from __future__ import annotations

import argparse
import json
import sys

from . import gridworld as gw
from .harness import (ABLATION_COLUMNS, ExperimentConfig, SEED_PRESETS,
                      compare, run_ablation, run_experiment)


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
    else:
        with open(path) as f:
            cfg = ExperimentConfig.from_json(f.read())
    cfg.apply_env_overrides()
    return cfg


def resolve_seeds(arg: str | None, cfg: ExperimentConfig) -> list[int]:
    if arg is None:
        return list(cfg.seeds)
    if arg in SEED_PRESETS:
        return list(SEED_PRESETS[arg])
    return [int(s) for s in arg.split(",")]


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.mode:
        cfg.train.mode = args.mode
    if args.epochs:
        cfg.train.epochs = args.epochs
    seeds = resolve_seeds(args.seeds, cfg)
    report = run_experiment(cfg, seeds, out_dir=args.out,
                            progress=args.progress)
    print(json.dumps(report.to_json()["aggregate"], indent=2))
    if report.failures:
        print(f"failed seeds: {report.failures}", file=sys.stderr)
    print(f"run directory: {args.out}/{report.name}")
    return 0


def cmd_eval(args) -> int:
    with open(args.report) as f:
        report = json.load(f)
    print(json.dumps(report.get("aggregate", report), indent=2))
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if args.epochs:
        cfg.train.epochs = args.epochs
    seeds = resolve_seeds(args.seeds or "ablation", cfg)
    rows = run_ablation(cfg, seeds, out_dir=args.out)
    widths = {c: max(len(c), 10) for c in ABLATION_COLUMNS}
    print("  ".join(c.ljust(widths[c]) for c in ABLATION_COLUMNS))
    for row in rows:
        cells = []
        for c in ABLATION_COLUMNS:
            v = row[c]
            cells.append((f"{v:.4f}" if isinstance(v, float) else str(v))
                         .ljust(widths[c]))
        print("  ".join(cells))
    if args.json_out:
        with open(args.json_out, "w") as f:
            json.dump(rows, f, indent=2)
    return 0


def cmd_compare(args) -> int:
    from .harness import RunReport

    def load(path):
        with open(path) as f:
            d = json.load(f)
        cfg = ExperimentConfig.from_json(json.dumps(d["config"]))
        return RunReport(name=d["name"], config=cfg, per_seed=d["per_seed"])

    table = compare(load(args.report_a), load(args.report_b))
    print(f"{'metric':<12}{'A':>10}{'B':>10}{'Δ[%]':>10}{'p':>10}{'d':>8}")
    for row in table:
        print(f"{row['metric']:<12}{row['a_mean']:>10.3f}"
              f"{row['b_mean']:>10.3f}{row['improvement_pct']:>10.1f}"
              f"{row['welch_p']:>10.4f}{row['cohens_d']:>8.2f}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn
    from .service import create_app
    cfg = load_config(args.config)
    app = create_app(cfg.train, checkpoint=args.checkpoint,
                     runs_dir=args.runs_dir)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def cmd_replay(args) -> int:
    records = gw.read_trace(args.trace)
    total = 0.0
    for rec in records:
        total += rec["reward"]
        msg = " ".join(rec.get("human_msg", []))
        ai = " ".join(rec.get("ai_msg", []))
        print(f"step {rec['step']:>3}  pose {tuple(rec['pose'])}  "
              f"human [{msg}]  ai [{ai}]  reward {rec['reward']:+.2f}"
              + ("  COLLIDED" if rec.get("collided") else "")
              + ("  GOAL" if rec.get("reached_goal") else ""))
    print(f"{len(records)} steps, return {total:.2f}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bica", description="bidirectional cognitive alignment lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and evaluate a run")
    p.add_argument("--config")
    p.add_argument("--seeds", help="preset name or comma-separated ints")
    p.add_argument("--mode", choices=["bica", "baseline"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", default="runs")
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print a persisted run report")
    p.add_argument("report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the 15-variant ablation grid")
    p.add_argument("--config")
    p.add_argument("--seeds")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", default="runs")
    p.add_argument("--json-out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("compare", help="compare two run reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("serve", help="start the session service")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--runs-dir", default="runs")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("replay", help="pretty-print an episode trace")
    p.add_argument("trace")
    p.set_defaults(func=cmd_replay)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
