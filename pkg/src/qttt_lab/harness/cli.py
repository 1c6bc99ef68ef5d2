"""``qttt-lab`` command line: gen, theory-check, flops, train, run, sweep, report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import Counter, defaultdict
from dataclasses import asdict
from pathlib import Path

from ..diagnostics import (
    CSV_COLUMNS,
    BudgetMismatch,
    adaptation_sweep,
    margin_sweep_report,
    result_row,
    rows_to_csv,
    validate_budgets,
)
from ..flops import budget_table
from ..model import ModelConfig, TrainConfig, train_base_model
from ..model.checkpoint import CheckpointError, load, save
from ..qttt import AdaptationConfig
from ..tasks import ALL_TYPES, BUG_TYPES, gen_code_needle_task, gen_transaction_task, render_task_tokens, write_jsonl
from ..theory_suite import run_theory_suite
from .config import ConfigError, ExperimentConfig
from .corpus import training_corpus

log = logging.getLogger("qttt_lab")


def _bug_mix(text: str) -> tuple[str, ...]:
    if text == "all":
        return BUG_TYPES
    if text == "all+none":
        return ALL_TYPES
    mix = tuple(t.strip().upper() for t in text.split(","))
    bad = [t for t in mix if t not in ALL_TYPES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown bug types {bad}")
    return mix


# -- gen --------------------------------------------------------------------------------


def cmd_gen(args) -> int:
    tasks = []
    for i in range(args.seeds):
        seed = args.seed + i
        if args.kind == "transactions":
            bug = args.bug_mix[i % len(args.bug_mix)]
            tasks.append(gen_transaction_task(args.n_ops, args.n_accounts, bug, seed, allow_wide=args.allow_wide))
        else:
            tasks.append(gen_code_needle_task(args.n_lines, seed))
    out = Path(args.out or f"{args.kind}.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    n = write_jsonl(out, tasks)
    lengths = [len(render_task_tokens(t, args.prompt_style).tokens) for t in tasks]
    summary = {
        "path": str(out),
        "tasks": n,
        "tokens_min": min(lengths),
        "tokens_mean": round(sum(lengths) / n, 1),
        "tokens_max": max(lengths),
    }
    if args.kind == "transactions":
        summary["bug_types"] = dict(sorted(Counter(t.bug_type for t in tasks).items()))
    print(json.dumps(summary))
    return 0


# -- theory-check ---------------------------------------------------------------------------


def cmd_theory_check(args) -> int:
    grad = args.grad_trials if args.grad_trials is not None else min(args.trials, 1000)
    results = run_theory_suite(args.trials, grad, args.seed)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("theory-check:", "all checks passed" if ok else "VIOLATIONS FOUND")
    return 0 if ok else 1


# -- flops ----------------------------------------------------------------------------------


def cmd_flops(args) -> int:
    table = budget_table(args.L, args.d, args.r, args.T, args.k, args.n_steps)
    if args.format == "json":
        print(json.dumps(table, indent=1))
    else:
        width = max(map(len, table))
        for key, value in table.items():
            shown = f"{value:.4f}" if isinstance(value, float) else f"{value:,}"
            print(f"{key:<{width}}  {shown:>28}")
    return 0


# -- train ----------------------------------------------------------------------------------


def cmd_train(args) -> int:
    config = ModelConfig(
        n_layers=args.layers,
        n_heads=args.heads,
        d_model=args.d_model,
        mlp_ratio=args.mlp_ratio,
        rope_enabled=not args.no_rope,
        max_T=args.max_T,
    )
    corpus = training_corpus(args.docs, (args.min_ops, args.max_ops), seed=args.seed)
    tcfg = TrainConfig(seq_len=args.seq_len, batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    params = train_base_model(config, corpus, args.steps, tcfg)
    params.metadata["corpus"] = {"docs": args.docs, "ops_range": [args.min_ops, args.max_ops], "seed": args.seed}
    out = Path(args.out or "base_model.ckpt")
    out.parent.mkdir(parents=True, exist_ok=True)
    save(params, out)
    print(json.dumps({"path": str(out), "final_loss": params.metadata.get("final_loss"), "n_params": params.n_params()}))
    return 0


# -- run ------------------------------------------------------------------------------------


def _trace_name(record_id: str, condition: str) -> str:
    safe = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in condition)
    return f"{record_id}__{safe}.json"


def cmd_run(args) -> int:
    if not args.config:
        raise ConfigError("run needs --config")
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "seed": args.seed}, cfg.base_dir)
    validate_budgets(cfg.conditions)  # refuse before loading or running anything
    params = load(cfg.checkpoint_path())
    records = cfg.task.records(Path(cfg.base_dir) if cfg.base_dir else None)
    out = cfg.output_dir(args.out)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    results = margin_sweep_report(
        params, records, cfg.conditions, cfg.task.prompt_style, cfg.answer_budget, cfg.seed
    )
    (out / "results.csv").write_text(rows_to_csv(result_row(r) for r in results), encoding="utf-8")
    for r in results:
        if r.trace is not None:
            (out / "traces" / _trace_name(r.record_id, r.condition)).write_text(r.trace.to_json(), encoding="utf-8")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True), encoding="utf-8")
    print(json.dumps({"out": str(out), "rows": len(results), "correct": sum(r.correct for r in results)}))
    return 0


# -- sweep ----------------------------------------------------------------------------------


def cmd_sweep(args) -> int:
    if not args.config:
        raise ConfigError("sweep needs --config")
    cfg = ExperimentConfig.load(args.config)
    params = load(cfg.checkpoint_path())
    records = [r for r in cfg.task.records(Path(cfg.base_dir) if cfg.base_dir else None) if r.target_line]
    if not records:
        raise ConfigError("sweep needs tasks with a needle (no clean logs)")
    base = cfg.adaptation
    spans = args.span_lens or [base.span_len]
    configs = [
        AdaptationConfig(**{**asdict(base), "lr": lr, "span_len": k}) for k in spans for lr in args.lrs
    ]
    points = adaptation_sweep(params, records, configs, cfg.task.prompt_style)
    for p in points:
        print(json.dumps(p.row()))
    return 0


# -- report ---------------------------------------------------------------------------------


def read_results(path: Path) -> list[dict]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_COLUMNS:
                raise ValueError(f"{path}: header does not match {CSV_COLUMNS}")
            return list(reader)
    except FileNotFoundError:
        raise ValueError(f"no results CSV at {path}") from None


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def aggregate(rows: list[dict]) -> list[dict]:
    """Per (task_kind, condition, length_param): accuracy and needle-mass means."""
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for row in rows:
        groups[(row["task_kind"], row["condition"], int(row["length_param"]))].append(row)
    out = []
    for (kind, cond, length), members in sorted(groups.items()):
        masses = [float(r["needle_mass_mean"]) for r in members if r["needle_mass_mean"]]
        margins = [float(r["margin_mean"]) for r in members if r["margin_mean"]]
        out.append(
            {
                "task_kind": kind,
                "condition": cond,
                "length_param": length,
                "n": len(members),
                "accuracy": _mean([float(r["accuracy"]) for r in members]),
                "needle_mass_mean": _mean(masses),
                "margin_mean": _mean(margins),
            }
        )
    return out


REPORT_COLUMNS = ("task_kind", "condition", "length_param", "n", "accuracy", "needle_mass_mean", "margin_mean")


def format_table(agg: list[dict]) -> str:
    def cell(v):
        if v is None:
            return "-"
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    grid = [list(REPORT_COLUMNS)] + [[cell(r[c]) for c in REPORT_COLUMNS] for r in agg]
    widths = [max(len(row[i]) for row in grid) for i in range(len(REPORT_COLUMNS))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in grid) + "\n"


def cmd_report(args) -> int:
    results_dir = Path(args.results or args.out or "results")
    rows = read_results(results_dir / "results.csv")
    agg = aggregate(rows)
    text = format_table(agg)
    (results_dir / "report.txt").write_text(text, encoding="utf-8")
    with open(results_dir / "report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in agg:
            w.writerow({c: "" if r[c] is None else (f"{r[c]:.10g}" if isinstance(r[c], float) else r[c]) for c in REPORT_COLUMNS})
    sys.stdout.write(text)
    return 0


# -- parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="base seed")
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="qttt-lab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="write a JSONL task dataset")
    g.add_argument("--kind", choices=("transactions", "code"), default="transactions")
    g.add_argument("--n-ops", type=int, default=100)
    g.add_argument("--n-lines", type=int, default=100)
    g.add_argument("--n-accounts", type=int, default=2)
    g.add_argument("--seeds", type=int, default=10, help="number of tasks (consecutive seeds)")
    g.add_argument("--bug-mix", type=_bug_mix, default=BUG_TYPES, help="all, all+none, or comma list")
    g.add_argument("--allow-wide", action="store_true", help="permit n-ops outside [25, 500]")
    g.add_argument("--prompt-style", choices=("full", "compact"), default="full")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("theory-check", parents=[common], help="randomized verification of the bounds")
    t.add_argument("--trials", type=int, default=10_000)
    t.add_argument("--grad-trials", type=int, default=None, help="default: min(trials, 1000)")
    t.set_defaults(func=cmd_theory_check)

    f = sub.add_parser("flops", parents=[common], help="FLOP budget table")
    f.add_argument("--L", type=int, default=32)
    f.add_argument("--d", type=int, default=4096)
    f.add_argument("--r", type=int, default=4)
    f.add_argument("--T", type=int, default=100_000)
    f.add_argument("--k", type=int, default=128)
    f.add_argument("--n-steps", type=int, default=32)
    f.add_argument("--format", choices=("json", "text"), default="text")
    f.set_defaults(func=cmd_flops)

    tr = sub.add_parser("train", parents=[common], help="pretrain the toy base model")
    tr.add_argument("--steps", type=int, default=1500)
    tr.add_argument("--docs", type=int, default=4000)
    tr.add_argument("--min-ops", type=int, default=4)
    tr.add_argument("--max-ops", type=int, default=16)
    tr.add_argument("--layers", type=int, default=2)
    tr.add_argument("--heads", type=int, default=4)
    tr.add_argument("--d-model", type=int, default=64)
    tr.add_argument("--mlp-ratio", type=int, default=4)
    tr.add_argument("--max-T", type=int, default=4096)
    tr.add_argument("--no-rope", action="store_true")
    tr.add_argument("--seq-len", type=int, default=512)
    tr.add_argument("--batch-size", type=int, default=4)
    tr.add_argument("--lr", type=float, default=3e-3)
    tr.set_defaults(func=cmd_train)

    r = sub.add_parser("run", parents=[common], help="run a configured experiment")
    r.set_defaults(func=cmd_run)

    sw = sub.add_parser("sweep", parents=[common], help="score qTTT learning rates on a config's tasks")
    sw.add_argument("--lrs", type=float, nargs="+", default=[1e-5, 1e-4, 1e-3])
    sw.add_argument("--span-lens", type=int, nargs="+", default=None, help="default: the config's span_len")
    sw.set_defaults(func=cmd_sweep)

    rep = sub.add_parser("report", parents=[common], help="aggregate a results directory")
    rep.add_argument("results", nargs="?", help="results directory (default: --out or ./results)")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.command != "run" and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except (ConfigError, BudgetMismatch, CheckpointError, ValueError, OSError) as exc:
        print(f"qttt-lab {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
