"""Command-line entry point: train / eval / analyze / gen-data.

Every command resolves its configuration up front (exit code 2 on validation
errors, before any file is written), records it in ``run_meta.json``, and
emits deterministic CSV artifacts (LF endings, 6 decimal places).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import capture_trace, heatmap, mods_profile, write_heatmap_csv, write_mods_csv
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, apply_overrides
from .data import SyntheticTask, split_stream
from .errors import CheckpointFormatError, ConfigurationError, TrainingDivergedError
from .evals import ActivationPattern, expand_pattern, flat_sweep_patterns, sweep, write_reports_csv
from .model import build_model
from .seeding import stream
from .trainer import TrainConfig, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

DEFAULT_ANALYSIS_TOKENS = 8192
DEFAULT_EVAL_TOKENS = 65536


def _write_run_meta(out_dir: Path, command: str, config: dict, seed: int) -> None:
    meta = {
        "command": command,
        "config": config,
        "seed": seed,
        "artifact_version": __version__,
    }
    (out_dir / "run_meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _strategy_overrides(args, cfg_dict: dict) -> None:
    strat = cfg_dict["train"]["strategy"]
    if args.strategy is not None:
        strat["kind"] = args.strategy.replace("-", "_")
    for flag, key in (("k", "k_fixed"), ("k_min", "k_min"), ("k_max", "k_max"),
                      ("tau", "tau"), ("p", "p"), ("budget_avg", "budget_avg")):
        value = getattr(args, flag)
        if value is not None:
            strat[key] = value
    if args.seed is not None:
        cfg_dict["train"]["seed"] = args.seed
    if args.tokens is not None:
        cfg_dict["train"]["tokens_total"] = args.tokens
    if args.output_dir is not None:
        cfg_dict["output_dir"] = args.output_dir


def cmd_train(args) -> int:
    try:
        cfg_dict = RunConfig.from_json(args.config).to_dict()
        _strategy_overrides(args, cfg_dict)
        apply_overrides(cfg_dict, args.set or [])
        run = RunConfig.from_dict(cfg_dict)
        # total_steps <= 0 means "decay over the whole run"
        if run.train.optimizer.total_steps <= 0:
            run.train.optimizer.total_steps = run.train.num_steps
        run.validate()
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(run.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_run_meta(out_dir, "train", run.to_dict(), run.train.seed)

    model = build_model(run.model, stream(run.train.seed, "init"))
    ckpt_meta = {
        "strategy": run.train.strategy.to_dict(),
        "step": 0,
        "task": run.task.to_dict(),
        "train": run.train.to_dict(),
    }
    log_path = out_dir / "train_log.csv"
    interval = args.ckpt_interval
    try:
        with open(log_path, "w", newline="") as log:
            log.write("step,tokens,loss,lr,mean_k\n")
            tokens_seen = 0

            def on_step(report):
                nonlocal tokens_seen
                tokens_seen += report.tokens
                log.write(
                    f"{report.step},{tokens_seen},{report.loss:.6f},"
                    f"{report.lr:.6f},{report.mean_k:.6f}\n"
                )
                if interval and report.step % interval == 0:
                    ckpt_meta["step"] = report.step
                    save_checkpoint(model, dict(ckpt_meta), out_dir / f"checkpoint_step{report.step}.mmoe")

            reports = train(model, run.train, run.task, on_step=on_step)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    ckpt_meta["step"] = reports[-1].step if reports else 0
    save_checkpoint(model, dict(ckpt_meta), out_dir / "checkpoint_final.mmoe")
    print(f"trained {reports[-1].step} steps, final loss {reports[-1].loss:.4f}")
    return EXIT_OK


def _load_for_inference(args):
    model, meta = load_checkpoint(args.checkpoint)
    task_dict = meta.get("task")
    if args.config:
        run = RunConfig.from_json(args.config)
        task = run.task
        seq_len = run.train.seq_len
    elif task_dict:
        task = SyntheticTask.from_dict(task_dict)
        seq_len = int(meta.get("train", {}).get("seq_len", model.cfg.max_seq_len))
    else:
        raise ConfigurationError(
            "checkpoint has no task metadata; pass --config to supply one"
        )
    if args.seq_len is not None:
        seq_len = args.seq_len
    seq_len = min(seq_len, model.cfg.max_seq_len)
    return model, meta, task, seq_len


def _parse_sweep(text: str) -> list[int]:
    if ".." in text:
        lo, _, hi = text.partition("..")
        try:
            return list(range(int(lo), int(hi) + 1))
        except ValueError as exc:
            raise ConfigurationError(f"cannot parse sweep range {text!r}") from exc
    try:
        return [int(part) for part in text.split(",")]
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse sweep list {text!r}") from exc


def cmd_eval(args) -> int:
    try:
        model, meta, task, seq_len = _load_for_inference(args)
        n_layers = len(model.blocks)
        if args.pattern:
            patterns = [ActivationPattern.parse(args.pattern)]
        elif args.sweep:
            patterns = flat_sweep_patterns(_parse_sweep(args.sweep))
        elif args.k is not None:
            patterns = [ActivationPattern((args.k,))]
        else:
            raise ConfigurationError("one of --k, --pattern, --sweep is required")
        for pat in patterns:
            for k in expand_pattern(pat, n_layers):
                if k > model.cfg.num_experts:
                    raise ConfigurationError(
                        f"pattern {pat.label()} requests {k} experts, model has "
                        f"{model.cfg.num_experts}"
                    )
    except (ConfigurationError, CheckpointFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = {
        "checkpoint": str(args.checkpoint),
        "patterns": [p.label() for p in patterns],
        "tokens": args.tokens,
        "seq_len": seq_len,
        "task": task.to_dict(),
    }
    _write_run_meta(out_dir, "eval", cfg, args.seed)
    eval_tokens = split_stream(task, "eval", args.tokens)
    reports = sweep(model, patterns, eval_tokens, seq_len, batch_size=args.batch_size)
    out_path = out_dir / args.out
    write_reports_csv(reports, out_path)
    for r in reports:
        print(r.csv_row())
    return EXIT_OK


def cmd_analyze(args) -> int:
    try:
        model, meta, task, seq_len = _load_for_inference(args)
    except (ConfigurationError, CheckpointFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(args.output_dir)
    if args.mode == "mods":
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg = {"checkpoint": str(args.checkpoint)}
        _write_run_meta(out_dir, "analyze-mods", cfg, 0)
        values = mods_profile(model)
        write_mods_csv(values, out_dir / "mods.csv")
        for li, v in enumerate(values):
            print(f"layer {li}: mods {v:.6f}")
        return EXIT_OK

    # focused rank-correlation heatmap
    strategy = meta.get("strategy") or {}
    k_large = args.k_large or strategy.get("k_max") or min(6, model.cfg.num_experts)
    if k_large > model.cfg.num_experts or k_large < 2:
        print(
            f"error: k_large={k_large} invalid for {model.cfg.num_experts} experts",
            file=sys.stderr,
        )
        return EXIT_CONFIG
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = {
        "checkpoint": str(args.checkpoint),
        "k_large": int(k_large),
        "tokens": args.tokens,
        "seq_len": seq_len,
        "task": task.to_dict(),
    }
    _write_run_meta(out_dir, "analyze-spearman", cfg, args.seed)
    eval_tokens = split_stream(task, "eval", args.tokens)
    n_layers = len(model.blocks)
    trace_large = capture_trace(model, eval_tokens, [k_large] * n_layers, seq_len)
    traces_small = {
        k: capture_trace(model, eval_tokens, [k] * n_layers, seq_len)
        for k in range(1, k_large)
    }
    hm = heatmap(trace_large, traces_small, k_large)
    write_heatmap_csv(hm, out_dir / "spearman_heatmap.csv")
    dropped = int(hm.undefined_counts.sum())
    print(f"heatmap {hm.matrix.shape[0]} layers x {len(hm.k_smalls)} budgets "
          f"over {hm.tokens} tokens ({dropped} undefined correlations dropped)")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    try:
        run = RunConfig.from_json(args.config)
        run.task.validate()
        if args.split not in ("train", "eval"):
            raise ConfigurationError(f"unknown split {args.split!r}")
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    tokens = split_stream(run.task, args.split, args.tokens)
    np.save(out_path, tokens)
    _write_run_meta(
        out_path.parent,
        "gen-data",
        {"task": run.task.to_dict(), "split": args.split, "tokens": args.tokens},
        run.task.seed_train if args.split == "train" else run.task.seed_eval,
    )
    print(f"wrote {tokens.size} tokens to {out_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="elastic-moe",
        description="Train, evaluate, and analyze elastic mixture-of-experts models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a JSON config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--strategy", help="override strategy kind (e.g. mmoe-layer)")
    p_train.add_argument("--k", type=int, help="fixed expert count (fixed_topk)")
    p_train.add_argument("--k-min", dest="k_min", type=int)
    p_train.add_argument("--k-max", dest="k_max", type=int)
    p_train.add_argument("--tau", type=float, help="capacity-aware sampling temperature")
    p_train.add_argument("--p", type=float, help="top-p threshold")
    p_train.add_argument("--budget-avg", dest="budget_avg", type=float)
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--tokens", type=int, help="override total training tokens")
    p_train.add_argument("--output-dir", dest="output_dir")
    p_train.add_argument("--ckpt-interval", dest="ckpt_interval", type=int, default=0,
                         help="save a checkpoint every N steps (0 = final only)")
    p_train.add_argument("--set", action="append", metavar="PATH=VALUE",
                         help="dotted-path config override, repeatable")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint under expert-count schedules")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--k", type=int, help="flat expert count")
    p_eval.add_argument("--pattern", help="per-group counts, e.g. 3-3-2-2")
    p_eval.add_argument("--sweep", help="range like 1..6 or comma list")
    p_eval.add_argument("--tokens", type=int, default=DEFAULT_EVAL_TOKENS)
    p_eval.add_argument("--seq-len", dest="seq_len", type=int)
    p_eval.add_argument("--batch-size", dest="batch_size", type=int, default=32)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--config", help="config supplying the eval task")
    p_eval.add_argument("--output-dir", dest="output_dir", default=".")
    p_eval.add_argument("--out", default="eval.csv")
    p_eval.set_defaults(func=cmd_eval)

    p_an = sub.add_parser("analyze", help="router diagnostics")
    p_an.add_argument("mode", choices=["spearman", "mods"])
    p_an.add_argument("checkpoint")
    p_an.add_argument("--k-large", dest="k_large", type=int)
    p_an.add_argument("--tokens", type=int, default=DEFAULT_ANALYSIS_TOKENS)
    p_an.add_argument("--seq-len", dest="seq_len", type=int)
    p_an.add_argument("--seed", type=int, default=0)
    p_an.add_argument("--config", help="config supplying the analysis task")
    p_an.add_argument("--output-dir", dest="output_dir", default=".")
    p_an.set_defaults(func=cmd_analyze)

    p_gen = sub.add_parser("gen-data", help="write a synthetic token stream to .npy")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--split", default="train")
    p_gen.add_argument("--tokens", type=int, default=1_000_000)
    p_gen.add_argument("--out", default="tokens.npy")
    p_gen.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
