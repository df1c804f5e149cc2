"""Command-line entry point: ``influlm <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import data, oracle
from .attribution import apply_plan, difficulty_flip
from .influence import SPAN_MODES
from .pipeline import (
    STAGES, RunConfig, StageError, load_config, load_dataset, load_queries, read_records, records_path, resolve_output_dir,
    run_pipeline,
)
from .report import ReportOptions, emit_report

logger = logging.getLogger("influlm")

# flag name -> (dotted config key, type, help)
_CONFIG_FLAGS = {
    "dataset": ("dataset", str, "training dataset (JSON lines)"),
    "evalset": ("evalset", str, "evaluation problems (JSON lines with prompt/answer/domain)"),
    "pool": ("pool", str, "candidate pool for the difficulty flip"),
    "output-dir": ("output_dir", str, "artifact directory (relative paths resolve under $INFLULM_OUTPUT_ROOT)"),
    "d-model": ("model.d_model", int, None),
    "n-layers": ("model.n_layers", int, None),
    "n-heads": ("model.n_heads", int, None),
    "d-ff": ("model.d_ff", int, None),
    "max-seq-len": ("model.max_seq_len", int, "truncation length in tokens"),
    "steps": ("training.steps", int, None),
    "batch-size": ("training.batch_size", int, None),
    "lr": ("training.lr", float, None),
    "weight-decay": ("training.weight_decay", float, None),
    "train-seed": ("training.seed", int, None),
    "sample-count": ("factors.sample_count", int, "examples used to estimate curvature"),
    "max-positions": ("factors.max_positions", int, "token positions per example for the covariance factors"),
    "damping": ("factors.damping", float, "absolute damping (default: factor x mean eigenvalue)"),
    "damping-factor": ("factors.damping_factor", float, None),
    "query-n": ("query_n", int, "size of the correctly-answered query set"),
    "span-mode": ("span_mode", str, f"one of {SPAN_MODES}"),
    "math-easy-threshold": ("analysis.math_easy_threshold", int, None),
    "code-hard-threshold": ("analysis.code_hard_threshold", int, None),
    "top-fraction": ("analysis.top_fraction", float, None),
    "seed": ("seed", int, None),
}
_LIST_FLAGS = {
    "targets": ("score_targets", str, "score targets: instance token sequence"),
    "robustness-ns": ("analysis.robustness_ns", int, "query-set sizes for the robustness check"),
    "group-keys": ("analysis.group_keys", str, None),
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    for flag, (_, typ, help_) in _CONFIG_FLAGS.items():
        p.add_argument(f"--{flag}", type=typ, help=help_)
    for flag, (_, typ, help_) in _LIST_FLAGS.items():
        p.add_argument(f"--{flag}", type=typ, nargs="+", help=help_)
    p.add_argument("--reverse-flip", action="store_true", default=None, help="plan the opposite swap")


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for flag, (key, _, _) in {**_CONFIG_FLAGS, **_LIST_FLAGS}.items():
        value = getattr(args, flag.replace("-", "_"))
        if value is not None:
            overrides[key] = value
    if args.reverse_flip:
        overrides["analysis.reverse_flip"] = True
    if args.config:
        return load_config(args.config, overrides)
    missing = [k for k in ("dataset", "evalset", "output_dir") if k not in overrides]
    if missing:
        raise SystemExit(f"error: without --config these flags are required: {', '.join(missing)}")
    nested: dict = {}
    for key, value in overrides.items():
        node = nested
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return RunConfig.from_dict(nested)


def _cmd_stage(args) -> int:
    result = run_pipeline(config_from_args(args), until=args.until)
    print(json.dumps({"output_dir": str(result.output_dir), "executed": result.executed,
                      "cached": result.cached}, sort_keys=True))
    return 0


def _cmd_flip(args) -> int:
    dataset = data.ingest(args.dataset).examples
    pool = data.ingest(args.pool).examples
    plan = difficulty_flip(dataset, pool, args.math_easy_threshold, args.code_hard_threshold,
                           args.reverse, args.seed)
    out = Path(args.out)
    data.write_dataset(out, apply_plan(dataset, pool, plan))
    print(json.dumps(plan.to_dict(), indent=2, sort_keys=True))
    return 0


def _cmd_oracle(args) -> int:
    spec = oracle.make_logistic_proxy(args.n, args.dim, args.l2, seed=args.seed)
    cmp, report = oracle.run_loo_validation(spec, args.damping)
    print(json.dumps(report, indent=2, sort_keys=True))
    ok = cmp.spearman >= args.min_spearman and cmp.sign_agreement >= args.min_sign_agreement
    return 0 if ok else 1


def _cmd_report(args) -> int:
    cfg = config_from_args(args)
    run_dir = resolve_output_dir(cfg.output_dir)
    records = {t: read_records(run_dir / records_path(t)) for t in load_queries(run_dir)}
    options = ReportOptions(fraction=cfg.analysis.top_fraction, n_examples=args.n_examples,
                            group_keys=cfg.analysis.group_keys)
    written = emit_report(records, load_dataset(cfg.dataset, cfg.model.max_seq_len), args.out or run_dir / "report", options)
    print(json.dumps(written, indent=2, sort_keys=True))
    return 0


def _cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data.write_dataset(out / "train.jsonl", data.synthetic_corpus(args.n_math, args.n_code, args.seed))
    evalset = (data.synthetic_evalset("math", args.n_eval, args.seed + 1)
               + data.synthetic_evalset("code", args.n_eval, args.seed + 1))
    data.write_evalset(out / "eval.jsonl", evalset)
    pool = (data.synthetic_examples("math", args.n_pool, args.seed + 2, prefix="pm", difficulties=(3, 4, 5))
            + data.synthetic_examples("code", args.n_pool, args.seed + 2, prefix="pc", difficulties=(1, 2, 3)))
    data.write_dataset(out / "pool.jsonl", pool)
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="influlm", description="Influence-function attribution for a tiny LM.")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--workers", type=int, default=None, help="intra-op threads (numerics are unaffected)")
    sub = parser.add_subparsers(dest="command", required=True)

    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the pipeline through the {stage} stage")
        _add_config_flags(p)
        p.set_defaults(func=_cmd_stage, until=stage)
    p = sub.add_parser("run", help="run the full pipeline")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_stage, until=STAGES[-1])

    p = sub.add_parser("report", help="re-emit the report from the scores of an existing run")
    _add_config_flags(p)
    p.add_argument("--n-examples", type=int, default=10)
    p.add_argument("--out", help="report directory (default: <output-dir>/report)")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("flip", help="plan and apply the difficulty flip")
    p.add_argument("--dataset", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--out", required=True, help="path of the reweighted dataset")
    p.add_argument("--math-easy-threshold", type=int, default=2)
    p.add_argument("--code-hard-threshold", type=int, default=4)
    p.add_argument("--reverse", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_flip)

    p = sub.add_parser("oracle", help="dense influence vs. leave-one-out refits on a logistic proxy")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--dim", type=int, default=10)
    p.add_argument("--l2", type=float, default=1e-2)
    p.add_argument("--damping", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-spearman", type=float, default=0.9)
    p.add_argument("--min-sign-agreement", type=float, default=0.9)
    p.set_defaults(func=_cmd_oracle)

    p = sub.add_parser("synth", help="write a synthetic train/eval/pool fixture")
    p.add_argument("--out", required=True)
    p.add_argument("--n-math", type=int, default=500)
    p.add_argument("--n-code", type=int, default=500)
    p.add_argument("--n-eval", type=int, default=300)
    p.add_argument("--n-pool", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers:
        torch.set_num_threads(args.workers)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
