"""Command-line entry points.

Subcommands mirror the pipeline stages: gen-data, finetune-teacher, stage1,
stage2, evaluate, flops, sweep. Every run takes a JSON config (the RunConfig
schema documented in the README), a seed, and an output directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import DatasetSpec, SynthSpec, generate_synthetic, load_jsonl, save_jsonl, write_vocab
from .flops import ModelCost, PaddingStrategy, model_flops
from .pipeline import (
    MetricsWriter,
    PipelineError,
    RunConfig,
    evaluate,
    finetune_teacher,
    load_model_checkpoint,
    load_trace_jsonl,
    save_model_checkpoint,
    save_trace_jsonl,
    stage1_train,
    stage2_train,
    sweep,
    write_sweep_csv,
)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out-dir", default=".", help="where checkpoints, metrics and reports land")


def _load_cfg(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config)
    return replace(cfg, seed=args.seed)


def _load_data(args, cfg: RunConfig):
    spec = DatasetSpec(
        name=args.dataset_name,
        vocab_size=cfg.model.vocab_size,
        num_labels=cfg.model.num_labels,
        metric=args.metric,
    )
    train = load_jsonl(args.train, spec.vocab_size, spec.num_labels) if args.train else None
    val = load_jsonl(args.val, spec.vocab_size, spec.num_labels)
    return spec, train, val


def cmd_gen_data(args) -> int:
    spec = SynthSpec(
        vocab_size=args.vocab_size,
        num_labels=args.num_labels,
        signal_count=args.signal_count,
        min_len=args.min_len,
        max_len=args.max_len,
        num_examples=args.num_examples,
    )
    rng = np.random.default_rng(args.seed)
    data = generate_synthetic(spec, rng)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_val = int(len(data) * args.val_fraction)
    save_jsonl(out / "train.jsonl", data[: len(data) - n_val])
    save_jsonl(out / "val.jsonl", data[len(data) - n_val:])
    write_vocab(out / "vocab.json", spec.vocab_size, spec.num_labels)
    print(f"wrote {len(data) - n_val} train / {n_val} val examples to {out}")
    return 0


def cmd_finetune_teacher(args) -> int:
    cfg = _load_cfg(args)
    _, train, val = _load_data(args, cfg)
    metrics = MetricsWriter(cfg.model.num_layers)
    encoder = finetune_teacher(cfg, train, val, metrics=metrics)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model_checkpoint(out / "teacher.ckpt", cfg, encoder.params, stage="teacher")
    metrics.save(out / "teacher_metrics.csv")
    print(f"teacher checkpoint: {out / 'teacher.ckpt'}")
    return 0


def cmd_stage1(args) -> int:
    cfg = _load_cfg(args)
    _, train, val = _load_data(args, cfg)
    t_cfg, t_params, _, _, _ = load_model_checkpoint(args.teacher)
    from .encoder import Encoder

    teacher = Encoder(t_cfg.model, params=t_params)
    metrics = MetricsWriter(cfg.model.num_layers)
    result = stage1_train(cfg, train, val, teacher, metrics=metrics)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model_checkpoint(
        out / "stage1.ckpt", cfg, result.compact_params, stage="stage1",
        masks=result.masks,
        extra_meta={
            "lagrangian": {"mu1": result.lagrangian.mu1, "mu2": result.lagrangian.mu2,
                           "target": result.lagrangian.target},
            "converged": result.converged,
            "final_sparsity": result.final_sparsity,
            "compact_report": result.compact_report,
        },
    )
    metrics.save(out / "stage1_metrics.csv")
    status = "converged" if result.converged else "DID NOT CONVERGE"
    print(f"stage1 {status}: sparsity {result.final_sparsity:.4f} "
          f"(target {cfg.target_sparsity}), params {result.compact_report['params_after']}")
    return 0 if result.converged else 3


def cmd_stage2(args) -> int:
    cfg = _load_cfg(args)
    _, train, val = _load_data(args, cfg)
    ck_cfg, params, _, masks, meta = load_model_checkpoint(args.checkpoint)
    metrics = MetricsWriter(cfg.model.num_layers)
    try:
        result = stage2_train(cfg, train, val, params, metrics=metrics)
    except PipelineError as e:
        print(f"stage2 aborted: {e}", file=sys.stderr)
        return 4
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model_checkpoint(out / "stage2.ckpt", cfg, result.params, stage="stage2",
                          sampler=result.sampler, masks=masks)
    metrics.save(out / "stage2_metrics.csv")
    print(f"stage2 done: val accuracy {result.val_accuracy:.4f}, "
          f"keep rates {[round(r, 3) for r in result.keep_rates]}")
    return 0


def cmd_evaluate(args) -> int:
    spec_cfg, params, sampler, _, meta = load_model_checkpoint(args.checkpoint)
    cfg = spec_cfg if args.config is None else replace(RunConfig.from_json(args.config), seed=args.seed)
    spec = DatasetSpec(name=args.dataset_name, vocab_size=cfg.model.vocab_size,
                       num_labels=cfg.model.num_labels, metric=args.metric)
    val = load_jsonl(args.val, spec.vocab_size, spec.num_labels)
    strategy = PaddingStrategy(mode=args.padding, dataset=args.dataset_name,
                               batch_size=args.batch_size, fixed_len=args.fixed_len)
    result = evaluate(cfg, params, val, spec, strategy, sampler=sampler)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_trace_jsonl(out / "trace.jsonl", result.traces)
    with open(out / "flops_report.json", "w") as fh:
        json.dump(result.flops.to_dict(), fh, indent=1)
    print(f"{spec.metric}={result.metric_value:.4f} accuracy={result.accuracy:.4f} "
          f"speedup={result.flops.speedup:.2f}x ({args.padding} padding)")
    return 0


def cmd_flops(args) -> int:
    cfg, params, sampler, _, meta = load_model_checkpoint(args.checkpoint)
    traces = load_trace_jsonl(args.trace)
    strategy = PaddingStrategy(mode=args.padding, dataset=args.dataset_name,
                               batch_size=args.batch_size, fixed_len=args.fixed_len)
    cost = ModelCost.from_params(params, cfg.model, sampler_on=sampler is not None,
                                 sampler_dim=sampler.sampler_dim if sampler else None)
    baseline = ModelCost.dense(cfg.model)
    report = model_flops(traces, cost, strategy, baseline_cost=baseline)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "flops_report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=1)
    print(f"total={report.total} baseline={report.baseline} speedup={report.speedup:.2f}x")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    spec, train, val = _load_data(args, cfg)
    with open(args.grid) as fh:
        grid = json.load(fh)
    rows = sweep(cfg, train, val, spec, grid, sequence_fixed_len=args.fixed_len)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(out / "tradeoff.csv", rows)
    ok = sum(1 for r in rows if r["status"] == "ok")
    print(f"sweep: {ok}/{len(rows)} points ok -> {out / 'tradeoff.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slimformer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic planted-signal dataset")
    p.add_argument("--vocab-size", type=int, default=1000)
    p.add_argument("--num-labels", type=int, default=2)
    p.add_argument("--signal-count", type=int, default=1)
    p.add_argument("--min-len", type=int, default=8)
    p.add_argument("--max-len", type=int, default=24)
    p.add_argument("--num-examples", type=int, default=2000)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_gen_data)

    for name, fn, needs_train in (
        ("finetune-teacher", cmd_finetune_teacher, True),
        ("stage1", cmd_stage1, True),
        ("stage2", cmd_stage2, True),
        ("sweep", cmd_sweep, True),
    ):
        p = sub.add_parser(name)
        _add_common(p)
        p.add_argument("--train", required=needs_train)
        p.add_argument("--val", required=True)
        p.add_argument("--dataset-name", default="synthetic")
        p.add_argument("--metric", choices=("accuracy", "f1"), default="accuracy")
        if name == "stage1":
            p.add_argument("--teacher", required=True, help="teacher checkpoint")
        if name == "stage2":
            p.add_argument("--checkpoint", required=True, help="stage1 (or teacher) checkpoint")
        if name == "sweep":
            p.add_argument("--grid", required=True, help="JSON list of grid points")
            p.add_argument("--fixed-len", type=int, default=None,
                           help="sequence-mode padded length for datasets outside the published table")
        p.set_defaults(func=fn)

    p = sub.add_parser("evaluate")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--val", required=True)
    p.add_argument("--dataset-name", default="synthetic")
    p.add_argument("--metric", choices=("accuracy", "f1"), default="accuracy")
    p.add_argument("--padding", choices=("batch", "sequence"), default="batch")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--fixed-len", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("flops", help="price a stored pruning trace")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--dataset-name", default="synthetic")
    p.add_argument("--padding", choices=("batch", "sequence"), default="batch")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--fixed-len", type=int, default=None)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_flops)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
