"""Command-line entry point.

Verbs: train, sweep, compare, bench, report, dataset export.  Any config
key can be overridden with ``--key value`` (or ``--key=value``); global
flags --config/--out/--seed/--seeds/--precision are shorthands.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .compact import apply_compaction, benchmark_backbone, mac_counts, plan_compaction
from .config import ExperimentConfig, load_config
from .data import export_dataset, make_splits
from .harness import (compare_structured_unstructured, emit_report,
                      load_checkpoint, run_experiment, sweep_lambda)
from .model import build_model
from .sparsity import make_partition


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default="", help="path to a key = value config file")
    p.add_argument("--out", default="", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="run a single seed")
    p.add_argument("--seeds", type=int, default=None, help="run seeds 0..N-1")
    p.add_argument("--precision", choices=("f32", "f64"), default=None)


def _collect_overrides(rest: list[str]) -> dict[str, str]:
    overrides: dict[str, str] = {}
    i = 0
    while i < len(rest):
        token = rest[i]
        if not token.startswith("--"):
            raise SystemExit(f"unexpected argument {token!r}; overrides are --key value")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            i += 1
            if i >= len(rest):
                raise SystemExit(f"missing value for override --{key}")
            value = rest[i]
        overrides[key] = value
        i += 1
    return overrides


def _build_config(args, rest: list[str]) -> ExperimentConfig:
    config = load_config(args.config, _collect_overrides(rest))
    if args.out:
        config = config.replace(out_dir=args.out)
    if args.precision:
        config = config.replace(precision=args.precision)
    if args.seed is not None:
        config = config.replace(seeds=[args.seed])
    elif args.seeds is not None:
        config = config.replace(seeds=list(range(args.seeds)))
    config.validate()
    return config


def _print_run(result) -> None:
    group, param = result.sparsity_means()
    print(f"[{result.name}] lambda={result.lam:g} scheme={result.scheme} "
          f"group_sparsity={group:.2f}% param_sparsity={param:.2f}% "
          f"seeds_ok={len(result.ok_seeds())}/{len(result.seeds)}")
    for task, (mean, std) in result.metric_stats("test").items():
        spread = "" if std is None else f" +- {std:.4f}"
        print(f"  {task}: {mean:.4f}{spread}")


def cmd_train(args, rest) -> int:
    config = _build_config(args, rest)
    result = run_experiment(config)
    _print_run(result)
    print(f"artifacts written to {config.out_dir}")
    return 0


def cmd_sweep(args, rest) -> int:
    config = _build_config(args, rest)
    results = sweep_lambda(config)
    for r in results:
        _print_run(r)
    print(f"artifacts written to {config.out_dir}")
    return 0


def cmd_compare(args, rest) -> int:
    config = _build_config(args, rest)
    cmp_result = compare_structured_unstructured(config)
    print(f"target param sparsity {cmp_result.target_param_pct:.2f}% "
          f"achieved {cmp_result.achieved_param_pct:.2f}% "
          f"(matched={cmp_result.matched}, iterations={cmp_result.iterations})")
    for row in cmp_result.rows():
        print(f"  {row['scheme']:<13} lambda={row['lambda']:g} "
              f"group={row['group_sparsity_pct']:.2f}% "
              f"param={row['param_sparsity_pct']:.2f}%")
    return 0


def cmd_bench(args, rest) -> int:
    config = _build_config(args, rest)
    seed = config.seeds[0]
    model, registry = build_model(config.backbone_spec(), config.task_specs(),
                                  seed, config.dtype)
    if args.ckpt:
        _, params, _, _ = load_checkpoint(args.ckpt)
        for entry in registry.entries():
            entry.tensor.data = params[entry.name].astype(entry.tensor.dtype)
    partition = make_partition(registry, "channel_wise")
    plan = plan_compaction(model, partition)
    compact = apply_compaction(model, plan)
    shape = (config.batch_size, 3, config.image_size, config.image_size)
    dense = benchmark_backbone(model.forward_shared_raw, shape, seed=seed)
    pruned = benchmark_backbone(compact.forward, shape, seed=seed)
    achieved, idealized = mac_counts(model, plan, (config.image_size, config.image_size))
    print(f"dense   {dense.median_ms:.3f} ms (mean {dense.mean_ms:.3f} "
          f"+- {dense.std_ms:.3f})")
    print(f"compact {pruned.median_ms:.3f} ms (mean {pruned.mean_ms:.3f} "
          f"+- {pruned.std_ms:.3f})  speedup x{dense.median_ms / pruned.median_ms:.2f}")
    print(f"multiplies: achieved {achieved}, idealized cross-layer {idealized}")
    return 0


def cmd_report(args) -> int:
    import json
    report = json.loads(Path(args.from_path).read_text())
    written = emit_report(report["runs"], args.out or ".")
    for p in written:
        print(p)
    return 0


def cmd_dataset_export(args, rest) -> int:
    config = _build_config(args, rest)
    ds_config = config.dataset_config()
    splits = make_splits(ds_config)
    target = args.file or str(Path(config.out_dir) / "dataset.gspr")
    Path(target).parent.mkdir(parents=True, exist_ok=True)
    export_dataset(target, splits, ds_config)
    print(f"wrote {sum(len(s) for s in splits)} samples to {target}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="sparseshare",
        description="Group-sparse multi-task training experiments")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in ("train", "sweep", "compare"):
        _add_common(sub.add_parser(verb))
    bench = sub.add_parser("bench")
    _add_common(bench)
    bench.add_argument("--ckpt", default="", help="checkpoint to benchmark")
    report = sub.add_parser("report")
    report.add_argument("--from", dest="from_path", required=True)
    report.add_argument("--out", default="")
    dataset = sub.add_parser("dataset")
    ds_sub = dataset.add_subparsers(dest="dataset_verb", required=True)
    export = ds_sub.add_parser("export")
    _add_common(export)
    export.add_argument("--file", default="", help="container file to write")

    args, rest = parser.parse_known_args(argv)
    if args.verb == "train":
        return cmd_train(args, rest)
    if args.verb == "sweep":
        return cmd_sweep(args, rest)
    if args.verb == "compare":
        return cmd_compare(args, rest)
    if args.verb == "bench":
        return cmd_bench(args, rest)
    if args.verb == "report":
        return cmd_report(args)
    if args.verb == "dataset":
        return cmd_dataset_export(args, rest)
    raise SystemExit(f"unknown verb {args.verb!r}")


if __name__ == "__main__":
    sys.exit(main())
