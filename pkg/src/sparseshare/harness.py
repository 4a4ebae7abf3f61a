"""Experiment orchestration: seeded runs, lambda sweeps, structured-vs-
unstructured comparisons, checkpointing, and report emission.

Every run is fully determined by (config, seed) except wall-clock timings.
Failed seeds are recorded rather than dropped; aggregates use successful
seeds only and report the count.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import read_container, write_container
from .compact import (apply_compaction, benchmark_backbone, plan_compaction,
                      threadpool_limits)
from .config import ExperimentConfig
from .data import collate, iterate_batches, load_dataset, make_splits
from .losses import UncertaintyWeights
from .metrics import METRIC_KINDS, task_metric
from .model import MultiTaskModel, TaskSpec, build_model
from .optim import ProxAdam, TrainingDiverged, train_epoch
from .sparsity import make_partition, measure_sparsity


def _round6(x: float) -> float:
    return float(f"{float(x):.6g}")


def _fmt(x) -> str:
    if x is None or x == "":
        return ""
    return f"{float(x):.6g}"


# ---------------------------------------------------------------------------
# single seed
# ---------------------------------------------------------------------------


@dataclass
class SeedResult:
    seed: int
    failed: bool = False
    error: str = ""
    metric_kinds: dict[str, str] = field(default_factory=dict)
    val_metrics: dict[str, float] = field(default_factory=dict)
    test_metrics: dict[str, float] = field(default_factory=dict)
    group_sparsity_pct: float = 0.0       # channel-wise accounting
    param_sparsity_pct: float = 0.0
    scheme_group_sparsity_pct: float = 0.0  # under the training partition
    profile: list[tuple[int, float, float]] = field(default_factory=list)
    layer_rows: list[tuple[str, int, int]] = field(default_factory=list)
    eta: list[float] = field(default_factory=list)
    task_losses: dict[str, float] = field(default_factory=dict)
    bench: dict[str, float] = field(default_factory=dict)
    wall_time_s: float = 0.0


def evaluate(model: MultiTaskModel, tasks: list[TaskSpec], split, batch_size: int,
             dtype) -> dict[str, float]:
    """Pooled metrics over a split, computed from the raw inference path."""
    preds = {t.name: [] for t in tasks}
    targets = {t.name: [] for t in tasks}
    for i in range(0, len(split), batch_size):
        batch = collate(split[i:i + batch_size], dtype=dtype)
        feats = model.forward_shared_raw(batch.images)
        for t in tasks:
            preds[t.name].append(model.forward_task_raw(t, feats))
            targets[t.name].append(batch.target_for(t))
    out = {}
    for t in tasks:
        rec = task_metric(t, np.concatenate(preds[t.name]),
                          np.concatenate(targets[t.name]))
        out[t.name] = rec.value
    return out


def run_seed(config: ExperimentConfig, splits, seed: int,
             checkpoint_path: str | Path | None = None) -> SeedResult:
    # single-threaded BLAS: faster at these sizes and thread-count independent
    with threadpool_limits(limits=1):
        return _run_seed(config, splits, seed, checkpoint_path)


def _run_seed(config: ExperimentConfig, splits, seed: int,
              checkpoint_path: str | Path | None = None) -> SeedResult:
    t_start = time.perf_counter()
    tasks = config.task_specs()
    dtype = config.dtype
    result = SeedResult(seed=seed,
                        metric_kinds={t.name: METRIC_KINDS[t.kind] for t in tasks})
    train_split, val_split, test_split = splits

    model, registry = build_model(config.backbone_spec(), tasks, seed, dtype)
    partition = make_partition(registry, config.scheme)
    combiner = UncertaintyWeights(len(tasks), dtype=dtype,
                                  frozen=config.uncertainty == "frozen")
    params = [(e.name, e.tensor) for e in registry.entries()]
    if not combiner.frozen:
        params.append(("loss.eta", combiner.eta))
    optimizer = ProxAdam(params, partition, lr=config.lr, lam=config.lam,
                         prox_step=config.prox_step)

    try:
        for epoch in range(config.epochs):
            batches = iterate_batches(train_split, config.batch_size,
                                      shuffle_seed=seed * 1_000_003 + epoch,
                                      dtype=dtype)
            stats = train_epoch(model, tasks, batches, combiner, optimizer,
                                partition, lam=config.lam, epoch=epoch)
            result.profile.append(stats.report.profile_row())
            result.task_losses = stats.task_losses
    except TrainingDiverged as exc:
        result.failed = True
        result.error = str(exc)
        result.wall_time_s = time.perf_counter() - t_start
        return result

    scheme_report = measure_sparsity(registry, partition, epoch=config.epochs - 1)
    if config.scheme == "channel_wise":
        channel_report = scheme_report
    else:
        channel_report = measure_sparsity(registry,
                                          make_partition(registry, "channel_wise"),
                                          epoch=config.epochs - 1)
    result.scheme_group_sparsity_pct = scheme_report.group_sparsity_pct
    result.group_sparsity_pct = channel_report.group_sparsity_pct
    result.param_sparsity_pct = channel_report.param_sparsity_pct
    result.layer_rows = channel_report.layer_rows()
    result.eta = [float(v) for v in combiner.eta.data]
    result.val_metrics = evaluate(model, tasks, val_split, config.batch_size, dtype)
    result.test_metrics = evaluate(model, tasks, test_split, config.batch_size, dtype)

    if config.benchmark:
        plan = plan_compaction(model, make_partition(registry, "channel_wise"))
        compact = apply_compaction(model, plan)
        shape = (config.batch_size, 3, config.image_size, config.image_size)
        dense_bench = benchmark_backbone(model.forward_shared_raw, shape, seed=seed)
        compact_bench = benchmark_backbone(compact.forward, shape, seed=seed)
        result.bench = {
            "dense_mean_ms": dense_bench.mean_ms,
            "dense_std_ms": dense_bench.std_ms,
            "dense_median_ms": dense_bench.median_ms,
            "compact_mean_ms": compact_bench.mean_ms,
            "compact_std_ms": compact_bench.std_ms,
            "compact_median_ms": compact_bench.median_ms,
            "speedup_vs_dense": dense_bench.median_ms / compact_bench.median_ms,
            "compact_params": compact.n_params(),
        }

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, optimizer, combiner,
                        digest=config.digest())
    result.wall_time_s = time.perf_counter() - t_start
    return result


# ---------------------------------------------------------------------------
# experiment = one config over several seeds
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    name: str
    lam: float
    scheme: str
    config_text: str
    seeds: list[SeedResult]
    wall_time_s: float = 0.0

    def ok_seeds(self) -> list[SeedResult]:
        return [s for s in self.seeds if not s.failed]

    def metric_stats(self, split: str = "test") -> dict[str, tuple[float, float | None]]:
        """task -> (mean, std over successful seeds; std None when < 2)."""
        ok = self.ok_seeds()
        out = {}
        if not ok:
            return out
        for task in ok[0].metric_kinds:
            vals = [getattr(s, f"{split}_metrics")[task] for s in ok]
            std = float(np.std(vals)) if len(vals) >= 2 else None
            out[task] = (float(np.mean(vals)), std)
        return out

    def sparsity_means(self) -> tuple[float, float]:
        ok = self.ok_seeds()
        if not ok:
            return 0.0, 0.0
        return (float(np.mean([s.group_sparsity_pct for s in ok])),
                float(np.mean([s.param_sparsity_pct for s in ok])))

    def to_dict(self) -> dict:
        group_mean, param_mean = self.sparsity_means()
        ok = self.ok_seeds()
        metric_kinds = ok[0].metric_kinds if ok else {}
        return {
            "experiment": self.name,
            "lambda": _round6(self.lam),
            "scheme": self.scheme,
            "config": self.config_text,
            "metric_kinds": metric_kinds,
            "metrics_test": {t: {"mean": _round6(m), "std": None if s is None else _round6(s)}
                             for t, (m, s) in self.metric_stats("test").items()},
            "metrics_val": {t: {"mean": _round6(m), "std": None if s is None else _round6(s)}
                            for t, (m, s) in self.metric_stats("val").items()},
            "group_sparsity_pct": _round6(group_mean),
            "param_sparsity_pct": _round6(param_mean),
            "n_seeds_ok": len(ok),
            "n_seeds_failed": len(self.seeds) - len(ok),
            "wall_time_s": self.wall_time_s,
            "seeds": [{
                "seed": s.seed,
                "failed": s.failed,
                "error": s.error,
                "metric_kinds": s.metric_kinds,
                "val_metrics": {k: _round6(v) for k, v in s.val_metrics.items()},
                "test_metrics": {k: _round6(v) for k, v in s.test_metrics.items()},
                "group_sparsity_pct": _round6(s.group_sparsity_pct),
                "param_sparsity_pct": _round6(s.param_sparsity_pct),
                "scheme_group_sparsity_pct": _round6(s.scheme_group_sparsity_pct),
                "profile": [[e, _round6(g), _round6(p)] for e, g, p in s.profile],
                "layers": [[n, t, z] for n, t, z in s.layer_rows],
                "eta": [_round6(v) for v in s.eta],
                "bench": {k: _round6(v) for k, v in s.bench.items()},
                "wall_time_s": s.wall_time_s,
            } for s in self.seeds],
        }


def run_experiment(config: ExperimentConfig, splits=None, write: bool = True,
                   save_checkpoints: bool = True) -> RunResult:
    """Train/evaluate the config over each seed and aggregate.

    A seed whose training diverges is marked failed; remaining seeds still
    run.  When ``write`` is set, CSV/JSON artifacts and checkpoints land
    under ``config.out_dir``.
    """
    config.validate()
    t_start = time.perf_counter()
    if splits is None:
        splits = load_splits(config)
    out_root = Path(config.out_dir)
    seed_results = []
    for seed in config.seeds:
        ckpt = None
        if write and save_checkpoints:
            ckpt_dir = out_root / "checkpoints"
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            ckpt = ckpt_dir / f"{run_id(config.name, config.lam)}_s{seed}.gspr"
        seed_results.append(run_seed(config, splits, seed, checkpoint_path=ckpt))
    result = RunResult(name=config.name, lam=config.lam, scheme=config.scheme,
                       config_text=config.to_text(), seeds=seed_results,
                       wall_time_s=time.perf_counter() - t_start)
    if write:
        emit_report([result], out_root)
    return result


def load_splits(config: ExperimentConfig):
    if config.dataset_file:
        splits, _ = load_dataset(config.dataset_file)
        return splits
    return make_splits(config.dataset_config())


def run_id(name: str, lam: float) -> str:
    return f"{name}_lam{lam:.6g}"


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: MultiTaskModel, optimizer: ProxAdam,
                    combiner: UncertaintyWeights, digest: bytes = b"") -> None:
    params = [(e.name, e.tensor.data) for e in model.registry.entries()]
    state = [("adam.t", np.array(float(optimizer.state.t)))]
    for name, _ in optimizer.params:
        state.append((f"m.{name}", optimizer.state.m[name]))
        state.append((f"v.{name}", optimizer.state.v[name]))
    eta = [("eta", combiner.eta.data)]
    write_container(path, digest, [params, state, eta])


def load_checkpoint(path):
    """Returns (digest, params dict, optimizer-state dict, eta array)."""
    digest, sections = read_container(path)
    if len(sections) != 3:
        raise ValueError(f"checkpoint {path} has {len(sections)} sections, expected 3")
    params = dict(sections[0])
    state = dict(sections[1])
    eta = dict(sections[2])["eta"]
    return digest, params, state, eta


def restore_checkpoint(path, model: MultiTaskModel, optimizer: ProxAdam,
                       combiner: UncertaintyWeights,
                       expected_digest: bytes | None = None) -> None:
    """Bitwise restore of parameters, optimizer moments and eta, in place."""
    digest, params, state, eta = load_checkpoint(path)
    if expected_digest is not None and digest != expected_digest:
        raise ValueError("checkpoint was written for a different config")
    for entry in model.registry.entries():
        stored = params.get(entry.name)
        if stored is None:
            raise ValueError(f"checkpoint missing parameter {entry.name!r}")
        if stored.shape != entry.tensor.data.shape:
            raise ValueError(
                f"{entry.name!r}: checkpoint shape {stored.shape} != "
                f"model shape {entry.tensor.data.shape}")
        entry.tensor.data = stored.astype(entry.tensor.dtype, copy=True)
    optimizer.state.t = int(state["adam.t"])
    for name, _ in optimizer.params:
        if name == "loss.eta":
            continue
        optimizer.state.m[name] = state[f"m.{name}"].copy()
        optimizer.state.v[name] = state[f"v.{name}"].copy()
    if not combiner.frozen:
        optimizer.state.m["loss.eta"] = state["m.loss.eta"].copy()
        optimizer.state.v["loss.eta"] = state["v.loss.eta"].copy()
    combiner.eta.data = eta.astype(combiner.eta.dtype, copy=True)


# ---------------------------------------------------------------------------
# sweeps and comparisons
# ---------------------------------------------------------------------------


def sweep_lambda(config: ExperimentConfig, grid: list[float] | None = None,
                 splits=None, write: bool = True,
                 save_checkpoints: bool = False) -> list[RunResult]:
    """One run per lambda on a shared dataset; per-run failures propagate
    into their RunResult without aborting the sweep."""
    grid = list(config.lambda_grid if grid is None else grid)
    if not grid:
        raise ValueError("sweep needs a non-empty lambda grid")
    if splits is None:
        splits = load_splits(config)
    results = []
    for lam in grid:
        sub = config.replace(lam=lam, name=f"{config.name}")
        results.append(run_experiment(sub, splits=splits, write=False,
                                      save_checkpoints=save_checkpoints))
    if write:
        emit_report(results, Path(config.out_dir))
    return results


@dataclass
class ComparisonResult:
    structured: RunResult
    unstructured: RunResult
    target_param_pct: float
    achieved_param_pct: float
    matched: bool
    iterations: int

    def rows(self) -> list[dict]:
        rows = []
        for r in (self.structured, self.unstructured):
            group_mean, param_mean = r.sparsity_means()
            rows.append({
                "scheme": r.scheme, "lambda": r.lam,
                "group_sparsity_pct": group_mean, "param_sparsity_pct": param_mean,
                "metrics": {t: m for t, (m, _) in r.metric_stats("test").items()},
            })
        return rows


def compare_structured_unstructured(config: ExperimentConfig, splits=None,
                                    write: bool = True) -> ComparisonResult:
    """Match the singleton-l1 run's parameter sparsity to the channel-wise
    run's by bisecting lambda on a log scale; report both with channel-group
    sparsity side by side."""
    if splits is None:
        splits = load_splits(config)
    struct_cfg = config.replace(scheme="channel_wise", lam=config.struct_lambda,
                                name=f"{config.name}_struct")
    structured = run_experiment(struct_cfg, splits=splits, write=False,
                                save_checkpoints=False)
    _, target = structured.sparsity_means()

    lo = np.log10(config.unstruct_lambda_lo)
    hi = np.log10(config.unstruct_lambda_hi)
    best: tuple[float, RunResult] | None = None
    matched = False
    iterations = 0
    for iterations in range(1, config.compare_max_iters + 1):
        mid = 10.0 ** ((lo + hi) / 2.0)
        cfg = config.replace(scheme="singleton_l1", lam=mid,
                             name=f"{config.name}_unstruct")
        run = run_experiment(cfg, splits=splits, write=False, save_checkpoints=False)
        _, achieved = run.sparsity_means()
        if best is None or abs(achieved - target) < abs(best[0] - target):
            best = (achieved, run)
        if abs(achieved - target) <= config.compare_tolerance:
            matched = True
            break
        if achieved < target:
            lo = np.log10(mid)
        else:
            hi = np.log10(mid)
    assert best is not None
    result = ComparisonResult(structured=structured, unstructured=best[1],
                              target_param_pct=target, achieved_param_pct=best[0],
                              matched=matched, iterations=iterations)
    if write:
        out = Path(config.out_dir)
        emit_report([structured, best[1]], out)
        (out / "comparison.json").write_text(json.dumps({
            "target_param_pct": _round6(result.target_param_pct),
            "achieved_param_pct": _round6(result.achieved_param_pct),
            "matched": result.matched,
            "iterations": result.iterations,
            "rows": result.rows(),
        }, indent=1, sort_keys=True, default=_round6))
    return result


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

_SUMMARY_TASK_COLUMNS = [
    ("segmentation", "seg_iou"),
    ("normals", "normals_cs"),
    ("depth", "depth_mae"),
    ("classification_a", "cls_a_acc"),
    ("classification_b", "cls_b_acc"),
]


def emit_report(results, out_dir) -> list[Path]:
    """summary.csv, per-run profile/layers CSVs, timing.csv, report.json.

    Accepts RunResult objects or their dict form (from report.json), so
    re-emission from a stored report is byte-identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dicts = [r.to_dict() if isinstance(r, RunResult) else r for r in results]
    written = []

    header = ["experiment", "lambda", "scheme"]
    for _, col in _SUMMARY_TASK_COLUMNS:
        header += [f"{col}_mean", f"{col}_std"]
    header += ["group_sparsity_pct", "param_sparsity_pct", "n_seeds_ok", "n_seeds_failed"]
    lines = [",".join(header)]
    for d in dicts:
        row = [d["experiment"], _fmt(d["lambda"]), d["scheme"]]
        for task, _ in _SUMMARY_TASK_COLUMNS:
            stats = d["metrics_test"].get(task)
            if stats is None:
                row += ["", ""]
            else:
                row += [_fmt(stats["mean"]),
                        "" if stats["std"] is None else _fmt(stats["std"])]
        row += [_fmt(d["group_sparsity_pct"]), _fmt(d["param_sparsity_pct"]),
                str(d["n_seeds_ok"]), str(d["n_seeds_failed"])]
        lines.append(",".join(row))
    path = out / "summary.csv"
    path.write_text("\n".join(lines) + "\n")
    written.append(path)

    timing_lines = [",".join(["lambda", "group_sparsity_pct", "mean_ms", "std_ms",
                              "speedup_vs_dense"])]
    for d in dicts:
        rid = run_id(d["experiment"], d["lambda"])
        for s in d["seeds"]:
            tag = f"{rid}_s{s['seed']}"
            profile_path = out / f"profile_{tag}.csv"
            profile_path.write_text("\n".join(
                ["epoch,group_sparsity_pct,param_sparsity_pct"]
                + [f"{e},{_fmt(g)},{_fmt(p)}" for e, g, p in s["profile"]]) + "\n")
            written.append(profile_path)
            layers_path = out / f"layers_{tag}.csv"
            layers_path.write_text("\n".join(
                ["layer,total_channels,nonzero_channels"]
                + [f"{n},{t},{z}" for n, t, z in s["layers"]]) + "\n")
            written.append(layers_path)
            if s["bench"]:
                timing_lines.append(",".join([
                    _fmt(d["lambda"]), _fmt(s["group_sparsity_pct"]),
                    _fmt(s["bench"]["compact_mean_ms"]),
                    _fmt(s["bench"]["compact_std_ms"]),
                    _fmt(s["bench"]["speedup_vs_dense"])]))
    if len(timing_lines) > 1:
        path = out / "timing.csv"
        path.write_text("\n".join(timing_lines) + "\n")
        written.append(path)

    path = out / "report.json"
    path.write_text(json.dumps({"runs": dicts}, indent=1, sort_keys=True))
    written.append(path)
    return written
