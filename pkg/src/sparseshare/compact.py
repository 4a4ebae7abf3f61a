"""Zero-channel compaction of a trained backbone and inference benchmarks.

Compaction removes the input channels whose weight slice (:, c, :, :) is
exactly zero: each conv gathers only its kept channels and uses a sliced
weight.  Producer outputs keep full width (residual connections make
cross-layer output pruning unsafe), so the compact forward reproduces the
dense forward exactly up to float reassociation.  Layers that keep zero
input channels degenerate to broadcasting their bias.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .model import MultiTaskModel
from .sparsity import GroupPartition
from .tensor import conv2d_raw, conv_output_hw

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    from contextlib import nullcontext

    def threadpool_limits(limits=None):
        return nullcontext()


@dataclass
class LayerPlan:
    name: str
    weight_shape: tuple[int, ...]
    kept: np.ndarray  # sorted input-channel indices with a nonzero slice

    @property
    def n_kept(self) -> int:
        return int(self.kept.size)


@dataclass
class CompactPlan:
    layers: dict[str, LayerPlan] = field(default_factory=dict)

    def dense_weight_scalars(self) -> int:
        return sum(int(np.prod(lp.weight_shape)) for lp in self.layers.values())

    def compact_weight_scalars(self) -> int:
        return sum(
            lp.weight_shape[0] * lp.n_kept * lp.weight_shape[2] * lp.weight_shape[3]
            for lp in self.layers.values())

    def removable_scalars(self) -> int:
        """Zeroed scalars eliminated under the input-gather constraint."""
        return self.dense_weight_scalars() - self.compact_weight_scalars()


def plan_compaction(model: MultiTaskModel, partition: GroupPartition) -> CompactPlan:
    """Kept-channel lists for every regularized backbone conv."""
    plan = CompactPlan()
    for block in partition.blocks:
        w = model.registry.tensor(block.param).data
        kept = np.flatnonzero((w != 0).any(axis=(0, 2, 3)))
        plan.layers[block.param] = LayerPlan(block.param, tuple(w.shape), kept)
    return plan


@dataclass
class _CompactConv:
    weight: np.ndarray          # (F, n_kept, Kh, Kw)
    bias: np.ndarray
    kept: np.ndarray
    stride: int
    padding: int
    dilation: int
    out_channels: int

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.kept.size == 0:
            kh, kw = self.weight.shape[2], self.weight.shape[3]
            h, w = conv_output_hw(x.shape[2], x.shape[3], kh, kw, self.stride,
                                  self.padding, self.dilation)
            out = np.empty((x.shape[0], self.out_channels, h, w), dtype=x.dtype)
            out[:] = self.bias[None, :, None, None]
            return out
        return conv2d_raw(x[:, self.kept], self.weight, self.bias,
                          stride=self.stride, padding=self.padding,
                          dilation=self.dilation)


class CompactBackbone:
    """Forward-only backbone with zeroed input channels physically removed."""

    def __init__(self, model: MultiTaskModel, plan: CompactPlan):
        self._convs: dict[str, _CompactConv] = {}
        self._structure = []
        reg = model.registry

        def take(name: str, stride: int, padding: int, dilation: int) -> str:
            weight_name = f"{name}.weight"
            lp = plan.layers.get(weight_name)
            if lp is None:
                raise ValueError(f"plan has no entry for {weight_name!r}")
            w = reg.tensor(weight_name).data
            if tuple(w.shape) != lp.weight_shape:
                raise ValueError(
                    f"{weight_name!r}: plan was built for shape {lp.weight_shape}, "
                    f"model has {tuple(w.shape)}")
            dropped = np.setdiff1d(np.arange(w.shape[1]), lp.kept)
            if dropped.size and (w[:, dropped] != 0).any():
                raise ValueError(
                    f"{weight_name!r}: dropped channels are no longer zero; "
                    "re-plan compaction for the current weights")
            self._convs[weight_name] = _CompactConv(
                weight=np.ascontiguousarray(w[:, lp.kept]),
                bias=reg.tensor(f"{name}.bias").data.copy(),
                kept=lp.kept, stride=stride, padding=padding, dilation=dilation,
                out_channels=w.shape[0])
            return weight_name

        self._stem = take("backbone.stem", 1, 1, 1)
        for i, (blk, *_rest) in enumerate(model._blocks, start=1):
            prefix = f"backbone.block{i}"
            conv1 = take(f"{prefix}.conv1", blk.stride, blk.dilation, blk.dilation)
            conv2 = take(f"{prefix}.conv2", 1, blk.dilation, blk.dilation)
            proj = None
            if blk.needs_projection:
                proj = take(f"{prefix}.proj", blk.stride, 0, 1)
            affine = None
            if model.backbone.affine:
                affine = (reg.tensor(f"{prefix}.affine.scale").data.copy(),
                          reg.tensor(f"{prefix}.affine.shift").data.copy())
            self._structure.append((conv1, conv2, proj, affine))

    def n_params(self) -> int:
        return sum(c.weight.size + c.bias.size for c in self._convs.values())

    def forward(self, images: np.ndarray) -> np.ndarray:
        x = np.maximum(self._convs[self._stem](images), 0)
        for conv1, conv2, proj, affine in self._structure:
            y = self._convs[conv2](np.maximum(self._convs[conv1](x), 0))
            y = y + (self._convs[proj](x) if proj is not None else x)
            x = np.maximum(y, 0)
            if affine is not None:
                x = x * affine[0][None, :, None, None] + affine[1][None, :, None, None]
        return x

    __call__ = forward


def apply_compaction(model: MultiTaskModel, plan: CompactPlan) -> CompactBackbone:
    return CompactBackbone(model, plan)


# -- theoretical multiply counts ----------------------------------------------


def mac_counts(model: MultiTaskModel, plan: CompactPlan,
               input_hw: tuple[int, int]) -> tuple[int, int]:
    """(achieved, idealized) multiply counts of the compact backbone.

    Achieved counts what input gathering alone buys.  Idealized additionally
    drops output filters nothing downstream reads and input channels that are
    dead upstream, the cross-layer elimination that residual connections
    prevent in the physical model.
    """
    reg = model.registry

    def conv_spatial(hw, stride):
        return hw[0] // stride, hw[1] // stride

    achieved = 0
    specs = []  # (weight name, stride) in forward order, grouped per block
    hw = input_hw
    specs.append(("backbone.stem.weight", 1, hw))
    for i, (blk, *_r) in enumerate(model._blocks, start=1):
        prefix = f"backbone.block{i}"
        out_hw = conv_spatial(hw, blk.stride)
        specs.append((f"{prefix}.conv1.weight", blk.stride, hw))
        specs.append((f"{prefix}.conv2.weight", 1, out_hw))
        if blk.needs_projection:
            specs.append((f"{prefix}.proj.weight", blk.stride, hw))
        hw = out_hw
    for name, stride, in_hw in specs:
        lp = plan.layers[name]
        f, _, kh, kw = lp.weight_shape
        oh, ow = conv_spatial(in_hw, stride)
        achieved += f * lp.n_kept * kh * kw * oh * ow

    # idealized: propagate channel liveness backwards from the backbone output
    live = {f"__out{len(model._blocks)}": np.arange(model.backbone.out_channels)}
    idealized = 0
    hw_per_block = []
    hw = input_hw
    for blk, *_r in model._blocks:
        hw_per_block.append((hw, conv_spatial(hw, blk.stride)))
        hw = conv_spatial(hw, blk.stride)

    def live_inputs(weight_name, live_filters, upstream_live):
        w = reg.tensor(weight_name).data
        used = (w[live_filters] != 0).any(axis=(0, 2, 3))
        mask = np.zeros(w.shape[1], dtype=bool)
        mask[upstream_live] = True
        return np.flatnonzero(used & mask)

    for i in range(len(model._blocks), 0, -1):
        blk = model._blocks[i - 1][0]
        prefix = f"backbone.block{i}"
        in_hw, out_hw = hw_per_block[i - 1]
        out_live = live[f"__out{i}"]
        in_live_sets = []
        # conv2 consumes conv1's output; both restricted to live channels
        c2 = f"{prefix}.conv2.weight"
        c1 = f"{prefix}.conv1.weight"
        mid_live = live_inputs(c2, out_live, np.arange(blk.out_channels))
        w2 = reg.tensor(c2).data
        idealized += out_live.size * mid_live.size * w2.shape[2] * w2.shape[3] \
            * out_hw[0] * out_hw[1]
        x_live_via_c1 = live_inputs(c1, mid_live, np.arange(blk.in_channels))
        w1 = reg.tensor(c1).data
        idealized += mid_live.size * x_live_via_c1.size * w1.shape[2] * w1.shape[3] \
            * out_hw[0] * out_hw[1]
        in_live_sets.append(x_live_via_c1)
        if blk.needs_projection:
            pj = f"{prefix}.proj.weight"
            x_live_via_proj = live_inputs(pj, out_live, np.arange(blk.in_channels))
            idealized += out_live.size * x_live_via_proj.size * out_hw[0] * out_hw[1]
            in_live_sets.append(x_live_via_proj)
        else:
            in_live_sets.append(out_live)  # identity skip passes channels through
        live[f"__out{i - 1}"] = np.union1d(*in_live_sets) if len(in_live_sets) > 1 \
            else in_live_sets[0]
    stem_live = live["__out0"]
    ws = reg.tensor("backbone.stem.weight").data
    stem_in = live_inputs("backbone.stem.weight", stem_live,
                          np.arange(model.backbone.in_channels))
    idealized += stem_live.size * stem_in.size * ws.shape[2] * ws.shape[3] \
        * input_hw[0] * input_hw[1]
    return achieved, int(idealized)


# -- timing --------------------------------------------------------------------


@dataclass
class BenchmarkResult:
    times_ms: list[float]
    mean_ms: float
    std_ms: float
    median_ms: float
    batch_shape: tuple[int, ...]


def benchmark_backbone(forward, batch_shape: tuple[int, ...], warmup: int = 3,
                       reps: int = 5, seed: int = 0) -> BenchmarkResult:
    """Forward-only wall time over ``reps`` trials, single-threaded.

    Each trial is the mean over an inner loop sized so one trial lasts at
    least a few milliseconds; the median across trials is the robust
    headline, mean and std are reported alongside.
    """
    if reps < 5:
        raise ValueError("need at least 5 repetitions")
    x = np.random.default_rng(seed).standard_normal(batch_shape).astype(np.float32)
    with threadpool_limits(limits=1):
        for _ in range(max(warmup, 1)):
            forward(x)
        t0 = time.perf_counter()
        forward(x)
        once = time.perf_counter() - t0
        inner = int(np.clip(np.ceil(0.02 / max(once, 1e-6)), 1, 50))
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            for _ in range(inner):
                forward(x)
            times.append((time.perf_counter() - t0) / inner * 1e3)
    return BenchmarkResult(
        times_ms=times,
        mean_ms=float(np.mean(times)),
        std_ms=float(np.std(times)),
        median_ms=float(np.median(times)),
        batch_shape=tuple(batch_shape),
    )
