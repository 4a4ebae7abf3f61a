"""Miniature hard-parameter-sharing multi-task network.

A small dilated-residual backbone (shared across tasks) feeds per-task
heads.  Every backbone conv weight is registered as shared+regularized;
biases, optional affine parameters and all head parameters are exempt from
the group penalty.  Dense-prediction heads are a 1x1 conv plus bilinear
upsampling back to the input resolution (the backbone has output stride 2);
the classification head is conv -> relu -> global average pool -> two
linear layers -> one logit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .registry import ParamRegistry
from .tensor import Tensor

TASK_KINDS = ("segmentation", "depth", "normals", "binary_classification")


@dataclass
class BlockSpec:
    """conv-relu-conv residual block, 3x3 kernels, 1x1 skip projection when
    the channel count or stride changes."""

    in_channels: int
    out_channels: int
    stride: int = 1
    dilation: int = 1

    @property
    def needs_projection(self) -> bool:
        return self.in_channels != self.out_channels or self.stride != 1


@dataclass
class BackboneSpec:
    in_channels: int = 3
    stem_channels: int = 16
    blocks: list[BlockSpec] = field(default_factory=lambda: [
        BlockSpec(16, 16, stride=1, dilation=1),
        BlockSpec(16, 32, stride=2, dilation=1),
        BlockSpec(32, 32, stride=1, dilation=2),
        BlockSpec(32, 64, stride=1, dilation=2),
    ])
    affine: bool = False  # unregularized per-channel scale-shift after each block

    @property
    def out_channels(self) -> int:
        return self.blocks[-1].out_channels

    @property
    def output_stride(self) -> int:
        s = 1
        for b in self.blocks:
            s *= b.stride
        return s

    def validate(self) -> None:
        prev = self.stem_channels
        for i, b in enumerate(self.blocks):
            if b.in_channels != prev:
                raise ValueError(
                    f"block {i + 1}: in_channels {b.in_channels} != previous width {prev}"
                )
            prev = b.out_channels


@dataclass
class TaskSpec:
    name: str
    kind: str
    num_classes: int = 0          # segmentation only
    label_key: str = ""           # binary_classification only
    cls_channels: int = 16
    cls_hidden: int = 16

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "segmentation" and self.num_classes < 2:
            raise ValueError("segmentation needs num_classes >= 2")
        if self.kind == "binary_classification" and not self.label_key:
            self.label_key = self.name


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class MultiTaskModel:
    """Parameter container plus forward passes (tape and raw-array)."""

    def __init__(self, backbone: BackboneSpec, tasks: list[TaskSpec], seed: int,
                 dtype=np.float32):
        if not tasks:
            raise ValueError("need at least one task")
        names = [t.name for t in tasks]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate task names in {names}")
        backbone.validate()
        self.backbone = backbone
        self.tasks = {t.name: t for t in tasks}
        self.dtype = np.dtype(dtype)
        self.registry = ParamRegistry()
        self._rng = np.random.default_rng(np.random.SeedSequence(seed))
        self._build_backbone()
        for t in tasks:
            self._build_head(t)
        del self._rng

    # -- construction -------------------------------------------------------

    def _conv_param(self, name: str, f: int, c: int, k: int, *, shared: bool,
                    regularized: bool) -> tuple[Tensor, Tensor]:
        w = Tensor(_he_uniform(self._rng, (f, c, k, k), c * k * k, self.dtype))
        b = Tensor(np.zeros(f, dtype=self.dtype))
        self.registry.add(f"{name}.weight", w, shared=shared, regularized=regularized)
        self.registry.add(f"{name}.bias", b, shared=shared, regularized=False)
        return w, b

    def _linear_param(self, name: str, out_dim: int, in_dim: int, *,
                      shared: bool) -> tuple[Tensor, Tensor]:
        w = Tensor(_he_uniform(self._rng, (out_dim, in_dim), in_dim, self.dtype))
        b = Tensor(np.zeros(out_dim, dtype=self.dtype))
        self.registry.add(f"{name}.weight", w, shared=shared, regularized=False)
        self.registry.add(f"{name}.bias", b, shared=shared, regularized=False)
        return w, b

    def _build_backbone(self) -> None:
        spec = self.backbone
        self._stem = self._conv_param(
            "backbone.stem", spec.stem_channels, spec.in_channels, 3,
            shared=True, regularized=True)
        self._blocks = []
        for i, blk in enumerate(spec.blocks, start=1):
            prefix = f"backbone.block{i}"
            conv1 = self._conv_param(f"{prefix}.conv1", blk.out_channels,
                                     blk.in_channels, 3, shared=True, regularized=True)
            conv2 = self._conv_param(f"{prefix}.conv2", blk.out_channels,
                                     blk.out_channels, 3, shared=True, regularized=True)
            proj = None
            if blk.needs_projection:
                proj = self._conv_param(f"{prefix}.proj", blk.out_channels,
                                        blk.in_channels, 1, shared=True, regularized=True)
            affine = None
            if spec.affine:
                scale = Tensor(np.ones(blk.out_channels, dtype=self.dtype))
                shift = Tensor(np.zeros(blk.out_channels, dtype=self.dtype))
                self.registry.add(f"{prefix}.affine.scale", scale, shared=True,
                                  regularized=False)
                self.registry.add(f"{prefix}.affine.shift", shift, shared=True,
                                  regularized=False)
                affine = (scale, shift)
            self._blocks.append((blk, conv1, conv2, proj, affine))

    def _build_head(self, task: TaskSpec) -> None:
        prefix = f"head.{task.name}"
        c = self.backbone.out_channels
        if task.kind == "segmentation":
            self._conv_param(f"{prefix}.conv", task.num_classes, c, 1,
                             shared=False, regularized=False)
        elif task.kind == "depth":
            self._conv_param(f"{prefix}.conv", 1, c, 1, shared=False, regularized=False)
        elif task.kind == "normals":
            self._conv_param(f"{prefix}.conv", 3, c, 1, shared=False, regularized=False)
        else:
            self._conv_param(f"{prefix}.conv", task.cls_channels, c, 3,
                             shared=False, regularized=False)
            self._linear_param(f"{prefix}.fc1", task.cls_hidden, task.cls_channels,
                               shared=False)
            self._linear_param(f"{prefix}.fc2", 1, task.cls_hidden, shared=False)

    def _head_params(self, prefix: str, name: str) -> tuple[Tensor, Tensor]:
        return (self.registry.tensor(f"{prefix}.{name}.weight"),
                self.registry.tensor(f"{prefix}.{name}.bias"))

    def task(self, name: str) -> TaskSpec:
        return self.tasks[name]

    # -- tape forward --------------------------------------------------------

    def forward_shared(self, images: Tensor) -> Tensor:
        """(B,3,H,W) -> shared features (B,C_out,H/2,W/2)."""
        _, c, h, w = images.shape
        if c != self.backbone.in_channels:
            raise T.ShapeError(
                f"expected {self.backbone.in_channels} input channels, got {c}")
        if h % 2 or w % 2:
            raise T.ShapeError(f"input height/width must be even, got {h}x{w}")
        (sw, sb) = self._stem
        x = T.relu(T.conv2d(images, sw, sb, stride=1, padding=1))
        for blk, (w1, b1), (w2, b2), proj, affine in self._blocks:
            y = T.relu(T.conv2d(x, w1, b1, stride=blk.stride, padding=blk.dilation,
                                dilation=blk.dilation))
            y = T.conv2d(y, w2, b2, stride=1, padding=blk.dilation,
                         dilation=blk.dilation)
            if proj is not None:
                skip = T.conv2d(x, proj[0], proj[1], stride=blk.stride, padding=0)
            else:
                skip = x
            x = T.relu(T.add(y, skip))
            if affine is not None:
                x = T.channel_affine(x, affine[0], affine[1])
        return x

    def forward_task(self, task: TaskSpec | str, features: Tensor) -> Tensor:
        if isinstance(task, str):
            task = self.tasks[task]
        prefix = f"head.{task.name}"
        _, _, fh, fw = features.shape
        target = (fh * self.backbone.output_stride, fw * self.backbone.output_stride)
        if task.kind == "segmentation":
            w, b = self._head_params(prefix, "conv")
            return T.bilinear_upsample(T.conv2d(features, w, b), target)
        if task.kind == "depth":
            w, b = self._head_params(prefix, "conv")
            return T.bilinear_upsample(T.conv2d(features, w, b), target)
        if task.kind == "normals":
            w, b = self._head_params(prefix, "conv")
            up = T.bilinear_upsample(T.conv2d(features, w, b), target)
            return T.channel_l2_normalize(up)
        if task.kind == "binary_classification":
            w, b = self._head_params(prefix, "conv")
            h = T.relu(T.conv2d(features, w, b, padding=1))
            h = T.global_avg_pool(h)
            w1, b1 = self._head_params(prefix, "fc1")
            h = T.relu(T.linear(h, w1, b1))
            w2, b2 = self._head_params(prefix, "fc2")
            return T.linear(h, w2, b2)
        raise ValueError(f"unknown task kind {task.kind!r}")

    # -- raw-array forward (inference/benchmarks, no tape) --------------------

    def forward_shared_raw(self, images: np.ndarray) -> np.ndarray:
        (sw, sb) = self._stem
        x = np.maximum(T.conv2d_raw(images, sw.data, sb.data, stride=1, padding=1), 0)
        for blk, (w1, b1), (w2, b2), proj, affine in self._blocks:
            y = np.maximum(
                T.conv2d_raw(x, w1.data, b1.data, stride=blk.stride,
                             padding=blk.dilation, dilation=blk.dilation), 0)
            y = T.conv2d_raw(y, w2.data, b2.data, stride=1, padding=blk.dilation,
                             dilation=blk.dilation)
            if proj is not None:
                y = y + T.conv2d_raw(x, proj[0].data, proj[1].data,
                                     stride=blk.stride, padding=0)
            else:
                y = y + x
            x = np.maximum(y, 0)
            if affine is not None:
                x = x * affine[0].data[None, :, None, None] \
                    + affine[1].data[None, :, None, None]
        return x

    def forward_task_raw(self, task: TaskSpec | str, features: np.ndarray) -> np.ndarray:
        if isinstance(task, str):
            task = self.tasks[task]
        prefix = f"head.{task.name}"
        target = (features.shape[2] * self.backbone.output_stride,
                  features.shape[3] * self.backbone.output_stride)
        if task.kind in ("segmentation", "depth"):
            w, b = self._head_params(prefix, "conv")
            return T.bilinear_upsample_raw(T.conv2d_raw(features, w.data, b.data), target)
        if task.kind == "normals":
            w, b = self._head_params(prefix, "conv")
            up = T.bilinear_upsample_raw(T.conv2d_raw(features, w.data, b.data), target)
            return T.channel_l2_normalize_raw(up)
        w, b = self._head_params(prefix, "conv")
        h = np.maximum(T.conv2d_raw(features, w.data, b.data, padding=1), 0)
        h = h.mean(axis=(2, 3))
        w1, b1 = self._head_params(prefix, "fc1")
        h = np.maximum(h @ w1.data.T + b1.data, 0)
        w2, b2 = self._head_params(prefix, "fc2")
        return h @ w2.data.T + b2.data


def build_model(backbone: BackboneSpec, tasks: list[TaskSpec], seed: int,
                dtype=np.float32) -> tuple[MultiTaskModel, ParamRegistry]:
    """Deterministically initialized model plus its parameter registry.

    Initialization is He-uniform (fan-in) for conv/linear weights and zero
    for biases; the same seed reproduces bitwise-identical parameters.
    """
    model = MultiTaskModel(backbone, tasks, seed, dtype)
    return model, model.registry
