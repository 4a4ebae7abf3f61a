"""Declarative experiment configuration.

Config files are flat UTF-8 text, one ``key = value`` per line, ``#``
comments, lists as comma-separated values.  Every key can also be set on
the command line as ``--key value``.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import DatasetConfig
from .model import BackboneSpec, TaskSpec

KNOWN_TASKS = ("segmentation", "depth", "normals", "classification_a",
               "classification_b")

DEFAULT_LAMBDA_GRID = [0.0, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2]


@dataclass
class ExperimentConfig:
    name: str = "run"
    tasks: list[str] = field(default_factory=lambda: ["segmentation", "depth", "normals"])
    scheme: str = "channel_wise"
    lam: float = 0.0
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    epochs: int = 40
    batch_size: int = 8
    lr: float = 1e-4
    prox_step: str = "base_lr"
    precision: str = "f32"
    uncertainty: str = "learned"
    affine: bool = False
    benchmark: bool = False
    out_dir: str = ""
    # dataset
    image_size: int = 32
    samples: int = 600
    min_primitives: int = 1
    max_primitives: int = 4
    noise: float = 0.05
    dataset_seed: int = 0
    dataset_file: str = ""
    # sweep
    lambda_grid: list[float] = field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))
    # structured-vs-unstructured comparison
    struct_lambda: float = 1e-4
    unstruct_lambda_lo: float = 1e-8
    unstruct_lambda_hi: float = 1.0
    compare_tolerance: float = 5.0
    compare_max_iters: int = 12

    # config keys use "lambda"; the dataclass field avoids the keyword
    _ALIASES = {"lambda": "lam"}

    def __post_init__(self):
        if not self.out_dir:
            self.out_dir = os.environ.get("SPARSESHARE_OUT", "runs")

    def validate(self) -> None:
        if not self.tasks:
            raise ValueError("config needs at least one task")
        unknown = [t for t in self.tasks if t not in KNOWN_TASKS]
        if unknown:
            raise ValueError(f"unknown tasks {unknown}; choose from {KNOWN_TASKS}")
        if self.scheme not in ("channel_wise", "singleton_l1"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be f32 or f64")
        if self.uncertainty not in ("learned", "frozen"):
            raise ValueError("uncertainty must be learned or frozen")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(image_size=self.image_size, n_samples=self.samples,
                             min_primitives=self.min_primitives,
                             max_primitives=self.max_primitives,
                             noise=self.noise, seed=self.dataset_seed)

    def task_specs(self) -> list[TaskSpec]:
        return [make_task_spec(t) for t in self.tasks]

    def backbone_spec(self) -> BackboneSpec:
        return BackboneSpec(in_channels=3, affine=self.affine)

    def to_text(self) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            value = getattr(self, f.name)
            key = "lambda" if f.name == "lam" else f.name
            if isinstance(value, list):
                rendered = ",".join(_render_scalar(v) for v in value)
            else:
                rendered = _render_scalar(value)
            lines.append(f"{key} = {rendered}")
        return "\n".join(lines) + "\n"

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_text().encode("utf-8")).digest()

    def replace(self, **kwargs) -> "ExperimentConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(kwargs)
        return ExperimentConfig(**values)


def make_task_spec(name: str) -> TaskSpec:
    if name == "segmentation":
        return TaskSpec(name=name, kind="segmentation", num_classes=3)
    if name == "depth":
        return TaskSpec(name=name, kind="depth")
    if name == "normals":
        return TaskSpec(name=name, kind="normals")
    if name == "classification_a":
        return TaskSpec(name=name, kind="binary_classification",
                        label_key="contains_sphere")
    if name == "classification_b":
        return TaskSpec(name=name, kind="binary_classification",
                        label_key="bright_scene")
    raise ValueError(f"unknown task {name!r}")


def _render_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw: str, py_type) -> object:
    raw = raw.strip()
    if py_type is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if py_type is int:
        return int(raw)
    if py_type is float:
        return float(raw)
    if py_type is str:
        return raw
    raise ValueError(f"unsupported config type {py_type}")


_FIELD_TYPES = {
    "name": str, "tasks": list[str], "scheme": str, "lam": float,
    "seeds": list[int], "epochs": int, "batch_size": int, "lr": float,
    "prox_step": str, "precision": str, "uncertainty": str, "affine": bool,
    "benchmark": bool,
    "out_dir": str, "image_size": int, "samples": int, "min_primitives": int,
    "max_primitives": int, "noise": float, "dataset_seed": int,
    "dataset_file": str, "lambda_grid": list[float], "struct_lambda": float,
    "unstruct_lambda_lo": float, "unstruct_lambda_hi": float,
    "compare_tolerance": float, "compare_max_iters": int,
}


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines into a raw string mapping."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def config_from_mapping(raw: dict[str, str],
                        base: ExperimentConfig | None = None) -> ExperimentConfig:
    config = base if base is not None else ExperimentConfig()
    values = {f.name: getattr(config, f.name) for f in fields(config)}
    for key, raw_value in raw.items():
        name = ExperimentConfig._ALIASES.get(key, key.replace("-", "_"))
        if name not in _FIELD_TYPES:
            raise ValueError(f"unknown config key {key!r}")
        target = _FIELD_TYPES[name]
        origin = getattr(target, "__origin__", None)
        if origin is list:
            (item_type,) = target.__args__
            items = [p for p in raw_value.split(",") if p.strip()]
            values[name] = [_coerce(p, item_type) for p in items]
        else:
            values[name] = _coerce(raw_value, target)
    built = ExperimentConfig(**values)
    built.validate()
    return built


def load_config(path: str | Path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    raw = parse_config_text(Path(path).read_text()) if path else {}
    if overrides:
        raw.update(overrides)
    return config_from_mapping(raw)
