"""Procedural multi-task dataset: aligned segmentation, depth, surface
normals, and binary labels from rendered height-field scenes.

Each scene drops a few random hemispheres and boxes on a flat ground plane.
The height field is shaded with a fixed light to produce the image; depth
is the orthographic camera distance rescaled to (0, 1]; normals are the
analytic height-field surface normals (hemispheres have the exact closed
form n = ((x-cx)/r, (y-cy)/r, h/r)).  Depth and normals therefore describe
the same geometry, so the tasks are mutually informative by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .checkpoint import read_container, write_container
from .model import TaskSpec

SEG_CLASSES = ("background", "sphere", "box")
LIGHT_DIR = np.array([-0.4, -0.6, 1.0]) / np.linalg.norm([-0.4, -0.6, 1.0])
AMBIENT = 0.25
BRIGHTNESS_THRESHOLD = 0.45


def camera_height(image_size: int) -> float:
    """Orthographic camera height above the ground plane, in pixel units."""
    return 0.5 * image_size


@dataclass
class DatasetConfig:
    image_size: int = 32
    n_samples: int = 600
    min_primitives: int = 1
    max_primitives: int = 4
    noise: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 4 or self.image_size % 2:
            raise ValueError("image_size must be even and >= 4")
        if not 0 <= self.min_primitives <= self.max_primitives:
            raise ValueError("bad primitive count range")


@dataclass
class SampleRecord:
    image: np.ndarray    # (3,H,W) in [0,1]
    seg: np.ndarray      # (H,W) int64: 0 background, 1 sphere, 2 box
    depth: np.ndarray    # (1,H,W) in (0,1]
    normals: np.ndarray  # (3,H,W) unit vectors
    labels: dict[str, int]


def generate_scene(seed: int, config: DatasetConfig) -> SampleRecord:
    """Render one deterministic scene from its seed."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), int(seed)]))
    size = config.image_size
    yy, xx = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")

    n_prims = int(rng.integers(config.min_primitives, config.max_primitives + 1))
    heights = [np.zeros((size, size))]          # ground plane
    normal_fields = [np.stack([np.zeros((size, size)), np.zeros((size, size)),
                               np.ones((size, size))])]
    seg_class = [0]
    albedos = [rng.uniform(0.15, 0.95, size=3)]  # ground albedo
    for _ in range(n_prims):
        cx = rng.uniform(0.2, 0.8) * size
        cy = rng.uniform(0.2, 0.8) * size
        if rng.random() < 0.5:
            # hemisphere sitting on the plane
            radius = rng.uniform(0.12, 0.3) * size
            sq = radius ** 2 - (xx - cx) ** 2 - (yy - cy) ** 2
            h = np.sqrt(np.maximum(sq, 0.0))
            nf = np.stack([(xx - cx) / radius, (yy - cy) / radius, h / radius])
            seg_class.append(1)
        else:
            hx = rng.uniform(0.1, 0.28) * size
            hy = rng.uniform(0.1, 0.28) * size
            top = rng.uniform(0.1, 0.25) * size
            inside = (np.abs(xx - cx) <= hx) & (np.abs(yy - cy) <= hy)
            h = np.where(inside, top, 0.0)
            nf = np.stack([np.zeros_like(h), np.zeros_like(h), np.ones_like(h)])
            seg_class.append(2)
        heights.append(h)
        normal_fields.append(nf)
        albedos.append(rng.uniform(0.15, 0.95, size=3))

    stack = np.stack(heights)                      # (P+1,H,W)
    owner = stack.argmax(axis=0)                   # ties resolve to the ground
    height = np.take_along_axis(stack, owner[None], axis=0)[0]
    seg = np.asarray(seg_class, dtype=np.int64)[owner]
    normals = np.take_along_axis(
        np.stack(normal_fields), owner[None, None], axis=0)[0]

    z_cam = camera_height(size)
    depth = ((z_cam - height) / z_cam)[None]

    shade = AMBIENT + (1.0 - AMBIENT) * np.clip(
        np.einsum("c,chw->hw", LIGHT_DIR, normals), 0.0, 1.0)
    albedo_map = np.stack(albedos)[owner]          # (H,W,3)
    base = albedo_map.transpose(2, 0, 1) * shade[None]
    image = np.clip(base + rng.normal(0.0, config.noise, size=(3, size, size)), 0.0, 1.0)

    labels = {
        "contains_sphere": int((seg == 1).any()),
        "bright_scene": int(image.mean() > BRIGHTNESS_THRESHOLD),
    }
    return SampleRecord(image=image, seg=seg, depth=depth, normals=normals,
                        labels=labels)


def split_sizes(total: int) -> tuple[int, int, int]:
    n_train = int(round(0.6 * total))
    n_val = int(round(0.2 * total))
    return n_train, n_val, total - n_train - n_val


def make_splits(config: DatasetConfig) -> tuple[list[SampleRecord],
                                                list[SampleRecord],
                                                list[SampleRecord]]:
    """60/20/20 train/val/test, disjoint by per-sample seeds."""
    config.validate()
    if config.n_samples < 5:
        raise ValueError("need at least 5 samples to split 60/20/20")
    samples = [generate_scene(i, config) for i in range(config.n_samples)]
    n_train, n_val, _ = split_sizes(config.n_samples)
    return (samples[:n_train],
            samples[n_train:n_train + n_val],
            samples[n_train + n_val:])


@dataclass
class Batch:
    images: np.ndarray
    seg: np.ndarray
    depth: np.ndarray
    normals: np.ndarray
    labels: dict[str, np.ndarray]

    def __len__(self) -> int:
        return self.images.shape[0]

    def target_for(self, task: TaskSpec) -> np.ndarray:
        if task.kind == "segmentation":
            return self.seg
        if task.kind == "depth":
            return self.depth
        if task.kind == "normals":
            return self.normals
        if task.kind == "binary_classification":
            return self.labels[task.label_key]
        raise ValueError(f"unknown task kind {task.kind!r}")


def collate(samples: list[SampleRecord], dtype=np.float32) -> Batch:
    label_keys = samples[0].labels.keys()
    return Batch(
        images=np.stack([s.image for s in samples]).astype(dtype),
        seg=np.stack([s.seg for s in samples]),
        depth=np.stack([s.depth for s in samples]).astype(dtype),
        normals=np.stack([s.normals for s in samples]).astype(dtype),
        labels={k: np.array([s.labels[k] for s in samples], dtype=dtype)
                for k in label_keys},
    )


def iterate_batches(split: list[SampleRecord], batch_size: int, shuffle_seed: int,
                    dtype=np.float32) -> list[Batch]:
    """Deterministic shuffled batches; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(
        np.random.SeedSequence([0x5A5A, int(shuffle_seed)])).permutation(len(split))
    return [collate([split[j] for j in order[i:i + batch_size]], dtype=dtype)
            for i in range(0, len(split), batch_size)]


# -- container export --------------------------------------------------------


def export_dataset(path, splits, config: DatasetConfig) -> None:
    """Write the three splits into the binary container format."""
    meta = [("meta", np.array([config.image_size, config.n_samples,
                               config.min_primitives, config.max_primitives,
                               config.noise, config.seed], dtype=np.float64))]
    sections = [meta]
    for split_name, split in zip(("train", "val", "test"), splits):
        records = []
        for i, s in enumerate(split):
            base = f"{split_name}.{i:05d}"
            records.append((f"{base}.image", s.image))
            records.append((f"{base}.seg", s.seg.astype(np.float64)))
            records.append((f"{base}.depth", s.depth))
            records.append((f"{base}.normals", s.normals))
            keys = sorted(s.labels)
            records.append((f"{base}.labels." + ",".join(keys),
                            np.array([s.labels[k] for k in keys], dtype=np.float64)))
        sections.append(records)
    write_container(path, b"dataset", sections)


def load_dataset(path) -> tuple[tuple[list[SampleRecord], ...], DatasetConfig]:
    _, sections = read_container(path)
    meta = dict(sections[0])["meta"]
    config = DatasetConfig(image_size=int(meta[0]), n_samples=int(meta[1]),
                           min_primitives=int(meta[2]), max_primitives=int(meta[3]),
                           noise=float(meta[4]), seed=int(meta[5]))
    splits = []
    for records in sections[1:]:
        by_sample: dict[str, dict[str, np.ndarray]] = {}
        for name, arr in records:
            base, field_name = name.split(".", 2)[1], name.split(".", 2)[2]
            by_sample.setdefault(base, {})[field_name] = arr
        split = []
        for base in sorted(by_sample):
            fields = by_sample[base]
            label_field = next(k for k in fields if k.startswith("labels."))
            keys = label_field.split(".", 1)[1].split(",")
            split.append(SampleRecord(
                image=fields["image"],
                seg=fields["seg"].astype(np.int64),
                depth=fields["depth"],
                normals=fields["normals"],
                labels={k: int(v) for k, v in zip(keys, fields[label_field])},
            ))
        splits.append(split)
    return tuple(splits), config
