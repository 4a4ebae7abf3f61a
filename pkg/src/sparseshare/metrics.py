"""Task-quality metrics: IoU, mean cosine similarity, MAE, accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import TaskSpec


@dataclass
class MetricRecord:
    task: str
    kind: str     # iou | cosine_similarity | mae | accuracy
    value: float
    split: str = "test"
    epoch: int = 0


def iou(pred_logits: np.ndarray, target_classes: np.ndarray) -> float:
    """Mean per-class intersection-over-union of argmax predictions.

    Classes absent from both prediction and target are skipped rather than
    scored 1, so tiny scenes do not inflate the mean.
    """
    pred = pred_logits.argmax(axis=1)
    tgt = np.asarray(target_classes)
    scores = []
    for c in range(pred_logits.shape[1]):
        p, t = pred == c, tgt == c
        union = (p | t).sum()
        if union == 0:
            continue
        scores.append((p & t).sum() / union)
    return float(np.mean(scores)) if scores else 1.0


def cosine_similarity_mean(pred_normals: np.ndarray, target_normals: np.ndarray) -> float:
    """Mean over pixels of the channel dot product of unit-vector fields."""
    return float((pred_normals * target_normals).sum(axis=1).mean())


def mae(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.abs(pred - target).mean())


def accuracy(pred_logits: np.ndarray, targets: np.ndarray) -> float:
    """Thresholds sigmoid(logit) at 0.5; ties classify as 1."""
    pred = (np.asarray(pred_logits).reshape(-1) >= 0.0).astype(np.int64)
    return float((pred == np.asarray(targets).reshape(-1)).mean())


METRIC_KINDS = {
    "segmentation": "iou",
    "depth": "mae",
    "normals": "cosine_similarity",
    "binary_classification": "accuracy",
}

HIGHER_IS_BETTER = {"iou": True, "cosine_similarity": True, "mae": False,
                    "accuracy": True}


def task_metric(task: TaskSpec, prediction: np.ndarray, target: np.ndarray) -> MetricRecord:
    kind = METRIC_KINDS[task.kind]
    if kind == "iou":
        value = iou(prediction, target)
    elif kind == "cosine_similarity":
        value = cosine_similarity_mean(prediction, target)
    elif kind == "mae":
        value = mae(prediction, target)
    else:
        value = accuracy(prediction, target)
    return MetricRecord(task=task.name, kind=kind, value=value)
