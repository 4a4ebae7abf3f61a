"""Per-task losses and the uncertainty-weighted combination.

Segmentation uses mean per-pixel cross-entropy on softmaxed logits, depth
uses mean squared error, surface normals use one minus the mean per-pixel
cosine similarity, and binary classification uses mean binary cross-entropy
on a sigmoided logit.  Targets are plain numpy arrays and never receive
gradients.

The combined loss is parametrized by per-task log-variances eta_i so the
weighting stays unconstrained and numerically stable:

    combined = sum_i( 0.5 * exp(-eta_i) * L_i + 0.5 * eta_i )

which is the learnable-variance weighting with sigma_i^2 = exp(eta_i).
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, _node

TASK_KINDS = ("segmentation", "depth", "normals", "binary_classification")


def cross_entropy(logits: Tensor, target_classes: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy of (B,K,H,W) logits vs (B,H,W) indices."""
    k = logits.shape[1]
    tgt = np.asarray(target_classes)
    if tgt.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(
            f"cross_entropy: target shape {tgt.shape} does not match logits {logits.shape}"
        )
    if tgt.min() < 0 or tgt.max() >= k:
        raise ValueError(
            f"cross_entropy: class index out of range [0, {k}), "
            f"got min {tgt.min()} max {tgt.max()}"
        )
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    softmax = ez / ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(ez.sum(axis=1, keepdims=True))
    b, h, w = tgt.shape
    bi, hi, wi = np.ix_(np.arange(b), np.arange(h), np.arange(w))
    picked = logp[bi, tgt, hi, wi]
    n = picked.size
    out = np.asarray(-picked.mean(), dtype=z.dtype)

    def backward(go):
        g = softmax.copy()
        np.subtract.at(g, (bi, tgt, hi, wi), 1.0)
        return (g * (go / n),)

    return _node(out, (logits,), backward, "cross_entropy")


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error over all entries."""
    tgt = np.asarray(target, dtype=pred.dtype)
    if tgt.shape != pred.shape:
        raise ShapeError(f"mse: target shape {tgt.shape} != prediction {pred.shape}")
    diff = pred.data - tgt
    out = np.asarray((diff * diff).mean(), dtype=pred.dtype)

    def backward(go):
        return (diff * (2.0 * go / diff.size),)

    return _node(out, (pred,), backward, "mse")


def cosine_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """1 - mean per-pixel cosine similarity for unit-vector fields (B,3,H,W).

    Both fields are assumed unit length per pixel, so the cosine is the
    plain channel dot product and the loss lies in [0, 2].
    """
    tgt = np.asarray(target, dtype=pred.dtype)
    if tgt.shape != pred.shape:
        raise ShapeError(f"cosine_loss: target shape {tgt.shape} != prediction {pred.shape}")
    n_px = pred.shape[0] * pred.shape[2] * pred.shape[3]
    cos = (pred.data * tgt).sum(axis=1)
    out = np.asarray(1.0 - cos.mean(), dtype=pred.dtype)

    def backward(go):
        return (tgt * (-go / n_px),)

    return _node(out, (pred,), backward, "cosine_loss")


def bce_with_logits(logit: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of a sigmoided logit vs {0,1} targets."""
    z = logit.data.reshape(-1)
    tgt = np.asarray(target, dtype=logit.dtype).reshape(-1)
    if tgt.shape != z.shape:
        raise ShapeError(f"bce: target shape {tgt.shape} != logits {z.shape}")
    if np.any((tgt != 0) & (tgt != 1)):
        raise ValueError("bce: targets must be in {0, 1}")
    # stable: max(z,0) - z*y + log(1 + exp(-|z|))
    out = np.asarray(
        (np.maximum(z, 0) - z * tgt + np.log1p(np.exp(-np.abs(z)))).mean(),
        dtype=logit.dtype,
    )
    sig = 1.0 / (1.0 + np.exp(-z))

    def backward(go):
        return (((sig - tgt) * (go / z.size)).reshape(logit.shape),)

    return _node(out, (logit,), backward, "bce_with_logits")


_LOSS_FNS = {
    "segmentation": cross_entropy,
    "depth": mse,
    "normals": cosine_loss,
    "binary_classification": bce_with_logits,
}


def task_loss(kind: str, prediction: Tensor, target: np.ndarray) -> Tensor:
    """Scalar training loss for one task kind."""
    try:
        fn = _LOSS_FNS[kind]
    except KeyError:
        raise ValueError(f"unknown task kind {kind!r}, expected one of {TASK_KINDS}")
    return fn(prediction, target)


class UncertaintyWeights:
    """Learnable per-task log-variances eta_i = log(sigma_i^2).

    With every eta_i frozen at 0 the combination reduces to half the plain
    loss sum.  The stationary point of eta_i for a fixed loss L_i is
    eta_i = log L_i (variance tracks the loss scale).
    """

    def __init__(self, n_tasks: int, dtype=np.float64, frozen: bool = False):
        if n_tasks < 1:
            raise ValueError("need at least one task")
        self.eta = Tensor(np.zeros(n_tasks, dtype=dtype), requires_grad=not frozen)
        self.frozen = frozen

    @property
    def n_tasks(self) -> int:
        return self.eta.size

    def combine(self, losses: list[Tensor]) -> Tensor:
        return combine_uncertainty(losses, self.eta)


def combine_uncertainty(losses: list[Tensor], eta: Tensor) -> Tensor:
    """sum_i( 0.5 * exp(-eta_i) * L_i + 0.5 * eta_i ), differentiable in both."""
    n = len(losses)
    if n < 1:
        raise ValueError("combine_uncertainty: need at least one loss")
    if eta.shape != (n,):
        raise ShapeError(f"combine_uncertainty: eta shape {eta.shape} != ({n},)")
    loss_vals = np.array([float(l.data) for l in losses], dtype=eta.dtype)
    if not np.all(np.isfinite(loss_vals)):
        raise ValueError("combine_uncertainty: non-finite task loss")
    inv_var = np.exp(-eta.data)
    out = np.asarray(0.5 * (inv_var * loss_vals + eta.data).sum(), dtype=eta.dtype)

    def backward(go):
        grads: list = [np.asarray(0.5 * inv_var[i] * go, dtype=eta.dtype) for i in range(n)]
        grads.append((0.5 - 0.5 * inv_var * loss_vals) * go)
        return grads

    return _node(out, tuple(losses) + (eta,), backward, "combine_uncertainty")
