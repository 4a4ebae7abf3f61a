"""Proximal gradient optimizers and the epoch training loop.

Gradients are taken of the differentiable part of the objective only; the
group penalty enters exclusively through its proximal operator, applied to
the regularized parameters after every gradient step.  Zeroed groups stay
in the optimization and can revive whenever a later candidate update pushes
their norm back above the threshold (dynamic sparsity).

Proximal Adam couples the prox with the adaptive step through a per-group
scalar effective step so the closed form stays valid:

    base_lr     threshold uses the base learning rate alpha (default)
    group_mean  threshold uses alpha / mean_g(sqrt(v_hat) + eps), the
                group-mean of the Adam preconditioner
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import UncertaintyWeights, task_loss
from .model import MultiTaskModel, TaskSpec
from .registry import ParamRegistry
from .sparsity import (GroupPartition, SparsityReport, group_penalty,
                       measure_sparsity, prox_block)
from .tensor import Tensor

PROX_STEP_MODES = ("base_lr", "group_mean")


class TrainingDiverged(RuntimeError):
    """A task loss became non-finite during training."""


def _check_grads(params: list[tuple[str, Tensor]], grads: dict[str, np.ndarray]) -> None:
    for name, p in params:
        g = grads.get(name)
        if g is None:
            raise ValueError(f"missing gradient for trainable parameter {name!r}")
        if g.shape != p.shape:
            raise ValueError(
                f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")


class ProxSGD:
    """theta <- prox(theta - alpha * grad) with threshold alpha*lambda."""

    def __init__(self, params: list[tuple[str, Tensor]], partition: GroupPartition,
                 lr: float, lam: float = 0.0):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if lam < 0:
            raise ValueError("lambda must be >= 0")
        self.params = list(params)
        self.partition = partition
        self.lr = lr
        self.lam = lam
        self._blocks = {b.param: b for b in partition.blocks}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        _check_grads(self.params, grads)
        for name, p in self.params:
            p.data -= self.lr * grads[name]
            if self.lam > 0 and name in self._blocks:
                prox_block(p.data, self._blocks[name], self.lr * self.lam)


@dataclass
class ProxAdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


class ProxAdam:
    """Adam with bias correction; regularized groups get a prox afterwards.

    With lam=0 this is exactly standard Adam.
    """

    def __init__(self, params: list[tuple[str, Tensor]], partition: GroupPartition,
                 lr: float = 1e-4, lam: float = 0.0, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 prox_step: str = "base_lr"):
        if prox_step not in PROX_STEP_MODES:
            raise ValueError(f"prox_step must be one of {PROX_STEP_MODES}")
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if lam < 0:
            raise ValueError("lambda must be >= 0")
        self.params = list(params)
        self.partition = partition
        self.lr = lr
        self.lam = lam
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.prox_step = prox_step
        self._blocks = {b.param: b for b in partition.blocks}
        self.state = ProxAdamState()
        for name, p in self.params:
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        _check_grads(self.params, grads)
        st = self.state
        st.t += 1
        bc1 = 1.0 - self.beta1 ** st.t
        bc2 = 1.0 - self.beta2 ** st.t
        for name, p in self.params:
            g = grads[name]
            m, v = st.m[name], st.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(v / bc2) + self.eps
            p.data -= self.lr * (m / bc1) / denom
            if self.lam > 0 and name in self._blocks:
                block = self._blocks[name]
                if self.prox_step == "group_mean":
                    group_denoms = denom.reshape(-1)[block.indices].mean(axis=1)
                    alpha_lambda = (self.lr / group_denoms) * self.lam
                else:
                    alpha_lambda = self.lr * self.lam
                prox_block(p.data, block, alpha_lambda)


@dataclass
class EpochStats:
    epoch: int
    task_losses: dict[str, float]
    combined_loss: float
    penalty: float
    report: SparsityReport


def train_epoch(model: MultiTaskModel, tasks: list[TaskSpec], batches,
                combiner: UncertaintyWeights, optimizer, partition: GroupPartition,
                lam: float = 0.0, epoch: int = 0) -> EpochStats:
    """One pass over ``batches``: forward all tasks, combine, backward, step.

    The penalty value is recorded for logging but never differentiated.
    Raises ``TrainingDiverged`` naming the batch and task if any loss goes
    non-finite.
    """
    trainables = [p for _, p in optimizer.params]
    sums = {t.name: 0.0 for t in tasks}
    combined_sum = 0.0
    n_batches = 0
    for batch_idx, batch in enumerate(batches):
        images = Tensor(batch.images)
        feats = model.forward_shared(images)
        losses = []
        for t in tasks:
            pred = model.forward_task(t, feats)
            loss = task_loss(t.kind, pred, batch.target_for(t))
            val = float(loss.data)
            if not np.isfinite(val):
                raise TrainingDiverged(
                    f"non-finite loss for task {t.name!r} in batch {batch_idx} "
                    f"of epoch {epoch}")
            sums[t.name] += val
            losses.append(loss)
        combined = combiner.combine(losses)
        combined_sum += float(combined.data)
        for p in trainables:
            p.zero_grad()
        combined.backward()
        grads = {name: p.grad for name, p in optimizer.params}
        optimizer.step(grads)
        n_batches += 1
    if n_batches == 0:
        raise ValueError("train_epoch needs at least one batch")
    report = measure_sparsity(model.registry, partition, epoch=epoch)
    return EpochStats(
        epoch=epoch,
        task_losses={k: s / n_batches for k, s in sums.items()},
        combined_loss=combined_sum / n_batches,
        penalty=group_penalty(model.registry, partition, lam),
        report=report,
    )


def full_sparsification_lambda(registry: ParamRegistry, partition: GroupPartition,
                               lr: float) -> float:
    """A lambda guaranteed to zero every group on the first base_lr prox step.

    The first Adam candidate moves each coordinate by at most lr, so a group
    norm grows by at most lr*sqrt(n_g); any lambda above
    (max_g ||theta_g||/sqrt(n_g) + lr) / lr clears all groups at step one.
    """
    worst = 0.0
    for block in partition.blocks:
        flat = registry.tensor(block.param).data.reshape(-1)
        vals = flat[block.indices]
        norms = np.sqrt((vals * vals).sum(axis=1))
        worst = max(worst, float(norms.max()) / np.sqrt(block.group_size))
    return (worst + lr) / lr * 1.01
