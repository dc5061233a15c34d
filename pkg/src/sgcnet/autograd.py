"""Reverse-mode tape over layer calls, losses and the SGD update."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .errors import DataError, NumericError
from .sparse_tensor import SparseTensor


class ParamRegistry:
    """Named parameter arrays in registration order, with matching gradients.

    Buffers (batch-norm running statistics) live in the same registry so a
    checkpoint captures the whole model state, but they receive no gradient.
    ``decay`` marks the tensors weight decay applies to (conv/linear weights).
    """

    def __init__(self):
        self.values: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.grads: Dict[str, np.ndarray] = {}
        self.decay: set = set()
        self.buffers: set = set()

    def add(self, name: str, value: np.ndarray, decay: bool = False, buffer: bool = False):
        if name in self.values:
            raise DataError(f"duplicate parameter name {name!r}")
        self.values[name] = np.asarray(value, dtype=np.float64)
        if decay:
            self.decay.add(name)
        if buffer:
            self.buffers.add(name)

    def __getitem__(self, name):
        return self.values[name]

    def __setitem__(self, name, value):
        if name not in self.values:
            raise KeyError(name)
        self.values[name] = value

    def __contains__(self, name):
        return name in self.values

    def __len__(self):
        return len(self.values)

    def names(self):
        return list(self.values)

    def trainable(self):
        return [n for n in self.values if n not in self.buffers]

    def zero_grad(self):
        self.grads = {}

    def accumulate(self, name: str, g: np.ndarray):
        if name in self.grads:
            self.grads[name] = self.grads[name] + g
        else:
            self.grads[name] = np.array(g, dtype=np.float64)

    def count(self) -> int:
        return sum(v.size for n, v in self.values.items() if n not in self.buffers)


@dataclass
class _Entry:
    inputs: tuple
    output: int
    backward: Callable
    ctx: object
    params: dict


class Tape:
    """Ordered record of executed layer nodes.

    Values are identified by integer ids handed out by :meth:`new_id`.  Each
    entry maps its output gradient to input gradients plus parameter
    gradients; :meth:`backward` replays entries newest first and accumulates
    parameter gradients into a :class:`ParamRegistry`.
    """

    def __init__(self):
        self.entries = []
        self._next = 0

    def new_id(self) -> int:
        self._next += 1
        return self._next

    def record(self, inputs: Sequence[Optional[int]], output: int, backward: Callable, ctx,
               params: Optional[dict] = None):
        self.entries.append(_Entry(tuple(inputs), output, backward, ctx, params or {}))

    def backward(self, seeds: Dict[int, np.ndarray], registry: ParamRegistry) -> Dict[int, np.ndarray]:
        grads = {k: np.asarray(v, dtype=np.float64) for k, v in seeds.items()}
        for e in reversed(self.entries):
            g = grads.pop(e.output, None)
            if g is None:
                continue
            dx, pg = e.backward(g, e.ctx)
            for local, full in e.params.items():
                registry.accumulate(full, pg[local])
            if len(e.inputs) == 1:
                dx = (dx,)
            for vid, d in zip(e.inputs, dx):
                if vid is None or d is None:
                    continue
                grads[vid] = grads[vid] + d if vid in grads else d
        return grads


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def weighted_softmax_loss(logits: SparseTensor, labels: np.ndarray, weights: np.ndarray,
                          allow_empty: bool = False):
    """Weighted voxel-wise cross-entropy and its gradient w.r.t. the logits.

    ``labels``/``weights`` are dense ``(D, H, W)`` grids for a single sample or
    ``(B, D, H, W)`` for a batch.  Each sample is normalised by its own weight
    sum and the batch loss is the mean over samples that carry weight.  Dense
    voxels with no active site contribute nothing.
    """
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=np.float64)
    if labels.ndim == 3:
        labels, weights = labels[None], weights[None]
    if labels.shape != weights.shape or labels.shape[0] != logits.batch_size:
        raise DataError(f"labels {labels.shape} / weights {weights.shape} do not fit {logits!r}")
    if tuple(labels.shape[1:]) != tuple(logits.extents):
        raise DataError(f"label grid {labels.shape[1:]} != tensor extents {logits.extents}")
    c = logits.coords
    idx = (c[:, 0], c[:, 3], c[:, 2], c[:, 1])
    w = weights[idx]
    y = labels[idx].astype(np.int64)
    sums = np.bincount(c[:, 0], weights=w, minlength=logits.batch_size)
    valid = sums > 0
    grad = np.zeros_like(logits.features)
    if not valid.any():
        if allow_empty:
            return 0.0, grad
        raise DataError("weighted softmax loss: total weight is zero")
    use = w > 0
    if (y[use] >= logits.channels).any() or (y[use] < 0).any():
        raise DataError("weighted voxel carries a label outside the class range")
    yy = np.where(use, y, 0)
    logp = _log_softmax(logits.features)
    nll = -logp[np.arange(len(yy)), yy]
    scale = np.where(use, w / np.where(valid, sums, 1.0)[c[:, 0]], 0.0) / valid.sum()
    loss = float((scale * nll).sum())
    p = np.exp(logp)
    p[np.arange(len(yy)), yy] -= 1.0
    grad = p * scale[:, None]
    return loss, grad


def total_loss(per_scale_losses: Sequence[float], alphas: Sequence[float]) -> float:
    if len(per_scale_losses) != len(alphas):
        raise DataError(f"{len(per_scale_losses)} losses but {len(alphas)} weights")
    return float(sum(a * l for a, l in zip(alphas, per_scale_losses)))


@dataclass
class OptimState:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay: float = 0.5
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def epoch_decay_factor(self) -> float:
        return math.exp(-self.lr_decay)

    def lr_at_epoch(self, base_lr: float, epoch: int) -> float:
        return base_lr * math.exp(-self.lr_decay * epoch)


def sgd_step(registry: ParamRegistry, state: OptimState) -> None:
    """Momentum SGD in place: ``v <- mu*v + (g + wd*w)``, ``w <- w - lr*v``.

    Weight decay touches only names in ``registry.decay``.
    """
    for name in registry.trainable():
        g = registry.grads.get(name)
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
        w = registry.values[name]
        if name in registry.decay and state.weight_decay:
            g = g + state.weight_decay * w
        v = state.velocity.get(name)
        v = g.copy() if v is None else state.momentum * v + g
        state.velocity[name] = v
        registry.values[name] = w - state.learning_rate * v
