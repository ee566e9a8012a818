"""Task losses and the self-balancing aggregate.

Joint losses are per-sample sums of squared error averaged over the batch;
depth reconstruction uses a foreground-masked L1; the inverse-graphics loss
pulls each class transform product toward identity. The total combines task
losses with trainable weights s via sum(s + exp(-s) * L).
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError
from .layers import Module
from .tensor import Parameter, Tensor, get_default_dtype


def mse_loss(pred, target):
    """Per-sample sum of squared differences, averaged over the batch."""
    pred = Tensor._coerce(pred)
    target = Tensor._coerce(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    bs = pred.shape[0]
    d = pred - target
    return (d * d).sum() * (1.0 / bs)


def masked_l1_loss(pred, target, depth_threshold):
    """L1 plus an extra L1 on pixels whose target exceeds the threshold,
    normalized by 2 * batch size."""
    pred = Tensor._coerce(pred)
    target = Tensor._coerce(target)
    if pred.shape != target.shape:
        raise DimensionError(f"masked L1 shapes differ: {pred.shape} vs {target.shape}")
    bs = pred.shape[0]
    mask = (target.data > depth_threshold).astype(pred.dtype)
    err = (pred - target).abs()
    return (err * Tensor(mask) + err).sum() * (1.0 / (2.0 * bs))


def inverse_graphics_loss(y_w, weights, mode="eq5_consistent"):
    """Mean Frobenius norm over (type, class) pairs of Y[j] @ W[i, j]
    (minus identity in the default, consistent mode).

    The "paper_literal" mode drops the identity target; it is kept only for
    comparison since its minimum is the zero matrix.
    """
    y = y_w.Y if isinstance(y_w, Module) else Tensor._coerce(y_w)
    w = weights.W if isinstance(weights, Module) else Tensor._coerce(weights)
    if y.ndim != 3 or y.shape[-2:] != (4, 4):
        raise DimensionError(f"inverse-graphics matrices must be [J,4,4], got {y.shape}")
    if w.ndim != 4 or w.shape[1] != y.shape[0]:
        raise DimensionError(f"class transforms {w.shape} do not match {y.shape[0]} classes")
    if mode not in ("eq5_consistent", "paper_literal"):
        raise ConfigError(f"unknown inverse-graphics mode {mode!r}")
    t, j = w.shape[0], w.shape[1]
    prod = y.reshape(1, j, 4, 4) @ w  # [T, J, 4, 4]
    if mode == "eq5_consistent":
        prod = prod - Tensor(np.eye(4, dtype=prod.dtype))
    sq = (prod * prod).sum(axis=(2, 3))
    return (sq + 1e-24).sqrt().sum() * (1.0 / (t * j))


class LossWeights(Module):
    """One trainable balancing scalar per enabled task, initialized to 1."""

    def __init__(self, tasks):
        dt = get_default_dtype()
        self.s = {task: Parameter(np.ones((), dtype=dt), name=f"s_{task}") for task in tasks}

    def named_parameters(self, prefix=""):
        for task in sorted(self.s):
            name = f"{prefix}s.{task}" if prefix else f"s.{task}"
            yield name, self.s[task]

    def values(self):
        return {task: float(p.data) for task, p in self.s.items()}


def total_loss(weights, losses):
    """sum over tasks of (s + exp(-s) * L); differentiable in both."""
    s_map = weights.s if isinstance(weights, LossWeights) else weights
    if set(s_map) != set(losses):
        raise ConfigError(f"loss/weight task sets differ: {sorted(s_map)} vs {sorted(losses)}")
    total = None
    for task in sorted(losses):
        s = Tensor._coerce(s_map[task])
        term = s + (-s).exp() * Tensor._coerce(losses[task])
        total = term if total is None else total + term
    return total
