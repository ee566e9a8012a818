"""Adam optimization, the training loop, and evaluation.

Determinism contract: everything stochastic derives from (seed, epoch) or
(seed, step) streams, so identical (seed, config, data) runs produce
bitwise-identical parameters and a checkpoint resume continues exactly.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, fields

import numpy as np

from .data import normalize_sample
from .errors import ConfigError, ContractError, DataError
from .losses import LossWeights, inverse_graphics_loss, masked_l1_loss, mse_loss, total_loss
from .metrics import build_report
from .model import DecaModel
from .tensor import Tensor, assert_all_finite


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 0.0
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 0.0  # 0 disables clipping
    depth_threshold: float = 0.1
    ig_mode: str = "eq5_consistent"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    """Standard Adam with bias correction; grads are zeroed after each step."""

    def __init__(self, named_params, cfg):
        self.cfg = cfg
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        if len(set(self.names)) != len(self.names):
            raise ConfigError("duplicate parameter names handed to Adam")
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        cfg = self.cfg
        self.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p, m, v in zip(self.names, self.params, self.m, self.v):
            if p.grad is None:
                raise ContractError(f"parameter {name} has no gradient; run backward first")
            g = p.grad
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.data
            if cfg.grad_clip:
                norm = float(np.linalg.norm(g))
                if norm > cfg.grad_clip:
                    g = g * (cfg.grad_clip / norm)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
            p.grad.fill(0.0)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def _heatmap_targets(joints2d, resolution, sigma_px):
    h, w = resolution
    sigma = sigma_px * h / 64.0
    ys, xs = np.mgrid[0:h, 0:w]
    ys = ys + 0.5
    xs = xs + 0.5
    maps = np.empty((joints2d.shape[0], h, w), dtype=np.float32)
    for j, (u, v) in enumerate(joints2d):
        du = xs - u * w
        dv = ys - v * h
        maps[j] = np.exp(-(du * du + dv * dv) / (2.0 * sigma * sigma))
    return maps


def build_targets(samples, tasks, cfg, train_cfg):
    """Stack per-task target arrays for one batch; "w" needs none."""
    out = {}
    if "3d" in tasks:
        out["3d"] = np.stack([s.joints3d for s in samples]).astype(np.float32)
    if "2d" in tasks:
        out["2d"] = np.stack([s.joints2d for s in samples]).astype(np.float32)
    if "dm" in tasks or "dm_j" in tasks:
        task = "dm" if "dm" in tasks else "dm_j"
        hr, wr = cfg.recon_resolution
        stacks = []
        for s in samples:
            if task == "dm":
                if s.depth_gt is None:
                    raise DataError("task dm needs depth ground truth, missing from dataset")
                # Foreground-offset convention: background -> 0, nearer -> larger.
                tgt = (s.far_plane - s.depth_gt).astype(np.float32)
                if tgt.shape != (hr, wr):
                    tgt = _resize_nearest(tgt, (hr, wr))
            else:
                tgt = _heatmap_targets(s.joints2d, (hr, wr), cfg.heatmap_sigma_px)
            stacks.append(tgt)
        out[task] = np.stack(stacks)
    return out


def _resize_nearest(img, shape):
    h, w = img.shape
    hr, wr = shape
    rows = (np.arange(hr) * h // hr).clip(0, h - 1)
    cols = (np.arange(wr) * w // wr).clip(0, w - 1)
    return img[np.ix_(rows, cols)]


def batch_images(samples):
    return np.stack([normalize_sample(s) for s in samples])


def compute_task_losses(model, preds, y_w, targets, train_cfg):
    losses = {}
    for task in model.cfg.tasks:
        if task == "w":
            losses["w"] = inverse_graphics_loss(y_w, model.class_transforms(), train_cfg.ig_mode)
        elif task in ("dm", "dm_j"):
            losses[task] = masked_l1_loss(preds.for_task(task), Tensor(targets[task]), train_cfg.depth_threshold)
        else:
            losses[task] = mse_loss(preds.for_task(task), Tensor(targets[task]))
    return losses


@dataclass
class TrainResult:
    model: DecaModel
    optimizer: Adam
    loss_weights: LossWeights
    epoch_logs: list
    step: int
    epoch: int


def train(model_cfg, train_cfg, samples, log_path=None, resume=None):
    """Seeded mini-batch training of model parameters and loss weights.

    ``resume`` continues a previous TrainResult-like state at epoch
    granularity; the extra epochs trained here are ``train_cfg.epochs``.
    Emits one JSON log line per epoch when ``log_path`` is given.
    """
    if not samples:
        raise DataError("training needs a nonempty dataset")
    for task in model_cfg.tasks:
        if task in ("dm",) and samples[0].depth_gt is None:
            raise DataError("task dm needs depth ground truth, missing from dataset")

    if resume is None:
        model = DecaModel(model_cfg, seed=train_cfg.seed)
        loss_weights = LossWeights(model_cfg.tasks)
        optimizer = Adam(
            list(model.named_parameters()) + [(f"loss_weights.{n}", p) for n, p in loss_weights.named_parameters()],
            train_cfg,
        )
        start_epoch = 0
        step = 0
    else:
        model, optimizer, loss_weights = resume.model, resume.optimizer, resume.loss_weights
        optimizer.cfg = train_cfg
        start_epoch = resume.epoch
        step = resume.step

    n = len(samples)
    bs = min(train_cfg.batch_size, n)
    epoch_logs = []
    log_fp = open(log_path, "a") if log_path else None
    try:
        for epoch in range(start_epoch, start_epoch + train_cfg.epochs):
            t0 = time.perf_counter()
            order = np.random.default_rng([train_cfg.seed, 1, epoch]).permutation(n)
            task_sums = {t: 0.0 for t in model_cfg.tasks}
            total_sum = 0.0
            n_batches = 0
            model.train()
            for lo in range(0, n, bs):
                batch = [samples[i] for i in order[lo : lo + bs]]
                x = batch_images(batch)
                targets = build_targets(batch, model_cfg.tasks, model_cfg, train_cfg)
                drop_rng = np.random.default_rng([train_cfg.seed, 2, step])
                preds, y_w = model.forward(x, dropout_rng=drop_rng)
                losses = compute_task_losses(model, preds, y_w, targets, train_cfg)
                loss = total_loss(loss_weights, losses)
                loss.backward()
                assert_all_finite(loss, context=f"loss at step {step}")
                optimizer.step()
                for p in optimizer.params:
                    assert_all_finite(p, context=f"parameter after step {step}")
                total_sum += loss.item()
                for t, l in losses.items():
                    task_sums[t] += l.item()
                n_batches += 1
                step += 1
            entry = {
                "epoch": epoch,
                "loss_total": total_sum / max(n_batches, 1),
                "loss_per_task": {t: task_sums[t] / max(n_batches, 1) for t in sorted(task_sums)},
                "s_per_task": {t: v for t, v in sorted(loss_weights.values().items())},
                "wall_ms": (time.perf_counter() - t0) * 1000.0,
            }
            epoch_logs.append(entry)
            if log_fp:
                log_fp.write(json.dumps(entry, sort_keys=True) + "\n")
                log_fp.flush()
    finally:
        if log_fp:
            log_fp.close()
    model.eval()
    return TrainResult(model, optimizer, loss_weights, epoch_logs, step, start_epoch + train_cfg.epochs)


def predict(model, samples, batch_size=32):
    """Eval-mode forward over a sample list; returns stacked numpy outputs."""
    model.eval()
    preds3d, entities, acts = [], [], []
    pred2d = []
    for lo in range(0, len(samples), batch_size):
        batch = samples[lo : lo + batch_size]
        x = batch_images(batch)
        enc = model.encode(x)
        p = model.decode(enc.entities)
        preds3d.append(p.y3d.data.copy())
        if p.y2d is not None:
            pred2d.append(p.y2d.data.copy())
        entities.append(enc.entities.data.copy())
        acts.append(enc.class_activations.data.copy())
    out = {
        "y3d": np.concatenate(preds3d),
        "entities": np.concatenate(entities),
        "activations": np.concatenate(acts),
    }
    if pred2d:
        out["y2d"] = np.concatenate(pred2d)
    return out


def evaluate(model, samples, view_filter=None, batch_size=32):
    """Metrics report over (optionally view-filtered) samples."""
    if view_filter is not None:
        samples = [s for s in samples if s.view.tag == view_filter]
    if not samples:
        raise DataError(f"no samples to evaluate (view filter {view_filter!r})")
    if samples[0].joints3d.shape[0] != model.cfg.joints:
        raise ConfigError(
            f"checkpoint has {model.cfg.joints} joints, dataset has {samples[0].joints3d.shape[0]}"
        )
    out = predict(model, samples, batch_size)
    gt = np.stack([s.joints3d for s in samples])
    return build_report(out["y3d"], gt, _joint_names(samples), entities=out["entities"])


def _joint_names(samples):
    from .data import JOINT_NAMES

    j = samples[0].joints3d.shape[0]
    if j == len(JOINT_NAMES):
        return JOINT_NAMES
    return tuple(f"joint_{i}" for i in range(j))
