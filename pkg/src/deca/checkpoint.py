"""Checkpoint persistence: a JSON manifest plus one raw little-endian
float32 blob holding parameters and Adam moments at recorded byte offsets.

Round-trips are bitwise exact; the manifest is validated (version, blob
length, shape table) before any model state is touched.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    IOError_,
)
from .losses import LossWeights
from .model import DecaConfig, DecaModel
from .training import Adam, TrainConfig, TrainResult

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"


def _named_state(model, loss_weights):
    pairs = [(f"model.{n}", p) for n, p in model.named_parameters()]
    pairs += [(f"loss_weights.{n}", p) for n, p in loss_weights.named_parameters()]
    return pairs


def save_checkpoint(ckpt_dir, result, model_cfg, train_cfg):
    """Write manifest + blob for a TrainResult; returns the manifest dict."""
    out = Path(ckpt_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IOError_(f"cannot create checkpoint dir {out}: {e}") from e

    pairs = _named_state(result.model, result.loss_weights)
    opt = result.optimizer
    if opt is not None and opt.names != [n for n, _ in pairs]:
        raise CheckpointShapeError("optimizer parameter order does not match model state")

    chunks = []
    table = []
    offset = 0
    for name, p in pairs:
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        entry = {"name": name, "shape": list(p.data.shape), "offset": offset}
        offset += len(raw)
        chunks.append(raw)
        table.append(entry)
    adam_entry = None
    if opt is not None:
        for entry, m, v in zip(table, opt.m, opt.v):
            raw_m = np.ascontiguousarray(m, dtype="<f4").tobytes()
            raw_v = np.ascontiguousarray(v, dtype="<f4").tobytes()
            entry["m_offset"] = offset
            offset += len(raw_m)
            entry["v_offset"] = offset
            offset += len(raw_v)
            chunks.extend([raw_m, raw_v])
        adam_entry = {"t": opt.t}

    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": model_cfg.to_dict(),
        "train_config": train_cfg.to_dict(),
        "seed": train_cfg.seed,
        "step": result.step,
        "epoch": result.epoch,
        "s": {k: float(v) for k, v in result.loss_weights.values().items()},
        "blob_bytes": offset,
        "params": table,
        "adam": adam_entry,
    }
    (out / BLOB_NAME).write_bytes(b"".join(chunks))
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_checkpoint(ckpt_dir):
    """Rebuild (TrainResult, model_cfg, train_cfg) from a checkpoint dir."""
    root = Path(ckpt_dir)
    man_path = root / MANIFEST_NAME
    blob_path = root / BLOB_NAME
    if not man_path.exists() or not blob_path.exists():
        raise IOError_(f"checkpoint incomplete under {root}")
    manifest = json.loads(man_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format {manifest.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    blob = blob_path.read_bytes()
    expected = manifest["blob_bytes"]
    if len(blob) < expected:
        raise CheckpointTruncatedError(f"blob has {len(blob)} bytes, manifest promises {expected}")
    for entry in manifest["params"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if entry["offset"] + 4 * count > len(blob):
            raise CheckpointTruncatedError(f"parameter {entry['name']} overruns the blob")

    model_cfg = DecaConfig.from_dict(manifest["model_config"])
    train_cfg = TrainConfig.from_dict(manifest["train_config"])
    model = DecaModel(model_cfg, seed=train_cfg.seed)
    loss_weights = LossWeights(model_cfg.tasks)
    pairs = _named_state(model, loss_weights)
    by_name = dict(pairs)
    if [e["name"] for e in manifest["params"]] != [n for n, _ in pairs]:
        raise CheckpointShapeError("checkpoint parameter table does not match the rebuilt model")

    optimizer = Adam(pairs, train_cfg)

    def read(offset, shape):
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        return arr.reshape([int(s) for s in shape]).astype(np.float32)

    for idx, entry in enumerate(manifest["params"]):
        p = by_name[entry["name"]]
        if list(p.data.shape) != list(entry["shape"]):
            raise CheckpointShapeError(
                f"parameter {entry['name']}: checkpoint shape {entry['shape']}, model shape {list(p.data.shape)}"
            )
        p.data = read(entry["offset"], entry["shape"])
        p.zero_grad()
        if manifest["adam"] is not None and "m_offset" in entry:
            optimizer.m[idx] = read(entry["m_offset"], entry["shape"])
            optimizer.v[idx] = read(entry["v_offset"], entry["shape"])
    if manifest["adam"] is not None:
        optimizer.t = manifest["adam"]["t"]

    result = TrainResult(
        model=model,
        optimizer=optimizer,
        loss_weights=loss_weights,
        epoch_logs=[],
        step=manifest["step"],
        epoch=manifest["epoch"],
    )
    return result, model_cfg, train_cfg
