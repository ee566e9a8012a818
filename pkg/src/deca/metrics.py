"""Pose evaluation: MPJPE (raw / Procrustes-aligned), mAP at a distance
threshold, per-joint and body-part breakdowns, and latent cluster purity."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DegeneracyError, DimensionError

UPPER_BODY = ("head", "neck", "r_shoulder", "l_shoulder", "r_elbow", "l_elbow",
              "r_hand", "l_hand", "torso")
LOWER_BODY = ("r_hip", "l_hip", "r_knee", "l_knee", "r_foot", "l_foot")


def _check_pose_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise DimensionError(f"pose shapes differ or are not 3-d: {pred.shape} vs {gt.shape}")
    return pred, gt


def joint_distances(pred, gt):
    """Euclidean distances in meters, shape [..., J]."""
    pred, gt = _check_pose_pair(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt):
    """Mean per-joint position error in millimeters (inputs in meters)."""
    return float(joint_distances(pred, gt).mean() * 1000.0)


def map_at_threshold(pred, gt, threshold_m=0.10):
    """Fraction of joints strictly closer than the threshold, pooled over
    every (sample, joint) pair."""
    return float((joint_distances(pred, gt) < threshold_m).mean())


def procrustes_align(pred, gt):
    """Best-fit similarity transform (scale, proper rotation, translation)
    from pred onto gt; returns the transformed pred."""
    pred, gt = _check_pose_pair(pred, gt)
    if pred.ndim != 2 or pred.shape[0] < 3:
        raise DimensionError(f"alignment needs [J>=3, 3] point sets, got {pred.shape}")
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    p_c, g_c = pred - mu_p, gt - mu_g
    norm_p = np.square(p_c).sum()
    if norm_p < 1e-18 or np.square(g_c).sum() < 1e-18:
        raise DegeneracyError("coincident point set cannot be aligned")
    h = p_c.T @ g_c
    u, svals, vt = np.linalg.svd(h)
    if np.linalg.matrix_rank(h, tol=1e-12) < 2:
        raise DegeneracyError("point sets are rank-deficient (collinear)")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    signs = np.array([1.0, 1.0, d])
    rot = vt.T @ np.diag(signs) @ u.T
    scale = (svals * signs).sum() / norm_p
    return scale * (rot @ pred.T).T + (mu_g - scale * rot @ mu_p)


def mpjpe_procrustes(pred, gt):
    """MPJPE in millimeters after per-sample Procrustes alignment."""
    pred, gt = _check_pose_pair(pred, gt)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    errs = [mpjpe(procrustes_align(p, g), g) for p, g in zip(pred, gt)]
    return float(np.mean(errs))


def cluster_purity(entities):
    """How cleanly 16-d entities cluster by their joint slot.

    Per-joint centroids over samples; every entity is assigned to the nearest
    centroid (ties -> lowest joint index); purity is the fraction assigned to
    their own joint's centroid.
    """
    entities = np.asarray(entities, dtype=np.float64)
    if entities.ndim != 3:
        raise DimensionError(f"entities must be [N, J, D], got {entities.shape}")
    n, j, d = entities.shape
    if n < 2:
        raise DimensionError("cluster purity needs at least 2 samples")
    centroids = entities.mean(axis=0)  # [J, D]
    flat = entities.reshape(n * j, d)
    d2 = np.square(flat[:, None, :] - centroids[None]).sum(axis=2)
    assigned = np.argmin(d2, axis=1)
    own = np.tile(np.arange(j), n)
    return float((assigned == own).mean())


def shuffle_purity_baseline(entities, n_shuffles=20, seed=0):
    """Monte-Carlo purity under random joint labels: (mean, std)."""
    entities = np.asarray(entities, dtype=np.float64)
    n, j, d = entities.shape
    flat = entities.reshape(n * j, d)
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(n_shuffles):
        perm = rng.permutation(n * j)
        vals.append(cluster_purity(flat[perm].reshape(n, j, d)))
    return float(np.mean(vals)), float(np.std(vals))


@dataclass
class MetricsReport:
    mpjpe_mm: float
    mpjpe_pa_mm: float
    map_010: float
    per_joint: dict = field(default_factory=dict)
    body_part_groups: dict = field(default_factory=dict)
    cluster_purity: float = 0.0

    def to_json(self):
        return json.dumps(
            {
                "mpjpe_mm": self.mpjpe_mm,
                "mpjpe_pa_mm": self.mpjpe_pa_mm,
                "map_010": self.map_010,
                "per_joint": self.per_joint,
                "body_part_groups": self.body_part_groups,
                "cluster_purity": self.cluster_purity,
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def build_report(pred, gt, joint_names, entities=None, threshold_m=0.10):
    """Full evaluation report for a batch of poses [N, J, 3] (meters)."""
    pred, gt = _check_pose_pair(pred, gt)
    dists = joint_distances(pred, gt)  # [N, J]
    hits = dists < threshold_m
    per_joint = {
        name: {
            "error_mm": float(dists[:, i].mean() * 1000.0),
            "hit_rate": float(hits[:, i].mean()),
        }
        for i, name in enumerate(joint_names)
    }
    groups = {}
    for label, members in (("upper", UPPER_BODY), ("lower", LOWER_BODY)):
        present = [m for m in members if m in per_joint]
        if present:
            groups[label] = {
                "error_mm": float(np.mean([per_joint[m]["error_mm"] for m in present])),
                "hit_rate": float(np.mean([per_joint[m]["hit_rate"] for m in present])),
            }
    groups["mean"] = {
        "error_mm": float(np.mean([v["error_mm"] for v in per_joint.values()])),
        "hit_rate": float(np.mean([v["hit_rate"] for v in per_joint.values()])),
    }
    return MetricsReport(
        mpjpe_mm=mpjpe(pred, gt),
        mpjpe_pa_mm=mpjpe_procrustes(pred, gt),
        map_010=map_at_threshold(pred, gt, threshold_m),
        per_joint=per_joint,
        body_part_groups=groups,
        cluster_purity=cluster_purity(entities) if entities is not None else 0.0,
    )
