"""Synthetic multi-viewpoint pose data: an articulated 15-joint stick figure
rendered as capsule bones into depth (or flat-color RGB) images, plus the
dataset file format and input normalization.

Dataset layout: ``manifest.json`` plus, per sample, ``<stem>.depth.f32``
(raw little-endian float32, row-major HxW, meters) or ``<stem>.rgb.u8``
(row-major HxWx3 bytes) and ``<stem>.json`` with ground truth and camera.
Any loader producing PoseSample objects honoring this contract can stand in
for the synthetic generator.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, GeometryError, IOError_

FAR_PLANE = 10.0
NEAR_PLANE = 0.1
MANIFEST_VERSION = 1

JOINT_NAMES = (
    "head", "neck", "r_shoulder", "l_shoulder", "r_elbow", "l_elbow",
    "r_hand", "l_hand", "torso", "r_hip", "l_hip", "r_knee", "l_knee",
    "r_foot", "l_foot",
)

# Kinematic tree: joint index -> parent index (torso is the root).
PARENTS = {0: 1, 1: 8, 2: 1, 3: 1, 4: 2, 5: 3, 6: 4, 7: 5,
           8: -1, 9: 8, 10: 8, 11: 9, 12: 10, 13: 11, 14: 12}

CANONICAL_POSE = np.array(
    [
        [0.00, 1.55, 0.00],   # head
        [0.00, 1.35, 0.00],   # neck
        [-0.20, 1.30, 0.00],  # r_shoulder
        [0.20, 1.30, 0.00],   # l_shoulder
        [-0.30, 1.05, 0.00],  # r_elbow
        [0.30, 1.05, 0.00],   # l_elbow
        [-0.35, 0.80, 0.00],  # r_hand
        [0.35, 0.80, 0.00],   # l_hand
        [0.00, 0.95, 0.00],   # torso
        [-0.12, 0.65, 0.00],  # r_hip
        [0.12, 0.65, 0.00],   # l_hip
        [-0.14, 0.35, 0.00],  # r_knee
        [0.14, 0.35, 0.00],   # l_knee
        [-0.15, 0.05, 0.00],  # r_foot
        [0.15, 0.05, 0.00],   # l_foot
    ]
)

BONES = ((8, 1), (1, 0), (1, 2), (1, 3), (2, 4), (3, 5), (4, 6), (5, 7),
         (8, 9), (8, 10), (9, 11), (10, 12), (11, 13), (12, 14))

BONE_RADII = (0.07, 0.08, 0.05, 0.05, 0.045, 0.045, 0.04, 0.04,
              0.06, 0.06, 0.05, 0.05, 0.045, 0.045)

SPINE_JOINTS = frozenset({0, 1, 8})
LIMB_ANGLE_DEG = 45.0
SPINE_ANGLE_DEG = 15.0
ROOT_JITTER = (0.15, 0.05, 0.15)

BONE_COLORS = np.array(
    [(230, 60, 60), (240, 160, 40), (220, 220, 50), (140, 220, 50),
     (60, 220, 90), (50, 220, 180), (50, 180, 230), (60, 100, 240),
     (130, 60, 240), (200, 60, 230), (240, 70, 160), (160, 160, 160),
     (200, 120, 80), (90, 170, 120)],
    dtype=np.float64,
)


@dataclass
class Skeleton:
    """Posed joints (world frame, meters) plus bone topology and radii."""

    joints: np.ndarray
    bones: tuple = BONES
    radii: tuple = BONE_RADII
    names: tuple = JOINT_NAMES


@dataclass
class CameraView:
    tag: str
    rotation: np.ndarray  # world -> camera, rows are camera axes
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float

    def validate(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3) or np.abs(r @ r.T - np.eye(3)).max() > 1e-9:
            raise DataError(f"camera rotation not orthonormal for view {self.tag!r}")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise DataError(f"camera rotation not proper (det != +1) for view {self.tag!r}")
        return self

    def world_to_camera(self, points):
        return (np.asarray(self.rotation) @ np.asarray(points).T).T + np.asarray(self.translation)

    def camera_to_world(self, points):
        return (np.asarray(self.rotation).T @ (np.asarray(points) - np.asarray(self.translation)).T).T

    def to_json_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "R": np.asarray(self.rotation).tolist(),
            "t": np.asarray(self.translation).tolist(),
        }


@dataclass
class PoseSample:
    """One input image with its 3D/2D ground truth and camera metadata."""

    image: np.ndarray  # [1,H,W] depth (meters) or [3,H,W] RGB in [0,255]
    joints3d: np.ndarray  # [J,3] camera frame, meters
    joints2d: np.ndarray  # [J,2] normalized image coords
    view: CameraView
    pose_id: int
    split: str = "train"
    depth_gt: np.ndarray | None = None
    far_plane: float = FAR_PLANE


def _intrinsics(resolution):
    h, w = resolution
    f = 0.85 * min(h, w)
    return f, f, w / 2.0, h / 2.0


def make_camera(tag, resolution):
    fx, fy, cx, cy = _intrinsics(resolution)
    center = np.array([0.0, 0.9, 0.0])
    if tag == "front":
        rot = np.array([[1.0, 0, 0], [0, -1.0, 0], [0, 0, -1.0]])
        pos = center + np.array([0.0, 0.0, 3.0])
    elif tag == "top":
        rot = np.array([[1.0, 0, 0], [0, 0, 1.0], [0, -1.0, 0]])
        pos = center + np.array([0.0, 2.5, 0.0])
    else:
        raise ConfigError(f"unknown canonical view tag {tag!r}")
    t = -rot @ pos
    return CameraView(tag, rot, t, fx, fy, cx, cy).validate()


def make_free_camera(rng, resolution, distance=3.0):
    """Random look-at camera on a sphere around the body center."""
    fx, fy, cx, cy = _intrinsics(resolution)
    center = np.array([0.0, 0.9, 0.0])
    az = rng.uniform(0.0, 2.0 * np.pi)
    el = rng.uniform(np.deg2rad(10.0), np.deg2rad(70.0))
    pos = center + distance * np.array(
        [np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)]
    )
    fwd = center - pos
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    rot = np.stack([right, np.cross(fwd, right), fwd])
    return CameraView("free", rot, -rot @ pos, fx, fy, cx, cy).validate()


def _euler_xyz(angles):
    ax, ay, az = angles
    cx_, sx = np.cos(ax), np.sin(ax)
    cy_, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx_, -sx], [0, sx, cx_]])
    ry = np.array([[cy_, 0, sy], [0, 1, 0], [-sy, 0, cy_]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def sample_pose(rng, limb_deg=LIMB_ANGLE_DEG, spine_deg=SPINE_ANGLE_DEG, root_jitter=ROOT_JITTER):
    """Draw a random articulated pose around the canonical one.

    Per-joint rotations propagate down the kinematic tree; the root also gets
    a small translation jitter.
    """
    j = len(JOINT_NAMES)
    locals_r = np.empty((j, 3, 3))
    for idx in range(j):
        lim = np.deg2rad(spine_deg if idx in SPINE_JOINTS else limb_deg)
        locals_r[idx] = _euler_xyz(rng.uniform(-lim, lim, size=3))
    root = 8
    jitter = rng.uniform(-1.0, 1.0, size=3) * np.asarray(root_jitter)
    joints = np.empty((j, 3))
    acc = {root: locals_r[root]}
    joints[root] = CANONICAL_POSE[root] + jitter
    order = sorted(range(j), key=_tree_depth)
    for idx in order:
        parent = PARENTS[idx]
        if parent < 0:
            continue
        offset = CANONICAL_POSE[idx] - CANONICAL_POSE[parent]
        joints[idx] = joints[parent] + acc[parent] @ offset
        acc[idx] = acc[parent] @ locals_r[idx]
    return joints


def _tree_depth(idx):
    d = 0
    while PARENTS[idx] >= 0:
        idx = PARENTS[idx]
        d += 1
    return d


def project(joints3d, view):
    """Pinhole projection of camera-frame points to normalized [0,1] coords."""
    pts = np.asarray(joints3d, dtype=np.float64)
    if np.any(pts[:, 2] <= 0):
        raise GeometryError("projection needs camera-frame z > 0 for every joint")
    w, h = view.cx * 2.0, view.cy * 2.0
    u = view.fx * pts[:, 0] / pts[:, 2] + view.cx
    v = view.fy * pts[:, 1] / pts[:, 2] + view.cy
    return np.stack([u / w, v / h], axis=1)


def render_depth(skeleton, view, resolution, far_plane=FAR_PLANE):
    """Z-buffer render of the bones as capsules; background at the far plane."""
    depth, _ = _render(skeleton, view, resolution, far_plane)
    return depth


def render_rgb(skeleton, view, resolution, far_plane=FAR_PLANE):
    """Flat per-bone colors over a black background, [3,H,W] in [0,255]."""
    _, bone_idx = _render(skeleton, view, resolution, far_plane)
    h, w = resolution
    img = np.zeros((h * w, 3))
    hit = bone_idx >= 0
    img[hit] = BONE_COLORS[bone_idx[hit] % len(BONE_COLORS)]
    return img.reshape(h, w, 3).transpose(2, 0, 1)


def _render(skeleton, view, resolution, far_plane):
    h, w = resolution
    joints = np.asarray(skeleton.joints, dtype=np.float64)
    zbuf = np.full(h * w, far_plane)
    hit_bone = np.full(h * w, -1, dtype=np.int64)
    if joints.size == 0 or not skeleton.bones:
        return zbuf.reshape(h, w), hit_bone

    cam = view.world_to_camera(joints)
    if np.any(cam[:, 2] <= NEAR_PLANE):
        raise GeometryError("skeleton joint behind or too close to the camera")

    vs, us = np.mgrid[0:h, 0:w]
    dirs = np.stack(
        [
            (us.ravel() + 0.5 - view.cx) / view.fx,
            (vs.ravel() + 0.5 - view.cy) / view.fy,
            np.ones(h * w),
        ],
        axis=1,
    )  # unnormalized, dz = 1 so the ray parameter equals camera z

    for b_idx, ((pa, pb), radius) in enumerate(zip(skeleton.bones, skeleton.radii)):
        a, bpt = cam[pa], cam[pb]
        t_hit = _ray_capsule(dirs, a, bpt, radius)
        closer = t_hit < zbuf
        zbuf[closer] = t_hit[closer]
        hit_bone[closer] = b_idx
    return zbuf.reshape(h, w), hit_bone


def _ray_capsule(dirs, a, b, radius):
    """Smallest ray parameter hitting the capsule around segment [a, b];
    inf where the ray misses. Rays start at the origin."""
    n = dirs.shape[0]
    best = np.full(n, np.inf)
    axis = b - a
    length = np.linalg.norm(axis)
    if length > 1e-12:
        u = axis / length
        d_par = dirs @ u
        a_par = a @ u
        d_perp = dirs - d_par[:, None] * u
        a_perp = a - a_par * u
        qa = np.einsum("ij,ij->i", d_perp, d_perp)
        qb = -2.0 * (d_perp @ a_perp)
        qc = a_perp @ a_perp - radius * radius
        disc = qb * qb - 4.0 * qa * qc
        ok = (disc >= 0) & (qa > 1e-18)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t = np.where(ok, (-qb - sq) / (2.0 * np.maximum(qa, 1e-18)), np.inf)
        sigma = t * d_par - a_par
        valid = ok & (t > NEAR_PLANE) & (sigma >= 0.0) & (sigma <= length)
        best = np.where(valid, t, best)
    for center in (a, b):
        qa = np.einsum("ij,ij->i", dirs, dirs)
        qb = -2.0 * (dirs @ center)
        qc = center @ center - radius * radius
        disc = qb * qb - 4.0 * qa * qc
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t = np.where(ok, (-qb - sq) / (2.0 * qa), np.inf)
        t = np.where(ok & (t > NEAR_PLANE), t, np.inf)
        best = np.minimum(best, t)
    return best


def normalize_input(image, kind, far_plane=FAR_PLANE):
    """Map raw images into [0,1]: depth / far plane (clamped), RGB / 255.

    Constants are fixed so train and test normalization are identical.
    """
    img = np.asarray(image, dtype=np.float64)
    if kind == "depth":
        if np.any(img < 0):
            raise DataError("negative depth value")
        return np.clip(img / far_plane, 0.0, 1.0).astype(np.float32)
    if kind == "rgb":
        return (img / 255.0).astype(np.float32)
    raise ConfigError(f"unknown image kind {kind!r}")


def denormalize_depth(x, far_plane=FAR_PLANE):
    return np.asarray(x, dtype=np.float64) * far_plane


def normalize_sample(sample):
    kind = "depth" if sample.image.shape[0] == 1 else "rgb"
    return normalize_input(sample.image, kind, sample.far_plane)


@dataclass
class DatasetManifest:
    version: int
    joint_names: tuple
    domain: str
    resolution: tuple
    far_plane: float
    seed: int
    views: tuple
    train_frac: float
    sampler: dict
    samples: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(
            {
                "version": self.version,
                "joint_names": list(self.joint_names),
                "domain": self.domain,
                "resolution": list(self.resolution),
                "far_plane": self.far_plane,
                "seed": self.seed,
                "views": list(self.views),
                "train_frac": self.train_frac,
                "sampler": self.sampler,
                "samples": self.samples,
            },
            indent=1,
            sort_keys=True,
        )


def generate_synthetic(n, views, joints, resolution, seed, out_dir, domain="depth", train_frac=0.8):
    """Render `n` random poses from every requested view into `out_dir`.

    Same pose id across views shares identical world-frame joints; splits are
    assigned per pose id so held-out poses are unseen in every view. Output
    is bit-reproducible from (seed, parameters).
    """
    if n < 1:
        raise ConfigError("need at least one pose")
    if joints != len(JOINT_NAMES):
        raise ConfigError(f"synthetic skeleton has {len(JOINT_NAMES)} joints, got {joints}")
    if domain not in ("depth", "rgb"):
        raise ConfigError(f"unknown domain {domain!r}")
    views = tuple(views)
    if not views:
        raise ConfigError("need at least one view")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IOError_(f"cannot create dataset dir {out}: {e}") from e
    if not _writable(out):
        raise IOError_(f"dataset dir {out} is not writable")

    rng = np.random.default_rng(seed)
    n_train = int(round(n * train_frac))
    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        joint_names=JOINT_NAMES,
        domain=domain,
        resolution=tuple(resolution),
        far_plane=FAR_PLANE,
        seed=seed,
        views=views,
        train_frac=train_frac,
        sampler={
            "limb_deg": LIMB_ANGLE_DEG,
            "spine_deg": SPINE_ANGLE_DEG,
            "root_jitter": list(ROOT_JITTER),
        },
    )
    free_rng = np.random.default_rng([seed, 7])
    for pose_id in range(n):
        world = sample_pose(rng)
        split = "train" if pose_id < n_train else "test"
        skel = Skeleton(world)
        for tag in views:
            cam = make_free_camera(free_rng, resolution) if tag == "free" else make_camera(tag, resolution)
            stem = f"{pose_id:06d}_{tag}"
            depth = render_depth(skel, cam, resolution)
            joints_cam = cam.world_to_camera(world)
            j2d = project(joints_cam, cam)
            if domain == "depth":
                (out / f"{stem}.depth.f32").write_bytes(depth.astype("<f4").tobytes())
            else:
                rgb = render_rgb(skel, cam, resolution)
                (out / f"{stem}.rgb.u8").write_bytes(
                    np.clip(rgb, 0, 255).astype(np.uint8).transpose(1, 2, 0).tobytes()
                )
                (out / f"{stem}.depth.f32").write_bytes(depth.astype("<f4").tobytes())
            record = {
                "pose_id": pose_id,
                "view": tag,
                "split": split,
                "joints3d": joints_cam.tolist(),
                "joints2d": j2d.tolist(),
                "camera": cam.to_json_dict(),
            }
            (out / f"{stem}.json").write_text(json.dumps(record, indent=1, sort_keys=True))
            manifest.samples.append({"stem": stem, "pose_id": pose_id, "view": tag, "split": split})
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


def _writable(path):
    try:
        probe = path / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
        return True
    except OSError:
        return False


def load_manifest(data_dir):
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise IOError_(f"no manifest.json under {data_dir}")
    raw = json.loads(path.read_text())
    if raw.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported dataset version {raw.get('version')!r}")
    return raw


def load_dataset(data_dir, view=None, split=None):
    """Load PoseSamples from a dataset directory, optionally filtered."""
    root = Path(data_dir)
    manifest = load_manifest(root)
    h, w = manifest["resolution"]
    domain = manifest["domain"]
    far = manifest["far_plane"]
    samples = []
    for rec in manifest["samples"]:
        if view is not None and rec["view"] != view:
            continue
        if split is not None and rec["split"] != split:
            continue
        stem = rec["stem"]
        meta = json.loads((root / f"{stem}.json").read_text())
        cam_d = meta["camera"]
        cam = CameraView(
            meta["view"], np.array(cam_d["R"]), np.array(cam_d["t"]),
            cam_d["fx"], cam_d["fy"], cam_d["cx"], cam_d["cy"],
        ).validate()
        depth_path = root / f"{stem}.depth.f32"
        depth = None
        if depth_path.exists():
            buf = np.frombuffer(depth_path.read_bytes(), dtype="<f4")
            if buf.size != h * w:
                raise DataError(f"depth file {stem} has {buf.size} values, expected {h * w}")
            depth = buf.reshape(h, w).astype(np.float64)
        if domain == "depth":
            if depth is None:
                raise DataError(f"missing depth file for sample {stem}")
            image = depth[None]
        else:
            buf = np.frombuffer((root / f"{stem}.rgb.u8").read_bytes(), dtype=np.uint8)
            if buf.size != h * w * 3:
                raise DataError(f"rgb file {stem} has {buf.size} bytes, expected {h * w * 3}")
            image = buf.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64)
        samples.append(
            PoseSample(
                image=image,
                joints3d=np.array(meta["joints3d"]),
                joints2d=np.array(meta["joints2d"]),
                view=cam,
                pose_id=meta["pose_id"],
                split=meta["split"],
                depth_gt=depth if domain == "rgb" else None,
                far_plane=far,
            )
        )
    return samples


def dataset_checksum(data_dir):
    """Stable digest over every dataset file (for reproducibility tests)."""
    root = Path(data_dir)
    digest = hashlib.sha256()
    for path in sorted(root.iterdir()):
        if path.is_file():
            digest.update(path.name.encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()
