"""Synthetic subjects: sampling, stick-figure rendering, corpus files.

A subject is a shaped, posed skeleton plus a camera; rendering produces an
anti-aliased capsule figure over low-amplitude value noise, with per-limb
intensities chosen so left and right limbs are visually distinct (the detector
needs that to learn side labels, and flip attacks need sides to mean anything).

Corpus layout on disk: a directory holding manifest.jsonl (one record per
line: params, camera, keypoints, image path) and images/<id>.f32 rasters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bodymodel as bm
from .errors import DegenerateViewError, InfeasibleConfigError
from .imaging import Image, save_image

VISIBILITY_MARGIN_PX = 4.0
MAX_SAMPLE_ATTEMPTS = 1000

# Camera presets: focal as a fraction of image height, subject depth range (cm),
# and a scale on the pose sampling ranges (calibration poses stay near rest,
# which is what shape round-trip evaluation wants; translation jitter is kept).
CAMERA_PRESETS = {
    "standard": {"focal_per_px": 1.15, "depth": (285.0, 315.0), "pose_scale": 1.0},
    "close": {"focal_per_px": 0.45, "depth": (105.0, 125.0), "pose_scale": 1.0},
    "calibration": {"focal_per_px": 0.45, "depth": (105.0, 125.0), "pose_scale": 0.15},
}

# Background: bilinear value noise, lattice cell in px, amplitude on [0,1] scale.
BG_BASE = 0.42
BG_AMPLITUDE = 0.10
BG_CELL_PX = 8

# Render table: bone name -> (child joint, base intensity, capsule radius cm).
# Right limbs are dark, left limbs bright, the spine chain sits in between.
LIMB_STYLE = {
    "torso_lower": ("spine", 0.62, 6.5),
    "torso_upper": ("neck", 0.66, 5.0),
    "head": ("head_top", 0.72, 6.0),
    "right_hip_bone": ("right_hip", 0.08, 5.0),
    "right_thigh": ("right_knee", 0.14, 4.5),
    "right_shin": ("right_ankle", 0.20, 3.5),
    "right_shoulder_bone": ("right_shoulder", 0.05, 4.5),
    "right_upper_arm": ("right_elbow", 0.24, 3.2),
    "right_forearm": ("right_wrist", 0.30, 2.8),
    "left_hip_bone": ("left_hip", 0.97, 5.0),
    "left_thigh": ("left_knee", 0.92, 4.5),
    "left_shin": ("left_ankle", 0.86, 3.5),
    "left_shoulder_bone": ("left_shoulder", 0.99, 4.5),
    "left_upper_arm": ("left_elbow", 0.82, 3.2),
    "left_forearm": ("left_wrist", 0.78, 2.8),
}

# Pose sampling ranges (radians / cm). Swing is rotation about x (forward-back),
# spread about z (sideways, sign flipped so positive means away from the body),
# twist about y. Knees and elbows are pure hinges inside their boxes.
POSE_RANGES = {
    "global_pitch_roll": 0.06,
    "global_yaw": 0.35,
    "trans_x": 6.0,
    "trans_y_center": -89.0,  # pelvis offset that centers the body vertically
    "trans_y_jitter": 6.0,
    "hip_swing": (-0.55, 0.55),
    "hip_spread": (-0.08, 0.25),
    "hip_twist": (-0.15, 0.15),
    "knee_flex": (-1.0, 0.0),
    "shoulder_swing": (-0.7, 0.7),
    "shoulder_spread": (-0.05, 0.45),
    "shoulder_twist": (-0.2, 0.2),
    "elbow_flex": (0.0, 1.3),
    "spine": 0.12,
    "neck": 0.12,
}


@dataclass(frozen=True)
class Subject:
    """Ground-truth sample: shape, pose, camera, and the seed that made it."""

    beta_gt: bm.ShapeParams
    pose_gt: bm.PoseParams
    camera: bm.Camera
    seed: int


def _uniform(rng, lo, hi):
    return lo + (hi - lo) * rng.random()


def _draw_pose(rng, depth_range, pose_scale=1.0) -> tuple[bm.PoseParams, float]:
    """One pose + depth draw from the documented ranges."""
    s = pose_scale
    r = {k: ((v[0] * s, v[1] * s) if isinstance(v, tuple) else v * s)
         for k, v in POSE_RANGES.items()}
    # placement jitter is not part of the pose and stays at full strength
    for k in ("trans_x", "trans_y_center", "trans_y_jitter"):
        r[k] = POSE_RANGES[k]
    grot = np.array([
        _uniform(rng, -r["global_pitch_roll"], r["global_pitch_roll"]),
        _uniform(rng, -r["global_yaw"], r["global_yaw"]),
        _uniform(rng, -r["global_pitch_roll"], r["global_pitch_roll"]),
    ])
    depth = _uniform(rng, *depth_range)
    gtrans = np.array([
        _uniform(rng, -r["trans_x"], r["trans_x"]),
        r["trans_y_center"] + _uniform(rng, -r["trans_y_jitter"], r["trans_y_jitter"]),
        depth,
    ])
    theta = np.zeros((bm.NUM_JOINTS, 3))
    for side, sign in (("right", -1.0), ("left", 1.0)):
        hip = bm.JOINT_INDEX[f"{side}_hip"]
        theta[hip, 0] = _uniform(rng, *r["hip_swing"])
        theta[hip, 1] = _uniform(rng, *r["hip_twist"])
        theta[hip, 2] = sign * _uniform(rng, *r["hip_spread"])
        theta[bm.JOINT_INDEX[f"{side}_knee"], 0] = _uniform(rng, *r["knee_flex"])
        sho = bm.JOINT_INDEX[f"{side}_shoulder"]
        theta[sho, 0] = _uniform(rng, *r["shoulder_swing"])
        theta[sho, 1] = _uniform(rng, *r["shoulder_twist"])
        theta[sho, 2] = sign * _uniform(rng, *r["shoulder_spread"])
        theta[bm.JOINT_INDEX[f"{side}_elbow"], 0] = _uniform(rng, *r["elbow_flex"])
    for name in ("spine", "neck"):
        theta[bm.JOINT_INDEX[name]] = [
            _uniform(rng, -r[name], r[name]) for _ in range(3)
        ]
    return bm.PoseParams(theta, grot, gtrans), depth


def _visible(camera: bm.Camera, shape, pose) -> bool:
    try:
        pix = bm.project(camera, bm.observable(bm.pose_joints(shape, pose)))
    except DegenerateViewError:
        return False
    w, h = camera.image_size
    m = VISIBILITY_MARGIN_PX
    return bool(
        np.all(pix[:, 0] >= m) and np.all(pix[:, 0] <= w - 1 - m)
        and np.all(pix[:, 1] >= m) and np.all(pix[:, 1] <= h - 1 - m)
    )


def _make_camera(image_size, preset: str) -> bm.Camera:
    w, h = image_size
    cfg = CAMERA_PRESETS[preset]
    return bm.Camera(
        cfg["focal_per_px"] * h,
        np.array([(w - 1) / 2.0, (h - 1) / 2.0]),
        (w, h),
    )


def _sample_with_rng(rng, seed, image_size, preset) -> Subject:
    cfg = CAMERA_PRESETS[preset]
    camera = _make_camera(image_size, preset)
    shape = bm.ShapeParams(rng.uniform(-2.0, 2.0, size=bm.NUM_BETAS))
    for _ in range(MAX_SAMPLE_ATTEMPTS):
        pose, _ = _draw_pose(rng, cfg["depth"], cfg["pose_scale"])
        if _visible(camera, shape, pose):
            return Subject(shape, pose, camera, int(seed))
    raise InfeasibleConfigError(
        f"no visible pose within {MAX_SAMPLE_ATTEMPTS} attempts "
        f"(size {image_size}, preset {preset})"
    )


def sample_subject(seed: int, image_size=(96, 96), preset: str = "standard") -> Subject:
    """Deterministic subject draw; resamples the pose until all keypoints fit."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return _sample_with_rng(rng, seed, image_size, preset)


def corpus_entries(corpus_seed: int, n_subjects: int, poses_per_subject: int,
                   image_size=(96, 96), preset: str = "standard"):
    """Yield (subject_index, pose_index, Subject) with beta shared per subject."""
    for i in range(n_subjects):
        rng = np.random.default_rng(np.random.SeedSequence((corpus_seed, i)))
        cfg = CAMERA_PRESETS[preset]
        camera = _make_camera(image_size, preset)
        shape = bm.ShapeParams(rng.uniform(-2.0, 2.0, size=bm.NUM_BETAS))
        for j in range(poses_per_subject):
            for attempt in range(MAX_SAMPLE_ATTEMPTS):
                pose, _ = _draw_pose(rng, cfg["depth"], cfg["pose_scale"])
                if _visible(camera, shape, pose):
                    break
            else:
                raise InfeasibleConfigError(
                    f"subject {i} pose {j}: no visible pose in "
                    f"{MAX_SAMPLE_ATTEMPTS} attempts"
                )
            record_seed = int(
                np.random.SeedSequence((corpus_seed, i, j)).generate_state(1)[0]
            )
            yield i, j, Subject(shape, pose, camera, record_seed)


# --------------------------------------------------------------------------
# Rendering


def _value_noise(rng, height, width) -> np.ndarray:
    """Bilinear lattice noise in [0,1]."""
    gh = height // BG_CELL_PX + 2
    gw = width // BG_CELL_PX + 2
    lattice = rng.random((gh, gw))
    ys = np.arange(height) / BG_CELL_PX
    xs = np.arange(width) / BG_CELL_PX
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = lattice[y0][:, x0]
    b = lattice[y0][:, x0 + 1]
    c = lattice[y0 + 1][:, x0]
    d = lattice[y0 + 1][:, x0 + 1]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


def _paint_capsule(img, a, b, radius_px, intensity):
    """Composite one anti-aliased capsule (segment a-b, radius in px) in place."""
    h, w = img.shape
    lo = np.floor(np.minimum(a, b) - radius_px - 2).astype(int)
    hi = np.ceil(np.maximum(a, b) + radius_px + 2).astype(int)
    x0, y0 = max(lo[0], 0), max(lo[1], 0)
    x1, y1 = min(hi[0] + 1, w), min(hi[1] + 1, h)
    if x0 >= x1 or y0 >= y1:
        return
    xs = np.arange(x0, x1, dtype=np.float64)
    ys = np.arange(y0, y1, dtype=np.float64)
    px = xs[None, :] - a[0]
    py = ys[:, None] - a[1]
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-12:
        dist = np.sqrt(px**2 + py**2)
    else:
        t = np.clip((px * ab[0] + py * ab[1]) / denom, 0.0, 1.0)
        dist = np.sqrt((px - t * ab[0]) ** 2 + (py - t * ab[1]) ** 2)
    coverage = np.clip(radius_px + 0.5 - dist, 0.0, 1.0)
    region = img[y0:y1, x0:x1]
    region *= 1.0 - coverage
    region += intensity * coverage


def render(subject: Subject) -> tuple[Image, bm.KeypointSet]:
    """Rasterize one subject; returns the image and ground-truth keypoints."""
    camera = subject.camera
    w, h = camera.image_size
    rng = np.random.default_rng(np.random.SeedSequence((subject.seed, 0xB6)))
    img = BG_BASE + BG_AMPLITUDE * _value_noise(rng, h, w)

    joints = bm.pose_joints(subject.beta_gt, subject.pose_gt)
    pix_all = bm.project(camera, joints)
    for child_name, intensity, radius_cm in LIMB_STYLE.values():
        child = bm.JOINT_INDEX[child_name]
        parent = bm.PARENTS[child]
        z_mid = 0.5 * (joints[child, 2] + joints[parent, 2])
        radius_px = radius_cm * camera.focal / z_mid
        _paint_capsule(img, pix_all[parent], pix_all[child], radius_px, intensity)

    keypoints = bm.KeypointSet.ground_truth(pix_all[bm.OBSERVABLE_JOINTS])
    return Image(np.clip(img, 0.0, 1.0)), keypoints


# --------------------------------------------------------------------------
# Corpus files


@dataclass(frozen=True)
class CorpusRecord:
    """One manifest line: a subject plus its image path and GT keypoints."""

    record_id: str
    subject_index: int
    pose_index: int
    subject: Subject
    keypoints: bm.KeypointSet
    image_path: str  # relative to the corpus directory


def build_records(corpus_seed, n_subjects, poses_per_subject,
                  image_size=(96, 96), preset="standard") -> list[CorpusRecord]:
    """Sample a corpus without touching disk (keypoints come from projection)."""
    records = []
    for i, j, subject in corpus_entries(
        corpus_seed, n_subjects, poses_per_subject, image_size, preset
    ):
        pix = bm.project(
            subject.camera, bm.pose_joints(subject.beta_gt, subject.pose_gt)
        )
        rid = f"s{i:04d}_p{j}"
        records.append(CorpusRecord(
            rid, i, j, subject,
            bm.KeypointSet.ground_truth(pix[bm.OBSERVABLE_JOINTS]),
            f"images/{rid}.f32",
        ))
    return records


def _record_to_json(rec: CorpusRecord) -> str:
    s = rec.subject
    payload = {
        "id": rec.record_id,
        "subject_index": rec.subject_index,
        "pose_index": rec.pose_index,
        "seed": s.seed,
        "beta": [float(v) for v in s.beta_gt.beta],
        "theta": [[float(v) for v in row] for row in s.pose_gt.theta],
        "global_rotation": [float(v) for v in s.pose_gt.global_rotation],
        "global_translation": [float(v) for v in s.pose_gt.global_translation],
        "camera": {
            "focal": float(s.camera.focal),
            "principal_point": [float(v) for v in s.camera.principal_point],
            "image_size": list(s.camera.image_size),
        },
        "image": rec.image_path,
        "keypoints": [[float(u), float(v)] for u, v in rec.keypoints.locations],
    }
    return json.dumps(payload, separators=(", ", ": "))


def _record_from_json(line: str) -> CorpusRecord:
    d = json.loads(line)
    camera = bm.Camera(
        d["camera"]["focal"],
        np.array(d["camera"]["principal_point"]),
        tuple(d["camera"]["image_size"]),
    )
    subject = Subject(
        bm.ShapeParams(np.array(d["beta"])),
        bm.PoseParams(np.array(d["theta"]), np.array(d["global_rotation"]),
                      np.array(d["global_translation"])),
        camera,
        int(d["seed"]),
    )
    return CorpusRecord(
        d["id"], int(d["subject_index"]), int(d["pose_index"]), subject,
        bm.KeypointSet.ground_truth(np.array(d["keypoints"])),
        d["image"],
    )


def manifest_text(records) -> str:
    """Serialize records to the manifest.jsonl payload (also what gets hashed
    into detector checkpoints as the corpus fingerprint)."""
    lines = [_record_to_json(rec) for rec in records]
    return "\n".join(lines) + ("\n" if lines else "")


def write_corpus(out_dir, records, with_images=True):
    """Write manifest.jsonl and (optionally) rendered .f32 images."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    if with_images:
        for rec in records:
            image, _ = render(rec.subject)
            save_image(out_dir / rec.image_path, image)
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text(manifest_text(records))
    return manifest


def read_corpus(corpus_dir) -> list[CorpusRecord]:
    """Load every record from a corpus directory's manifest."""
    manifest = Path(corpus_dir) / "manifest.jsonl"
    if not manifest.is_file():
        raise FileNotFoundError(f"no manifest.jsonl under {corpus_dir}")
    return [
        _record_from_json(line)
        for line in manifest.read_text().splitlines()
        if line.strip()
    ]


def record_image(corpus_dir, rec: CorpusRecord) -> Image:
    """Load a record's raster from disk."""
    from .imaging import load_image

    return load_image(Path(corpus_dir) / rec.image_path)
