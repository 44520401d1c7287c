"""Dataset records, the JSONL format, near-duplicate removal and synthetic data.

JSONL layout: an optional header line followed by one record per line::

    {"format": "prvipe-jsonl", "version": 1, "schema_2d": "coco13", "schema_3d": "h36m17"}
    {"frame_id": 0, "subject_id": "s1", "camera_id": "cam0",
     "pose2d": [[x, y], ...13], "pose3d": [[x, y, z], ...17],
     "sequence_id": null, "action": null}

``frame_id`` is an integer; all cameras of one frame share the same 3D pose.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import ProjectionConfig, project_with_matrix, rotation_matrix
from .errors import BehindCamera, DegeneratePose, ParseError, SchemaError, VersionMismatch
from .skeleton import COCO13, H36M17, distinct_poses, normalize_pose_2d, normalize_pose_3d, np_mpjpe

FORMAT = "prvipe-jsonl"
FORMAT_VERSION = 1


@dataclass
class DatasetRecord:
    frame_id: int
    subject_id: str
    camera_id: str
    pose2d: np.ndarray
    pose3d: np.ndarray
    sequence_id: str | None = None
    action: str | None = None

    def to_json(self) -> dict:
        return {
            "frame_id": int(self.frame_id),
            "subject_id": self.subject_id,
            "camera_id": self.camera_id,
            "pose2d": np.asarray(self.pose2d).tolist(),
            "pose3d": np.asarray(self.pose3d).tolist(),
            "sequence_id": self.sequence_id,
            "action": self.action,
        }


class Dataset:
    """Records plus stacked arrays for vectorized training and evaluation."""

    def __init__(self, records):
        self.records = list(records)
        n = len(self.records)
        self.frame_ids = np.array([r.frame_id for r in self.records], dtype=np.int64)
        self.camera_ids = np.array([r.camera_id for r in self.records], dtype=object)
        self.pose2d = np.array([r.pose2d for r in self.records]).reshape(n, COCO13.joint_count, 2)
        self.pose3d = np.array([r.pose3d for r in self.records]).reshape(n, H36M17.joint_count, 3)
        self.frames, first, self.frame_index = np.unique(self.frame_ids, return_index=True, return_inverse=True)
        self.frame_pose3d = self.pose3d[first]
        self.views = [np.flatnonzero(self.frame_index == f) for f in range(len(self.frames))]

    def __len__(self):
        return len(self.records)

    @property
    def cameras(self) -> list[str]:
        return sorted(set(self.camera_ids.tolist()))

    def camera_indices(self, camera) -> np.ndarray:
        return np.flatnonzero(self.camera_ids == camera)

    def select_frames(self, frame_ids) -> "Dataset":
        keep = set(int(f) for f in frame_ids)
        return Dataset([r for r in self.records if r.frame_id in keep])


def _header():
    return {"format": FORMAT, "version": FORMAT_VERSION,
            "schema_2d": COCO13.name, "schema_3d": H36M17.name}


def save_dataset(records, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = records.records if isinstance(records, Dataset) else records
    with path.open("w") as fh:
        fh.write(json.dumps(_header()) + "\n")
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")
    return path


def _as_pose(value, joints, dims, lineno, key):
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"line {lineno}: {key} is not numeric: {exc}") from exc
    if arr.shape != (joints, dims):
        raise SchemaError(f"line {lineno}: {key} has shape {arr.shape}, expected ({joints}, {dims})")
    if not np.all(np.isfinite(arr)):
        raise SchemaError(f"line {lineno}: {key} has non-finite coordinates")
    return arr


def load_dataset(path) -> list[DatasetRecord]:
    """Parse and validate a JSONL dataset; errors carry 1-based line numbers."""
    records = []
    seen = {}
    frame_pose = {}
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise ParseError(f"line {lineno}: expected a JSON object")
            if "format" in obj:
                if obj["format"] != FORMAT:
                    raise SchemaError(f"line {lineno}: unknown format {obj['format']!r}")
                if obj.get("version") != FORMAT_VERSION:
                    raise VersionMismatch(f"line {lineno}: dataset version {obj.get('version')}")
                for key, schema in (("schema_2d", COCO13), ("schema_3d", H36M17)):
                    if obj.get(key, schema.name) != schema.name:
                        raise SchemaError(f"line {lineno}: {key} {obj[key]!r} is not supported")
                continue
            try:
                frame_id = obj["frame_id"]
                camera_id = str(obj["camera_id"])
                pose2d, pose3d = obj["pose2d"], obj["pose3d"]
            except KeyError as exc:
                raise SchemaError(f"line {lineno}: missing field {exc.args[0]!r}") from None
            if isinstance(frame_id, bool) or not isinstance(frame_id, int):
                raise SchemaError(f"line {lineno}: frame_id must be an integer")
            rec = DatasetRecord(
                frame_id=frame_id,
                subject_id=str(obj.get("subject_id", "")),
                camera_id=camera_id,
                pose2d=_as_pose(pose2d, COCO13.joint_count, 2, lineno, "pose2d"),
                pose3d=_as_pose(pose3d, H36M17.joint_count, 3, lineno, "pose3d"),
                sequence_id=obj.get("sequence_id"),
                action=obj.get("action"),
            )
            key = (frame_id, camera_id)
            if key in seen:
                raise SchemaError(f"line {lineno}: duplicate (frame_id, camera_id) {key}, first on line {seen[key]}")
            seen[key] = lineno
            if frame_id in frame_pose and not np.allclose(frame_pose[frame_id], rec.pose3d, rtol=0, atol=1e-9):
                raise SchemaError(f"line {lineno}: frame {frame_id} has a different 3D pose than its other cameras")
            frame_pose.setdefault(frame_id, rec.pose3d)
            records.append(rec)
    return records


def dedup_near_duplicates(records, threshold: float = 0.02) -> list[DatasetRecord]:
    """Greedy camera-consistent removal of near-duplicate 3D poses.

    Frames are scanned in id order; a frame is kept when its NP-MPJPE to the
    last kept frame exceeds ``threshold``. The decision applies to every
    camera of the frame. ``threshold <= 0`` keeps everything.
    """
    records = records.records if isinstance(records, Dataset) else list(records)
    if threshold <= 0 or not records:
        return list(records)
    by_frame = {}
    for rec in records:
        by_frame.setdefault(rec.frame_id, rec.pose3d)
    kept, last = set(), None
    for frame_id in sorted(by_frame):
        pose = by_frame[frame_id]
        if last is None or np_mpjpe(last, pose) > threshold:
            kept.add(frame_id)
            last = pose
    return [r for r in records if r.frame_id in kept]


# ---------------------------------------------------------------------------
# Synthetic skeletons
#
# Bone lengths are in units of the hip-spine-thorax chain (which is 1 after
# normalization). Angles are in degrees. The body frame has x to the
# subject's left, y up and z forward.

BONES = {
    "pelvis_half_width": 0.25, "spine": 0.5, "chest": 0.5,
    "shoulder_half_width": 0.35, "shoulder_drop": 0.05,
    "nose_up": 0.22, "nose_forward": 0.12, "head_up": 0.45,
    "upper_arm": 0.55, "forearm": 0.5, "thigh": 0.9, "shin": 0.9,
}

ANGLE_NAMES = (
    "yaw", "torso_pitch", "torso_roll", "torso_twist", "head_pitch",
    "l_arm_elev", "l_arm_azim", "l_elbow", "l_elbow_twist",
    "r_arm_elev", "r_arm_azim", "r_elbow", "r_elbow_twist",
    "l_leg_flex", "l_leg_abd", "l_knee",
    "r_leg_flex", "r_leg_abd", "r_knee",
)

DEFAULT_ANGLE_RANGES = {
    "yaw": (-180.0, 180.0),
    "torso_pitch": (-10.0, 40.0),
    "torso_roll": (-15.0, 15.0),
    "torso_twist": (-30.0, 30.0),
    "head_pitch": (-20.0, 30.0),
    "arm_elev": (0.0, 160.0),
    "arm_azim": (-30.0, 120.0),
    "elbow": (0.0, 140.0),
    "elbow_twist": (-60.0, 60.0),
    "leg_flex": (-20.0, 90.0),
    "leg_abd": (-10.0, 35.0),
    "knee": (0.0, 120.0),
}


def _range_for(name, ranges):
    if name in ranges:
        return ranges[name]
    return ranges[name[2:]] if name[:2] in ("l_", "r_") else ranges[name]


def _rx(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rz(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _rodrigues(axis, t):
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(t) * k + (1 - np.cos(t)) * (k @ k)


def _perpendicular(v, hint):
    p = hint - np.dot(hint, v) * v
    n = np.linalg.norm(p)
    if n < 1e-6:
        p = np.array([0.0, 1.0, 0.0]) - v[1] * v
        n = np.linalg.norm(p)
    return p / n


def pose_from_angles(angles) -> np.ndarray:
    """Forward kinematics: joint angles (degrees, ``ANGLE_NAMES`` order) -> (17, 3) pose."""
    ang = dict(zip(ANGLE_NAMES, np.deg2rad(np.asarray(angles, dtype=np.float64))))
    L = BONES
    up, fwd = np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0])
    pelvis = _ry(ang["yaw"])
    bend = _rx(ang["torso_pitch"]) @ _rz(ang["torso_roll"])
    half = _rx(ang["torso_pitch"] / 2) @ _rz(ang["torso_roll"] / 2)
    thorax_frame = pelvis @ bend @ _ry(ang["torso_twist"])

    j = np.zeros((17, 3))
    j[7] = L["spine"] * (pelvis @ half @ up)
    j[8] = j[7] + L["chest"] * (pelvis @ bend @ up)
    head = thorax_frame @ _rx(ang["head_pitch"])
    j[9] = j[8] + head @ np.array([0.0, L["nose_up"], L["nose_forward"]])
    j[10] = j[8] + head @ np.array([0.0, L["head_up"], 0.0])

    for side, sign, (sh, el, wr) in (("l", 1.0, (11, 12, 13)), ("r", -1.0, (14, 15, 16))):
        j[sh] = j[8] + thorax_frame @ np.array([sign * L["shoulder_half_width"], -L["shoulder_drop"], 0.0])
        elev, azim = ang[f"{side}_arm_elev"], ang[f"{side}_arm_azim"]
        upper = np.array([sign * np.sin(elev) * np.cos(azim), -np.cos(elev), np.sin(elev) * np.sin(azim)])
        bend_dir = _perpendicular(upper, fwd)
        bend_dir = _rodrigues(upper, sign * ang[f"{side}_elbow_twist"]) @ bend_dir
        t = ang[f"{side}_elbow"]
        lower = np.cos(t) * upper + np.sin(t) * bend_dir
        j[el] = j[sh] + L["upper_arm"] * (thorax_frame @ upper)
        j[wr] = j[el] + L["forearm"] * (thorax_frame @ lower)

    for side, sign, (hp, kn, ft) in (("l", 1.0, (4, 5, 6)), ("r", -1.0, (1, 2, 3))):
        j[hp] = pelvis @ np.array([sign * L["pelvis_half_width"], 0.0, 0.0])
        leg = _rx(-ang[f"{side}_leg_flex"]) @ _rz(sign * ang[f"{side}_leg_abd"])
        thigh = leg @ -up
        shin = leg @ _rx(ang[f"{side}_knee"]) @ -up
        j[kn] = j[hp] + L["thigh"] * (pelvis @ thigh)
        j[ft] = j[kn] + L["shin"] * (pelvis @ shin)
    return normalize_pose_3d(j)


@dataclass
class CameraSpec:
    camera_id: str
    azimuth: float = 0.0
    elevation: float = 0.0
    roll: float = 0.0

    def matrix(self):
        return rotation_matrix(*np.deg2rad([self.azimuth, self.elevation, self.roll]))


def chest_level_cameras(elevations=(5.0, 2.0, 8.0, 10.0), azimuth_offset=45.0):
    """Four cameras around the subject, 90 degrees apart, near chest height."""
    return [CameraSpec(f"cam{i}", azimuth_offset + 90.0 * i, el) for i, el in enumerate(elevations)]


def elevated_cameras(elevation=45.0, count=4, azimuth_offset=0.0):
    """Cameras alternating between +elevation and -elevation."""
    return [CameraSpec(f"elev{i}", azimuth_offset + 360.0 * i / count, elevation if i % 2 == 0 else -elevation)
            for i in range(count)]


@dataclass
class SyntheticConfig:
    seed: int = 0
    num_poses: int = 500
    angle_ranges: dict = field(default_factory=lambda: dict(DEFAULT_ANGLE_RANGES))
    cameras: list = field(default_factory=chest_level_cameras)
    camera_distance: float = 3.0
    noise_sigma: float = 0.0
    subject_id: str = "synthetic"
    first_frame_id: int = 0
    # sequences
    num_actions: int = 3
    instances_per_action: int = 4
    sequence_length: int = 40
    keyframes: int = 4
    warp_strength: float = 0.3

    @property
    def projection(self) -> ProjectionConfig:
        return ProjectionConfig(camera_distance=self.camera_distance)


def sample_angles(rng: np.random.Generator, ranges=None, n=None):
    ranges = ranges or DEFAULT_ANGLE_RANGES
    bounds = np.array([_range_for(name, ranges) for name in ANGLE_NAMES], dtype=np.float64)
    size = (len(ANGLE_NAMES),) if n is None else (n, len(ANGLE_NAMES))
    return bounds[:, 0] + (bounds[:, 1] - bounds[:, 0]) * rng.random(size)


def _view(pose, camera: CameraSpec, projection, rng, noise_sigma):
    x = project_with_matrix(pose, camera.matrix(), projection)
    if noise_sigma > 0:
        x = normalize_pose_2d(x + rng.normal(0.0, noise_sigma, size=x.shape))
    return x


def generate_synthetic_poses(config: SyntheticConfig) -> list[DatasetRecord]:
    """Random articulated skeletons seen through every configured camera."""
    rng = np.random.default_rng(config.seed)
    projection = config.projection
    records = []
    frame = config.first_frame_id
    while frame - config.first_frame_id < config.num_poses:
        pose = pose_from_angles(sample_angles(rng, config.angle_ranges))
        try:
            views = [_view(pose, cam, projection, rng, config.noise_sigma) for cam in config.cameras]
        except (BehindCamera, DegeneratePose):
            continue
        for cam, x in zip(config.cameras, views):
            records.append(DatasetRecord(frame, config.subject_id, cam.camera_id, x, pose))
        frame += 1
    return records


def render_views(poses3d, cameras, camera_distance=3.0, rng=None, noise_sigma=0.0, first_frame_id=0,
                 subject_id="synthetic") -> list[DatasetRecord]:
    """Project given 3D poses through a camera list (e.g. held-out cameras)."""
    rng = rng or np.random.default_rng(0)
    projection = ProjectionConfig(camera_distance=camera_distance)
    records = []
    for i, pose in enumerate(poses3d):
        for cam in cameras:
            x = _view(pose, cam, projection, rng, noise_sigma)
            records.append(DatasetRecord(first_frame_id + i, subject_id, cam.camera_id, x, pose))
    return records


def _smoothstep_path(keys, t):
    """Piecewise cosine interpolation through keyframes at fractional times ``t``."""
    segs = len(keys) - 1
    pos = np.clip(t, 0.0, 1.0) * segs
    idx = np.minimum(pos.astype(int), segs - 1)
    frac = pos - idx
    w = (0.5 - 0.5 * np.cos(np.pi * frac))[:, None]
    return (1 - w) * keys[idx] + w * keys[idx + 1]


def time_warp(rng: np.random.Generator, length: int, strength: float) -> np.ndarray:
    """Monotone map from output frame to source time in [0, 1]."""
    u = np.linspace(0.0, 1.0, length)
    if strength <= 0:
        return u
    gamma = np.exp(rng.uniform(-strength, strength))
    bump = rng.uniform(-strength, strength) * 0.15
    warped = u ** gamma + bump * np.sin(np.pi * u) * (1 - u) * u * 4
    warped = np.maximum.accumulate(np.clip(warped, 0.0, 1.0))
    return warped


def generate_synthetic_sequences(config: SyntheticConfig):
    """Labeled action sequences built from smooth keyframe prototypes.

    Each action is a random sequence of keyframe poses (with yaw fixed at 0).
    Instances re-time the prototype with a monotone warp, are viewed by one
    camera from ``config.cameras`` (cycled) and may carry keypoint noise.
    Returns a list of :class:`prvipe.sequences.FrameSequence`.
    """
    from .sequences import FrameSequence

    rng = np.random.default_rng(config.seed)
    projection = config.projection
    prototypes = []
    for _ in range(config.num_actions):
        keys = sample_angles(rng, config.angle_ranges, config.keyframes)
        keys[:, 0] = 0.0
        prototypes.append(keys)
    sequences = []
    for action, keys in enumerate(prototypes):
        for inst in range(config.instances_per_action):
            src = time_warp(rng, config.sequence_length, config.warp_strength)
            angles = _smoothstep_path(keys, src)
            poses = np.array([pose_from_angles(a) for a in angles])
            cam = config.cameras[(action + inst) % len(config.cameras)]
            frames = np.array([_view(p, cam, projection, rng, config.noise_sigma) for p in poses])
            sequences.append(FrameSequence(
                frames=frames, poses3d=poses, label=f"action{action}", view=cam.camera_id,
                source_times=src, sequence_id=f"a{action}_i{inst}"))
    return sequences


def retime_sequence(seq, camera: CameraSpec, rng: np.random.Generator, strength: float = 0.3,
                    camera_distance: float = 3.0, noise_sigma: float = 0.0):
    """Monotonically re-timed copy of a sequence with 3D poses, seen by ``camera``.

    Joint positions are interpolated linearly between neighbouring frames at
    the warped times. ``source_times`` of the copy index into the original
    sequence's time axis (0 to 1).
    """
    from .sequences import FrameSequence

    if seq.poses3d is None:
        raise ValueError("re-timing needs the sequence's 3D poses")
    n = len(seq)
    warp = time_warp(rng, n, strength)
    pos = warp * (n - 1)
    lo = np.minimum(np.floor(pos).astype(int), n - 2) if n > 1 else np.zeros(n, int)
    frac = (pos - lo)[:, None, None] if n > 1 else np.zeros((n, 1, 1))
    hi = np.minimum(lo + 1, n - 1)
    poses = np.array([normalize_pose_3d(p) for p in (1 - frac) * seq.poses3d[lo] + frac * seq.poses3d[hi]])
    projection = ProjectionConfig(camera_distance=camera_distance)
    frames = np.array([_view(p, camera, projection, rng, noise_sigma) for p in poses])
    return FrameSequence(frames=frames, label=seq.label, view=camera.camera_id, poses3d=poses,
                         source_times=warp, sequence_id=f"{seq.sequence_id}_retimed")


def sequences_to_records(sequences, first_frame_id: int = 0, subject_id: str = "synthetic"):
    """Flatten sequences into records; frame ids increase along each sequence."""
    records, frame = [], first_frame_id
    for seq in sequences:
        if seq.poses3d is None:
            raise ValueError(f"sequence {seq.sequence_id!r} has no 3D poses to store")
        for x, y in zip(seq.frames, seq.poses3d):
            records.append(DatasetRecord(frame, subject_id, seq.view or "cam0", x, y,
                                         seq.sequence_id, seq.label))
            frame += 1
    return records


def records_to_sequences(records):
    """Group records by (sequence id, camera) into frame-id ordered sequences."""
    from .sequences import FrameSequence

    groups: dict = {}
    for r in records:
        if r.sequence_id is None:
            raise SchemaError(f"frame {r.frame_id} has no sequence_id")
        groups.setdefault((r.sequence_id, r.camera_id), []).append(r)
    out = []
    for (seq_id, cam), rows in groups.items():
        rows.sort(key=lambda r: r.frame_id)
        out.append(FrameSequence(frames=np.array([r.pose2d for r in rows]), label=rows[0].action, view=cam,
                                 poses3d=np.array([r.pose3d for r in rows]), sequence_id=seq_id))
    return out


# ---------------------------------------------------------------------------
# Depth ambiguity

LIMB_CHAINS = ((14, 15, 16), (11, 12, 13), (1, 2, 3), (4, 5, 6))


def _ray_solutions(parent, child, length):
    """Points on the viewing ray through ``child`` at distance ``length`` from ``parent``."""
    ray = child / np.linalg.norm(child)
    proj = float(ray @ parent)
    disc = proj * proj - (float(parent @ parent) - length * length)
    if disc < -1e-12:
        return []
    root = np.sqrt(max(disc, 0.0))
    if root == 0.0:
        return [proj * ray]
    return [(proj - root) * ray, (proj + root) * ray]


def depth_ambiguity_family(pose: np.ndarray, camera: CameraSpec, camera_distance: float = 3.0,
                           chains=LIMB_CHAINS) -> np.ndarray:
    """3D poses that project exactly like ``pose`` through ``camera``.

    Each limb joint is moved along its own viewing ray to any point that
    keeps the length of the bone to its (possibly moved) parent: the
    classic depth-flip ambiguity, solved exactly for a pinhole camera.
    Returns ``(M, 17, 3)`` normalized poses; the input pose is among them.
    Variants where a moved parent leaves no bone-preserving point on the
    child's ray are dropped.
    """
    rot = camera.matrix()
    offset = np.array([0.0, 0.0, camera_distance])
    cam = pose @ rot.T + offset
    variants = [cam]
    for chain in chains:
        grown = []
        for v in variants:
            partial = [v]
            for parent, child in zip(chain[:-1], chain[1:]):
                length = np.linalg.norm(cam[child] - cam[parent])
                nxt = []
                for p in partial:
                    for sol in _ray_solutions(p[parent], cam[child], length):
                        q = p.copy()
                        q[child] = sol
                        nxt.append(q)
                partial = nxt
            grown.extend(partial)
        variants = grown
    out = []
    for v in variants:
        world = (v - offset) @ rot
        try:
            out.append(normalize_pose_3d(world))
        except DegeneratePose:
            continue
    return np.array(out)


def facing_yaw(camera: CameraSpec, camera_distance: float = 3.0) -> float:
    """Body yaw (degrees) at which a subject at the origin faces ``camera``."""
    center = -camera.matrix().T @ np.array([0.0, 0.0, camera_distance])
    return float(np.degrees(np.arctan2(center[0], center[2])))


def reaching_ranges(camera: CameraSpec, camera_distance: float = 3.0, spread: float = 20.0) -> dict:
    """Angle ranges for a subject facing ``camera`` with both arms pointing at it.

    Such poses are strongly foreshortened in that view, so depth flips of the
    arms give clearly different 3D poses with the same projection.
    """
    yaw = facing_yaw(camera, camera_distance)
    return dict(DEFAULT_ANGLE_RANGES, yaw=(yaw - spread, yaw + spread), arm_elev=(70.0, 110.0),
                arm_azim=(70.0, 110.0), elbow=(0.0, 30.0))


@dataclass
class AmbiguityConfig:
    """Synthetic set in which one region of pose space is made depth-ambiguous.

    ``num_plain`` random poses are mixed with ``num_ambiguous`` reaching poses
    (see :func:`reaching_ranges`) relative to camera ``camera_index``; each
    reaching pose brings ``members - 1`` extra depth-flip partners that
    share its projection in that camera. All frames are seen by all cameras.
    """

    seed: int = 0
    num_plain: int = 400
    num_ambiguous: int = 100
    members: int = 4
    min_gap: float = 0.1
    camera_index: int = 0
    cameras: list = field(default_factory=chest_level_cameras)
    camera_distance: float = 3.0
    subject_id: str = "synthetic"
    first_frame_id: int = 0


@dataclass
class AmbiguitySet:
    records: list
    families: list  # frame ids sharing one projection in the ambiguous camera
    plain: list  # frame ids of plain poses
    camera_id: str


def ambiguity_family(pose, camera: CameraSpec, camera_distance: float, rng: np.random.Generator,
                     members: int | None, min_gap: float = 0.1) -> np.ndarray:
    """``pose`` followed by up to ``members - 1`` distinct depth-flip partners (all if None)."""
    family = depth_ambiguity_family(pose, camera, camera_distance)
    own = int(np.argmin(np.abs(family - pose).reshape(len(family), -1).sum(axis=1)))
    rest = rng.permutation([i for i in range(len(family)) if i != own])
    keep = distinct_poses(family, min_gap, limit=members, order=[own, *rest])
    return family[keep]


def generate_ambiguity_set(config: AmbiguityConfig) -> AmbiguitySet:
    rng = np.random.default_rng(config.seed)
    camera = config.cameras[config.camera_index]
    projection = ProjectionConfig(camera_distance=config.camera_distance)
    reach = reaching_ranges(camera, config.camera_distance)
    records, families, plain = [], [], []
    frame = config.first_frame_id

    def add(pose_list):
        nonlocal frame
        try:
            views = [[_view(p, cam, projection, rng, 0.0) for cam in config.cameras] for p in pose_list]
        except (BehindCamera, DegeneratePose):
            return None
        ids = []
        for p, pv in zip(pose_list, views):
            for cam, x in zip(config.cameras, pv):
                records.append(DatasetRecord(frame, config.subject_id, cam.camera_id, x, p))
            ids.append(frame)
            frame += 1
        return ids

    while len(plain) < config.num_plain:
        ids = add([pose_from_angles(sample_angles(rng))])
        if ids:
            plain.extend(ids)
    while len(families) < config.num_ambiguous:
        pose = pose_from_angles(sample_angles(rng, reach))
        fam = ambiguity_family(pose, camera, config.camera_distance, rng, config.members, config.min_gap)
        if len(fam) < min(2, config.members or 2):
            continue
        ids = add(list(fam))
        if ids:
            families.append(ids)
    return AmbiguitySet(records, families, plain, camera.camera_id)
