"""Skeleton schemas, pose normalization, Procrustes alignment and NP-MPJPE.

Poses are plain float64 arrays: ``(J, 3)`` for 3D and ``(J, 2)`` for 2D,
with any number of leading batch dimensions. Every function here is pure.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegeneratePose, SchemaError

DEGENERATE_TOL = 1e-9

Pose2D = np.ndarray
Pose3D = np.ndarray


@dataclass(frozen=True)
class SkeletonSchema:
    """Fixed joint layout.

    Attributes:
        name: Identifier used in checkpoints and dataset headers.
        joint_names: Ordered joint names.
        named_indices: Indices of the joints used by normalization
            (``hip``, ``spine``, ``thorax``, ``LHip``, ``RHip``,
            ``LShoulder``, ``RShoulder``); 2D schemas omit the first three.
        mirror_map: Permutation swapping left and right joints.
    """

    name: str
    joint_names: tuple[str, ...]
    named_indices: dict[str, int] = field(default_factory=dict)
    mirror_map: tuple[int, ...] = ()

    def __post_init__(self):
        n = len(self.joint_names)
        mirror = tuple(self.mirror_map) or tuple(range(n))
        object.__setattr__(self, "mirror_map", mirror)
        if sorted(mirror) != list(range(n)):
            raise SchemaError(f"{self.name}: mirror_map is not a permutation of {n} joints")
        if any(mirror[mirror[i]] != i for i in range(n)):
            raise SchemaError(f"{self.name}: mirror_map is not an involution")
        for key, idx in self.named_indices.items():
            if not 0 <= idx < n:
                raise SchemaError(f"{self.name}: named index {key}={idx} out of range")

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)

    def index(self, key: str) -> int:
        try:
            return self.named_indices[key]
        except KeyError:
            raise SchemaError(f"schema {self.name!r} has no named joint {key!r}") from None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "joint_names": list(self.joint_names),
            "named_indices": dict(self.named_indices),
            "mirror_map": list(self.mirror_map),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SkeletonSchema":
        try:
            return cls(
                name=str(data["name"]),
                joint_names=tuple(data["joint_names"]),
                named_indices={k: int(v) for k, v in data.get("named_indices", {}).items()},
                mirror_map=tuple(int(i) for i in data.get("mirror_map", ())),
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"invalid schema description: {exc}") from exc


def _mirror_by_name(names):
    index = {n: i for i, n in enumerate(names)}

    def partner(n):
        if n.startswith("L") and n[1:2].isupper():
            return "R" + n[1:]
        if n.startswith("R") and n[1:2].isupper():
            return "L" + n[1:]
        return n

    return tuple(index[partner(n)] for n in names)


_H36M_NAMES = (
    "Hip", "RHip", "RKnee", "RFoot", "LHip", "LKnee", "LFoot",
    "Spine", "Thorax", "Nose", "Head",
    "LShoulder", "LElbow", "LWrist", "RShoulder", "RElbow", "RWrist",
)
_COCO13_NAMES = (
    "Nose", "LShoulder", "RShoulder", "LElbow", "RElbow", "LWrist", "RWrist",
    "LHip", "RHip", "LKnee", "RKnee", "LAnkle", "RAnkle",
)

H36M17 = SkeletonSchema(
    name="h36m17",
    joint_names=_H36M_NAMES,
    named_indices={
        "hip": 0, "spine": 7, "thorax": 8,
        "LHip": 4, "RHip": 1, "LShoulder": 11, "RShoulder": 14,
    },
    mirror_map=_mirror_by_name(_H36M_NAMES),
)

COCO13 = SkeletonSchema(
    name="coco13",
    joint_names=_COCO13_NAMES,
    named_indices={"LHip": 7, "RHip": 8, "LShoulder": 1, "RShoulder": 2},
    mirror_map=_mirror_by_name(_COCO13_NAMES),
)

# For each coco13 joint, the h36m17 joint it is read from. Nose maps to the
# h36m "Nose" (neck/nose) joint; feet stand in for ankles.
H36M_TO_COCO13 = np.array([9, 11, 14, 12, 15, 13, 16, 4, 1, 5, 2, 6, 3])

BUILTIN_SCHEMAS = {s.name: s for s in (H36M17, COCO13)}


def get_schema(name_or_path) -> SkeletonSchema:
    """Return a built-in schema by name, or load one from a JSON description."""
    if isinstance(name_or_path, SkeletonSchema):
        return name_or_path
    if name_or_path in BUILTIN_SCHEMAS:
        return BUILTIN_SCHEMAS[name_or_path]
    path = Path(name_or_path)
    if not path.exists():
        raise SchemaError(f"unknown schema {name_or_path!r}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    return SkeletonSchema.from_dict(data)


# ---------------------------------------------------------------------------
# Normalization


def normalize_pose_3d(pose: Pose3D, schema: SkeletonSchema = H36M17) -> Pose3D:
    """Put the hip at the origin and scale the hip-spine-thorax chain to length 1."""
    pose = np.asarray(pose, dtype=np.float64)
    hip = pose[..., schema.index("hip"), :]
    spine = pose[..., schema.index("spine"), :]
    thorax = pose[..., schema.index("thorax"), :]
    chain = np.linalg.norm(spine - hip, axis=-1) + np.linalg.norm(thorax - spine, axis=-1)
    if np.any(chain < DEGENERATE_TOL):
        raise DegeneratePose("hip-spine-thorax chain length is zero")
    return (pose - hip[..., None, :]) / chain[..., None, None]


_TORSO_KEYS = ("RShoulder", "LShoulder", "RHip", "LHip")


def torso_scale_2d(pose: Pose2D, schema: SkeletonSchema = COCO13) -> np.ndarray:
    """Largest pairwise distance among the four shoulder and hip joints."""
    idx = [schema.index(k) for k in _TORSO_KEYS]
    pts = pose[..., idx, :]
    diffs = pts[..., :, None, :] - pts[..., None, :, :]
    return np.linalg.norm(diffs, axis=-1).max(axis=(-1, -2))


def normalize_pose_2d(pose: Pose2D, schema: SkeletonSchema = COCO13) -> Pose2D:
    """Center on the hip midpoint and scale the torso so its largest span is 0.5."""
    pose = np.asarray(pose, dtype=np.float64)
    center = 0.5 * (pose[..., schema.index("LHip"), :] + pose[..., schema.index("RHip"), :])
    centered = pose - center[..., None, :]
    scale = torso_scale_2d(centered, schema)
    if np.any(scale < DEGENERATE_TOL):
        raise DegeneratePose("shoulder and hip joints are coincident")
    return centered * (0.5 / scale)[..., None, None]


def mirror_pose_2d(pose: Pose2D, schema: SkeletonSchema = COCO13) -> Pose2D:
    """Left-right mirror: negate x and swap left/right joint labels."""
    pose = np.asarray(pose, dtype=np.float64)
    out = pose[..., list(schema.mirror_map), :].copy()
    out[..., 0] = -out[..., 0]
    return out


# ---------------------------------------------------------------------------
# Alignment


def jacobi_svd(m: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60):
    """Batched one-sided (Hestenes) cyclic Jacobi SVD of small square matrices.

    Returns ``(u, s, v)`` with ``m = u @ diag(s) @ v.T`` and ``s`` sorted in
    descending order. Columns of ``u`` belonging to zero singular values are
    completed to an orthonormal basis when possible (n <= 3).
    """
    a = np.array(m, dtype=np.float64, copy=True)
    n = a.shape[-1]
    v = np.broadcast_to(np.eye(n), a.shape).copy()
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap, aq = a[..., :, p], a[..., :, q]
                alpha = np.einsum("...i,...i->...", ap, ap)
                beta = np.einsum("...i,...i->...", aq, aq)
                gamma = np.einsum("...i,...i->...", ap, aq)
                active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
                if not np.any(active):
                    continue
                rotated = True
                g = np.where(active, gamma, 1.0)
                zeta = (beta - alpha) / (2.0 * g)
                sign = np.where(zeta >= 0, 1.0, -1.0)
                t = sign / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = np.where(active, 1.0 / np.sqrt(1.0 + t * t), 1.0)
                s = np.where(active, c * t, 0.0)
                for mat in (a, v):
                    cp, cq = mat[..., :, p].copy(), mat[..., :, q]
                    mat[..., :, p] = c[..., None] * cp - s[..., None] * cq
                    mat[..., :, q] = s[..., None] * cp + c[..., None] * cq
        if not rotated:
            break

    sv = np.linalg.norm(a, axis=-2)
    order = np.argsort(-sv, axis=-1, kind="stable")
    sv = np.take_along_axis(sv, order, axis=-1)
    a = np.take_along_axis(a, order[..., None, :], axis=-1)
    v = np.take_along_axis(v, order[..., None, :], axis=-1)

    floor = np.finfo(float).eps * n * np.maximum(sv[..., :1], np.finfo(float).tiny)
    nonzero = sv > floor
    u = np.where(nonzero[..., None, :], a / np.where(nonzero, sv, 1.0)[..., None, :], 0.0)
    if n == 2:
        perp = np.stack([-u[..., 1, 0], u[..., 0, 0]], axis=-1)
        u[..., :, 1] = np.where(nonzero[..., 1:2], u[..., :, 1], perp)
    elif n == 3:
        # rank one: any unit vector orthogonal to the first column will do
        first = u[..., :, 0]
        axis = np.eye(3)[np.argmin(np.abs(first), axis=-1)]
        other = axis - np.einsum("...i,...i->...", axis, first)[..., None] * first
        other = other / np.linalg.norm(other, axis=-1, keepdims=True)
        u[..., :, 1] = np.where(nonzero[..., 1:2], u[..., :, 1], other)
        cross = np.cross(u[..., :, 0], u[..., :, 1])
        u[..., :, 2] = np.where(nonzero[..., 2:3], u[..., :, 2], cross)
    return u, sv, v


def _optimal_rotation(x0, y0):
    """Proper rotation ``r`` maximizing ``trace(r @ x0.T @ y0)`` per batch entry."""
    n = x0.shape[-1]
    h = np.einsum("...ki,...kj->...ij", x0, y0)
    u, s, v = jacobi_svd(h)
    det = np.linalg.det(np.einsum("...ij,...kj->...ik", v, u))
    flip = det < 0
    top = s[..., 0]
    if np.any(top <= DEGENERATE_TOL * DEGENERATE_TOL):
        raise DegeneratePose("cross-covariance is zero")
    if n == 3 and np.any(s[..., 1] <= DEGENERATE_TOL * top):
        raise DegeneratePose("points are collinear; rotation is not unique")
    gap = s[..., n - 2] - s[..., n - 1]
    if np.any(flip & (gap <= DEGENERATE_TOL * top)):
        raise DegeneratePose("reflection-constrained optimum is not unique")
    d = np.ones(s.shape)
    d[..., -1] = np.where(flip, -1.0, 1.0)
    r = np.einsum("...ik,...k,...jk->...ij", v, d, u)
    return r, (s * d).sum(axis=-1)


def procrustes_align(source: np.ndarray, target: np.ndarray, scale: bool = True) -> np.ndarray:
    """Similarity (or rigid, with ``scale=False``) transform of ``source`` onto ``target``.

    Minimizes the summed squared joint distance. Reflections are excluded.
    Works for 2D and 3D point sets with leading batch dimensions.
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mu_x = source.mean(axis=-2, keepdims=True)
    mu_y = target.mean(axis=-2, keepdims=True)
    x0, y0 = source - mu_x, target - mu_y
    r, trace = _optimal_rotation(x0, y0)
    rotated = np.einsum("...kj,...ij->...ki", x0, r)
    if scale:
        norm = np.einsum("...kj,...kj->...", x0, x0)
        if np.any(norm < DEGENERATE_TOL):
            raise DegeneratePose("source pose has zero spread")
        rotated = rotated * (trace / norm)[..., None, None]
    return rotated + mu_y


def np_mpjpe(y_i: Pose3D, y_j: Pose3D, schema: SkeletonSchema = H36M17) -> np.ndarray:
    """Normalized, Procrustes-aligned mean per-joint position error.

    Both poses are normalized first, so the alignment of ``y_j`` onto ``y_i``
    is rigid; the per-joint errors are then identical in either direction.
    """
    a = normalize_pose_3d(y_i, schema)
    b = normalize_pose_3d(y_j, schema)
    a, b = np.broadcast_arrays(a, b)
    aligned = procrustes_align(b, a, scale=False)
    return np.linalg.norm(aligned - a, axis=-1).mean(axis=-1)


def np_mpjpe_2d(x_i: Pose2D, x_j: Pose2D, schema: SkeletonSchema = COCO13) -> np.ndarray:
    """2D analogue of :func:`np_mpjpe` with planar, reflection-free alignment."""
    a = normalize_pose_2d(x_i, schema)
    b = normalize_pose_2d(x_j, schema)
    a, b = np.broadcast_arrays(a, b)
    aligned = procrustes_align(b, a, scale=False)
    return np.linalg.norm(aligned - a, axis=-1).mean(axis=-1)


def matches(y_i: Pose3D, y_j: Pose3D, kappa: float = 0.1, schema: SkeletonSchema = H36M17):
    """Matching indicator: 1 when the NP-MPJPE is at most ``kappa``."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    return (np_mpjpe(y_i, y_j, schema) <= kappa).astype(np.int64)


def pairwise_np_mpjpe(a: np.ndarray, b: np.ndarray | None = None, *, two_d: bool = False,
                      schema: SkeletonSchema | None = None, chunk: int = 64) -> np.ndarray:
    """NP-MPJPE between every pose in ``a`` and every pose in ``b`` (default ``a``)."""
    fn = np_mpjpe_2d if two_d else np_mpjpe
    schema = schema or (COCO13 if two_d else H36M17)
    b = a if b is None else b
    out = np.empty((len(a), len(b)))
    for start in range(0, len(a), chunk):
        block = a[start:start + chunk]
        out[start:start + chunk] = fn(block[:, None], b[None], schema)
    return out


def distinct_poses(poses3d: np.ndarray, min_gap: float = 0.1, limit: int | None = None,
                   order=None) -> np.ndarray:
    """Greedy subset whose members are pairwise more than ``min_gap`` apart (3D NP-MPJPE).

    Candidates are visited in ``order`` (default: as given) and the scan stops
    once ``limit`` poses are kept. Returns the kept indices.
    """
    poses3d = np.asarray(poses3d, dtype=np.float64)
    order = range(len(poses3d)) if order is None else order
    keep: list[int] = []
    for i in order:
        if limit is not None and len(keep) >= limit:
            break
        if not keep or np.all(np_mpjpe(poses3d[i][None], poses3d[keep]) > min_gap):
            keep.append(int(i))
    return np.array(keep, dtype=np.int64)
