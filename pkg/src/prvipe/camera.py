"""Random camera views: rotate normalized 3D poses and project them to 2D.

Camera frame: the camera sits at the origin looking down +Z, with +Y up.
A pose is rotated about its hip (which normalization puts at the origin)
and then pushed ``camera_distance`` along +Z before the pinhole divide.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera
from .skeleton import COCO13, H36M17, H36M_TO_COCO13, SkeletonSchema, normalize_pose_2d


@dataclass(frozen=True)
class CameraRotation:
    azimuth: float = 0.0
    elevation: float = 0.0
    roll: float = 0.0


@dataclass(frozen=True)
class ProjectionConfig:
    """Perspective camera used for augmentation; angle ranges are in radians."""

    camera_distance: float = 3.0
    azimuth_range: tuple[float, float] = (-np.pi, np.pi)
    elevation_range: tuple[float, float] = (-np.pi / 6, np.pi / 6)
    roll_range: tuple[float, float] = (-np.pi / 6, np.pi / 6)

    def __post_init__(self):
        if self.camera_distance <= 0:
            raise ValueError("camera_distance must be positive")
        for name in ("azimuth_range", "elevation_range", "roll_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")

    @classmethod
    def from_degrees(cls, camera_distance=3.0, azimuth=180.0, elevation=30.0, roll=30.0):
        """Symmetric ranges given as maximum absolute angles in degrees."""
        rad = np.deg2rad
        return cls(
            camera_distance=camera_distance,
            azimuth_range=(-rad(azimuth), rad(azimuth)),
            elevation_range=(-rad(elevation), rad(elevation)),
            roll_range=(-rad(roll), rad(roll)),
        )


def sample_rotation(rng: np.random.Generator, config: ProjectionConfig) -> CameraRotation:
    return CameraRotation(
        azimuth=float(rng.uniform(*config.azimuth_range)),
        elevation=float(rng.uniform(*config.elevation_range)),
        roll=float(rng.uniform(*config.roll_range)),
    )


def sample_rotations(rng: np.random.Generator, config: ProjectionConfig, n: int) -> np.ndarray:
    """``n`` rotations as an ``(n, 3)`` array of (azimuth, elevation, roll)."""
    out = np.empty((n, 3))
    for col, rng_range in enumerate((config.azimuth_range, config.elevation_range, config.roll_range)):
        out[:, col] = rng.uniform(*rng_range, size=n)
    return out


def rotation_matrix(azimuth, elevation=0.0, roll=0.0) -> np.ndarray:
    """Camera rotation: azimuth about +Y, then elevation about +X, then roll about +Z.

    Accepts scalars or arrays and returns ``(..., 3, 3)``.
    """
    az, el, ro = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (azimuth, elevation, roll)))
    ca, sa = np.cos(az), np.sin(az)
    ce, se = np.cos(el), np.sin(el)
    cr, sr = np.cos(ro), np.sin(ro)
    zero, one = np.zeros_like(az), np.ones_like(az)
    r_az = np.stack([ca, zero, sa, zero, one, zero, -sa, zero, ca], -1).reshape(az.shape + (3, 3))
    r_el = np.stack([one, zero, zero, zero, ce, -se, zero, se, ce], -1).reshape(az.shape + (3, 3))
    r_ro = np.stack([cr, -sr, zero, sr, cr, zero, zero, zero, one], -1).reshape(az.shape + (3, 3))
    return r_ro @ r_el @ r_az


def project_with_matrix(pose: np.ndarray, rot: np.ndarray, config: ProjectionConfig,
                        *, normalize: bool = True, schema_3d: SkeletonSchema = H36M17,
                        schema_2d: SkeletonSchema = COCO13) -> np.ndarray:
    """Project ``(..., 17, 3)`` poses through ``(..., 3, 3)`` camera rotations.

    Returns 13-joint 2D poses, normalized unless ``normalize=False``.
    """
    cam = np.einsum("...ij,...kj->...ki", rot, pose)
    cam[..., 2] += config.camera_distance
    if np.any(cam[..., 2] <= 0.1 * config.camera_distance):
        raise BehindCamera(
            f"joint depth {cam[..., 2].min():.3f} within 0.1 x camera distance {config.camera_distance}")
    image = cam[..., :2] / cam[..., 2:3]
    if schema_3d.name == H36M17.name and schema_2d.name == COCO13.name:
        image = image[..., H36M_TO_COCO13, :]
    return normalize_pose_2d(image, schema_2d) if normalize else image


def project_pose(pose: np.ndarray, rot: CameraRotation, config: ProjectionConfig, **kwargs) -> np.ndarray:
    """Project one (or a batch of) normalized 3D poses under a single camera rotation."""
    return project_with_matrix(pose, rotation_matrix(rot.azimuth, rot.elevation, rot.roll), config, **kwargs)


def synth_view_pair(pose: np.ndarray, rng: np.random.Generator, config: ProjectionConfig):
    """Two 2D views of the same normalized 3D pose under independent random rotations."""
    first = project_pose(pose, sample_rotation(rng, config), config)
    second = project_pose(pose, sample_rotation(rng, config), config)
    return first, second


def synth_view_pairs(poses: np.ndarray, rng: np.random.Generator, config: ProjectionConfig):
    """Vectorized :func:`synth_view_pair` over a ``(n, 17, 3)`` batch."""
    n = len(poses)
    angles = sample_rotations(rng, config, 2 * n).reshape(n, 2, 3)
    rots = rotation_matrix(angles[..., 0], angles[..., 1], angles[..., 2])
    first = project_with_matrix(poses, rots[:, 0], config)
    second = project_with_matrix(poses, rots[:, 1], config)
    return first, second
