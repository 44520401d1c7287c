import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import random_poses
from prvipe.camera import (CameraRotation, ProjectionConfig, project_pose, project_with_matrix, rotation_matrix,
                           sample_rotation, sample_rotations, synth_view_pair, synth_view_pairs)
from prvipe.errors import BehindCamera
from prvipe.skeleton import COCO13, H36M17, normalize_pose_2d, np_mpjpe_2d

ZERO = ProjectionConfig(azimuth_range=(0.0, 0.0), elevation_range=(0.0, 0.0), roll_range=(0.0, 0.0))
# Ankles are read from the h36m foot joints.
_NAME_MAP = {"LAnkle": "LFoot", "RAnkle": "RFoot", "LKnee": "LKnee", "RKnee": "RKnee"}


def _homogeneous_oracle(pose, rot: CameraRotation, distance):
    """Independent pipeline: 4x4 extrinsics, 3x4 pinhole, then name-based joint selection."""
    extrinsic = np.eye(4)
    extrinsic[:3, :3] = Rotation.from_euler("yxz", [rot.azimuth, rot.elevation, rot.roll]).as_matrix()
    extrinsic[2, 3] = distance
    pinhole = np.hstack([np.eye(3), np.zeros((3, 1))])
    points = np.hstack([pose, np.ones((len(pose), 1))]) @ (pinhole @ extrinsic).T
    image = points[:, :2] / points[:, 2:]
    rows = [H36M17.joint_names.index(_NAME_MAP.get(name, name)) for name in COCO13.joint_names]
    return image[rows]


class TestSampleRotation:
    def test_zero_ranges_give_identity(self):
        rot = sample_rotation(np.random.default_rng(0), ZERO)
        assert rot == CameraRotation(0.0, 0.0, 0.0)
        np.testing.assert_array_equal(rotation_matrix(rot.azimuth, rot.elevation, rot.roll), np.eye(3))

    def test_monte_carlo_statistics(self):
        config = ProjectionConfig()
        angles = sample_rotations(np.random.default_rng(1), config, 100_000)
        assert abs(angles[:, 0].mean()) < 0.02
        assert -np.pi <= angles[:, 0].min() < -np.pi + 0.01
        assert np.pi - 0.01 < angles[:, 0].max() <= np.pi
        assert np.abs(angles[:, 1:]).max() <= np.pi / 6

    def test_deterministic(self):
        config = ProjectionConfig()
        a = [sample_rotation(np.random.default_rng(5), config) for _ in range(2)]
        assert a[0] == a[1]

    def test_degree_ranges(self):
        config = ProjectionConfig.from_degrees(3.0, 90.0, 10.0, 0.0)
        np.testing.assert_allclose(config.azimuth_range, (-np.pi / 2, np.pi / 2))
        assert config.roll_range == (0.0, 0.0)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            ProjectionConfig(camera_distance=0.0)
        with pytest.raises(ValueError):
            ProjectionConfig(azimuth_range=(1.0, -1.0))


class TestProjectPose:
    def test_origin_projects_to_origin(self):
        pose = random_poses(0, 1)[0]
        image = project_pose(pose, CameraRotation(), ProjectionConfig(), normalize=False,
                             schema_2d=H36M17)
        np.testing.assert_array_equal(image[0], 0.0)

    def test_full_turn_is_identity(self):
        pose = random_poses(1, 1)[0]
        config = ProjectionConfig()
        once = project_pose(pose, CameraRotation(0.0, 0.2, 0.1), config)
        rot = rotation_matrix(np.pi, 0.0, 0.0) @ rotation_matrix(np.pi, 0.0, 0.0)
        twice = project_with_matrix(pose, rotation_matrix(0.0, 0.2, 0.1) @ rot, config)
        np.testing.assert_allclose(twice, once, atol=1e-9)

    def test_matches_homogeneous_matrix_oracle(self):
        rng = np.random.default_rng(2)
        config = ProjectionConfig()
        for pose in random_poses(2, 25):
            rot = sample_rotation(rng, config)
            ours = project_pose(pose, rot, config, normalize=False)
            oracle = _homogeneous_oracle(pose, rot, config.camera_distance)
            np.testing.assert_allclose(ours, oracle, atol=1e-9)
            np.testing.assert_allclose(project_pose(pose, rot, config), normalize_pose_2d(oracle), atol=1e-9)

    def test_pre_rotation_composes(self):
        rng = np.random.default_rng(3)
        config = ProjectionConfig()
        for pose in random_poses(3, 10):
            pre = rotation_matrix(*rng.uniform(-1, 1, 3))
            cam = rotation_matrix(*rng.uniform(-1, 1, 3))
            rotated = pose @ pre.T
            np.testing.assert_allclose(project_with_matrix(rotated, cam, config),
                                       project_with_matrix(pose, cam @ pre, config), atol=1e-9)

    def test_behind_camera(self):
        pose = random_poses(4, 1)[0]
        with pytest.raises(BehindCamera):
            project_pose(pose * 10.0, CameraRotation(), ProjectionConfig())

    def test_output_schema(self):
        out = project_pose(random_poses(5, 1)[0], CameraRotation(0.5), ProjectionConfig())
        assert out.shape == (13, 2)
        assert np.isfinite(out).all()


class TestSynthViewPair:
    def test_zero_ranges_identical(self):
        pose = random_poses(6, 1)[0]
        a, b = synth_view_pair(pose, np.random.default_rng(0), ZERO)
        np.testing.assert_array_equal(a, b)

    def test_reproducible(self):
        pose = random_poses(7, 1)[0]
        config = ProjectionConfig()
        first = synth_view_pair(pose, np.random.default_rng(9), config)
        second = synth_view_pair(pose, np.random.default_rng(9), config)
        np.testing.assert_array_equal(first, second)

    def test_views_differ(self):
        poses = random_poses(8, 100)
        a, b = synth_view_pairs(poses, np.random.default_rng(1), ProjectionConfig())
        assert (np_mpjpe_2d(a, b) > 1e-3).all()

    def test_batched_matches_single(self):
        poses = random_poses(9, 4)
        config = ProjectionConfig()
        rng = np.random.default_rng(2)
        a, b = synth_view_pairs(poses, rng, config)
        angles = sample_rotations(np.random.default_rng(2), config, 8).reshape(4, 2, 3)
        for i, pose in enumerate(poses):
            np.testing.assert_allclose(a[i], project_pose(pose, CameraRotation(*angles[i, 0]), config), atol=1e-12)
            np.testing.assert_allclose(b[i], project_pose(pose, CameraRotation(*angles[i, 1]), config), atol=1e-12)
