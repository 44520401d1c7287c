import json

import numpy as np
import pytest

from conftest import random_poses
from prvipe.camera import ProjectionConfig, project_with_matrix
from prvipe.data import (ANGLE_NAMES, DEFAULT_ANGLE_RANGES, LIMB_CHAINS, AmbiguityConfig, CameraSpec, Dataset, DatasetRecord,
                         SyntheticConfig, chest_level_cameras, dedup_near_duplicates, depth_ambiguity_family,
                         elevated_cameras, facing_yaw, generate_ambiguity_set, generate_synthetic_poses,
                         generate_synthetic_sequences, load_dataset, pose_from_angles, records_to_sequences, render_views,
                         retime_sequence, save_dataset, sequences_to_records)
from prvipe.errors import ParseError, SchemaError, VersionMismatch
from prvipe.skeleton import np_mpjpe, np_mpjpe_2d, pairwise_np_mpjpe

BONES = [(0, 1), (1, 2), (2, 3), (0, 4), (4, 5), (5, 6), (0, 7), (7, 8), (8, 9), (8, 10),
         (8, 11), (11, 12), (12, 13), (8, 14), (14, 15), (15, 16)]


def _record(frame, cam, pose3d, pose2d=None):
    pose2d = np.zeros((13, 2)) if pose2d is None else pose2d
    return DatasetRecord(frame, "s", cam, pose2d, pose3d)


def _bone_lengths(pose):
    return np.array([np.linalg.norm(pose[i] - pose[j]) for i, j in BONES])


@pytest.fixture(scope="module")
def small_records():
    return generate_synthetic_poses(SyntheticConfig(seed=1, num_poses=8))


class TestJsonl:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert load_dataset(path) == []

    def test_round_trip(self, tmp_path, small_records):
        path = save_dataset(small_records, tmp_path / "d.jsonl")
        loaded = load_dataset(path)
        assert len(loaded) == len(small_records)
        for a, b in zip(loaded, small_records):
            assert (a.frame_id, a.camera_id, a.subject_id) == (b.frame_id, b.camera_id, b.subject_id)
            np.testing.assert_allclose(a.pose2d, b.pose2d, atol=1e-12)
            np.testing.assert_allclose(a.pose3d, b.pose3d, atol=1e-12)

    def _write(self, tmp_path, lines):
        path = tmp_path / "bad.jsonl"
        path.write_text("\n".join(json.dumps(x) if not isinstance(x, str) else x for x in lines) + "\n")
        return path

    def _good(self, frame=0, cam="c0"):
        return {"frame_id": frame, "camera_id": cam, "pose2d": np.zeros((13, 2)).tolist(),
                "pose3d": random_poses(0, 1)[0].tolist()}

    def test_wrong_joint_count(self, tmp_path):
        rec = self._good()
        rec["pose2d"] = np.zeros((12, 2)).tolist()
        with pytest.raises(SchemaError, match="line 2"):
            load_dataset(self._write(tmp_path, [self._good(1), rec]))

    def test_malformed_json(self, tmp_path):
        with pytest.raises(ParseError, match="line 2"):
            load_dataset(self._write(tmp_path, [self._good(), "{not json"]))

    def test_missing_field(self, tmp_path):
        rec = self._good()
        del rec["pose3d"]
        with pytest.raises(SchemaError, match="pose3d"):
            load_dataset(self._write(tmp_path, [rec]))

    def test_duplicate_frame_camera(self, tmp_path):
        with pytest.raises(SchemaError, match="duplicate"):
            load_dataset(self._write(tmp_path, [self._good(), self._good()]))

    def test_inconsistent_3d_across_cameras(self, tmp_path):
        other = self._good(cam="c1")
        other["pose3d"] = random_poses(1, 1)[0].tolist()
        with pytest.raises(SchemaError, match="different 3D pose"):
            load_dataset(self._write(tmp_path, [self._good(), other]))

    def test_version_mismatch(self, tmp_path):
        header = {"format": "prvipe-jsonl", "version": 99}
        with pytest.raises(VersionMismatch):
            load_dataset(self._write(tmp_path, [header, self._good()]))

    def test_non_finite(self, tmp_path):
        rec = self._good()
        rec["pose2d"][0][0] = "NaN"
        with pytest.raises(SchemaError):
            load_dataset(self._write(tmp_path, [rec]))


class TestDedup:
    def test_all_identical(self):
        pose = random_poses(2, 1)[0]
        records = [_record(f, c, pose) for f in range(5) for c in ("a", "b")]
        kept = dedup_near_duplicates(records)
        assert {r.frame_id for r in kept} == {0}
        assert sorted(r.camera_id for r in kept) == ["a", "b"]

    def test_manual_trace(self):
        far = random_poses(3, 3)
        base = far[0]
        # a pose within 0.02 of base: tiny perturbation of the limbs
        near = base.copy()
        near[13] += 0.01
        assert np_mpjpe(base, near) < 0.02
        sequence = [base, near, far[1], far[1] + 0.0, far[2], near]
        records = [_record(f, "a", p) for f, p in enumerate(sequence)]
        # greedy against the last kept frame: 0 kept, 1 near 0 dropped, 2 far kept,
        # 3 equal to 2 dropped, 4 far kept, 5 compared with 4 (far) kept
        kept = [r.frame_id for r in dedup_near_duplicates(records)]
        assert kept == [0, 2, 4, 5]

    def test_threshold_zero_keeps_all(self, small_records):
        assert dedup_near_duplicates(small_records, 0.0) == small_records

    def test_kept_frames_are_separated_and_camera_consistent(self):
        narrow = {k: (0.0, 8.0) for k in DEFAULT_ANGLE_RANGES}
        records = generate_synthetic_poses(SyntheticConfig(seed=4, num_poses=40, angle_ranges=narrow))
        kept = dedup_near_duplicates(records, 0.05)
        data = Dataset(kept)
        assert len(data.frames) < 40
        d = np_mpjpe(data.frame_pose3d[:-1], data.frame_pose3d[1:])
        assert (d > 0.05).all()
        per_camera = {c: sorted(r.frame_id for r in kept if r.camera_id == c) for c in data.cameras}
        assert len({tuple(v) for v in per_camera.values()}) == 1


class TestSyntheticPoses:
    def test_zero_ranges_give_identical_poses(self):
        zero = {k: (0.0, 0.0) for k in DEFAULT_ANGLE_RANGES}
        data = Dataset(generate_synthetic_poses(SyntheticConfig(seed=0, num_poses=5, angle_ranges=zero)))
        np.testing.assert_array_equal(data.frame_pose3d, np.broadcast_to(data.frame_pose3d[0], (5, 17, 3)))

    def test_coincident_cameras_give_identical_views(self):
        cams = [CameraSpec("a", 30.0, 5.0), CameraSpec("b", 30.0, 5.0)]
        data = Dataset(generate_synthetic_poses(SyntheticConfig(seed=1, num_poses=10, cameras=cams)))
        np.testing.assert_array_equal(data.pose2d[data.camera_indices("a")], data.pose2d[data.camera_indices("b")])

    def test_pose_diversity(self):
        data = Dataset(generate_synthetic_poses(SyntheticConfig(seed=0, num_poses=500)))
        d = pairwise_np_mpjpe(data.frame_pose3d)
        upper = d[np.triu_indices(500, 1)]
        assert np.mean(upper > 0.1) >= 0.5

    def test_deterministic(self):
        a = generate_synthetic_poses(SyntheticConfig(seed=7, num_poses=5, noise_sigma=0.01))
        b = generate_synthetic_poses(SyntheticConfig(seed=7, num_poses=5, noise_sigma=0.01))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.pose2d, y.pose2d)

    def test_fixed_bone_lengths(self):
        data = Dataset(generate_synthetic_poses(SyntheticConfig(seed=2, num_poses=20)))
        lengths = np.array([_bone_lengths(p) for p in data.frame_pose3d])
        np.testing.assert_allclose(lengths, np.broadcast_to(lengths[0], lengths.shape), atol=1e-12)

    def test_every_frame_has_all_cameras(self):
        data = Dataset(generate_synthetic_poses(SyntheticConfig(seed=3, num_poses=6)))
        assert all(len(v) == 4 for v in data.views)
        assert data.cameras == ["cam0", "cam1", "cam2", "cam3"]

    def test_camera_sets(self):
        assert all(0.0 <= c.elevation <= 10.0 for c in chest_level_cameras())
        assert sorted(abs(c.elevation) for c in elevated_cameras(45.0)) == [45.0] * 4

    def test_render_views(self):
        poses = random_poses(5, 3)
        records = render_views(poses, elevated_cameras(), first_frame_id=100)
        assert [r.frame_id for r in records[::4]] == [100, 101, 102]
        assert len(records) == 12


class TestSyntheticSequences:
    def test_no_warp_no_noise_instances_equal_prototype(self):
        cfg = SyntheticConfig(seed=0, num_actions=2, instances_per_action=3, sequence_length=10,
                              warp_strength=0.0, cameras=[CameraSpec("a")])
        seqs = generate_synthetic_sequences(cfg)
        for action in ("action0", "action1"):
            group = [s for s in seqs if s.label == action]
            for s in group[1:]:
                np.testing.assert_array_equal(s.frames, group[0].frames)

    def test_retimed_copy_shares_poses_at_warped_times(self):
        seq = generate_synthetic_sequences(SyntheticConfig(seed=1, num_actions=1, instances_per_action=1))[0]
        copy = retime_sequence(seq, CameraSpec("other", 100.0, 5.0), np.random.default_rng(0), strength=0.0)
        np.testing.assert_allclose(copy.poses3d, seq.poses3d, atol=1e-12)
        assert copy.view == "other"

    def test_records_round_trip(self):
        seqs = generate_synthetic_sequences(SyntheticConfig(seed=2, num_actions=2, instances_per_action=2,
                                                            sequence_length=8))
        back = records_to_sequences(sequences_to_records(seqs))
        assert len(back) == 4
        for a, b in zip(sorted(seqs, key=lambda s: s.sequence_id), sorted(back, key=lambda s: s.sequence_id)):
            np.testing.assert_array_equal(a.frames, b.frames)
            assert a.label == b.label


class TestDepthAmbiguity:
    def test_family_members_share_the_projection(self):
        camera = chest_level_cameras()[0]
        config = ProjectionConfig()
        for pose in random_poses(6, 5):
            family = depth_ambiguity_family(pose, camera)
            assert len(family) >= 2
            x = project_with_matrix(family, np.broadcast_to(camera.matrix(), (len(family), 3, 3)), config,
                                    normalize=False)
            np.testing.assert_allclose(x, np.broadcast_to(x[0], x.shape), atol=1e-12)
            assert np.min(np.abs(family - pose).sum(axis=(1, 2))) < 1e-9

    def test_family_members_keep_bone_lengths(self):
        camera = chest_level_cameras()[1]
        pose = random_poses(7, 1)[0]
        family = depth_ambiguity_family(pose, camera)
        for member in family:
            np.testing.assert_allclose(_bone_lengths(member), _bone_lengths(pose), atol=1e-9)
        moved = {j for chain in LIMB_CHAINS for j in chain[1:]}
        fixed = [j for j in range(17) if j not in moved]
        np.testing.assert_allclose(family[:, fixed], np.broadcast_to(pose[fixed], family[:, fixed].shape), atol=1e-12)

    @pytest.mark.parametrize("azimuth", [0.0, 45.0, 135.0, -100.0])
    def test_facing_yaw_points_at_camera(self, azimuth):
        camera = CameraSpec("c", azimuth, 0.0)
        angles = np.zeros(len(ANGLE_NAMES))
        angles[ANGLE_NAMES.index("yaw")] = facing_yaw(camera)
        pose = pose_from_angles(angles) @ camera.matrix().T
        # the nose sits straight in front of the thorax, so it points down the optical axis
        offset = pose[9] - pose[8]
        np.testing.assert_allclose(offset[0], 0.0, atol=1e-12)
        assert offset[2] < 0.0

    def test_ambiguity_set(self):
        cfg = AmbiguityConfig(seed=3, num_plain=10, num_ambiguous=5, members=3)
        amb = generate_ambiguity_set(cfg)
        data = Dataset(amb.records)
        assert len(amb.plain) == 10 and len(amb.families) == 5
        cam = data.camera_indices(amb.camera_id)
        by_frame = {int(data.frame_ids[i]): i for i in cam}
        for fam in amb.families:
            assert 2 <= len(fam) <= 3
            x = data.pose2d[[by_frame[f] for f in fam]]
            y = data.pose3d[[by_frame[f] for f in fam]]
            assert np_mpjpe_2d(x[0], x[1:]).max() < 0.02
            d3 = pairwise_np_mpjpe(y)
            assert d3[~np.eye(len(fam), dtype=bool)].min() > cfg.min_gap
