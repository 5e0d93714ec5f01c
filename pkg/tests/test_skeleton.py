"""Tests for posekey.skeleton: topology, normalization, features and losses."""

import logging
import math

import pytest
import torch

from posekey.errors import ArgumentError, DegeneratePoseError
from posekey.skeleton import (
    DEFAULT_TOPOLOGY,
    CoordinateSpace,
    LossWeights,
    NormMode,
    Pose,
    RelativePoseFeatures,
    SkeletonTopology,
    denormalize_keypoints,
    keypoint_distance,
    keypoint_loss,
    normalize_keypoints,
    pose_consistency_loss,
    relative_feature_tensor,
    relative_pose_features,
    transform_pose,
)

CHAIN = SkeletonTopology(
    joint_names=("a", "b", "c", "d"),
    bones=((0, 1), (1, 2), (2, 3)),
    angle_triples=((0, 1, 2), (1, 2, 3)),
    torso_edge=0,
)


def _pose(coords, space=CoordinateSpace.PIXEL, visibility=None):
    coords = torch.tensor(coords, dtype=torch.float64)
    if visibility is None:
        visibility = torch.ones(coords.shape[0], dtype=torch.bool)
    return Pose(coords, torch.as_tensor(visibility), space)


def _random_pose(seed: int, topology=DEFAULT_TOPOLOGY) -> Pose:
    gen = torch.Generator().manual_seed(seed)
    coords = 20 + 80 * torch.rand(topology.num_joints, 2, generator=gen, dtype=torch.float64)
    return Pose(coords, torch.ones(topology.num_joints, dtype=torch.bool))


class TestTopology:
    def test_default_topology_shape(self):
        assert DEFAULT_TOPOLOGY.num_joints == 15
        assert len(DEFAULT_TOPOLOGY.bones) == 14
        assert DEFAULT_TOPOLOGY.num_features == 22
        assert DEFAULT_TOPOLOGY.root == DEFAULT_TOPOLOGY.index("pelvis")

    def test_out_of_range_bone_rejected(self):
        with pytest.raises(ArgumentError, match="out of range"):
            SkeletonTopology(("a", "b"), ((0, 2),), (), 0)

    def test_duplicate_bone_rejected(self):
        with pytest.raises(ArgumentError, match="duplicate"):
            SkeletonTopology(("a", "b", "c"), ((0, 1), (1, 0)), (), 0)

    def test_disconnected_graph_rejected(self):
        with pytest.raises(ArgumentError, match="tree"):
            SkeletonTopology(("a", "b", "c", "d"), ((0, 1), (1, 2), (2, 0)), (), 0)

    def test_cycle_rejected(self):
        with pytest.raises(ArgumentError):
            SkeletonTopology(("a", "b", "c"), ((0, 1), (1, 2), (2, 0)), (), 0)

    def test_bad_torso_edge(self):
        with pytest.raises(ArgumentError, match="torso_edge"):
            SkeletonTopology(("a", "b"), ((0, 1),), (), 3)

    def test_unknown_joint_name(self):
        with pytest.raises(ArgumentError, match="unknown joint"):
            DEFAULT_TOPOLOGY.index("tail")


class TestPose:
    def test_normalized_out_of_range_rejected(self):
        with pytest.raises(ArgumentError, match=r"\[0, 1\]"):
            _pose([[0.5, 1.5], [0.1, 0.1]], CoordinateSpace.NORMALIZED)

    def test_invisible_joint_may_lie_outside(self):
        pose = _pose([[0.5, 1.5], [0.1, 0.1]], CoordinateSpace.NORMALIZED, [False, True])
        assert pose.num_joints == 2

    def test_visibility_length_checked(self):
        with pytest.raises(ArgumentError, match="one flag per joint"):
            Pose(torch.zeros(3, 2), torch.ones(2, dtype=torch.bool))

    def test_record_roundtrip(self):
        pose = _random_pose(0)
        back = Pose.from_record(pose.to_record("img.png"))
        assert torch.allclose(back.coords, pose.coords)
        assert torch.equal(back.visibility, pose.visibility)

    def test_record_with_wrong_joint_count(self):
        with pytest.raises(ArgumentError, match="15 keypoints"):
            Pose.from_record({"image": "x.png", "keypoints": [[0, 0, 1]]})


class TestNormalizeKeypoints:
    def test_origin(self):
        result = normalize_keypoints(_pose([[0, 0], [10, 10]]), (128, 128))
        assert result.pose.coords[0].tolist() == [0.0, 0.0]
        assert result.clamped == 0

    def test_componentwise_division(self):
        result = normalize_keypoints(_pose([[64, 96], [0, 0]]), (128, 128))
        assert result.pose.coords[0].tolist() == [0.5, 0.75]
        assert result.pose.space == CoordinateSpace.NORMALIZED

    def test_non_square_dims(self):
        result = normalize_keypoints(_pose([[32, 32], [0, 0]]), (64, 128))
        assert result.pose.coords[0].tolist() == [0.5, 0.25]

    def test_out_of_frame_clamped_and_counted(self):
        result = normalize_keypoints(_pose([[140, 64], [-5, 10], [10, 10]]), (128, 128))
        assert result.clamped == 2
        assert result.pose.coords[0].tolist() == [1.0, 0.5]
        assert result.pose.coords[1, 0] == 0.0

    def test_invisible_out_of_frame_not_clamped(self):
        pose = _pose([[140, 64], [10, 10]], visibility=[False, True])
        result = normalize_keypoints(pose, (128, 128))
        assert result.clamped == 0
        assert result.pose.coords[0, 0] == pytest.approx(140 / 128)

    @pytest.mark.parametrize("dims", [(0, 128), (128, -1)])
    def test_non_positive_dims(self, dims):
        with pytest.raises(ArgumentError):
            normalize_keypoints(_pose([[1, 1], [2, 2]]), dims)

    def test_requires_pixel_space(self):
        pose = _pose([[0.1, 0.1], [0.2, 0.2]], CoordinateSpace.NORMALIZED)
        with pytest.raises(ArgumentError, match="pixel-space"):
            normalize_keypoints(pose, (128, 128))

    def test_torso_mode(self):
        # torso from root (0) to joint 1 is 40px; joint 2 sits 20px right of root
        pose = _pose([[50, 50], [50, 10], [70, 50], [50, 90]])
        result = normalize_keypoints(pose, (128, 128), NormMode.TORSO, CHAIN)
        assert result.pose.space == CoordinateSpace.TORSO
        assert result.pose.coords[2].tolist() == pytest.approx([0.5, 0.0])

    def test_torso_mode_degenerate(self):
        pose = _pose([[50, 50], [50, 50], [70, 50], [50, 90]])
        with pytest.raises(DegeneratePoseError):
            normalize_keypoints(pose, (128, 128), NormMode.TORSO, CHAIN)

    def test_denormalize_inverts(self):
        pose = _random_pose(3)
        normalized = normalize_keypoints(pose, (128, 128)).pose
        back = denormalize_keypoints(normalized, (128, 128))
        assert torch.allclose(back.coords, pose.coords, atol=1e-12)


class TestKeypointLoss:
    def _square(self, offset=(0.0, 0.0), which=None):
        base = torch.tensor([[0.2, 0.2], [0.4, 0.2], [0.4, 0.4], [0.2, 0.4]], dtype=torch.float64)
        moved = base.clone()
        shift = torch.tensor(offset, dtype=torch.float64)
        if which is None:
            moved += shift
        else:
            moved[which] += shift
        vis = torch.ones(4, dtype=torch.bool)
        return (Pose(moved, vis, CoordinateSpace.NORMALIZED),
                Pose(base, vis, CoordinateSpace.NORMALIZED))

    def test_identity_is_zero(self):
        gen, gt = self._square()
        assert float(keypoint_loss(gen, gt).value) == 0.0

    def test_single_joint_offset(self):
        gen, gt = self._square((0.1, 0.0), which=1)
        assert float(keypoint_loss(gen, gt).value) == pytest.approx(0.0025)

    def test_all_joints_offset(self):
        gen, gt = self._square((0.1, 0.1))
        assert float(keypoint_loss(gen, gt).value) == pytest.approx(0.02)

    def test_symmetric(self):
        gen, gt = self._square((0.05, -0.02), which=2)
        assert float(keypoint_loss(gen, gt).value) == float(keypoint_loss(gt, gen).value)

    def test_empty_mask_is_undefined_zero(self):
        gen, gt = self._square((0.1, 0.1))
        result = keypoint_loss(gen, gt, torch.zeros(4, dtype=torch.bool))
        assert float(result.value) == 0.0
        assert result.defined is False

    def test_default_mask_uses_both_visibilities(self):
        gen, gt = self._square((0.1, 0.0), which=1)
        hidden = Pose(gen.coords, torch.tensor([True, False, True, True]), gen.space)
        assert float(keypoint_loss(hidden, gt).value) == 0.0

    def test_topology_mismatch(self):
        gen, _ = self._square()
        other = _pose([[0.1, 0.1], [0.2, 0.2]], CoordinateSpace.NORMALIZED)
        with pytest.raises(ArgumentError, match="topology mismatch"):
            keypoint_loss(gen, other)

    def test_gradient_matches_finite_differences(self):
        gen = torch.rand(4, 15, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
        gt = torch.rand(4, 15, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
        mask = torch.ones(4, 15, dtype=torch.bool)
        gen.requires_grad_(True)
        assert torch.autograd.gradcheck(
            lambda g: keypoint_distance(g, gt, mask)[0], (gen,), eps=1e-4, rtol=1e-3
        )


class TestRelativePoseFeatures:
    def test_unit_chain(self):
        feats = relative_pose_features(_pose([[0, 0], [0, 1], [1, 1], [1, 0]]), CHAIN)
        assert feats.bone_length_ratios.tolist() == pytest.approx([1.0, 1.0, 1.0])
        assert feats.joint_angles.tolist() == pytest.approx([math.pi / 2, math.pi / 2])
        assert bool(feats.valid.all())

    def test_translation_invariance(self):
        pose = _random_pose(4)
        moved = transform_pose(pose, translate=(5.0, -3.0))
        a, b = relative_pose_features(pose), relative_pose_features(moved)
        assert torch.allclose(a.values, b.values, atol=1e-10)

    @pytest.mark.parametrize("angle", [math.radians(30), 1.0, -2.5])
    def test_rotation_invariance(self, angle):
        pose = _random_pose(5)
        a = relative_pose_features(pose)
        b = relative_pose_features(transform_pose(pose, rotate=angle))
        assert torch.allclose(a.values, b.values, atol=1e-10)

    @pytest.mark.parametrize("scale", [0.5, 3.0])
    def test_scale_invariance(self, scale):
        pose = _random_pose(6)
        a = relative_pose_features(pose)
        b = relative_pose_features(transform_pose(pose, scale=scale))
        assert torch.allclose(a.values, b.values, atol=1e-10)

    def test_angles_within_zero_pi(self):
        for seed in range(10):
            angles = relative_pose_features(_random_pose(seed)).joint_angles
            assert bool(((angles >= 0) & (angles <= math.pi)).all())

    def test_degenerate_torso(self):
        with pytest.raises(DegeneratePoseError):
            relative_pose_features(_pose([[0, 0], [0, 0], [1, 1], [1, 0]]), CHAIN)

    def test_degenerate_arm_invalidates_angle(self):
        feats = relative_pose_features(_pose([[0, 0], [0, 1], [0, 1], [1, 0]]), CHAIN)
        assert feats.joint_angles.tolist() == [0.0, 0.0]
        assert feats.angle_valid.tolist() == [False, False]

    def test_degenerate_angles_are_logged(self, caplog):
        coords = torch.tensor([[0, 0], [0, 1], [0, 1], [1, 0]], dtype=torch.float64)
        with caplog.at_level(logging.DEBUG, logger="posekey.skeleton"):
            relative_feature_tensor(coords, CHAIN)
        assert "masked 2 joint angles" in caplog.text

    def test_clean_pose_logs_nothing(self, caplog):
        coords = torch.tensor([[0, 0], [0, 1], [1, 1], [1, 0]], dtype=torch.float64)
        with caplog.at_level(logging.DEBUG, logger="posekey.skeleton"):
            relative_feature_tensor(coords, CHAIN)
        assert "joint angles" not in caplog.text

    def test_invisible_joint_invalidates_features(self):
        pose = _pose([[0, 0], [0, 1], [1, 1], [1, 0]], visibility=[True, True, True, False])
        feats = relative_pose_features(pose, CHAIN)
        assert feats.ratio_valid.tolist() == [True, True, False]
        assert feats.angle_valid.tolist() == [True, False]

    def test_wrong_topology(self):
        with pytest.raises(ArgumentError):
            relative_pose_features(_random_pose(0), CHAIN)

    def test_gradient_matches_finite_differences(self):
        coords = (0.2 + 0.6 * torch.rand(3, 15, 2, dtype=torch.float64,
                                         generator=torch.Generator().manual_seed(9)))
        coords.requires_grad_(True)
        assert torch.autograd.gradcheck(
            lambda c: relative_feature_tensor(c, DEFAULT_TOPOLOGY)[0], (coords,),
            eps=1e-6, rtol=1e-3, atol=1e-6,
        )


class TestPoseConsistencyLoss:
    def _feats(self, ratios, angles):
        r = torch.tensor(ratios, dtype=torch.float64)
        a = torch.tensor(angles, dtype=torch.float64)
        return RelativePoseFeatures(r, a, torch.ones_like(r, dtype=torch.bool),
                                    torch.ones_like(a, dtype=torch.bool), CHAIN)

    def test_identical_is_zero(self):
        feats = relative_pose_features(_random_pose(1))
        assert float(pose_consistency_loss(feats, feats)) == 0.0

    def test_hand_computed(self):
        gen = self._feats([1.0, 1.2, 0.8], [1.0, 2.0])
        gt = self._feats([1.0, 1.0, 0.8], [1.1, 2.0])
        assert float(pose_consistency_loss(gen, gt)) == pytest.approx(0.05)

    def test_invalid_features_skipped(self):
        gen = self._feats([1.0, 9.0, 0.8], [1.0, 2.0])
        gt = self._feats([1.0, 1.0, 0.8], [1.0, 2.0])
        gt = RelativePoseFeatures(gt.bone_length_ratios, gt.joint_angles,
                                  torch.tensor([True, False, True]), gt.angle_valid, CHAIN)
        assert float(pose_consistency_loss(gen, gt)) == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_zero_under_rigid_motion(self, seed):
        pose = _random_pose(seed)
        moved = transform_pose(pose, translate=(7.0, -2.0), rotate=0.3 * seed, scale=1.5)
        loss = pose_consistency_loss(relative_pose_features(pose),
                                     relative_pose_features(moved))
        assert float(loss) < 1e-8

    def test_layout_mismatch(self):
        with pytest.raises(ArgumentError, match="layouts differ"):
            pose_consistency_loss(self._feats([1.0, 1.0, 1.0], [1.0, 1.0]),
                                  relative_pose_features(_random_pose(0)))


class TestLossWeights:
    def test_defaults(self):
        assert LossWeights() == LossWeights(1.0, 1.0)
        assert LossWeights().active

    def test_zero_is_inactive(self):
        assert not LossWeights(0.0, 0.0).active

    @pytest.mark.parametrize("value", [-0.1, math.inf, math.nan])
    def test_invalid(self, value):
        with pytest.raises(ArgumentError):
            LossWeights(lambda_kp=value)
