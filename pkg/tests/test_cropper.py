import numpy as np
import pytest

from truncpose import cropper
from truncpose.cropper import (
    CATEGORY_ORDER,
    CATEGORY_PROBS,
    CropCategory,
    CropSpec,
    GUARD_KEYPOINT_OUT,
    GUARD_TOO_SMALL,
    apply_crop,
    build_matched_test_crops,
    invert_points,
    resolve_crop,
    sample_category,
    transform_points,
)
from truncpose.errors import ConfigError, InvalidSpec, MissingJoint
from truncpose.evaluate import visibility_stats
from truncpose.kinematics import (
    IN_IMAGE,
    JointId,
    KeypointSet,
    OUT_OF_IMAGE,
    UNANNOTATED,
)
from truncpose.synth import DatasetPool, GRID_SIZE, flag_keypoints, render, sample_pose


def grid_keypoints(**positions):
    """All joints at mid-frame except the given overrides."""
    xy = np.full((19, 2), 24.0)
    for name, pos in positions.items():
        xy[JointId[name.upper()]] = pos
    return flag_keypoints(KeypointSet(xy, np.full(19, IN_IMAGE, np.int8)))


class TestSampleCategory:
    def test_probabilities_sum_to_one(self):
        assert sum(CATEGORY_PROBS) == pytest.approx(1.0, abs=1e-12)

    def test_empirical_frequencies(self):
        rng = np.random.default_rng(77)
        n = 100000
        draws = [sample_category(rng) for _ in range(n)]
        for cat, p in zip(CATEGORY_ORDER, CATEGORY_PROBS):
            freq = sum(d == cat for d in draws) / n
            assert abs(freq - p) < 0.01

    def test_seeded_reproducibility(self):
        a = [sample_category(np.random.default_rng(5)) for _ in range(20)]
        b = [sample_category(np.random.default_rng(5)) for _ in range(20)]
        assert a == b


class TestResolveRules:
    def test_above_hip_bottom_is_lower_hip(self):
        kps = grid_keypoints(left_hip=(20.0, 30.0), right_hip=(28.0, 33.5))
        spec = resolve_crop(CropCategory.ABOVE_HIP, kps, GRID_SIZE)
        assert spec.applied
        x0, y0, w, h = spec.rect
        assert (x0, y0, w) == (0.0, 0.0, GRID_SIZE)
        assert h == 33.5  # the lower hip

    def test_above_hip_out_of_image_hip_suppresses(self):
        kps = grid_keypoints(left_hip=(20.0, 50.0), right_hip=(28.0, 52.0))
        spec = resolve_crop(CropCategory.ABOVE_HIP, kps, GRID_SIZE)
        assert not spec.applied and spec.guard == GUARD_KEYPOINT_OUT

    def test_small_rectangle_suppresses(self):
        kps = grid_keypoints(left_hip=(20.0, 20.0), right_hip=(28.0, 22.0))
        spec = resolve_crop(CropCategory.ABOVE_HIP, kps, GRID_SIZE)
        assert not spec.applied and spec.guard == GUARD_TOO_SMALL

    def test_missing_joint_raises(self):
        kps = grid_keypoints(left_hip=(20.0, 33.0))
        kps.vis[JointId.RIGHT_HIP] = UNANNOTATED
        with pytest.raises(MissingJoint):
            resolve_crop(CropCategory.ABOVE_HIP, kps, GRID_SIZE)

    def test_knee_to_shoulder_rows(self):
        kps = grid_keypoints(
            left_shoulder=(18.0, 10.0), right_shoulder=(30.0, 11.0),
            left_knee=(20.0, 44.0), right_knee=(28.0, 42.0))
        spec = resolve_crop(CropCategory.KNEE_TO_SHOULDER, kps, GRID_SIZE)
        assert spec.applied
        x0, y0, w, h = spec.rect
        assert y0 == 11.0          # bottom (lower) of the shoulders
        assert y0 + h == 42.0      # higher knee

    def test_above_shoulders_bottom(self):
        kps = grid_keypoints(
            left_shoulder=(18.0, 32.0), right_shoulder=(30.0, 33.0),
            neck=(24.0, 31.0))
        spec = resolve_crop(CropCategory.ABOVE_SHOULDERS, kps, GRID_SIZE)
        assert spec.applied
        assert spec.rect[1] + spec.rect[3] == 33.0

    def test_one_hand_box_centered_at_wrist(self):
        kps = grid_keypoints(left_wrist=(30.0, 20.0), right_wrist=(10.0, 20.0))
        rng = np.random.default_rng(3)
        spec = resolve_crop(CropCategory.ONE_HAND, kps, GRID_SIZE, rng)
        assert spec.applied and spec.side in ("left", "right")
        x0, y0, w, h = spec.rect
        assert w >= 30.0 and h >= 30.0
        wx, wy = kps.xy[JointId[f"{spec.side}_wrist".upper()]]
        assert x0 <= wx <= x0 + w and y0 <= wy <= y0 + h

    def test_one_arm_box_covers_elbow_and_wrist(self):
        kps = grid_keypoints(left_elbow=(12.0, 14.0), left_wrist=(40.0, 40.0),
                             right_wrist=(1000.0, 0.0))
        kps.vis[JointId.RIGHT_WRIST] = UNANNOTATED
        spec = resolve_crop(CropCategory.ONE_ARM, kps, GRID_SIZE,
                            np.random.default_rng(0))
        assert spec.applied and spec.side == "left"
        x0, y0, w, h = spec.rect
        for j in (JointId.LEFT_ELBOW, JointId.LEFT_WRIST):
            x, y = kps.xy[j]
            assert x0 <= x <= x0 + w and y0 <= y <= y0 + h

    def test_one_arm_no_wrists_raises(self):
        kps = grid_keypoints()
        kps.vis[JointId.LEFT_WRIST] = UNANNOTATED
        kps.vis[JointId.RIGHT_WRIST] = UNANNOTATED
        with pytest.raises(MissingJoint):
            resolve_crop(CropCategory.ONE_ARM, kps, GRID_SIZE)

    def test_uncropped_full_frame(self):
        spec = resolve_crop(CropCategory.UNCROPPED, grid_keypoints(), GRID_SIZE)
        assert spec.applied and spec.rect == (0.0, 0.0, 48.0, 48.0)

    def test_deterministic_given_seed(self):
        kps = grid_keypoints(left_wrist=(30.0, 20.0), right_wrist=(10.0, 20.0))
        a = resolve_crop(CropCategory.ONE_HAND, kps, GRID_SIZE,
                         np.random.default_rng(9))
        b = resolve_crop(CropCategory.ONE_HAND, kps, GRID_SIZE,
                         np.random.default_rng(9))
        assert a == b


def rendered_frame(seed=4, archetype="standing"):
    rng = np.random.default_rng(seed)
    return render(sample_pose(archetype, rng), archetype, rng)


class TestApplyCrop:
    def test_uncropped_identity(self):
        f = rendered_frame()
        spec = resolve_crop(CropCategory.UNCROPPED, f.keypoints, GRID_SIZE)
        g = apply_crop(f, spec)
        assert np.array_equal(g.grid, f.grid)
        assert np.array_equal(g.keypoints.xy, f.keypoints.xy)
        assert np.array_equal(g.keypoints.vis, f.keypoints.vis)
        assert g.meta.lineage == [(0.0, 0.0, 48.0, 48.0)]
        np.testing.assert_array_equal(g.truth.as_vector(), f.truth.as_vector())

    def test_rejects_unapplied_spec(self):
        f = rendered_frame()
        spec = CropSpec(CropCategory.ABOVE_HIP, None, False, GUARD_TOO_SMALL)
        with pytest.raises(InvalidSpec):
            apply_crop(f, spec)

    def test_annotation_count_preserved_and_sides_consistent(self):
        f = rendered_frame(seed=10)
        spec = resolve_crop(CropCategory.ABOVE_HIP, f.keypoints, GRID_SIZE)
        if not spec.applied:
            pytest.skip("guard fired for this fixture")
        g = apply_crop(f, spec)
        assert (g.keypoints.annotated() == f.keypoints.annotated()).all()
        G = GRID_SIZE
        inside = ((g.keypoints.xy[:, 0] >= 0) & (g.keypoints.xy[:, 0] < G)
                  & (g.keypoints.xy[:, 1] >= 0) & (g.keypoints.xy[:, 1] < G))
        ann = g.keypoints.annotated()
        assert np.array_equal(g.keypoints.vis[ann] == IN_IMAGE, inside[ann])

    def test_crop_excluding_ankles_flags_them_out(self):
        f = rendered_frame(seed=21, archetype="standing")
        # fully visible standing figure with hips below the 30 px line
        p = f.truth.copy()
        p.scale = 26.0 / 0.94
        p.trans = np.array([24.0, 31.0])
        f = render(p, "standing")
        spec = resolve_crop(CropCategory.ABOVE_HIP, f.keypoints, GRID_SIZE)
        assert spec.applied
        g = apply_crop(f, spec)
        for j in (JointId.LEFT_ANKLE, JointId.RIGHT_ANKLE):
            assert g.keypoints.vis[j] == OUT_OF_IMAGE
            assert g.keypoints.xy[j][1] >= GRID_SIZE

    def test_coordinate_roundtrip_through_lineage(self):
        f = rendered_frame(seed=13)
        spec = resolve_crop(CropCategory.ABOVE_HIP, f.keypoints, GRID_SIZE)
        if not spec.applied:
            pytest.skip("guard fired for this fixture")
        g = apply_crop(f, spec)
        back = invert_points(g.keypoints.xy, g.meta.lineage[-1], GRID_SIZE)
        np.testing.assert_allclose(back, f.keypoints.xy, atol=1e-9)

    def test_pseudo_truth_keeps_pose_refits_placement(self):
        f = rendered_frame(seed=31)
        spec = CropSpec(CropCategory.ABOVE_HIP, (4.0, 2.0, 40.0, 36.0), True)
        g = apply_crop(f, spec)
        np.testing.assert_array_equal(g.truth.theta, f.truth.theta)
        np.testing.assert_array_equal(g.truth.beta, f.truth.beta)
        assert g.truth.global_rot == f.truth.global_rot
        assert g.truth.scale > 0
        # isotropic rect: the refit is exact
        iso = CropSpec(CropCategory.ABOVE_HIP, (6.0, 6.0, 36.0, 36.0), True)
        gi = apply_crop(f, iso)
        expect = transform_points(f.keypoints.xy, iso.rect, GRID_SIZE)
        from truncpose.kinematics import forward_kinematics
        np.testing.assert_allclose(forward_kinematics(gi.truth).xy, expect,
                                   atol=1e-9)


class TestMatchedCrops:
    def test_identity_mix_reproduces_own_statistics(self, small_pools):
        test = small_pools["test"]
        sub = [f for f in test.frames
               if f.keypoints.vis[JointId.NECK] == IN_IMAGE
               and f.keypoints.vis[JointId.HEAD_TOP] == IN_IMAGE]
        pool = DatasetPool(frames=sub, role="test", seed=test.seed)
        own = visibility_stats(pool)
        force = np.zeros(6)
        force[CATEGORY_ORDER.index(CropCategory.UNCROPPED)] = 1.0
        matched, achieved, _ = build_matched_test_crops(
            pool, own.proportions, np.random.default_rng(0), force_mix=force)
        np.testing.assert_array_equal(achieved.proportions, own.proportions)
        assert achieved.mean_keypoints == own.mean_keypoints

    def test_matches_full_pool_statistics(self, small_pools):
        test = small_pools["test"]
        target = visibility_stats(test)
        sub = [f for f in test.frames
               if f.keypoints.vis[JointId.NECK] == IN_IMAGE
               and f.keypoints.vis[JointId.HEAD_TOP] == IN_IMAGE]
        pool = DatasetPool(frames=sub, role="test", seed=test.seed)
        matched, achieved, _ = build_matched_test_crops(
            pool, target.proportions, np.random.default_rng(0))
        assert np.abs(achieved.proportions - target.proportions).max() <= 0.05
        assert abs(achieved.mean_keypoints - target.mean_keypoints) <= 1.0

    def test_rejects_malformed_targets(self, small_pools):
        with pytest.raises(ConfigError):
            build_matched_test_crops(small_pools["test"], np.ones(5),
                                     np.random.default_rng(0))

    def test_matched_stats_equal_visibility_stats_code_path(self, small_pools):
        test = small_pools["test"]
        target = visibility_stats(test)
        sub = [f for f in test.frames
               if f.keypoints.vis[JointId.NECK] == IN_IMAGE
               and f.keypoints.vis[JointId.HEAD_TOP] == IN_IMAGE]
        pool = DatasetPool(frames=sub, role="test", seed=test.seed)
        matched, achieved, _ = build_matched_test_crops(
            pool, target.proportions, np.random.default_rng(0))
        recomputed = visibility_stats(matched)
        np.testing.assert_array_equal(achieved.proportions, recomputed.proportions)
