import numpy as np
import pytest

from truncpose import synth
from truncpose.errors import ConfigError
from truncpose.kinematics import IN_IMAGE, JointId, forward_kinematics
from truncpose.synth import (
    ARCHETYPE_MEAN_ANGLES,
    ARCHETYPES,
    GRID_SIZE,
    generate_pools,
    render,
    sample_pose,
)

from conftest import small_config


class TestSamplePose:
    def test_zero_noise_returns_mean_table(self, rng):
        for arch in ARCHETYPES:
            p = sample_pose(arch, rng, angle_sigma=0.0)
            np.testing.assert_array_equal(p.theta, ARCHETYPE_MEAN_ANGLES[arch])

    def test_same_seed_same_pose(self):
        a = sample_pose("sitting", np.random.default_rng(99))
        b = sample_pose("sitting", np.random.default_rng(99))
        np.testing.assert_array_equal(a.as_vector(), b.as_vector())

    def test_validates(self, rng):
        for _ in range(100):
            sample_pose("bending", rng).validate()

    def test_sample_mean_tracks_archetype_mean(self):
        # law-of-large-numbers check on a fixed seed: per-angle sample
        # mean within 3*sigma/sqrt(n) of the table
        rng = np.random.default_rng(2024)
        n = 10000
        draws = np.stack([sample_pose("standing", rng).theta for _ in range(n)])
        bound = 3 * synth.ANGLE_SIGMA / np.sqrt(n)
        assert np.abs(draws.mean(axis=0) - ARCHETYPE_MEAN_ANGLES["standing"]).max() < bound

    def test_span_lands_in_range(self, rng):
        for _ in range(60):
            p = sample_pose("standing", rng)
            kps = forward_kinematics(p)
            head = kps.xy[JointId.HEAD_TOP]
            ankles = kps.xy[[JointId.LEFT_ANKLE, JointId.RIGHT_ANKLE]]
            low = ankles[np.argmax(ankles[:, 1])]
            span = np.hypot(*(low - head))
            assert 0.6 * GRID_SIZE - 1e-6 <= span <= 1.8 * GRID_SIZE + 1e-6


class TestRender:
    def test_fully_inside_flags_all_in_image(self):
        p = sample_pose("standing", np.random.default_rng(0), angle_sigma=0.0)
        # shrink and center so everything fits
        p.scale = 28.0 / 0.94
        p.trans = np.array([24.0, 26.0])
        f = render(p, "standing")
        assert f.keypoints.in_image().all()

    def test_out_of_frame_legs_flagged_with_positions(self):
        p = sample_pose("standing", np.random.default_rng(0), angle_sigma=0.0)
        p.scale = 60.0
        p.trans = np.array([24.0, 40.0])  # pelvis low: legs fall outside
        f = render(p, "standing")
        ankle = f.keypoints.vis[JointId.LEFT_ANKLE]
        assert ankle == synth.OUT_OF_IMAGE
        assert np.isfinite(f.keypoints.xy[JointId.LEFT_ANKLE]).all()
        assert f.keypoints.xy[JointId.LEFT_ANKLE][1] >= GRID_SIZE

    def test_bit_identical_rerender(self):
        p = sample_pose("reaching", np.random.default_rng(5))
        f1 = render(p, "reaching", np.random.default_rng(7))
        f2 = render(p, "reaching", np.random.default_rng(7))
        assert np.array_equal(f1.grid, f2.grid)

    def test_grid_range_and_shape(self, rng):
        f = render(sample_pose("sitting", rng), "sitting", rng)
        assert f.grid.shape == (2, GRID_SIZE, GRID_SIZE)
        assert f.grid.min() >= 0.0 and f.grid.max() <= 1.0

    def test_context_patterns_differ_between_archetypes(self):
        p = sample_pose("standing", np.random.default_rng(3), angle_sigma=0.0)
        grids = {a: render(p, a).grid[1] for a in ARCHETYPES}
        for i, a in enumerate(ARCHETYPES):
            for b in ARCHETYPES[i + 1:]:
                assert np.abs(grids[a] - grids[b]).mean() > 0.05


class TestGeneratePools:
    def test_sizes_and_roles(self, small_pools):
        cfg = small_config()
        for role, pool in small_pools.items():
            assert len(pool.frames) == cfg.pool_sizes[role]
            assert pool.role == role

    def test_truth_presence_matches_role(self, small_pools):
        for role, pool in small_pools.items():
            labeled = role.startswith("labeled")
            assert all((f.truth is not None) == labeled for f in pool.frames)

    def test_rejects_empty_sizes(self):
        cfg = small_config()
        cfg.pool_sizes = dict(cfg.pool_sizes, test=0)
        with pytest.raises(ConfigError):
            generate_pools(cfg)

    def test_regeneration_bit_identical(self):
        cfg = small_config()
        cfg.pool_sizes = {"labeled-train": 6, "labeled-val": 2,
                          "unlabeled": 10, "test": 8}
        a = generate_pools(cfg)
        b = generate_pools(cfg)
        for role in a:
            for fa, fb in zip(a[role].frames, b[role].frames):
                assert np.array_equal(fa.grid, fb.grid)
                assert np.array_equal(fa.keypoints.xy, fb.keypoints.xy)
                assert np.array_equal(fa.keypoints.vis, fb.keypoints.vis)

    def test_labeled_keypoints_equal_fk_of_truth(self, small_pools):
        for f in small_pools["labeled-train"].frames[:40]:
            np.testing.assert_array_equal(
                f.keypoints.xy, forward_kinematics(f.truth).xy)

    def test_no_zero_annotation_frames(self, small_pools):
        for role in ("unlabeled", "test"):
            for f in small_pools[role].frames:
                assert f.keypoints.in_image().any()

    def test_unlabeled_leg_visibility_near_reported(self, small_pools):
        # generator contract: all leg joints missing in ~61% of frames
        legs = [JointId.LEFT_KNEE, JointId.RIGHT_KNEE,
                JointId.LEFT_ANKLE, JointId.RIGHT_ANKLE]
        inimg = np.stack([f.keypoints.in_image()
                          for f in small_pools["unlabeled"].frames])
        frac = (~inimg[:, legs]).all(axis=1).mean()
        assert abs(frac - 0.61) <= 0.05 + 0.03  # widened for the small pool

    def test_test_pool_fully_visible_rare(self, small_pools):
        inimg = np.stack([f.keypoints.in_image()
                          for f in small_pools["test"].frames])
        assert inimg.all(axis=1).mean() <= 0.10
