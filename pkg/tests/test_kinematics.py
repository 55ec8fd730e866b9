import numpy as np
import pytest

from truncpose import kinematics as K
from truncpose.errors import MissingJoint
from truncpose.kinematics import (
    EDGES,
    JointId,
    KeypointSet,
    PoseParams,
    forward_kinematics,
    head_segment_length,
    node_jacobian,
    node_positions,
    surface_points,
    wrap_angle,
)


def make_params(theta=None, beta=None, rot=0.0, trans=(0.0, 0.0), scale=1.0):
    return PoseParams(
        theta=np.zeros(18) if theta is None else theta,
        beta=np.ones(4) if beta is None else beta,
        global_rot=rot,
        trans=np.asarray(trans, dtype=float),
        scale=scale,
    )


def random_params(rng, scale_range=(20.0, 90.0)):
    return PoseParams(
        theta=wrap_angle(rng.uniform(-np.pi, np.pi, 18)),
        beta=rng.uniform(0.5, 2.0, 4),
        global_rot=float(rng.uniform(-np.pi, np.pi)),
        trans=rng.uniform(-20, 60, 2),
        scale=float(rng.uniform(*scale_range)),
    )


# -- independent oracle: compose rotations bone by bone with explicit
#    2x2 matrices, one edge at a time, following the template table


def oracle_nodes(params: PoseParams) -> np.ndarray:
    def rot(a):
        c, s = np.cos(a), np.sin(a)
        return np.array([[c, -s], [s, c]])

    nodes = {K.PELVIS_NODE: np.zeros(2)}
    frames = {}  # edge index -> cumulative angle
    for i, (_name, child, base, fp, ti, grp, ox, oy) in enumerate(EDGES):
        ang = frames[fp] if fp >= 0 else 0.0
        if ti >= 0:
            ang = ang + params.theta[ti]
        frames[i] = ang
        vec = params.beta[grp] * (rot(ang) @ np.array([ox, oy]))
        nodes[child] = nodes[base] + vec
    out = np.zeros((K.N_NODES, 2))
    for idx, pos in nodes.items():
        out[idx] = params.trans + params.scale * (rot(params.global_rot) @ pos)
    return out


class TestForwardKinematics:
    def test_identity_pose_matches_template(self):
        kps = forward_kinematics(make_params())
        template = oracle_nodes(make_params())
        np.testing.assert_allclose(kps.xy, template[:19], atol=1e-12)
        # spot-check a few entries straight from the template table
        np.testing.assert_allclose(kps.xy[JointId.NECK], [0.0, -0.30])
        np.testing.assert_allclose(kps.xy[JointId.HEAD_TOP], [0.0, -0.46])
        np.testing.assert_allclose(kps.xy[JointId.LEFT_HIP], [0.08, 0.0])
        np.testing.assert_allclose(kps.xy[JointId.LEFT_ANKLE], [0.08, 0.48])

    def test_scale_doubles_distances_from_root(self):
        p1 = make_params(scale=1.0)
        p2 = make_params(scale=2.0)
        k1 = forward_kinematics(p1).xy
        k2 = forward_kinematics(p2).xy
        np.testing.assert_allclose(k2, 2.0 * k1, atol=1e-12)

    def test_random_params_match_oracle(self, rng):
        for _ in range(50):
            p = random_params(rng)
            np.testing.assert_allclose(
                node_positions(p), oracle_nodes(p), atol=1e-9)

    def test_translation_equivariance(self, rng):
        # exact up to one rounding of the final addition
        p = random_params(rng)
        d = np.array([3.25, -7.5])
        shifted = p.copy()
        shifted.trans = p.trans + d
        np.testing.assert_allclose(
            forward_kinematics(shifted).xy, forward_kinematics(p).xy + d,
            rtol=0, atol=1e-12)

    def test_rotation_consistency(self, rng):
        p = random_params(rng)
        phi = 0.7
        rotated = p.copy()
        rotated.global_rot = p.global_rot + phi
        c, s = np.cos(phi), np.sin(phi)
        R = np.array([[c, -s], [s, c]])
        expected = (forward_kinematics(p).xy - p.trans) @ R.T + p.trans
        np.testing.assert_allclose(forward_kinematics(rotated).xy, expected,
                                   atol=1e-9)

    def test_distal_angles_move_no_joint(self, rng):
        p = random_params(rng)
        q = p.copy()
        q.theta[14:18] = wrap_angle(q.theta[14:18] + rng.uniform(0.5, 1.0, 4))
        np.testing.assert_array_equal(forward_kinematics(p).xy,
                                      forward_kinematics(q).xy)


class TestSurfacePoints:
    def test_template_interpolates_joint_pairs(self):
        p = make_params()
        pts = surface_points(p).reshape(14, 10, 2)
        nodes = node_positions(p)
        for b in range(14):
            a = nodes[EDGES[b][2]]
            c = nodes[EDGES[b][1]]
            for k in range(10):
                np.testing.assert_allclose(pts[b, k], a + (k / 9) * (c - a),
                                           atol=1e-12)

    def test_count_and_collinearity(self, rng):
        p = random_params(rng)
        pts = surface_points(p)
        assert pts.shape == (140, 2)
        nodes = node_positions(p)
        pts = pts.reshape(14, 10, 2)
        for b in range(14):
            a, c = nodes[EDGES[b][2]], nodes[EDGES[b][1]]
            seg = c - a
            rel = pts[b] - a
            cross = rel[:, 0] * seg[1] - rel[:, 1] * seg[0]
            assert np.abs(cross).max() < 1e-9 * max(np.linalg.norm(seg), 1.0)

    def test_matches_oracle_endpoints(self, rng):
        p = random_params(rng)
        pts = surface_points(p).reshape(14, 10, 2)
        nodes = oracle_nodes(p)
        for b in range(14):
            np.testing.assert_allclose(pts[b, 0], nodes[EDGES[b][2]], atol=1e-9)
            np.testing.assert_allclose(pts[b, -1], nodes[EDGES[b][1]], atol=1e-9)


class TestHeadSegment:
    def test_axis_aligned(self):
        xy = np.zeros((19, 2))
        xy[JointId.HEAD_TOP] = [0, 40]
        kps = KeypointSet(xy, np.full(19, K.IN_IMAGE, np.int8))
        assert head_segment_length(kps) == 40.0

    def test_three_four_five(self):
        xy = np.zeros((19, 2))
        xy[JointId.NECK] = [0, 0]
        xy[JointId.HEAD_TOP] = [3, 4]
        kps = KeypointSet(xy, np.full(19, K.IN_IMAGE, np.int8))
        assert head_segment_length(kps) == pytest.approx(5.0)

    def test_missing_head_top_raises(self):
        xy = np.zeros((19, 2))
        vis = np.full(19, K.IN_IMAGE, np.int8)
        vis[JointId.HEAD_TOP] = K.UNANNOTATED
        with pytest.raises(MissingJoint):
            head_segment_length(KeypointSet(xy, vis))

    def test_invariances(self, rng):
        p = random_params(rng)
        h0 = head_segment_length(forward_kinematics(p))
        q = p.copy()
        q.trans = p.trans + np.array([11.0, -3.0])
        q.global_rot = p.global_rot + 1.1
        assert head_segment_length(forward_kinematics(q)) == pytest.approx(h0, abs=1e-9)
        q2 = p.copy()
        q2.scale = p.scale * 3.0
        assert head_segment_length(forward_kinematics(q2)) == pytest.approx(3 * h0, rel=1e-12)


class TestJointIds:
    def test_nineteen_stable_codes(self):
        assert len(JointId) == 19
        assert sorted(int(j) for j in JointId) == list(range(19))


class TestJacobian:
    def test_matches_finite_differences(self, rng):
        for _ in range(5):
            p = random_params(rng)
            _, jac = node_jacobian(p)
            v = p.as_vector()
            h = 1e-6
            for k in range(26):
                vp, vm = v.copy(), v.copy()
                vp[k] += h
                vm[k] -= h
                fd = (node_positions(PoseParams.from_vector(vp))
                      - node_positions(PoseParams.from_vector(vm))) / (2 * h)
                np.testing.assert_allclose(jac[..., k], fd, atol=5e-8)


class TestPoseParams:
    def test_vector_roundtrip(self, rng):
        p = random_params(rng)
        q = PoseParams.from_vector(p.as_vector())
        np.testing.assert_array_equal(p.as_vector(), q.as_vector())

    def test_validate_rejects_bad_values(self):
        p = make_params()
        p.scale = -1.0
        with pytest.raises(ValueError):
            p.validate()
        p = make_params(beta=np.array([0.1, 1, 1, 1]))
        with pytest.raises(ValueError):
            p.validate()

    def test_wrap_angle_interval(self):
        a = wrap_angle(np.array([np.pi, -np.pi, 3 * np.pi, 0.5]))
        assert np.all(a > -np.pi) and np.all(a <= np.pi)
        assert a[0] == pytest.approx(np.pi)
        assert a[1] == pytest.approx(np.pi)  # -pi wraps to pi
        assert a[3] == 0.5
