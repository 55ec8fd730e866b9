"""Simplified 2D articulated body model.

A figure is described by a parameter vector [theta, beta, global_rot,
trans, scale]:

* ``theta``   -- 18 relative joint angles (radians, wrapped to (-pi, pi]).
  The first 14 drive the bones of the skeleton; the last 4 are distal
  hand/foot angles that displace none of the 19 evaluation joints (they
  exist in the parameterization and are supervised through parameter
  losses, like the many rig rotations of a full body model that move no
  sparse keypoint).
* ``beta``    -- 4 bone-length multipliers (torso, arm, leg, head), each
  in [0.5, 2.0].
* ``global_rot`` -- one rigid rotation applied to the whole body frame.
* ``trans``   -- pelvis position in pixels.
* ``scale``   -- pixels per canonical unit, > 0.

Coordinates are (x, y) with y growing downward, matching raster row
order.  The canonical template (all angles zero, unit betas) is an
upright figure spanning roughly one canonical unit from head top to
ankles; see ``TEMPLATE_TABLE`` and the README for the published table.

The skeleton is a tree rooted at a virtual pelvis node.  14 bones carry
one relative angle each and 10 surface points each; the five face
joints (nose, eyes, ears) hang off the head bone frame as fixed offsets
scaled by the head length multiplier.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import MissingJoint


class JointId(IntEnum):
    """The 19 evaluation joints: the 17 COCO joints plus neck and head top."""

    NOSE = 0
    LEFT_EYE = 1
    RIGHT_EYE = 2
    LEFT_EAR = 3
    RIGHT_EAR = 4
    LEFT_SHOULDER = 5
    RIGHT_SHOULDER = 6
    LEFT_ELBOW = 7
    RIGHT_ELBOW = 8
    LEFT_WRIST = 9
    RIGHT_WRIST = 10
    LEFT_HIP = 11
    RIGHT_HIP = 12
    LEFT_KNEE = 13
    RIGHT_KNEE = 14
    LEFT_ANKLE = 15
    RIGHT_ANKLE = 16
    NECK = 17
    HEAD_TOP = 18


N_JOINTS = 19
N_ANGLES = 18
N_BETAS = 4
N_PARAMS = N_ANGLES + N_BETAS + 1 + 2 + 1  # theta, beta, rot, trans, scale = 26
N_BONES = 14
POINTS_PER_BONE = 10
N_SURFACE_POINTS = N_BONES * POINTS_PER_BONE

# Visibility flags used by KeypointSet.vis.
UNANNOTATED = 0
IN_IMAGE = 1
OUT_OF_IMAGE = 2

# Beta groups.
BETA_TORSO = 0
BETA_ARM = 1
BETA_LEG = 2
BETA_HEAD = 3

# Node indices: the 19 joints keep their JointId codes; the virtual
# pelvis root is appended as node 19.
PELVIS_NODE = 19
N_NODES = 20

# Edge table defining the kinematic tree, in topological order.
# Fields: (name, child node, base node, frame parent edge index,
#          theta index (-1 = inherits frame, no own angle),
#          beta group, canonical offset x, canonical offset y).
# The child position is base position + beta * Rot(cumulative angle) * offset,
# where the cumulative angle chains through the frame parent edges.
EDGES = (
    ("spine",       int(JointId.NECK),           PELVIS_NODE,                 -1, 0,  BETA_TORSO,  0.000, -0.300),
    ("head",        int(JointId.HEAD_TOP),       int(JointId.NECK),            0, 1,  BETA_HEAD,   0.000, -0.160),
    ("clavicle_l",  int(JointId.LEFT_SHOULDER),  int(JointId.NECK),            0, 2,  BETA_TORSO,  0.110,  0.020),
    ("clavicle_r",  int(JointId.RIGHT_SHOULDER), int(JointId.NECK),            0, 3,  BETA_TORSO, -0.110,  0.020),
    ("upper_arm_l", int(JointId.LEFT_ELBOW),     int(JointId.LEFT_SHOULDER),   2, 4,  BETA_ARM,    0.030,  0.150),
    ("upper_arm_r", int(JointId.RIGHT_ELBOW),    int(JointId.RIGHT_SHOULDER),  3, 5,  BETA_ARM,   -0.030,  0.150),
    ("forearm_l",   int(JointId.LEFT_WRIST),     int(JointId.LEFT_ELBOW),      4, 6,  BETA_ARM,    0.020,  0.140),
    ("forearm_r",   int(JointId.RIGHT_WRIST),    int(JointId.RIGHT_ELBOW),     5, 7,  BETA_ARM,   -0.020,  0.140),
    ("hip_l",       int(JointId.LEFT_HIP),       PELVIS_NODE,                 -1, 8,  BETA_TORSO,  0.080,  0.000),
    ("hip_r",       int(JointId.RIGHT_HIP),      PELVIS_NODE,                 -1, 9,  BETA_TORSO, -0.080,  0.000),
    ("thigh_l",     int(JointId.LEFT_KNEE),      int(JointId.LEFT_HIP),        8, 10, BETA_LEG,    0.000,  0.240),
    ("thigh_r",     int(JointId.RIGHT_KNEE),     int(JointId.RIGHT_HIP),       9, 11, BETA_LEG,    0.000,  0.240),
    ("shin_l",      int(JointId.LEFT_ANKLE),     int(JointId.LEFT_KNEE),      10, 12, BETA_LEG,    0.000,  0.240),
    ("shin_r",      int(JointId.RIGHT_ANKLE),    int(JointId.RIGHT_KNEE),     11, 13, BETA_LEG,    0.000,  0.240),
    # Face attachments: anchored at the neck, rotating with the head
    # bone frame (edge 1), scaled by the head multiplier, no own angle.
    ("nose",        int(JointId.NOSE),           int(JointId.NECK),            1, -1, BETA_HEAD,   0.000, -0.115),
    ("eye_l",       int(JointId.LEFT_EYE),       int(JointId.NECK),            1, -1, BETA_HEAD,   0.030, -0.130),
    ("eye_r",       int(JointId.RIGHT_EYE),      int(JointId.NECK),            1, -1, BETA_HEAD,  -0.030, -0.130),
    ("ear_l",       int(JointId.LEFT_EAR),       int(JointId.NECK),            1, -1, BETA_HEAD,   0.055, -0.105),
    ("ear_r",       int(JointId.RIGHT_EAR),      int(JointId.NECK),            1, -1, BETA_HEAD,  -0.055, -0.105),
)

# The first 14 edges are the bones carrying surface points, in the
# published order. Bone b runs from EDGES[b] base node to child node.
BONE_EDGE_INDICES = tuple(range(N_BONES))

# Distal angles: theta[14:18] = left hand, right hand, left foot,
# right foot. They rotate no bone and displace no evaluation joint.
DISTAL_ANGLE_NAMES = ("hand_l", "hand_r", "foot_l", "foot_r")

# Human-readable template table (joint, parent, canonical offset),
# re-derived from EDGES for docs and tests.
TEMPLATE_VERSION = "truncpose-v1"
TEMPLATE_TABLE = tuple(
    (name, child, base, (ox, oy))
    for name, child, base, _fp, _ti, _bg, ox, oy in EDGES
)

_EDGE_CHILD = np.array([e[1] for e in EDGES], dtype=np.intp)
_EDGE_BASE = np.array([e[2] for e in EDGES], dtype=np.intp)
_EDGE_FRAME_PARENT = np.array([e[3] for e in EDGES], dtype=np.intp)
_EDGE_THETA = np.array([e[4] for e in EDGES], dtype=np.intp)
_EDGE_GROUP = np.array([e[5] for e in EDGES], dtype=np.intp)
_EDGE_OFFSET = np.array([[e[6], e[7]] for e in EDGES], dtype=np.float64)


def _edge_theta_sets() -> tuple[tuple[int, ...], ...]:
    """Theta indices contributing to each edge's cumulative frame angle."""
    sets: list[tuple[int, ...]] = []
    for i in range(len(EDGES)):
        acc: list[int] = []
        j = i
        while j >= 0:
            t = int(_EDGE_THETA[j])
            if t >= 0:
                acc.append(t)
            j = int(_EDGE_FRAME_PARENT[j])
        sets.append(tuple(sorted(acc)))
    return tuple(sets)


_EDGE_THETA_SETS = _edge_theta_sets()


def wrap_angle(a):
    """Wrap angles to the interval (-pi, pi]; in-range values pass
    through unchanged."""
    a = np.asarray(a, dtype=np.float64)
    outside = (a <= -np.pi) | (a > np.pi)
    wrapped = np.pi - np.mod(np.pi - a, 2.0 * np.pi)
    return np.where(outside, wrapped, a)


@dataclass
class PoseParams:
    """Full parameter vector of one figure."""

    theta: np.ndarray          # (18,) radians, wrapped to (-pi, pi]
    beta: np.ndarray           # (4,) multipliers in [0.5, 2.0]
    global_rot: float          # radians
    trans: np.ndarray          # (2,) pixels
    scale: float               # pixels per canonical unit, > 0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(N_ANGLES)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(N_BETAS)
        self.trans = np.asarray(self.trans, dtype=np.float64).reshape(2)
        self.global_rot = float(self.global_rot)
        self.scale = float(self.scale)

    def validate(self) -> None:
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("non-finite theta")
        if np.any(self.theta > np.pi) or np.any(self.theta <= -np.pi):
            raise ValueError("theta not wrapped to (-pi, pi]")
        if np.any(self.beta < 0.5) or np.any(self.beta > 2.0):
            raise ValueError("beta outside [0.5, 2.0]")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not np.all(np.isfinite(self.trans)):
            raise ValueError("non-finite trans")

    def as_vector(self) -> np.ndarray:
        """Concatenate to the 26-vector [theta, beta, rot, trans, scale]."""
        return np.concatenate(
            [self.theta, self.beta, [self.global_rot], self.trans, [self.scale]]
        )

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "PoseParams":
        v = np.asarray(v, dtype=np.float64).reshape(N_PARAMS)
        return cls(
            theta=v[:18].copy(),
            beta=v[18:22].copy(),
            global_rot=float(v[22]),
            trans=v[23:25].copy(),
            scale=float(v[25]),
        )

    def copy(self) -> "PoseParams":
        return PoseParams.from_vector(self.as_vector())


@dataclass
class KeypointSet:
    """Per-joint 2D positions plus visibility flags.

    ``vis`` holds IN_IMAGE, OUT_OF_IMAGE, or UNANNOTATED per joint; an
    unannotated joint carries no meaningful position (NaN by convention).
    """

    xy: np.ndarray   # (19, 2) float64
    vis: np.ndarray  # (19,) int8

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(N_JOINTS, 2)
        self.vis = np.asarray(self.vis, dtype=np.int8).reshape(N_JOINTS)

    def annotated(self) -> np.ndarray:
        return self.vis != UNANNOTATED

    def in_image(self) -> np.ndarray:
        return self.vis == IN_IMAGE

    def copy(self) -> "KeypointSet":
        return KeypointSet(self.xy.copy(), self.vis.copy())


def rot2d(angle):
    """2x2 rotation matrices for scalar or batched angles, shape (..., 2, 2)."""
    a = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(a), np.sin(a)
    out = np.empty(a.shape + (2, 2), dtype=np.float64)
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    return out


def _body_nodes_batch(theta: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Body-frame node positions before the rigid transform.

    theta (B, 18), beta (B, 4) -> nodes (B, 20, 2). The pelvis root sits
    at the body-frame origin.
    """
    B = theta.shape[0]
    nodes = np.zeros((B, N_NODES, 2), dtype=np.float64)
    cum = np.zeros((B, len(EDGES)), dtype=np.float64)
    for i in range(len(EDGES)):
        fp = int(_EDGE_FRAME_PARENT[i])
        ang = cum[:, fp] if fp >= 0 else np.zeros(B)
        ti = int(_EDGE_THETA[i])
        if ti >= 0:
            ang = ang + theta[:, ti]
        cum[:, i] = ang
        off = _EDGE_OFFSET[i]
        c, s = np.cos(ang), np.sin(ang)
        vec = np.stack([c * off[0] - s * off[1], s * off[0] + c * off[1]], axis=-1)
        vec *= beta[:, int(_EDGE_GROUP[i])][:, None]
        nodes[:, int(_EDGE_CHILD[i])] = nodes[:, int(_EDGE_BASE[i])] + vec
    return nodes


def nodes_batch(theta, beta, global_rot, trans, scale) -> np.ndarray:
    """World positions of all 20 skeleton nodes for a batch of figures."""
    q = _body_nodes_batch(theta, beta)
    R = rot2d(global_rot)  # (B, 2, 2)
    world = np.einsum("bij,bnj->bni", R, q) * scale[:, None, None]
    return world + trans[:, None, :]


def _params_arrays(params: PoseParams):
    return (
        params.theta[None],
        params.beta[None],
        np.array([params.global_rot]),
        params.trans[None],
        np.array([params.scale]),
    )


def node_positions(params: PoseParams) -> np.ndarray:
    """World positions of the 20 nodes (19 joints + virtual pelvis)."""
    return nodes_batch(*_params_arrays(params))[0]


def forward_kinematics(params: PoseParams) -> KeypointSet:
    """Map parameters to the 19 joint positions.

    All joints are flagged IN_IMAGE; the renderer re-flags them against
    frame bounds.
    """
    nodes = node_positions(params)
    return KeypointSet(nodes[:N_JOINTS].copy(), np.full(N_JOINTS, IN_IMAGE, np.int8))


# Interpolation fractions k/9 for the 10 points of each bone.
_BONE_FRACTIONS = np.arange(POINTS_PER_BONE, dtype=np.float64) / (POINTS_PER_BONE - 1)


def surface_points_from_nodes(nodes: np.ndarray) -> np.ndarray:
    """Surface points for node positions of shape (..., 20, 2)."""
    base = nodes[..., _EDGE_BASE[:N_BONES], :]    # (..., 14, 2)
    child = nodes[..., _EDGE_CHILD[:N_BONES], :]  # (..., 14, 2)
    f = _BONE_FRACTIONS[:, None]
    pts = base[..., :, None, :] * (1.0 - f) + child[..., :, None, :] * f
    return pts.reshape(nodes.shape[:-2] + (N_SURFACE_POINTS, 2))


def surface_points(params: PoseParams) -> np.ndarray:
    """140 points, 10 evenly spaced per bone, endpoints included."""
    return surface_points_from_nodes(node_positions(params))


def fold_surface_cotangent(scot: np.ndarray) -> np.ndarray:
    """Accumulate surface-point cotangents (B, 140, 2) onto the bone
    endpoint nodes, returning (B, 20, 2). Adjoint of the interpolation
    in surface_points_from_nodes."""
    B = scot.shape[0]
    scot = scot.reshape(B, N_BONES, POINTS_PER_BONE, 2)
    f = _BONE_FRACTIONS[None, None, :, None]
    base_share = (scot * (1.0 - f)).sum(axis=2)
    child_share = (scot * f).sum(axis=2)
    out = np.zeros((B, N_NODES, 2), dtype=np.float64)
    for b in range(N_BONES):
        out[:, _EDGE_BASE[b]] += base_share[:, b]
        out[:, _EDGE_CHILD[b]] += child_share[:, b]
    return out


def head_segment_length(kps: KeypointSet) -> float:
    """Distance from head top to neck; undefined without both annotations."""
    if kps.vis[JointId.NECK] == UNANNOTATED or kps.vis[JointId.HEAD_TOP] == UNANNOTATED:
        raise MissingJoint("head segment requires annotated neck and head top")
    d = kps.xy[JointId.HEAD_TOP] - kps.xy[JointId.NECK]
    return float(np.hypot(d[0], d[1]))


def node_jacobian_batch(theta, beta, global_rot, trans, scale):
    """Jacobian of world node positions with respect to the 26 parameters.

    Returns (nodes, jac) with nodes (B, 20, 2) and jac (B, 20, 2, 26),
    columns ordered [theta 0..17, beta 0..3, rot, tx, ty, scale].
    Derivatives of an angle rotate that bone's subtree about its base
    node; dRot/dphi = Rot(phi) @ K with K = [[0, -1], [1, 0]].
    """
    B = theta.shape[0]
    q = np.zeros((B, N_NODES, 2), dtype=np.float64)
    dq_dtheta = np.zeros((B, N_NODES, 2, N_ANGLES), dtype=np.float64)
    dq_dbeta = np.zeros((B, N_NODES, 2, N_BETAS), dtype=np.float64)
    cum = np.zeros((B, len(EDGES)), dtype=np.float64)

    for i in range(len(EDGES)):
        fp = int(_EDGE_FRAME_PARENT[i])
        ang = cum[:, fp] if fp >= 0 else np.zeros(B)
        ti = int(_EDGE_THETA[i])
        if ti >= 0:
            ang = ang + theta[:, ti]
        cum[:, i] = ang
        off = _EDGE_OFFSET[i]
        c, s = np.cos(ang), np.sin(ang)
        unit = np.stack([c * off[0] - s * off[1], s * off[0] + c * off[1]], axis=-1)
        g = int(_EDGE_GROUP[i])
        vec = unit * beta[:, g][:, None]
        child, parent = int(_EDGE_CHILD[i]), int(_EDGE_BASE[i])
        q[:, child] = q[:, parent] + vec
        dq_dtheta[:, child] = dq_dtheta[:, parent]
        # K @ vec rotates the segment 90 degrees: (x, y) -> (-y, x).
        kvec = np.stack([-vec[:, 1], vec[:, 0]], axis=-1)
        for t in _EDGE_THETA_SETS[i]:
            dq_dtheta[:, child, :, t] += kvec
        dq_dbeta[:, child] = dq_dbeta[:, parent]
        dq_dbeta[:, child, :, g] += unit

    R = rot2d(global_rot)                      # (B, 2, 2)
    sR = R * scale[:, None, None]
    nodes = np.einsum("bij,bnj->bni", sR, q) + trans[:, None, :]

    jac = np.zeros((B, N_NODES, 2, N_PARAMS), dtype=np.float64)
    jac[..., :N_ANGLES] = np.einsum("bij,bnjt->bnit", sR, dq_dtheta)
    jac[..., N_ANGLES:N_ANGLES + N_BETAS] = np.einsum("bij,bnjt->bnit", sR, dq_dbeta)
    kq = np.stack([-q[..., 1], q[..., 0]], axis=-1)
    jac[..., 22] = np.einsum("bij,bnj->bni", sR, kq)
    jac[:, :, 0, 23] = 1.0
    jac[:, :, 1, 24] = 1.0
    jac[..., 25] = np.einsum("bij,bnj->bni", R, q)
    return nodes, jac


def node_jacobian(params: PoseParams):
    """Single-figure wrapper around node_jacobian_batch."""
    nodes, jac = node_jacobian_batch(*_params_arrays(params))
    return nodes[0], jac[0]
