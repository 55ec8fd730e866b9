"""Synthetic consumer-video world: poses, rasterized frames, dataset pools.

Each frame is a 48x48 two-channel grid. Channel 0 is an anti-aliased
silhouette of the bone segments; channel 1 is a context cue pattern
fixed per pose archetype (plus light noise), giving a learnable signal
that correlates with the full-body pose even when most of the body is
cropped away.

Pool generation is a pure function of (config, seeds): every frame's
RNG stream is derived from (pool seed, frame index), so parallel and
serial generation agree bit-exactly.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import cropper
from .errors import ConfigError
from .kinematics import (
    IN_IMAGE,
    JointId,
    KeypointSet,
    N_ANGLES,
    OUT_OF_IMAGE,
    PoseParams,
    forward_kinematics,
    node_positions,
    surface_points_from_nodes,
    wrap_angle,
)

GRID_SIZE = 48

ARCHETYPES = ("standing", "sitting", "bending", "reaching")

# Mean relative angles per archetype (18 values each; see kinematics
# for the angle order). These are world-definition constants chosen for
# visual distinctness, not measurements.
#
# Angle order: spine, head, clav_l, clav_r, uarm_l, uarm_r, farm_l,
# farm_r, hip_l, hip_r, thigh_l, thigh_r, shin_l, shin_r, hand_l,
# hand_r, foot_l, foot_r.
ARCHETYPE_MEAN_ANGLES = {
    "standing": np.array(
        [0.00, 0.00, 0.00, 0.00, -0.15, 0.15, -1.70, 1.70,
         0.00, 0.00, -0.05, 0.05, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00]
    ),
    "sitting": np.array(
        [0.10, 0.05, 0.00, 0.00, -0.70, 0.50, -1.40, 1.20,
         0.00, 0.00, -1.55, -1.45, 1.50, 1.45, 0.20, 0.20, 0.10, 0.10]
    ),
    "bending": np.array(
        [1.20, 0.35, 0.00, 0.00, -1.70, -1.90, -0.70, -0.60,
         0.00, 0.00, -0.15, -0.05, 0.05, 0.00, -0.10, -0.10, 0.00, 0.00]
    ),
    "reaching": np.array(
        [-0.10, -0.15, 0.00, 0.00, 2.45, -2.45, -0.30, 0.30,
         0.00, 0.00, -0.05, 0.05, 0.00, 0.00, -0.30, 0.30, 0.00, 0.00]
    ),
}

ANGLE_SIGMA = 0.15       # Gaussian noise on each relative angle, radians
BETA_LOG_SIGMA = 0.12    # log-normal spread of the bone multipliers
GLOBAL_ROT_SIGMA = 0.08
CONTEXT_NOISE_SIGMA = 0.05

# Figure placement: the head-to-ankle span covers 60-180% of the grid.
# The head top usually anchors in the upper part of the frame so larger
# figures run off the bottom, but a fraction of frames anchor it above
# the frame entirely (torso- and hands-only shots). Spans below the
# grid size are drawn with density rising toward 1 (tiny fully-visible
# figures stay rare). The mixture is tuned so the pre-truncated pools
# show consumer-video visibility patterns: legs missing in roughly
# three frames out of five, heads missing in a quarter to a third,
# full bodies rare, wrists the most visible limb joints.
SPAN_RANGE_SMALL = (0.60, 1.00)
SPAN_RANGE_LARGE = (1.00, 1.80)
SPAN_SMALL_PROB = 0.45
HEAD_Y_RANGE = (0.08, 0.45)
HEAD_ABOVE_PROB = 0.25
HEAD_ABOVE_SPAN_MIN = 1.20
HEAD_Y_OUT_RANGE = (-0.35, -0.03)
HEAD_X_JITTER = 0.12

STROKE_WIDTH = 1.5       # silhouette falloff length in pixels

DEFAULT_POOL_SIZES = {
    "labeled-train": 4000,
    "labeled-val": 500,
    "unlabeled": 6000,
    "test": 1500,
}
POOL_ROLES = ("labeled-train", "labeled-val", "unlabeled", "test")


@dataclass
class FrameMeta:
    pool: str = ""
    index: int = -1
    archetype: str = ""
    # Crop lineage: (x0, y0, w, h) rectangles in the source frame each
    # crop was taken from, outermost first.
    lineage: list = field(default_factory=list)
    pseudo: bool = False
    category: str | None = None  # crop category drawn for this frame, if any


@dataclass
class Frame:
    grid: np.ndarray            # (2, G, G) float64 in [0, 1]
    keypoints: KeypointSet
    truth: PoseParams | None
    meta: FrameMeta

    def copy(self) -> "Frame":
        return Frame(
            grid=self.grid.copy(),
            keypoints=self.keypoints.copy(),
            truth=None if self.truth is None else self.truth.copy(),
            meta=replace(self.meta, lineage=list(self.meta.lineage)),
        )


@dataclass
class DatasetPool:
    frames: list
    role: str
    seed: int

    def __len__(self) -> int:
        return len(self.frames)


def sample_pose(archetype: str, rng: np.random.Generator,
                angle_sigma: float = ANGLE_SIGMA) -> PoseParams:
    """Draw a pose around the archetype's mean-angle table.

    The figure is placed so its head-to-ankle span is 60-180% of the
    grid and the head top lands in the upper part of the frame.
    """
    if archetype not in ARCHETYPE_MEAN_ANGLES:
        raise ValueError(f"unknown archetype {archetype!r}")
    mean = ARCHETYPE_MEAN_ANGLES[archetype]
    theta = wrap_angle(mean + rng.normal(0.0, angle_sigma, N_ANGLES))
    beta = np.clip(np.exp(rng.normal(0.0, BETA_LOG_SIGMA, 4)), 0.5, 2.0)
    global_rot = float(rng.normal(0.0, GLOBAL_ROT_SIGMA))

    head_above = rng.uniform() < HEAD_ABOVE_PROB
    if head_above:
        # close-up framing: a large figure with the head off the top
        span_frac = rng.uniform(HEAD_ABOVE_SPAN_MIN, SPAN_RANGE_LARGE[1])
        head_y = GRID_SIZE * rng.uniform(*HEAD_Y_OUT_RANGE)
    else:
        if rng.uniform() < SPAN_SMALL_PROB:
            lo, hi = SPAN_RANGE_SMALL
            span_frac = lo + (hi - lo) * np.sqrt(rng.uniform())
        else:
            span_frac = rng.uniform(*SPAN_RANGE_LARGE)
        head_y = GRID_SIZE * rng.uniform(*HEAD_Y_RANGE)
    head_x = GRID_SIZE * (0.5 + rng.uniform(-HEAD_X_JITTER, HEAD_X_JITTER))

    unit = PoseParams(theta=theta, beta=beta, global_rot=global_rot,
                      trans=np.zeros(2), scale=1.0)
    nodes = node_positions(unit)
    head = nodes[JointId.HEAD_TOP]
    ankle_low = nodes[JointId.LEFT_ANKLE: JointId.RIGHT_ANKLE + 1]
    ankle = ankle_low[np.argmax(ankle_low[:, 1])]
    span0 = float(np.hypot(*(ankle - head)))
    scale = span_frac * GRID_SIZE / span0
    trans = np.array([head_x, head_y]) - scale * head
    return PoseParams(theta=theta, beta=beta, global_rot=global_rot,
                      trans=trans, scale=scale)


def _segment_distance_field(grid_xy: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each grid point to segment ab."""
    ab = b - a
    denom = float(ab @ ab)
    rel = grid_xy - a
    if denom < 1e-12:
        return np.hypot(rel[..., 0], rel[..., 1])
    t = np.clip((rel @ ab) / denom, 0.0, 1.0)
    proj = a + t[..., None] * ab
    d = grid_xy - proj
    return np.hypot(d[..., 0], d[..., 1])


_GRID_XY = np.stack(
    np.meshgrid(np.arange(GRID_SIZE, dtype=np.float64),
                np.arange(GRID_SIZE, dtype=np.float64), indexing="xy"),
    axis=-1,
)  # (G, G, 2) sample positions, [y, x] indexed as [row, col]


def _silhouette(params: PoseParams) -> np.ndarray:
    nodes = node_positions(params)
    pts = surface_points_from_nodes(nodes).reshape(14, 10, 2)
    field_img = np.zeros((GRID_SIZE, GRID_SIZE), dtype=np.float64)
    for b in range(14):
        d = _segment_distance_field(_GRID_XY, pts[b, 0], pts[b, -1])
        np.maximum(field_img, np.clip(1.25 - d / STROKE_WIDTH, 0.0, 1.0), out=field_img)
    return field_img


_ROWS = np.arange(GRID_SIZE, dtype=np.float64)[:, None]
_COLS = np.arange(GRID_SIZE, dtype=np.float64)[None, :]

_CONTEXT_PATTERNS = {
    # One fixed pattern per archetype; gradients and bands keep some
    # signal inside any crop window.
    "standing": np.broadcast_to(_COLS / (GRID_SIZE - 1), (GRID_SIZE, GRID_SIZE)),
    "sitting": np.broadcast_to(
        np.exp(-0.5 * ((_ROWS - 0.62 * GRID_SIZE) / (0.07 * GRID_SIZE)) ** 2),
        (GRID_SIZE, GRID_SIZE),
    ),
    "bending": np.broadcast_to(_ROWS / (GRID_SIZE - 1), (GRID_SIZE, GRID_SIZE)),
    "reaching": np.broadcast_to(
        np.exp(-0.5 * ((_ROWS - 0.18 * GRID_SIZE) / (0.07 * GRID_SIZE)) ** 2),
        (GRID_SIZE, GRID_SIZE),
    ),
}


def flag_keypoints(kps: KeypointSet, size: int = GRID_SIZE) -> KeypointSet:
    """Re-flag annotated joints as in- or out-of-image against [0, size)^2."""
    out = kps.copy()
    ann = out.annotated()
    inside = (
        (out.xy[:, 0] >= 0) & (out.xy[:, 0] < size)
        & (out.xy[:, 1] >= 0) & (out.xy[:, 1] < size)
    )
    out.vis[ann & inside] = IN_IMAGE
    out.vis[ann & ~inside] = OUT_OF_IMAGE
    return out


def render(params: PoseParams, archetype: str,
           rng: np.random.Generator | None = None) -> Frame:
    """Rasterize a figure plus its archetype's context cue."""
    sil = _silhouette(params)
    ctx = _CONTEXT_PATTERNS[archetype].copy()
    if rng is not None:
        ctx += rng.normal(0.0, CONTEXT_NOISE_SIGMA, ctx.shape)
    grid = np.stack([sil, np.clip(ctx, 0.0, 1.0)]).astype(np.float32)
    kps = flag_keypoints(forward_kinematics(params))
    return Frame(grid=grid, keypoints=kps, truth=params.copy(),
                 meta=FrameMeta(archetype=archetype))


def frame_rng(pool_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(pool_seed), int(index)]))


def _pretruncate(frame: Frame, rng: np.random.Generator, probs=None,
                 max_tries: int = 8) -> Frame:
    """Apply one consumer-video-style crop draw; keep at least one
    in-image joint, falling back to the uncropped frame."""
    for _ in range(max_tries):
        cat = cropper.sample_category(rng, probs)
        frame.meta.category = cat.value
        if cat == cropper.CropCategory.UNCROPPED:
            return frame
        spec = cropper.resolve_crop(cat, frame.keypoints, GRID_SIZE, rng)
        if not spec.applied:
            return frame
        cropped = cropper.apply_crop(frame, spec)
        if cropped.keypoints.in_image().any():
            return cropped
    return frame


def _make_frame(role: str, pool_seed: int, index: int, truncate: bool,
                probs=None) -> Frame:
    rng = frame_rng(pool_seed, index)
    archetype = ARCHETYPES[rng.integers(len(ARCHETYPES))]
    params = sample_pose(archetype, rng)
    frame = render(params, archetype, rng)
    frame.meta.pool = role
    frame.meta.index = index
    if truncate:
        frame = _pretruncate(frame, rng, probs)
    if role in ("unlabeled", "test"):
        frame.truth = None
    return frame


def generate_pools(config) -> dict:
    """Build the four pools.

    ``config`` needs ``pool_sizes`` (role -> count) and ``master_seed``.
    Labeled pools are rendered uncropped; unlabeled and test pools get
    one crop-category draw each so their visibility statistics resemble
    consumer video.
    """
    sizes = dict(config.pool_sizes)
    for role in POOL_ROLES:
        n = int(sizes.get(role, 0))
        if n < 1:
            raise ConfigError(f"pool size for {role} must be >= 1, got {n}")
    probs = getattr(config, "crop_proportions", None)
    pools = {}
    for k, role in enumerate(POOL_ROLES):
        pool_seed = derive_seed(config.master_seed, "pool", k)
        truncate = role in ("unlabeled", "test")
        frames = [
            _make_frame(role, pool_seed, i, truncate, probs)
            for i in range(int(sizes[role]))
        ]
        pools[role] = DatasetPool(frames=frames, role=role, seed=pool_seed)
    return pools


def derive_seed(master: int, *tags) -> int:
    """Stable sub-seed from the master seed and a tag path."""
    parts = [int(master)]
    for t in tags:
        if isinstance(t, str):
            parts.append(zlib.crc32(t.encode("utf-8")))
        else:
            parts.append(int(t))
    return int(np.random.SeedSequence(parts).generate_state(1, np.uint32)[0])
