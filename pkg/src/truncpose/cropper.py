"""Keypoint-driven crop taxonomy and coordinate transforms.

Six categories: above-hip, knee-to-shoulder, above-shoulders, one-arm,
one-hand, and uncropped, sampled with fixed consumer-video proportions.
Category rules resolve a rectangle from keypoints; two guards suppress
a crop (``applied = False``):

* a keypoint the rule reads is out of the image (the frame is presumed
  to be cropped already), or
* a resolved rectangle side is under 30 pixels.

Rectangles use continuous (float) pixel bounds. A crop maps point
(x, y) to ((x - x0) * G / w, (y - y0) * G / h) and the grid is
bilinearly resampled with the same mapping, so keypoint math and pixel
content stay aligned. Joints falling outside the rectangle are
re-flagged out-of-image but keep their transformed positions; they
become supervision targets rather than disappearing.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .errors import ConfigError, InvalidSpec, MissingJoint
from .kinematics import (
    IN_IMAGE,
    JointId,
    KeypointSet,
    N_JOINTS,
    OUT_OF_IMAGE,
    PoseParams,
    UNANNOTATED,
    forward_kinematics,
)


class CropCategory(Enum):
    ABOVE_HIP = "above-hip"
    KNEE_TO_SHOULDER = "knee-to-shoulder"
    ABOVE_SHOULDERS = "above-shoulders"
    ONE_ARM = "one-arm"
    ONE_HAND = "one-hand"
    UNCROPPED = "uncropped"


# Sampling proportions; they sum to 1.00 exactly.
CATEGORY_ORDER = (
    CropCategory.ABOVE_HIP,
    CropCategory.KNEE_TO_SHOULDER,
    CropCategory.ABOVE_SHOULDERS,
    CropCategory.ONE_ARM,
    CropCategory.ONE_HAND,
    CropCategory.UNCROPPED,
)
CATEGORY_PROBS = (0.29, 0.10, 0.16, 0.09, 0.13, 0.23)

MIN_CROP_SIDE = 30.0
LIMB_PAD = 0.15  # padding fraction per side for arm/hand boxes

GUARD_KEYPOINT_OUT = "keypoint-out"
GUARD_TOO_SMALL = "too-small"


@dataclass
class CropSpec:
    category: CropCategory
    rect: tuple | None          # (x0, y0, w, h) float pixels, or None
    applied: bool
    guard: str | None = None    # which guard suppressed the crop, if any
    side: str | None = None     # chosen side for one-arm / one-hand


def sample_category(rng: np.random.Generator, probs=None) -> CropCategory:
    """Draw a category; `probs` overrides the default proportions."""
    i = rng.choice(len(CATEGORY_ORDER), p=CATEGORY_PROBS if probs is None else probs)
    return CATEGORY_ORDER[int(i)]


_SIDE_JOINTS = {
    "left": (JointId.LEFT_ELBOW, JointId.LEFT_WRIST),
    "right": (JointId.RIGHT_ELBOW, JointId.RIGHT_WRIST),
}


def _require(kps: KeypointSet, joints) -> None:
    for j in joints:
        if kps.vis[j] == UNANNOTATED:
            raise MissingJoint(f"crop rule needs annotated {JointId(j).name}")


def _suppressed(category, guard, side=None) -> CropSpec:
    return CropSpec(category=category, rect=None, applied=False,
                    guard=guard, side=side)


def _limb_box(points: np.ndarray, frame_size: float) -> tuple:
    """Tight box around the points, padded 15% per side, then widened
    to the 30 px minimum and shifted back inside the frame."""
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    dims = hi - lo
    lo = lo - LIMB_PAD * dims
    hi = hi + LIMB_PAD * dims
    out = []
    for k in range(2):
        a, b = lo[k], hi[k]
        if b - a < MIN_CROP_SIDE:
            c = 0.5 * (a + b)
            a, b = c - MIN_CROP_SIDE / 2, c + MIN_CROP_SIDE / 2
        if a < 0:
            b -= a
            a = 0.0
        if b > frame_size:
            a -= b - frame_size
            b = frame_size
        a = max(a, 0.0)
        out.append((a, b))
    (x0, x1), (y0, y1) = out
    return (x0, y0, x1 - x0, y1 - y0)


def resolve_crop(category: CropCategory, kps: KeypointSet, frame_size: int,
                 rng: np.random.Generator | None = None) -> CropSpec:
    """Resolve a category rule into a rectangle, or a suppressed spec.

    ``rng`` is only consulted for the one-arm / one-hand side choice.
    Raises MissingJoint when a joint the rule reads is unannotated.
    """
    G = float(frame_size)
    if category == CropCategory.UNCROPPED:
        return CropSpec(category=category, rect=(0.0, 0.0, G, G), applied=True)

    if category == CropCategory.ABOVE_HIP:
        used = [JointId.LEFT_HIP, JointId.RIGHT_HIP]
        _require(kps, used)
        if any(kps.vis[j] == OUT_OF_IMAGE for j in used):
            return _suppressed(category, GUARD_KEYPOINT_OUT)
        bottom = float(max(kps.xy[j][1] for j in used))  # lower hip
        rect = (0.0, 0.0, G, bottom)

    elif category == CropCategory.KNEE_TO_SHOULDER:
        used = [JointId.LEFT_SHOULDER, JointId.RIGHT_SHOULDER,
                JointId.LEFT_KNEE, JointId.RIGHT_KNEE]
        _require(kps, used)
        if any(kps.vis[j] == OUT_OF_IMAGE for j in used):
            return _suppressed(category, GUARD_KEYPOINT_OUT)
        top = float(max(kps.xy[JointId.LEFT_SHOULDER][1],
                        kps.xy[JointId.RIGHT_SHOULDER][1]))  # bottom of shoulders
        bottom = float(min(kps.xy[JointId.LEFT_KNEE][1],
                           kps.xy[JointId.RIGHT_KNEE][1]))   # higher knee
        rect = (0.0, top, G, bottom - top)

    elif category == CropCategory.ABOVE_SHOULDERS:
        used = [JointId.LEFT_SHOULDER, JointId.RIGHT_SHOULDER, JointId.NECK]
        _require(kps, used)
        if any(kps.vis[j] == OUT_OF_IMAGE for j in used):
            return _suppressed(category, GUARD_KEYPOINT_OUT)
        bottom = float(max(kps.xy[j][1] for j in used))  # lower of shoulders/neck
        rect = (0.0, 0.0, G, bottom)

    elif category in (CropCategory.ONE_ARM, CropCategory.ONE_HAND):
        eligible = [s for s, (_e, w) in _SIDE_JOINTS.items()
                    if kps.vis[w] != UNANNOTATED]
        if not eligible:
            raise MissingJoint("no annotated wrist for a limb crop")
        if len(eligible) == 1 or rng is None:
            side = eligible[0]
        else:
            side = eligible[int(rng.integers(len(eligible)))]
        elbow, wrist = _SIDE_JOINTS[side]
        if category == CropCategory.ONE_ARM:
            used = [elbow, wrist]
        else:
            used = [wrist]
        _require(kps, used)
        if any(kps.vis[j] == OUT_OF_IMAGE for j in used):
            return _suppressed(category, GUARD_KEYPOINT_OUT, side)
        rect = _limb_box(kps.xy[[int(j) for j in used]], G)
        x0, y0, w, h = rect
        if w < MIN_CROP_SIDE or h < MIN_CROP_SIDE:
            return _suppressed(category, GUARD_TOO_SMALL, side)
        return CropSpec(category=category, rect=rect, applied=True, side=side)

    else:  # pragma: no cover - exhaustive enum
        raise ValueError(f"unhandled category {category}")

    x0, y0, w, h = rect
    if w < MIN_CROP_SIDE or h < MIN_CROP_SIDE:
        return _suppressed(category, GUARD_TOO_SMALL)
    return CropSpec(category=category, rect=rect, applied=True)


def _bilinear_resample(channel: np.ndarray, rect: tuple, out_size: int) -> np.ndarray:
    """Sample `channel` on the out_size x out_size lattice of the rect,
    with edge clamping. The identity rect reproduces the input exactly."""
    x0, y0, w, h = rect
    src = channel.shape[0]
    xs = x0 + np.arange(out_size) * (w / out_size)
    ys = y0 + np.arange(out_size) * (h / out_size)
    ix = np.clip(np.floor(xs).astype(np.intp), 0, src - 1)
    iy = np.clip(np.floor(ys).astype(np.intp), 0, src - 1)
    fx = np.clip(xs - ix, 0.0, 1.0)
    fy = np.clip(ys - iy, 0.0, 1.0)
    ix1 = np.minimum(ix + 1, src - 1)
    iy1 = np.minimum(iy + 1, src - 1)
    c00 = channel[np.ix_(iy, ix)]
    c01 = channel[np.ix_(iy, ix1)]
    c10 = channel[np.ix_(iy1, ix)]
    c11 = channel[np.ix_(iy1, ix1)]
    top = c00 * (1 - fx)[None, :] + c01 * fx[None, :]
    bot = c10 * (1 - fx)[None, :] + c11 * fx[None, :]
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return out.astype(channel.dtype, copy=False)


def transform_points(xy: np.ndarray, rect: tuple, out_size: int) -> np.ndarray:
    """Map source-frame points into crop coordinates."""
    x0, y0, w, h = rect
    out = np.empty_like(xy)
    out[..., 0] = (xy[..., 0] - x0) * (out_size / w)
    out[..., 1] = (xy[..., 1] - y0) * (out_size / h)
    return out


def invert_points(xy: np.ndarray, rect: tuple, out_size: int) -> np.ndarray:
    """Map crop-coordinate points back to the source frame."""
    x0, y0, w, h = rect
    out = np.empty_like(xy)
    out[..., 0] = x0 + xy[..., 0] * (w / out_size)
    out[..., 1] = y0 + xy[..., 1] * (h / out_size)
    return out


def refit_trans_scale(params: PoseParams, rect: tuple, out_size: int) -> PoseParams:
    """Carry pose parameters through a crop.

    Angles and bone multipliers are kept; translation and scale are
    re-fit by least squares so the projected full-body keypoints align
    with the crop coordinates. For an isotropic rect (w == h) the fit is
    exact.
    """
    kps = forward_kinematics(params).xy
    target = transform_points(kps, rect, out_size)
    # Body-frame directions u with kps = scale * u + trans.
    u = (kps - params.trans) / params.scale
    ub = u - u.mean(axis=0)
    tb = target - target.mean(axis=0)
    denom = float((ub * ub).sum())
    scale = float((ub * tb).sum() / denom)
    trans = target.mean(axis=0) - scale * u.mean(axis=0)
    return PoseParams(theta=params.theta.copy(), beta=params.beta.copy(),
                      global_rot=params.global_rot, trans=trans, scale=scale)


def apply_crop(frame, spec: CropSpec):
    """Crop a frame, resample to the grid size, and transform keypoints.

    Annotated joints never gain or lose annotation; those falling
    outside the rectangle are re-flagged out-of-image with their
    transformed positions kept. Present truth parameters are carried
    through with re-fit translation/scale.
    """
    if not spec.applied or spec.rect is None:
        raise InvalidSpec(f"crop spec not applied (guard={spec.guard})")
    G = frame.grid.shape[-1]
    x0, y0, w, h = spec.rect
    if x0 < 0 or y0 < 0 or x0 + w > G + 1e-9 or y0 + h > G + 1e-9:
        raise InvalidSpec("crop rectangle exceeds source bounds")

    if spec.rect == (0.0, 0.0, float(G), float(G)):
        # Identity crop: bit-exact copy, only the lineage grows.
        new = frame.copy()
        new.meta.lineage.append(tuple(spec.rect))
        return new

    grid = np.stack([_bilinear_resample(frame.grid[c], spec.rect, G)
                     for c in range(frame.grid.shape[0])])
    kps = frame.keypoints.copy()
    ann = kps.annotated()
    kps.xy[ann] = transform_points(kps.xy[ann], spec.rect, G)
    inside = (
        (kps.xy[:, 0] >= 0) & (kps.xy[:, 0] < G)
        & (kps.xy[:, 1] >= 0) & (kps.xy[:, 1] < G)
    )
    kps.vis[ann & inside] = IN_IMAGE
    kps.vis[ann & ~inside] = OUT_OF_IMAGE

    truth = frame.truth
    if truth is not None:
        truth = refit_trans_scale(truth, spec.rect, G)

    meta = replace(frame.meta, lineage=list(frame.meta.lineage) + [tuple(spec.rect)])
    return type(frame)(grid=grid, keypoints=kps, truth=truth, meta=meta)


def identity_spec(frame_size: int) -> CropSpec:
    G = float(frame_size)
    return CropSpec(CropCategory.UNCROPPED, (0.0, 0.0, G, G), applied=True)


def _candidate_visibility(frame, rng: np.random.Generator):
    """In-image mask per category for one frame; suppressed categories
    fall back to the frame's own flags."""
    G = frame.grid.shape[-1]
    base = frame.keypoints.in_image().astype(np.float64)
    rows = np.empty((len(CATEGORY_ORDER), N_JOINTS), dtype=np.float64)
    specs = []
    for k, cat in enumerate(CATEGORY_ORDER):
        if cat == CropCategory.UNCROPPED:
            rows[k] = base
            specs.append(identity_spec(G))
            continue
        try:
            spec = resolve_crop(cat, frame.keypoints, G, rng)
        except MissingJoint:
            spec = _suppressed(cat, GUARD_KEYPOINT_OUT)
        specs.append(spec)
        if not spec.applied:
            rows[k] = base
            continue
        xy = transform_points(frame.keypoints.xy, spec.rect, G)
        inside = (
            (xy[:, 0] >= 0) & (xy[:, 0] < G) & (xy[:, 1] >= 0) & (xy[:, 1] < G)
        )
        rows[k] = ((frame.keypoints.vis == IN_IMAGE) & inside).astype(np.float64)
    return rows, specs


def _optimize_mix(per_frame: np.ndarray, target: np.ndarray,
                  iters: int = 40, grid: int = 21) -> np.ndarray:
    """Coordinate descent on category mix weights minimizing the L1
    distance between expected and target per-joint proportions."""
    means = per_frame.mean(axis=0)  # (6, 19)
    w = np.full(len(CATEGORY_ORDER), 1.0 / len(CATEGORY_ORDER))

    def objective(weights):
        return float(np.abs(weights @ means - target).sum())

    best = objective(w)
    for _ in range(iters):
        improved = False
        for c in range(len(w)):
            for v in np.linspace(0.0, 1.0, grid):
                trial = w.copy()
                rest = 1.0 - trial[c]
                trial[c] = v
                if rest > 1e-12:
                    others = np.delete(np.arange(len(w)), c)
                    trial[others] *= (1.0 - v) / rest
                else:
                    trial[:] = (1.0 - v) / (len(w) - 1)
                    trial[c] = v
                score = objective(trial)
                if score < best - 1e-12:
                    best = score
                    w = trial
                    improved = True
        if not improved:
            break
    return w / w.sum()


def build_matched_test_crops(test, target_stats, rng: np.random.Generator,
                             force_mix=None, candidates_per_frame: int = 3):
    """Crop head-visible frames so aggregate visibility matches targets.

    ``target_stats`` is a (19,) array of per-joint in-image proportions.
    Each frame gets candidate categories drawn from an optimized mix;
    the candidate minimizing the running L1 distance to the target wins.
    Returns (cropped pool, achieved stats, mix weights).
    """
    target = np.asarray(target_stats, dtype=np.float64)
    if target.shape != (N_JOINTS,):
        raise ConfigError(f"target stats must cover all {N_JOINTS} joints")
    frames = list(test.frames)
    per_frame = np.empty((len(frames), len(CATEGORY_ORDER), N_JOINTS))
    all_specs = []
    for i, f in enumerate(frames):
        side_rng = np.random.default_rng(
            np.random.SeedSequence([int(test.seed), 7001, i]))
        rows, specs = _candidate_visibility(f, side_rng)
        per_frame[i] = rows
        all_specs.append(specs)

    if force_mix is not None:
        w = np.asarray(force_mix, dtype=np.float64)
        w = w / w.sum()
    else:
        w = _optimize_mix(per_frame, target)

    running = np.zeros(N_JOINTS)
    out_frames = []
    from .synth import DatasetPool  # deferred to avoid an import cycle

    for i, f in enumerate(frames):
        if w.max() > 1.0 - 1e-12:
            draws = [int(np.argmax(w))] * candidates_per_frame
        else:
            draws = list(rng.choice(len(CATEGORY_ORDER), size=candidates_per_frame, p=w))
        best_k, best_score = None, None
        for k in dict.fromkeys(int(d) for d in draws):
            score = float(np.abs((running + per_frame[i, k]) / (i + 1) - target).sum())
            if best_score is None or score < best_score - 1e-15:
                best_k, best_score = k, score
        running += per_frame[i, best_k]
        spec = all_specs[i][best_k]
        if not spec.applied:
            spec = identity_spec(f.grid.shape[-1])
        new = apply_crop(f, spec)
        new.meta.category = spec.category.value
        out_frames.append(new)

    pool = DatasetPool(frames=out_frames, role="test", seed=test.seed)
    from .evaluate import visibility_stats  # same code path as reporting

    achieved = visibility_stats(pool)
    return pool, achieved, w
