"""Truncation-aware keypoint evaluation.

PCK at 0.5: a predicted joint is correct when it lies within half the
head-segment length of its annotation. The head segment is always
measured on the original (pre-crop) annotation, so cropped views keep
the thresholds of the frames they came from. Per-frame fractions are
averaged over frames; frames whose split holds zero joints are excluded
from that split's average rather than imputed.

Splits: ``in`` scores joints inside the evaluated frame, ``out`` the
joints pushed outside by cropping, ``all`` their union.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyEvaluation, MissingJoint
from .kinematics import (
    IN_IMAGE,
    JointId,
    KeypointSet,
    N_JOINTS,
    OUT_OF_IMAGE,
    UNANNOTATED,
    head_segment_length,
)

PCK_THRESHOLD = 0.5

# Report row order: legs outside-in, arms, then head joints.
TABLE_ROW_ORDER = (
    JointId.RIGHT_ANKLE, JointId.RIGHT_KNEE, JointId.RIGHT_HIP,
    JointId.LEFT_HIP, JointId.LEFT_KNEE, JointId.LEFT_ANKLE,
    JointId.RIGHT_WRIST, JointId.RIGHT_ELBOW, JointId.RIGHT_SHOULDER,
    JointId.LEFT_SHOULDER, JointId.LEFT_ELBOW, JointId.LEFT_WRIST,
    JointId.NECK, JointId.HEAD_TOP, JointId.NOSE,
    JointId.LEFT_EYE, JointId.RIGHT_EYE, JointId.LEFT_EAR, JointId.RIGHT_EAR,
)
TABLE_ROW_LABELS = {
    JointId.RIGHT_ANKLE: "R Ank", JointId.RIGHT_KNEE: "R Kne",
    JointId.RIGHT_HIP: "R Hip", JointId.LEFT_HIP: "L Hip",
    JointId.LEFT_KNEE: "L Kne", JointId.LEFT_ANKLE: "L Ank",
    JointId.RIGHT_WRIST: "R Wri", JointId.RIGHT_ELBOW: "R Elb",
    JointId.RIGHT_SHOULDER: "R Sho", JointId.LEFT_SHOULDER: "L Sho",
    JointId.LEFT_ELBOW: "L Elb", JointId.LEFT_WRIST: "L Wri",
    JointId.NECK: "Neck", JointId.HEAD_TOP: "Head Top",
    JointId.NOSE: "Nose", JointId.LEFT_EYE: "L Eye",
    JointId.RIGHT_EYE: "R Eye", JointId.LEFT_EAR: "L Ear",
    JointId.RIGHT_EAR: "R Ear",
}


def pck_frame(pred: KeypointSet, truth: KeypointSet, split: str = "all"):
    """Fraction of correct joints in the split, or None when the split
    holds no annotated joints.

    Truth flags say where each annotated joint sits relative to the
    evaluated frame; truth positions and the head segment live in the
    original annotation's coordinates, as do the predictions.
    """
    if split not in ("in", "out", "all"):
        raise ValueError(f"unknown split {split!r}")
    threshold = PCK_THRESHOLD * head_segment_length(truth)
    if split == "in":
        mask = truth.vis == IN_IMAGE
    elif split == "out":
        mask = truth.vis == OUT_OF_IMAGE
    else:
        mask = truth.vis != UNANNOTATED
    if not mask.any():
        return None
    d = pred.xy[mask] - truth.xy[mask]
    dist = np.hypot(d[:, 0], d[:, 1])
    return float((dist <= threshold).mean())


def pck_pool(preds, truths, split: str = "all") -> float:
    """Percentage over a pool: mean of defined per-frame fractions times
    100. Frames with an undefined fraction are excluded entirely."""
    if len(preds) != len(truths):
        raise ConfigError("prediction and truth sequences differ in length")
    vals = []
    for p, t in zip(preds, truths):
        f = pck_frame(p, t, split)
        if f is not None:
            vals.append(f)
    if not vals:
        raise EmptyEvaluation(f"no frame defines PCK for split {split!r}")
    return 100.0 * float(np.mean(vals))


@dataclass
class AnnotationSet:
    """Three independent annotation replicas of one frame."""

    replicas: tuple          # three KeypointSets
    image_size: int

    def __post_init__(self):
        if len(self.replicas) != 3:
            raise ValueError("an annotation set holds exactly 3 replicas")


AGGREGATE_NO_JOINTS = "no-joints"
AGGREGATE_AMBIGUOUS = "ambiguous"

DISAGREEMENT_FRACTION = 0.10


def aggregate_annotations(ann: AnnotationSet):
    """Merge three annotation replicas.

    Outcomes: a merged KeypointSet; "no-joints" when two or more
    replicas saw nothing; "ambiguous" when all three joint counts
    differ (the frame is dropped). Otherwise the median joint count is
    kept, positions are averaged across the replicas that annotated
    them, and any joint whose replica positions disagree by more than
    10% of the image size is dropped.
    """
    counts = [int(r.annotated().sum()) for r in ann.replicas]
    if sum(c == 0 for c in counts) >= 2:
        return AGGREGATE_NO_JOINTS
    if len(set(counts)) == 3:
        return AGGREGATE_AMBIGUOUS
    median_count = int(np.median(counts))

    support = np.zeros(N_JOINTS, dtype=int)
    for r in ann.replicas:
        support += r.annotated().astype(int)

    # Joints annotated by a majority can be averaged; keep at most the
    # median count, preferring stronger support, then lower joint ids.
    candidates = [j for j in range(N_JOINTS) if support[j] >= 2]
    candidates.sort(key=lambda j: (-support[j], j))
    keep = candidates[:median_count]

    limit = DISAGREEMENT_FRACTION * ann.image_size
    xy = np.full((N_JOINTS, 2), np.nan)
    vis = np.full(N_JOINTS, UNANNOTATED, np.int8)
    for j in keep:
        pts = np.stack([r.xy[j] for r in ann.replicas if r.vis[j] != UNANNOTATED])
        span = 0.0
        for a in range(len(pts)):
            for b in range(a + 1, len(pts)):
                span = max(span, float(np.hypot(*(pts[a] - pts[b]))))
        if span > limit:
            continue
        xy[j] = pts.mean(axis=0)
        vis[j] = IN_IMAGE
    return KeypointSet(xy, vis)


@dataclass
class VisibilityStats:
    proportions: np.ndarray   # (19,) in-image fraction per joint
    mean_keypoints: float     # mean in-image joints per frame
    count: int

    def row(self, joint: JointId) -> float:
        return float(self.proportions[int(joint)])


def visibility_stats(pool) -> VisibilityStats:
    """Per-joint in-image proportions plus mean keypoints per frame."""
    frames = pool.frames if hasattr(pool, "frames") else list(pool)
    if not frames:
        raise ConfigError("cannot compute visibility statistics of an empty pool")
    inimg = np.stack([f.keypoints.in_image() for f in frames]).astype(np.float64)
    return VisibilityStats(
        proportions=inimg.mean(axis=0),
        mean_keypoints=float(inimg.sum(axis=1).mean()),
        count=len(frames),
    )


def visibility_table(columns: dict, title: str = "") -> str:
    """Aligned text table, one row per joint in the published order plus
    a mean-keypoints row; ``columns`` maps header -> VisibilityStats."""
    heads = list(columns)
    width = max(len(h) for h in heads + ["Head Top"]) + 2
    lines = []
    if title:
        lines.append(title)
    lines.append("Joint".ljust(10) + "".join(h.rjust(width) for h in heads))
    for j in TABLE_ROW_ORDER:
        row = TABLE_ROW_LABELS[j].ljust(10)
        row += "".join(f"{columns[h].row(j):.2f}".rjust(width) for h in heads)
        lines.append(row)
    row = "Keypoints".ljust(10)
    row += "".join(f"{columns[h].mean_keypoints:.1f}".rjust(width) for h in heads)
    lines.append(row)
    return "\n".join(lines) + "\n"


@dataclass
class EvalReport:
    method: str
    pools: dict                      # pool fingerprints for comparability
    uncropped_total: float | None = None
    cropped_total: float | None = None
    cropped_in: float | None = None
    cropped_out: float | None = None
    excluded_head_not_visible: int = 0
    excluded_empty_split: dict = field(default_factory=dict)
    per_frame_total: list = field(default_factory=list)
    visibility: dict = field(default_factory=dict)

    def metrics(self) -> dict:
        return {
            "cropped_total": self.cropped_total,
            "cropped_in": self.cropped_in,
            "cropped_out": self.cropped_out,
            "uncropped_total": self.uncropped_total,
        }

    def to_dict(self) -> dict:
        return {
            "format": "truncpose-v1",
            "kind": "eval-report",
            "method": self.method,
            "pools": self.pools,
            "metrics": self.metrics(),
            "excluded": {
                "head_not_visible": self.excluded_head_not_visible,
                "empty_split": self.excluded_empty_split,
            },
            "per_frame_total": self.per_frame_total,
            "visibility": self.visibility,
        }


METRIC_COLUMNS = (
    ("cropped_total", "Cropped Total"),
    ("cropped_in", "Cropped In"),
    ("cropped_out", "Cropped Out"),
    ("uncropped_total", "Uncr. Total"),
)


def compare_methods(reports) -> dict:
    """Comparison table across methods over identical pools.

    Returns {"rows": [...], "csv": str, "text": str}; the best value per
    column is marked with '*' (ties all marked).
    """
    if len(reports) < 2:
        raise ConfigError("need at least two reports to compare")
    pools0 = reports[0].pools
    for r in reports[1:]:
        if r.pools != pools0:
            raise ConfigError("reports evaluate different pools")

    best = {}
    for key, _label in METRIC_COLUMNS:
        vals = [r.metrics()[key] for r in reports if r.metrics()[key] is not None]
        best[key] = max(vals) if vals else None

    rows = []
    for r in reports:
        row = {"method": r.method}
        for key, _label in METRIC_COLUMNS:
            v = r.metrics()[key]
            row[key] = v
            row[key + "_best"] = v is not None and best[key] is not None and v >= best[key]
        rows.append(row)

    csv_lines = ["method," + ",".join(k for k, _ in METRIC_COLUMNS)]
    for row in rows:
        csv_lines.append(row["method"] + "," + ",".join(
            "" if row[k] is None else f"{row[k]:.4f}" for k, _ in METRIC_COLUMNS))

    width = 16
    text_lines = ["Method".ljust(10) + "".join(l.rjust(width) for _, l in METRIC_COLUMNS)]
    for row in rows:
        cells = []
        for k, _l in METRIC_COLUMNS:
            v = row[k]
            cell = "-" if v is None else f"{v:.1f}" + ("*" if row[k + "_best"] else "")
            cells.append(cell.rjust(width))
        text_lines.append(row["method"].ljust(10) + "".join(cells))

    return {
        "rows": rows,
        "csv": "\n".join(csv_lines) + "\n",
        "text": "\n".join(text_lines) + "\n",
    }
