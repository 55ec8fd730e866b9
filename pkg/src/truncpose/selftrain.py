"""Confidence estimation and the self-training loop.

The primary confidence criterion scores a frame by prediction
invariance: the model runs on five copies of the grid (the original
plus diagonal translations of 10 and 20 pixels each way, edge values
replicated into the vacated band), and the per-angle variance of the
predicted joint rotations, averaged over angles, must fall below a
threshold. Two agreement baselines score disagreement between two
trained models instead, on rotation parameters or on jointly in-image
projected keypoints.

Each round scores the whole unlabeled pool, promotes the confident
frames (with crop transformations) to pseudo-labeled training data, and
continues training the model on the union of all promoted sets so far.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cropper
from .errors import EmptyConfidentSet
from .kinematics import N_ANGLES, PoseParams, forward_kinematics
from .model import (
    LossConfig,
    Regressor,
    SL_THETA,
    TrainConfig,
    _targets_from_frames,
    batch_loss,
    grids_to_input,
    predict,
    predict_batch,
    train,
)
from .synth import DatasetPool, GRID_SIZE, FrameMeta, derive_seed, flag_keypoints

JITTER_OFFSETS = (0, 10, 20, -10, -20)

CRITERION_JITTER = "jitter"
CRITERION_MODEL_AGREEMENT = "model-agreement"
CRITERION_KEYPOINT_AGREEMENT = "keypoint-agreement"

DEFAULT_JITTER_THRESHOLD = 0.005
DEFAULT_TARGET_RATE = 0.12


@dataclass
class ConfidenceReport:
    score: float          # variance or disagreement; lower is more confident
    criterion: str
    threshold: float
    accepted: bool


def _shift_grid(grid: np.ndarray, offset: int) -> np.ndarray:
    """Translate content by `offset` pixels along both axes toward the
    top-left (positive) or bottom-right (negative), replicating edge
    values into the vacated band."""
    if offset == 0:
        return grid.copy()
    G = grid.shape[-1]
    idx = np.clip(np.arange(G) + offset, 0, G - 1)
    return grid[..., idx[:, None], idx[None, :]]


def jitter_family(frame):
    """The five translation-jittered copies, original first."""
    out = []
    for off in JITTER_OFFSETS:
        f = frame.copy()
        f.grid = _shift_grid(frame.grid, off)
        out.append(f)
    return out


def _population_variance(values: np.ndarray) -> np.ndarray:
    """Population variance over axis 0, exactly zero for constant input
    (values are re-centered on the first sample first)."""
    d = values - values[0]
    m = d.mean(axis=0)
    return ((d - m) ** 2).mean(axis=0)


def jitter_scores(model: Regressor, frames, chunk: int = 128) -> np.ndarray:
    """Jitter-variance score per frame, batched."""
    k = len(JITTER_OFFSETS)
    scores = np.empty(len(frames))
    for start in range(0, len(frames), chunk):
        part = frames[start:start + chunk]
        grids = np.stack([
            _shift_grid(f.grid, off) for f in part for off in JITTER_OFFSETS
        ])
        vec = predict_batch(model, grids)
        theta = vec[:, SL_THETA].reshape(len(part), k, N_ANGLES)
        var = _population_variance(np.swapaxes(theta, 0, 1))
        scores[start:start + len(part)] = var.mean(axis=1)
    return scores


def jitter_confidence(model: Regressor, frame,
                      threshold: float = DEFAULT_JITTER_THRESHOLD) -> ConfidenceReport:
    """Score one frame by prediction variance across the jitter family."""
    score = float(jitter_scores(model, [frame])[0])
    return ConfidenceReport(score=score, criterion=CRITERION_JITTER,
                            threshold=float(threshold),
                            accepted=bool(score < threshold))


def threshold_from_scores(scores: np.ndarray, target_rate: float) -> float:
    """Threshold accepting (strictly below) the target fraction of scores."""
    s = np.sort(np.asarray(scores, dtype=np.float64))
    n = len(s)
    k = int(round(target_rate * n))
    k = max(0, min(k, n))
    if k == 0:
        return float(s[0])
    if k == n:
        return float(np.nextafter(s[-1], np.inf))
    return float(0.5 * (s[k - 1] + s[k]))


def quantile_threshold(model: Regressor, pool,
                       target_rate: float = DEFAULT_TARGET_RATE) -> float:
    """Jitter-score quantile hitting the target acceptance rate."""
    frames = pool.frames if hasattr(pool, "frames") else list(pool)
    return threshold_from_scores(jitter_scores(model, frames), target_rate)


def agreement_scores(model_a: Regressor, model_b: Regressor, frames,
                     mode: str, chunk: int = 256) -> np.ndarray:
    """Disagreement between two models per frame.

    mode "params": mean absolute difference of the rotation vectors.
    mode "keypoints": mean distance over joints both models project
    inside the frame; no shared in-image joint scores +inf (rejected).
    """
    if mode not in ("params", "keypoints"):
        raise ValueError(f"unknown agreement mode {mode!r}")
    scores = np.empty(len(frames))
    for start in range(0, len(frames), chunk):
        part = frames[start:start + chunk]
        grids = np.stack([f.grid for f in part])
        va = predict_batch(model_a, grids)
        vb = predict_batch(model_b, grids)
        if mode == "params":
            scores[start:start + len(part)] = np.abs(
                va[:, SL_THETA] - vb[:, SL_THETA]).mean(axis=1)
        else:
            for i in range(len(part)):
                ka = forward_kinematics(PoseParams.from_vector(va[i])).xy
                kb = forward_kinematics(PoseParams.from_vector(vb[i])).xy
                ins = (
                    (ka >= 0).all(axis=1) & (ka < GRID_SIZE).all(axis=1)
                    & (kb >= 0).all(axis=1) & (kb < GRID_SIZE).all(axis=1)
                )
                if not ins.any():
                    scores[start + i] = np.inf
                else:
                    d = ka[ins] - kb[ins]
                    scores[start + i] = float(np.hypot(d[:, 0], d[:, 1]).mean())
    return scores


def agreement_confidence(model_a: Regressor, model_b: Regressor, frame,
                         threshold: float, mode: str = "params") -> ConfidenceReport:
    score = float(agreement_scores(model_a, model_b, [frame], mode)[0])
    criterion = (CRITERION_MODEL_AGREEMENT if mode == "params"
                 else CRITERION_KEYPOINT_AGREEMENT)
    return ConfidenceReport(score=score, criterion=criterion,
                            threshold=float(threshold),
                            accepted=bool(score < threshold))


def pseudo_label_frame(frame, params: PoseParams):
    """Stamp a model prediction onto a frame as pseudo ground truth."""
    new = frame.copy()
    new.truth = params.copy()
    new.keypoints = flag_keypoints(forward_kinematics(params), GRID_SIZE)
    new.meta.pseudo = True
    return new


def expand_with_crops(frames, rng: np.random.Generator,
                      crops_per_frame: int = 2, probs=None) -> list:
    """Augment labeled frames with crop-category draws.

    Each frame contributes itself plus `crops_per_frame` draws. A draw
    whose crop is suppressed by a guard contributes the frame uncropped;
    the drawn category is recorded on the result either way. Truth
    parameters and keypoints are carried through each crop.
    """
    out = []
    for base in frames:
        first = base.copy()
        first.meta.category = None
        out.append(first)
        for _ in range(crops_per_frame):
            cat = cropper.sample_category(rng, probs)
            if cat == cropper.CropCategory.UNCROPPED:
                item = base.copy()
            else:
                spec = cropper.resolve_crop(cat, base.keypoints, GRID_SIZE, rng)
                item = cropper.apply_crop(base, spec) if spec.applied else base.copy()
            item.meta.category = cat.value
            out.append(item)
    for i, f in enumerate(out):
        f.meta.index = i
    return out


def promote(confident, rng: np.random.Generator, crops_per_frame: int = 2,
            pool_name: str = "pseudo", probs=None) -> DatasetPool:
    """Turn confident predictions into a pseudo-labeled pool.

    Each confident (frame, prediction) pair contributes the uncropped
    pseudo-labeled frame plus `crops_per_frame` crop-category draws.
    Crops transform the pseudo keypoints and re-fit translation/scale;
    rotation angles and bone multipliers are never altered.
    """
    bases = []
    for frame, params in confident:
        b = pseudo_label_frame(frame, params)
        b.meta.pool = pool_name
        bases.append(b)
    frames = expand_with_crops(bases, rng, crops_per_frame, probs)
    return DatasetPool(frames=frames, role="labeled-train", seed=0)


@dataclass
class SelfTrainConfig:
    criterion: str = CRITERION_JITTER
    threshold_mode: str = "quantile"          # "fixed" | "quantile"
    fixed_threshold: float = DEFAULT_JITTER_THRESHOLD
    target_rate: float = DEFAULT_TARGET_RATE
    rounds: int = 2
    crops_per_frame: int = 2
    crop_probs: tuple | None = None           # None = default proportions
    train: TrainConfig = field(default_factory=lambda: TrainConfig(max_iters=10000))
    model_b: Regressor | None = None          # second model for agreement criteria
    master_seed: int = 0


@dataclass
class RoundState:
    index: int
    criterion: str
    threshold: float
    accepted: int
    pool_size: int
    acceptance_rate: float
    promoted_size: int
    union_size: int
    anchor_val_loss: float | None = None
    log: list = field(default_factory=list)
    log_path: str | None = None

    def to_dict(self) -> dict:
        return {
            "format": "truncpose-v1",
            "kind": "round-report",
            "round": self.index,
            "criterion": self.criterion,
            "threshold": self.threshold,
            "accepted": self.accepted,
            "pool_size": self.pool_size,
            "acceptance_rate": self.acceptance_rate,
            "promoted_size": self.promoted_size,
            "union_size": self.union_size,
            "anchor_val_loss": self.anchor_val_loss,
            "retrain_log": self.log_path,
        }


def _score_pool(model: Regressor, frames, config: SelfTrainConfig) -> np.ndarray:
    if config.criterion == CRITERION_JITTER:
        return jitter_scores(model, frames)
    if config.model_b is None:
        raise ValueError("agreement criteria need a second model")
    mode = "params" if config.criterion == CRITERION_MODEL_AGREEMENT else "keypoints"
    return agreement_scores(model, config.model_b, frames, mode)


def _labeled_split(labeled):
    """Accept (train, val) pools/lists or a single pool; return frame lists."""
    if labeled is None:
        return [], []
    if isinstance(labeled, tuple):
        tr, va = labeled
    else:
        tr, va = labeled, None
    tr = tr.frames if hasattr(tr, "frames") else list(tr)
    va = [] if va is None else (va.frames if hasattr(va, "frames") else list(va))
    return list(tr), list(va)


def run_self_training(initial: Regressor, labeled, unlabeled,
                      config: SelfTrainConfig):
    """Multi-round self-training on the unlabeled pool.

    The whole pool is re-scored each round with the current model; the
    confident subset is promoted and the model continues training on
    the labeled (cropped) data plus the union of all promoted frames so
    far. Every tenth promoted frame is held out and joins the labeled
    validation split for early stopping. ``labeled`` is a (train, val)
    pair of pools or frame lists; the caller's pools are never mutated.
    """
    model = initial.copy()
    states = []
    union = []
    anchor_train, anchor_val = _labeled_split(labeled)
    unlabeled_frames = unlabeled.frames if hasattr(unlabeled, "frames") else list(unlabeled)

    for rnd in range(1, config.rounds + 1):
        scores = _score_pool(model, unlabeled_frames, config)
        if config.threshold_mode == "fixed":
            threshold = config.fixed_threshold
        else:
            threshold = threshold_from_scores(scores, config.target_rate)
        accepted_idx = np.flatnonzero(scores < threshold)
        if accepted_idx.size == 0:
            raise EmptyConfidentSet(
                f"round {rnd}: no frame below threshold {threshold:.6g} "
                f"(min score {scores.min():.6g})")

        grids = np.stack([unlabeled_frames[i].grid for i in accepted_idx])
        vecs = predict_batch(model, grids)
        confident = [
            (unlabeled_frames[i], PoseParams.from_vector(vecs[j]))
            for j, i in enumerate(accepted_idx)
        ]
        rng = np.random.default_rng(np.random.SeedSequence(
            [int(config.master_seed), 0x9907, rnd]))
        promoted = promote(confident, rng, config.crops_per_frame,
                           pool_name=f"pseudo-r{rnd}", probs=config.crop_probs)
        union = union + list(promoted.frames)

        pseudo_val = [f for k, f in enumerate(union) if k % 10 == 0]
        pseudo_tr = [f for k, f in enumerate(union) if k % 10 != 0] or union
        tr = anchor_train + pseudo_tr
        val = (anchor_val + pseudo_val) or pseudo_tr
        round_cfg = TrainConfig(
            loss=config.train.loss,
            learning_rate=config.train.learning_rate,
            batch_size=config.train.batch_size,
            max_iters=config.train.max_iters,
            eval_interval=config.train.eval_interval,
            patience=config.train.patience,
            min_rel_improvement=config.train.min_rel_improvement,
            seed=derive_seed(config.master_seed, "round", rnd),
        )
        model, log = train(model, tr, val, round_cfg)

        anchor = None
        if anchor_val:
            anchor = batch_loss(
                model,
                grids_to_input(np.stack([f.grid for f in anchor_val])),
                _targets_from_frames(anchor_val, config.train.loss.variant),
                config.train.loss,
            )

        states.append(RoundState(
            index=rnd,
            criterion=config.criterion,
            threshold=float(threshold),
            accepted=int(accepted_idx.size),
            pool_size=len(unlabeled_frames),
            acceptance_rate=float(accepted_idx.size / len(unlabeled_frames)),
            promoted_size=len(promoted.frames),
            union_size=len(union),
            anchor_val_loss=anchor,
            log=log,
        ))

    return model, states
