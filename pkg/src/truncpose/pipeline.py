"""Stage orchestration behind the CLI commands.

Every stage reads pools and checkpoints from disk and writes its
outputs under the run directory, so stages can be rerun independently:

    out/
      pools/<role>.pool, pools/test-matched.pool
      checkpoints/<method>.wts
      logs/<method>*.csv
      reports/*.json|csv|txt

All outputs are pure functions of (config, seed): no timestamps, sorted
JSON keys, fixed float formatting.
"""

from __future__ import annotations

import json
import os
import sys

import numpy as np

from . import cropper, selftrain
from .config import RunConfig, save_config
from .errors import IoError
from .evaluate import (
    EvalReport,
    KeypointSet,
    TABLE_ROW_LABELS,
    TABLE_ROW_ORDER,
    compare_methods,
    pck_frame,
    visibility_stats,
    visibility_table,
)
from .kinematics import IN_IMAGE, JointId, UNANNOTATED, forward_kinematics
from .model import (
    LossConfig,
    TrainConfig,
    init_regressor,
    load_weights,
    predict_batch,
    save_training_log,
    save_weights,
    train,
)
from .poolfile import read_pool, write_pool
from .synth import DatasetPool, POOL_ROLES, derive_seed, generate_pools
from .selftrain import PoseParams, SelfTrainConfig, expand_with_crops, run_self_training

METHODS = ("base", "crops", "full")


def _say(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _dirs(out_dir):
    paths = {
        "pools": os.path.join(out_dir, "pools"),
        "checkpoints": os.path.join(out_dir, "checkpoints"),
        "logs": os.path.join(out_dir, "logs"),
        "reports": os.path.join(out_dir, "reports"),
    }
    for p in paths.values():
        os.makedirs(p, exist_ok=True)
    return paths


def _write_json(obj, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def pool_path(out_dir, role: str) -> str:
    return os.path.join(out_dir, "pools", f"{role}.pool")


def load_pools(out_dir) -> dict:
    pools = {}
    for role in POOL_ROLES:
        path = pool_path(out_dir, role)
        if not os.path.exists(path):
            raise IoError(f"missing pool file {path}; run `generate` first")
        pools[role] = read_pool(path)
    return pools


def cmd_generate(cfg: RunConfig, out_dir) -> dict:
    """Write the four pools and their visibility-statistics table."""
    cfg.validate()
    paths = _dirs(out_dir)
    save_config(cfg, os.path.join(out_dir, "config.cfg"))
    _say("generating pools ...")
    pools = generate_pools(cfg)
    for role, pool in pools.items():
        write_pool(pool, pool_path(out_dir, role))
    columns = {role: visibility_stats(pools[role]) for role in POOL_ROLES}
    table = visibility_table(columns, title="Per-joint in-image proportions")
    stats_path = os.path.join(paths["reports"], "visibility_stats.txt")
    with open(stats_path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(table)
    _say(f"wrote pools and {stats_path}")
    return {"pools": {r: pool_path(out_dir, r) for r in POOL_ROLES},
            "stats": stats_path}


def head_visible_subset(pool: DatasetPool) -> list:
    """Frames whose neck and head top are in-image (the PCK-defined set)."""
    out = []
    for f in pool.frames:
        if (f.keypoints.vis[JointId.NECK] == IN_IMAGE
                and f.keypoints.vis[JointId.HEAD_TOP] == IN_IMAGE):
            out.append(f)
    return out


def _annotation_truth(frame) -> KeypointSet:
    """The frame's annotation: in-image joints only, like human labels."""
    kps = frame.keypoints.copy()
    kps.vis = np.where(kps.vis == IN_IMAGE, IN_IMAGE, UNANNOTATED).astype(np.int8)
    return kps


def _matched_truth(source, matched) -> KeypointSet:
    """Truth for a cropped view: source annotation positions, flagged by
    where each annotated joint sits relative to the crop."""
    src = source.keypoints
    vis = np.where(src.vis == IN_IMAGE, matched.keypoints.vis,
                   UNANNOTATED).astype(np.int8)
    return KeypointSet(src.xy.copy(), vis)


def _predict_keypoints(model, frames, chunk: int = 256):
    """Projected keypoints for each frame, in that frame's coordinates."""
    out = []
    for start in range(0, len(frames), chunk):
        part = frames[start:start + chunk]
        vecs = predict_batch(model, np.stack([f.grid for f in part]))
        for v in vecs:
            out.append(forward_kinematics(PoseParams.from_vector(v)))
    return out


def evaluate_model(model, name: str, test_pool: DatasetPool, sources,
                   matched: DatasetPool, achieved) -> EvalReport:
    """All four PCK flavors for one model."""
    report = EvalReport(
        method=name,
        pools={
            "test_seed": test_pool.seed,
            "test_count": len(test_pool.frames),
            "matched_count": len(matched.frames),
        },
    )
    report.excluded_head_not_visible = len(test_pool.frames) - len(sources)

    # Uncropped: predictions on the head-visible frames as-is.
    unc_preds = _predict_keypoints(model, sources)
    unc_vals = []
    for pred, frame in zip(unc_preds, sources):
        v = pck_frame(pred, _annotation_truth(frame), "all")
        if v is not None:
            unc_vals.append(v)
    if unc_vals:
        report.uncropped_total = 100.0 * float(np.mean(unc_vals))

    # Cropped: predictions on the matched crops, mapped back to source
    # coordinates through the crop rectangle, scored against the source
    # annotation with the original head segment.
    crop_preds = _predict_keypoints(model, matched.frames)
    vals = {"in": [], "out": [], "all": []}
    excluded = {"in": 0, "out": 0, "all": 0}
    for pred, src, mf in zip(crop_preds, sources, matched.frames):
        rect = mf.meta.lineage[-1]
        back = pred.copy()
        back.xy = cropper.invert_points(back.xy, rect, mf.grid.shape[-1])
        truth = _matched_truth(src, mf)
        for split in vals:
            v = pck_frame(back, truth, split)
            if v is None:
                excluded[split] += 1
            else:
                vals[split].append(v)
    if vals["all"]:
        report.cropped_total = 100.0 * float(np.mean(vals["all"]))
        report.per_frame_total = [round(v, 6) for v in vals["all"]]
    if vals["in"]:
        report.cropped_in = 100.0 * float(np.mean(vals["in"]))
    if vals["out"]:
        report.cropped_out = 100.0 * float(np.mean(vals["out"]))
    report.excluded_empty_split = excluded
    report.visibility = {
        TABLE_ROW_LABELS[j]: round(float(achieved.proportions[int(j)]), 4)
        for j in TABLE_ROW_ORDER
    }
    report.visibility["mean_keypoints"] = round(achieved.mean_keypoints, 4)
    return report


def build_matched_set(cfg: RunConfig, test_pool: DatasetPool):
    """Matched crops of the head-visible subset, targeting the full
    test pool's visibility statistics."""
    sources = head_visible_subset(test_pool)
    targets = visibility_stats(test_pool)
    rng = np.random.default_rng(np.random.SeedSequence(
        [int(cfg.master_seed), 0x3A7C]))
    subset = DatasetPool(frames=sources, role="test", seed=test_pool.seed)
    matched, achieved, mix = cropper.build_matched_test_crops(
        subset, targets.proportions, rng)
    return sources, matched, achieved, targets, mix


def matched_stats_table(achieved, targets) -> str:
    lines = ["Matched-crop test set: achieved vs target visibility",
             "Joint".ljust(10) + "Target".rjust(9) + "Achieved".rjust(10)
             + "AbsDiff".rjust(9)]
    for j in TABLE_ROW_ORDER:
        t = float(targets.proportions[int(j)])
        a = float(achieved.proportions[int(j)])
        lines.append(TABLE_ROW_LABELS[j].ljust(10)
                     + f"{t:.2f}".rjust(9) + f"{a:.2f}".rjust(10)
                     + f"{abs(a - t):.3f}".rjust(9))
    lines.append("Keypoints".ljust(10)
                 + f"{targets.mean_keypoints:.1f}".rjust(9)
                 + f"{achieved.mean_keypoints:.1f}".rjust(10)
                 + f"{abs(achieved.mean_keypoints - targets.mean_keypoints):.2f}".rjust(9))
    return "\n".join(lines) + "\n"


def _train_config(cfg: RunConfig, max_iters: int, seed: int) -> TrainConfig:
    return TrainConfig(
        loss=LossConfig(variant=cfg.loss_variant),
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        max_iters=max_iters,
        eval_interval=cfg.eval_interval,
        patience=cfg.patience,
        seed=seed,
    )


def build_cropped_sets(cfg: RunConfig, pools, alt: bool = False):
    """Crop-augmented labeled train/val frame lists, deterministic in
    the master seed."""
    rng = np.random.default_rng(np.random.SeedSequence(
        [int(cfg.master_seed), 0xC809, 1 if alt else 0]))
    train_frames = expand_with_crops(pools["labeled-train"].frames, rng,
                                     cfg.crops_per_frame, cfg.crop_proportions)
    val_frames = expand_with_crops(pools["labeled-val"].frames, rng,
                                   cfg.crops_per_frame, cfg.crop_proportions)
    return train_frames, val_frames


def train_base_and_crops(cfg: RunConfig, pools, out_dir, variant: str,
                         suffix: str = ""):
    """The uncropped-trained model and its crop-trained successor."""
    paths = _dirs(out_dir)
    labeled = pools["labeled-train"]
    val = pools["labeled-val"]

    _say(f"training base{suffix} ({variant}) ...")
    init = init_regressor(derive_seed(cfg.master_seed, "init", variant))
    tc = _train_config(cfg, cfg.pretrain_iters,
                       derive_seed(cfg.master_seed, "train-base", variant))
    tc.loss = LossConfig(variant=variant)
    base, base_log = train(init, labeled, val, tc)
    save_weights(base, os.path.join(paths["checkpoints"], f"base{suffix}.wts"), variant)
    save_training_log(base_log, os.path.join(paths["logs"], f"base{suffix}.csv"))

    _say(f"training crops{suffix} ({variant}) ...")
    train_frames, val_frames = build_cropped_sets(cfg, pools, alt=bool(suffix))
    tc = _train_config(cfg, cfg.pretrain_iters,
                       derive_seed(cfg.master_seed, "train-crops", variant))
    tc.loss = LossConfig(variant=variant)
    crops_model, crops_log = train(base, train_frames, val_frames, tc)
    save_weights(crops_model, os.path.join(paths["checkpoints"], f"crops{suffix}.wts"),
                 variant)
    save_training_log(crops_log, os.path.join(paths["logs"], f"crops{suffix}.csv"))
    return base, crops_model, (train_frames, val_frames)


def _selftrain_config(cfg: RunConfig, criterion: str, model_b=None) -> SelfTrainConfig:
    st = SelfTrainConfig(
        criterion=criterion,
        threshold_mode=cfg.threshold_mode,
        fixed_threshold=cfg.fixed_threshold,
        target_rate=cfg.target_rate,
        rounds=cfg.rounds,
        crops_per_frame=cfg.crops_per_frame,
        crop_probs=cfg.crop_proportions,
        train=_train_config(cfg, cfg.round_iters,
                            derive_seed(cfg.master_seed, "selftrain", criterion)),
        model_b=model_b,
        master_seed=derive_seed(cfg.master_seed, "rounds", criterion),
    )
    return st


def _save_rounds(states, out_dir, prefix: str) -> None:
    paths = _dirs(out_dir)
    for st in states:
        log_rel = os.path.join("logs", f"{prefix}_round{st.index}.csv")
        save_training_log(st.log, os.path.join(out_dir, log_rel))
        st.log_path = log_rel
        _write_json(st.to_dict(),
                    os.path.join(paths["reports"], f"{prefix}_round{st.index}.json"))


def cmd_pipeline(cfg: RunConfig, out_dir) -> dict:
    """Train the three method variants, evaluate, and emit comparisons."""
    cfg.validate()
    paths = _dirs(out_dir)
    save_config(cfg, os.path.join(out_dir, "config.cfg"))
    pools = load_pools(out_dir)

    base, crops_model, cropped_sets = train_base_and_crops(
        cfg, pools, out_dir, cfg.loss_variant)

    _say("self-training full model ...")
    if cfg.rounds > 0:
        full, states = run_self_training(
            crops_model, cropped_sets, pools["unlabeled"],
            _selftrain_config(cfg, cfg.criterion))
        _save_rounds(states, out_dir, "full")
    else:
        full, states = crops_model.copy(), []
    save_weights(full, os.path.join(paths["checkpoints"], "full.wts"),
                 cfg.loss_variant)

    _say("building matched test crops ...")
    sources, matched, achieved, targets, mix = build_matched_set(cfg, pools["test"])
    write_pool(matched, pool_path(out_dir, "test-matched"))
    with open(os.path.join(paths["reports"], "matched_stats.txt"), "w",
              encoding="ascii", newline="\n") as fh:
        fh.write(matched_stats_table(achieved, targets))

    _say("evaluating ...")
    models = {"base": base, "crops": crops_model, "full": full}
    reports = []
    for name in METHODS:
        rep = evaluate_model(models[name], name, pools["test"], sources,
                             matched, achieved)
        reports.append(rep)
        _write_json(rep.to_dict(),
                    os.path.join(paths["reports"], f"eval_{name}.json"))
    comparison = compare_methods(reports)
    with open(os.path.join(paths["reports"], "comparison.csv"), "w",
              encoding="ascii", newline="\n") as fh:
        fh.write(comparison["csv"])
    with open(os.path.join(paths["reports"], "comparison.txt"), "w",
              encoding="ascii", newline="\n") as fh:
        fh.write(comparison["text"])
    print(comparison["text"], end="")
    return {"reports": [r.to_dict() for r in reports],
            "rounds": [s.to_dict() for s in states]}


def cmd_ablate_confidence(cfg: RunConfig, out_dir) -> dict:
    """Self-train once per confidence criterion at matched acceptance
    counts and compare the resulting models."""
    cfg.validate()
    paths = _dirs(out_dir)
    pools = load_pools(out_dir)

    crops_path = os.path.join(paths["checkpoints"], "crops.wts")
    if not os.path.exists(crops_path):
        raise IoError(f"missing checkpoint {crops_path}; run `pipeline` first")
    crops_model, _ = load_weights(crops_path)

    alt_variant = "l2" if cfg.loss_variant == "l1" else "l1"
    alt_path = os.path.join(paths["checkpoints"], f"crops-{alt_variant}.wts")
    if os.path.exists(alt_path):
        alt_model, _ = load_weights(alt_path)
    else:
        _say(f"training {alt_variant} agreement partner ...")
        _, alt_model, _ = train_base_and_crops(
            cfg, pools, out_dir, alt_variant, suffix=f"-{alt_variant}")

    sources, matched, achieved, targets, _ = build_matched_set(cfg, pools["test"])
    cropped_sets = build_cropped_sets(cfg, pools)

    criteria = (selftrain.CRITERION_JITTER,
                selftrain.CRITERION_MODEL_AGREEMENT,
                selftrain.CRITERION_KEYPOINT_AGREEMENT)
    reports = []
    accepted = {}
    for criterion in criteria:
        _say(f"self-training with {criterion} confidence ...")
        st = _selftrain_config(cfg, criterion, model_b=alt_model)
        st.threshold_mode = "quantile"  # matched acceptance counts
        model, states = run_self_training(crops_model, cropped_sets,
                                          pools["unlabeled"], st)
        _save_rounds(states, out_dir, f"ablate_{criterion}")
        accepted[criterion] = [s.accepted for s in states]
        rep = evaluate_model(model, criterion, pools["test"], sources,
                             matched, achieved)
        reports.append(rep)
        _write_json(rep.to_dict(),
                    os.path.join(paths["reports"], f"ablation_{criterion}.json"))

    comparison = compare_methods(reports)
    with open(os.path.join(paths["reports"], "ablation_comparison.csv"), "w",
              encoding="ascii", newline="\n") as fh:
        fh.write(comparison["csv"])
    with open(os.path.join(paths["reports"], "ablation_comparison.txt"), "w",
              encoding="ascii", newline="\n") as fh:
        fh.write(comparison["text"])
    print(comparison["text"], end="")
    return {"accepted": accepted,
            "reports": [r.to_dict() for r in reports]}


def cmd_eval(cfg: RunConfig, out_dir) -> dict:
    """Re-evaluate existing checkpoints on the stored pools."""
    cfg.validate()
    paths = _dirs(out_dir)
    pools = load_pools(out_dir)
    sources, matched, achieved, targets, _ = build_matched_set(cfg, pools["test"])
    reports = []
    for name in METHODS:
        path = os.path.join(paths["checkpoints"], f"{name}.wts")
        if not os.path.exists(path):
            continue
        model, _meta = load_weights(path)
        rep = evaluate_model(model, name, pools["test"], sources, matched, achieved)
        reports.append(rep)
        _write_json(rep.to_dict(),
                    os.path.join(paths["reports"], f"eval_{name}.json"))
    if not reports:
        raise IoError(f"no checkpoints found under {paths['checkpoints']}")
    if len(reports) >= 2:
        comparison = compare_methods(reports)
        print(comparison["text"], end="")
    else:
        print(json.dumps(reports[0].metrics(), sort_keys=True, indent=2))
    return {"reports": [r.to_dict() for r in reports]}


def cmd_stats(cfg: RunConfig, out_dir) -> dict:
    """Visibility statistics tables for the stored pools."""
    pools = load_pools(out_dir)
    columns = {role: visibility_stats(pools[role]) for role in POOL_ROLES}
    matched_path = pool_path(out_dir, "test-matched")
    if os.path.exists(matched_path):
        columns["test-matched"] = visibility_stats(read_pool(matched_path))
    table = visibility_table(columns, title="Per-joint in-image proportions")
    print(table, end="")
    paths = _dirs(out_dir)
    stats_path = os.path.join(paths["reports"], "visibility_stats.txt")
    with open(stats_path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(table)
    return {"stats": stats_path}
