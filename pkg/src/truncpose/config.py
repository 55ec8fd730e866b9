"""Run configuration: a flat key-value file with section headers.

The first line must be ``truncpose-v1``; the rest is INI-style. Every
stage of the pipeline is driven by one such file so runs can be diffed
and reproduced byte-for-byte.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field

from .errors import ConfigError, IoError

CONFIG_MAGIC = "truncpose-v1"

CROP_KEYS = ("above_hip", "knee_to_shoulder", "above_shoulders",
             "one_arm", "one_hand", "uncropped")
DEFAULT_CROP_PROPORTIONS = (0.29, 0.10, 0.16, 0.09, 0.13, 0.23)


@dataclass
class RunConfig:
    master_seed: int = 7
    pool_sizes: dict = field(default_factory=lambda: {
        "labeled-train": 4000,
        "labeled-val": 500,
        "unlabeled": 6000,
        "test": 1500,
    })
    crop_proportions: tuple = DEFAULT_CROP_PROPORTIONS
    crops_per_frame: int = 2
    loss_variant: str = "l1"
    learning_rate: float = 1e-3
    batch_size: int = 32
    pretrain_iters: int = 20000
    round_iters: int = 10000
    eval_interval: int = 200
    patience: int = 5
    criterion: str = "jitter"
    threshold_mode: str = "quantile"      # "fixed" | "quantile"
    fixed_threshold: float = 0.005
    target_rate: float = 0.12
    rounds: int = 2
    out_dir: str = "runs/default"

    def validate(self) -> None:
        for role, n in self.pool_sizes.items():
            if int(n) < 1:
                raise ConfigError(f"pools.{role.replace('labeled-', '')}: size must be >= 1")
        if abs(sum(self.crop_proportions) - 1.0) > 1e-9:
            raise ConfigError("crops: proportions must sum to 1")
        if any(p < 0 for p in self.crop_proportions):
            raise ConfigError("crops: proportions must be non-negative")
        if self.rounds < 0:
            raise ConfigError("selftrain.rounds: must be >= 0")
        if self.loss_variant not in ("l1", "l2"):
            raise ConfigError("model.loss: must be l1 or l2")
        if self.threshold_mode not in ("fixed", "quantile"):
            raise ConfigError("selftrain.threshold_mode: must be fixed or quantile")
        if self.criterion not in ("jitter", "model-agreement", "keypoint-agreement"):
            raise ConfigError("selftrain.criterion: unknown criterion")
        if not 0.0 < self.target_rate <= 1.0:
            raise ConfigError("selftrain.target_rate: must be in (0, 1]")
        if self.crops_per_frame < 0:
            raise ConfigError("crops.crops_per_frame: must be >= 0")
        for name in ("learning_rate", "fixed_threshold"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"model.{name}: must be positive")
        for name in ("batch_size", "pretrain_iters", "round_iters", "eval_interval"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"model.{name}: must be >= 1")


def _get(parser, section, key, cast, default, errors):
    try:
        raw = parser.get(section, key, fallback=None)
        if raw is None:
            return default
        return cast(raw)
    except (ValueError, TypeError):
        errors.append(f"{section}.{key}")
        return default


def parse_config(text: str) -> RunConfig:
    lines = text.splitlines()
    if not lines or lines[0].strip() != CONFIG_MAGIC:
        raise ConfigError(f"config must start with a '{CONFIG_MAGIC}' header line")
    parser = configparser.ConfigParser()
    try:
        parser.read_string("\n".join(lines[1:]))
    except configparser.Error as e:
        raise ConfigError(f"config: {e}") from None

    bad: list[str] = []
    cfg = RunConfig()
    cfg.master_seed = _get(parser, "seeds", "master", int, cfg.master_seed, bad)
    sizes = {}
    for role, key in (("labeled-train", "train"), ("labeled-val", "val"),
                      ("unlabeled", "unlabeled"), ("test", "test")):
        sizes[role] = _get(parser, "pools", key, int, cfg.pool_sizes[role], bad)
    cfg.pool_sizes = sizes
    props = []
    for i, key in enumerate(CROP_KEYS):
        props.append(_get(parser, "crops", key, float, cfg.crop_proportions[i], bad))
    cfg.crop_proportions = tuple(props)
    cfg.crops_per_frame = _get(parser, "crops", "crops_per_frame", int,
                               cfg.crops_per_frame, bad)
    cfg.loss_variant = _get(parser, "model", "loss", str, cfg.loss_variant, bad)
    cfg.learning_rate = _get(parser, "model", "learning_rate", float,
                             cfg.learning_rate, bad)
    cfg.batch_size = _get(parser, "model", "batch_size", int, cfg.batch_size, bad)
    cfg.pretrain_iters = _get(parser, "model", "pretrain_iters", int,
                              cfg.pretrain_iters, bad)
    cfg.round_iters = _get(parser, "model", "round_iters", int, cfg.round_iters, bad)
    cfg.eval_interval = _get(parser, "model", "eval_interval", int,
                             cfg.eval_interval, bad)
    cfg.patience = _get(parser, "model", "patience", int, cfg.patience, bad)
    cfg.criterion = _get(parser, "selftrain", "criterion", str, cfg.criterion, bad)
    cfg.threshold_mode = _get(parser, "selftrain", "threshold_mode", str,
                              cfg.threshold_mode, bad)
    cfg.fixed_threshold = _get(parser, "selftrain", "threshold", float,
                               cfg.fixed_threshold, bad)
    cfg.target_rate = _get(parser, "selftrain", "target_rate", float,
                           cfg.target_rate, bad)
    cfg.rounds = _get(parser, "selftrain", "rounds", int, cfg.rounds, bad)
    cfg.out_dir = _get(parser, "output", "dir", str, cfg.out_dir, bad)

    if bad:
        raise ConfigError("malformed config value(s): " + ", ".join(bad))
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    if not os.path.exists(path):
        raise IoError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def format_config(cfg: RunConfig) -> str:
    buf = io.StringIO()
    buf.write(CONFIG_MAGIC + "\n")
    buf.write("[seeds]\n")
    buf.write(f"master = {cfg.master_seed}\n\n")
    buf.write("[pools]\n")
    buf.write(f"train = {cfg.pool_sizes['labeled-train']}\n")
    buf.write(f"val = {cfg.pool_sizes['labeled-val']}\n")
    buf.write(f"unlabeled = {cfg.pool_sizes['unlabeled']}\n")
    buf.write(f"test = {cfg.pool_sizes['test']}\n\n")
    buf.write("[crops]\n")
    for key, p in zip(CROP_KEYS, cfg.crop_proportions):
        buf.write(f"{key} = {p}\n")
    buf.write(f"crops_per_frame = {cfg.crops_per_frame}\n\n")
    buf.write("[model]\n")
    buf.write(f"loss = {cfg.loss_variant}\n")
    buf.write(f"learning_rate = {cfg.learning_rate}\n")
    buf.write(f"batch_size = {cfg.batch_size}\n")
    buf.write(f"pretrain_iters = {cfg.pretrain_iters}\n")
    buf.write(f"round_iters = {cfg.round_iters}\n")
    buf.write(f"eval_interval = {cfg.eval_interval}\n")
    buf.write(f"patience = {cfg.patience}\n\n")
    buf.write("[selftrain]\n")
    buf.write(f"criterion = {cfg.criterion}\n")
    buf.write(f"threshold_mode = {cfg.threshold_mode}\n")
    buf.write(f"threshold = {cfg.fixed_threshold}\n")
    buf.write(f"target_rate = {cfg.target_rate}\n")
    buf.write(f"rounds = {cfg.rounds}\n\n")
    buf.write("[output]\n")
    buf.write(f"dir = {cfg.out_dir}\n")
    return buf.getvalue()


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_config(cfg))
