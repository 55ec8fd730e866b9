"""Pose regressor: a two-layer network with hand-derived gradients.

The network maps a flattened 48x48x2 grid through one tanh hidden layer
(width 128) to 26 outputs, which are squashed into valid parameter
ranges:

* angles (theta, global rotation): pi * tanh(z)
* bone multipliers:                exp(ln 2 * tanh(z)), range (0.5, 2)
* translation:                     G/2 + 2.5 G * tanh(z)
* scale:                           exp(C + A * tanh(z))

Two loss variants are supported. The absolute-error variant sums
|parameter residuals| plus |keypoint residuals| over every annotated
joint, including joints outside the image. The squared-error variant
uses mean-squared angle, shape (weight 0.1), and keypoint terms plus a
mean-absolute surface-point term, every norm divided by its element
count.

Gradients flow analytically through the range maps and through forward
kinematics to the keypoint and surface terms; ``backward`` is exact up
to floating point and is validated against central finite differences.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, IoError
from .kinematics import (
    N_BETAS,
    N_JOINTS,
    N_PARAMS,
    N_SURFACE_POINTS,
    PoseParams,
    fold_surface_cotangent,
    node_jacobian_batch,
    nodes_batch,
    surface_points_from_nodes,
)
from .synth import GRID_SIZE

HIDDEN = 128
INPUT_DIM = 2 * GRID_SIZE * GRID_SIZE
ARCH_STRING = f"grid{GRID_SIZE}x{GRID_SIZE}x2-fc{HIDDEN}-tanh-fc{N_PARAMS}"

# Range-map constants. The pre-activation slopes are chosen so every
# head moves its parameter at the same O(pi) rate per unit of raw
# output, keeping the shared trunk's gradients balanced across heads.
_LN2 = float(np.log(2.0))
TRANS_CENTER = GRID_SIZE / 2.0
TRANS_AMPLITUDE = 2.5 * GRID_SIZE
TRANS_SLOPE = float(np.pi) / TRANS_AMPLITUDE
SCALE_LOG_CENTER = float(np.log(70.0))
SCALE_LOG_AMPLITUDE = 1.25
SCALE_SLOPE = float(np.pi) / (70.0 * SCALE_LOG_AMPLITUDE)

# Output slices of the 26-vector [theta, beta, rot, tx, ty, scale].
SL_THETA = slice(0, 18)
SL_BETA = slice(18, 22)
IDX_ROT = 22
SL_TRANS = slice(23, 25)
IDX_SCALE = 25
_THETA_ROT_IDX = np.array(list(range(18)) + [IDX_ROT])

WEIGHTS_MAGIC = "truncpose-v1 weights"


@dataclass
class Regressor:
    w1: np.ndarray   # (HIDDEN, INPUT_DIM)
    b1: np.ndarray   # (HIDDEN,)
    w2: np.ndarray   # (N_PARAMS, HIDDEN)
    b2: np.ndarray   # (N_PARAMS,)
    seed: int = 0

    def copy(self) -> "Regressor":
        return Regressor(self.w1.copy(), self.b1.copy(),
                         self.w2.copy(), self.b2.copy(), self.seed)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])


@dataclass
class LossConfig:
    variant: str = "l1"      # "l1" | "l2"
    lam: float = 0.1         # shape-term weight, squared-error variant only

    def __post_init__(self):
        if self.variant not in ("l1", "l2"):
            raise ConfigError(f"unknown loss variant {self.variant!r}")
        if not self.lam > 0:
            raise ConfigError("lambda must be positive")


def init_regressor(seed: int) -> Regressor:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    lim1 = np.sqrt(6.0 / (INPUT_DIM + HIDDEN))
    lim2 = np.sqrt(6.0 / (HIDDEN + N_PARAMS))
    return Regressor(
        w1=rng.uniform(-lim1, lim1, (HIDDEN, INPUT_DIM)),
        b1=np.zeros(HIDDEN),
        w2=rng.uniform(-lim2, lim2, (N_PARAMS, HIDDEN)),
        b2=np.zeros(N_PARAMS),
        seed=int(seed),
    )


def _range_map(z2: np.ndarray):
    """Map raw outputs (B, 26) to parameter space, returning the mapped
    values and the elementwise derivative of the map."""
    out = np.empty_like(z2)
    dout = np.empty_like(z2)

    t = np.tanh(z2[:, SL_THETA])
    out[:, SL_THETA] = np.pi * t
    dout[:, SL_THETA] = np.pi * (1.0 - t * t)

    t = np.tanh(z2[:, SL_BETA])
    out[:, SL_BETA] = np.exp(_LN2 * t)
    dout[:, SL_BETA] = out[:, SL_BETA] * _LN2 * (1.0 - t * t)

    t = np.tanh(z2[:, IDX_ROT])
    out[:, IDX_ROT] = np.pi * t
    dout[:, IDX_ROT] = np.pi * (1.0 - t * t)

    t = np.tanh(TRANS_SLOPE * z2[:, SL_TRANS])
    out[:, SL_TRANS] = TRANS_CENTER + TRANS_AMPLITUDE * t
    dout[:, SL_TRANS] = TRANS_AMPLITUDE * TRANS_SLOPE * (1.0 - t * t)

    t = np.tanh(SCALE_SLOPE * z2[:, IDX_SCALE])
    out[:, IDX_SCALE] = np.exp(SCALE_LOG_CENTER + SCALE_LOG_AMPLITUDE * t)
    dout[:, IDX_SCALE] = (out[:, IDX_SCALE] * SCALE_LOG_AMPLITUDE
                          * SCALE_SLOPE * (1.0 - t * t))
    return out, dout


def _forward_batch(model: Regressor, x: np.ndarray):
    """x (B, INPUT_DIM) -> (param vectors (B, 26), cache for backward)."""
    z1 = x @ model.w1.T + model.b1
    h = np.tanh(z1)
    z2 = h @ model.w2.T + model.b2
    vec, dvec = _range_map(z2)
    return vec, {"x": x, "h": h, "dvec": dvec}


def grids_to_input(grids: np.ndarray) -> np.ndarray:
    """Stack frame grids (B, 2, G, G) into network inputs (B, INPUT_DIM)."""
    return np.ascontiguousarray(grids, dtype=np.float64).reshape(len(grids), -1)


def predict_batch(model: Regressor, grids: np.ndarray) -> np.ndarray:
    vec, _ = _forward_batch(model, grids_to_input(grids))
    return vec


def predict(model: Regressor, frame) -> PoseParams:
    """Deterministic forward pass for one frame."""
    vec = predict_batch(model, frame.grid[None])
    return PoseParams.from_vector(vec[0])


# ---------------------------------------------------------------------------
# Losses


def _split(vec: np.ndarray):
    return (vec[..., SL_THETA], vec[..., SL_BETA], vec[..., IDX_ROT],
            vec[..., SL_TRANS], vec[..., IDX_SCALE])


def loss_l1(pred_params: PoseParams, pred_kps, target_params: PoseParams,
            target_kps) -> float:
    """Absolute-error loss: |parameter residual| summed over all 26
    entries plus |keypoint residual| summed over annotated joints."""
    pv = pred_params.as_vector()
    tv = target_params.as_vector()
    total = float(np.abs(pv - tv).sum())
    ann = target_kps.annotated()
    if ann.any():
        total += float(np.abs(pred_kps.xy[ann] - target_kps.xy[ann]).sum())
    return total


def loss_l2(pred_params: PoseParams, pred_kps, pred_surface,
            target_params: PoseParams, target_kps, target_surface,
            lam: float = 0.1) -> float:
    """Squared-error loss with element-count normalization per term and
    a mean-absolute surface-point term."""
    pv = pred_params.as_vector()
    tv = target_params.as_vector()
    d = pv - tv
    total = float((d[_THETA_ROT_IDX] ** 2).mean())
    total += lam * float((d[SL_BETA] ** 2).mean())
    ann = target_kps.annotated()
    if ann.any():
        kd = pred_kps.xy[ann] - target_kps.xy[ann]
        total += float((kd ** 2).sum() / kd.size)
    sd = np.asarray(pred_surface) - np.asarray(target_surface)
    total += float(np.abs(sd).mean())
    return total


def _batch_loss_and_param_grad(vec: np.ndarray, targets, config: LossConfig,
                               want_grad: bool = True):
    """Loss per sample plus gradient with respect to the 26 predicted
    parameters (including the flow through forward kinematics)."""
    B = len(vec)
    theta, beta, rot, trans, scale = _split(vec)
    if want_grad:
        nodes, jac = node_jacobian_batch(theta, beta, rot, trans, scale)
    else:
        nodes = nodes_batch(theta, beta, rot, trans, scale)
        jac = None
    kps = nodes[:, :N_JOINTS]

    tvec = targets["vec"]
    kxy = targets["kxy"]
    kann = targets["kann"]
    diff = vec - tvec
    kdiff = (kps - kxy) * kann[:, :, None]

    losses = np.zeros(B)
    dvec = np.zeros_like(vec) if want_grad else None
    node_cot = np.zeros_like(nodes) if want_grad else None

    if config.variant == "l1":
        losses += np.abs(diff).sum(axis=1)
        losses += np.abs(kdiff).sum(axis=(1, 2))
        if want_grad:
            dvec += np.sign(diff)
            node_cot[:, :N_JOINTS] += np.sign(kdiff) * kann[:, :, None]
    else:
        losses += (diff[:, _THETA_ROT_IDX] ** 2).mean(axis=1)
        losses += config.lam * (diff[:, SL_BETA] ** 2).mean(axis=1)
        n_elem = 2.0 * kann.sum(axis=1)
        safe = np.maximum(n_elem, 1.0)
        losses += (kdiff ** 2).sum(axis=(1, 2)) / safe
        surf = surface_points_from_nodes(nodes)
        sdiff = surf - targets["surf"]
        losses += np.abs(sdiff).mean(axis=(1, 2))
        if want_grad:
            dvec[:, _THETA_ROT_IDX] += 2.0 * diff[:, _THETA_ROT_IDX] / len(_THETA_ROT_IDX)
            dvec[:, SL_BETA] += 2.0 * config.lam * diff[:, SL_BETA] / N_BETAS
            node_cot[:, :N_JOINTS] += 2.0 * kdiff / safe[:, None, None]
            scot = np.sign(sdiff) / (2.0 * N_SURFACE_POINTS)
            node_cot += fold_surface_cotangent(scot)

    if want_grad:
        dvec += np.einsum("bnc,bncp->bp", node_cot, jac)
    return losses, dvec


@dataclass
class Gradients:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])


def _targets_from_frames(frames, variant: str):
    tvec = np.stack([f.truth.as_vector() for f in frames])
    kxy = np.stack([np.nan_to_num(f.keypoints.xy) for f in frames])
    kann = np.stack([f.keypoints.annotated() for f in frames]).astype(np.float64)
    targets = {"vec": tvec, "kxy": kxy, "kann": kann}
    if variant == "l2":
        theta = tvec[:, SL_THETA]
        beta = tvec[:, SL_BETA]
        rot = tvec[:, IDX_ROT]
        trans = tvec[:, SL_TRANS]
        scale = tvec[:, IDX_SCALE]
        targets["surf"] = surface_points_from_nodes(
            nodes_batch(theta, beta, rot, trans, scale))
    return targets


def batch_loss_and_grads(model: Regressor, x: np.ndarray, targets,
                         config: LossConfig):
    """Mean loss over the batch and mean gradients for all weights."""
    vec, cache = _forward_batch(model, x)
    losses, dvec = _batch_loss_and_param_grad(vec, targets, config)
    B = len(x)
    dz2 = dvec * cache["dvec"] / B
    h = cache["h"]
    gw2 = dz2.T @ h
    gb2 = dz2.sum(axis=0)
    dh = dz2 @ model.w2
    dz1 = dh * (1.0 - h * h)
    gw1 = dz1.T @ cache["x"]
    gb1 = dz1.sum(axis=0)
    return float(losses.mean()), Gradients(gw1, gb1, gw2, gb2)


def batch_loss(model: Regressor, x: np.ndarray, targets, config: LossConfig) -> float:
    vec, _ = _forward_batch(model, x)
    losses, _ = _batch_loss_and_param_grad(vec, targets, config, want_grad=False)
    return float(losses.mean())


def backward(model: Regressor, frame, target_frame=None,
             config: LossConfig | None = None) -> Gradients:
    """Exact analytic gradient of the selected loss for one frame.

    ``target_frame`` defaults to the frame itself (its stored truth and
    keypoints are the supervision).
    """
    config = config or LossConfig()
    tf = target_frame if target_frame is not None else frame
    targets = _targets_from_frames([tf], config.variant)
    _, grads = batch_loss_and_grads(model, grids_to_input(frame.grid[None]),
                                    targets, config)
    return grads


def frame_loss(model: Regressor, frame, config: LossConfig | None = None) -> float:
    config = config or LossConfig()
    targets = _targets_from_frames([frame], config.variant)
    return batch_loss(model, grids_to_input(frame.grid[None]), targets, config)


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_iters: int = 20000
    eval_interval: int = 200
    patience: int = 5
    min_rel_improvement: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0


class _Adam:
    def __init__(self, model: Regressor, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        arrays = (model.w1, model.b1, model.w2, model.b2)
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.scratch = [np.empty_like(a) for a in arrays]

    def step(self, model: Regressor, grads: Gradients) -> None:
        self.t += 1
        c = self.cfg
        bc1 = 1.0 - c.adam_beta1 ** self.t
        sqrt_bc2 = np.sqrt(1.0 - c.adam_beta2 ** self.t)
        params = (model.w1, model.b1, model.w2, model.b2)
        gs = (grads.w1, grads.b1, grads.w2, grads.b2)
        for p, g, m, v, s in zip(params, gs, self.m, self.v, self.scratch):
            m *= c.adam_beta1
            np.multiply(g, 1.0 - c.adam_beta1, out=s)
            m += s
            v *= c.adam_beta2
            np.multiply(g, g, out=s)
            s *= 1.0 - c.adam_beta2
            v += s
            np.sqrt(v, out=s)
            s /= sqrt_bc2
            s += c.adam_eps
            np.divide(m, s, out=s)
            s *= c.learning_rate / bc1
            p -= s


def _pool_frames(pool):
    return pool.frames if hasattr(pool, "frames") else list(pool)


def _eval_loss(model, frames, targets, config, chunk=256):
    total, n = 0.0, 0
    for i in range(0, len(frames), chunk):
        part = frames[i:i + chunk]
        x = grids_to_input(np.stack([f.grid for f in part]))
        sub = {k: v[i:i + len(part)] for k, v in targets.items()}
        total += batch_loss(model, x, sub, config.loss) * len(part)
        n += len(part)
    return total / n


def train(model: Regressor, pool, val, config: TrainConfig):
    """Mini-batch Adam with plateau early stopping.

    Stops when validation loss fails to improve by 0.1% for `patience`
    consecutive evaluations, or at the iteration cap. Returns the
    weights with the best validation loss and the training log rows
    (iteration, train loss, val loss).
    """
    frames = _pool_frames(pool)
    val_frames = _pool_frames(val)
    if not frames or not val_frames:
        raise ConfigError("training and validation pools must be non-empty")
    targets = _targets_from_frames(frames, config.loss.variant)
    val_targets = _targets_from_frames(val_frames, config.loss.variant)

    model = model.copy()
    opt = _Adam(model, config)
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0xADA]))
    n = len(frames)

    log = []
    best_val = np.inf
    best_weights = model.copy()
    stale = 0
    train_acc, train_cnt = 0.0, 0

    for it in range(1, config.max_iters + 1):
        idx = rng.integers(0, n, config.batch_size)
        x = grids_to_input(np.stack([frames[i].grid for i in idx]))
        sub = {k: v[idx] for k, v in targets.items()}
        loss, grads = batch_loss_and_grads(model, x, sub, config.loss)
        opt.step(model, grads)
        train_acc += loss
        train_cnt += 1

        if it % config.eval_interval == 0 or it == config.max_iters:
            val_loss = _eval_loss(model, val_frames, val_targets, config)
            log.append((it, train_acc / max(train_cnt, 1), val_loss))
            train_acc, train_cnt = 0.0, 0
            if val_loss < best_val * (1.0 - config.min_rel_improvement):
                best_val = val_loss
                best_weights = model.copy()
                stale = 0
            else:
                stale += 1
                if val_loss < best_val:
                    best_val = val_loss
                    best_weights = model.copy()
                if stale >= config.patience:
                    break

    return best_weights, log


# ---------------------------------------------------------------------------
# Persistence


def save_weights(model: Regressor, path, loss_variant: str = "l1") -> None:
    blob = model.flat().astype("<f8").tobytes()
    header = "\n".join([
        WEIGHTS_MAGIC,
        f"arch={ARCH_STRING}",
        f"hidden={HIDDEN}",
        f"grid={GRID_SIZE}",
        f"loss={loss_variant}",
        f"seed={model.seed}",
        f"bytes={len(blob)}",
    ]) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(blob)


def load_weights(path) -> tuple[Regressor, dict]:
    if not os.path.exists(path):
        raise IoError(f"weights file not found: {path}")
    with open(path, "rb") as fh:
        data = fh.read()
    head, sep, rest = data.partition(b"bytes=")
    if not sep:
        raise IoError(f"malformed weights file: {path}")
    lines = head.decode("ascii").splitlines()
    if not lines or lines[0] != WEIGHTS_MAGIC:
        raise IoError(f"bad magic in weights file: {path}")
    meta = dict(line.split("=", 1) for line in lines[1:] if "=" in line)
    nl = rest.index(b"\n")
    nbytes = int(rest[:nl])
    blob = rest[nl + 1: nl + 1 + nbytes]
    if len(blob) != nbytes:
        raise IoError(f"truncated weights file: {path}")
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    sizes = [HIDDEN * INPUT_DIM, HIDDEN, N_PARAMS * HIDDEN, N_PARAMS]
    if flat.size != sum(sizes):
        raise IoError(f"weights size mismatch in {path}")
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    model = Regressor(
        w1=parts[0].reshape(HIDDEN, INPUT_DIM),
        b1=parts[1],
        w2=parts[2].reshape(N_PARAMS, HIDDEN),
        b2=parts[3],
        seed=int(meta.get("seed", 0)),
    )
    return model, meta


def save_training_log(log, path) -> None:
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write("# truncpose-v1 training-log\n")
        fh.write("iteration,train_loss,val_loss\n")
        for it, tr, vl in log:
            fh.write(f"{it},{tr!r},{vl!r}\n")
